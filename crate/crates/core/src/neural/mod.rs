//! Dense reverse-mode differentiation, the four translation networks, Adam,
//! and the adversarial training loops for the appearance (ATM) and sparsity
//! (STM) modules.

mod adam;
mod atm;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod layers;
pub mod nets;
mod stm;
mod tensor;

use std::fmt::{self, Write as _};

pub use adam::{adam_step, AdamState};
pub use atm::{atm_discriminate, atm_prepare, atm_train, atm_train_from, atm_translate};
pub use graph::{logistic, Graph, NodeId};
pub use layers::{forward_backward, validate_layers, Bound, LayerSpec, Layout, NetParams, NetRole};
pub use stm::{stm_occupancy_probability, stm_train, stm_train_from, stm_translate, STM_WIDTH};
pub use tensor::Tensor;

use crate::error::{PctError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmdMode {
    Exact,
    Entropic,
}

impl fmt::Display for EmdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmdMode::Exact => "exact",
            EmdMode::Entropic => "entropic",
        })
    }
}

impl std::str::FromStr for EmdMode {
    type Err = PctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(EmdMode::Exact),
            "entropic" => Ok(EmdMode::Entropic),
            _ => Err(PctError::parameter("emd_mode", format!("expected exact or entropic, got `{s}`"))),
        }
    }
}

/// Hyper-parameters shared by both training loops.
#[derive(Debug, Clone, PartialEq)]
pub struct GanTrainConfig {
    pub lambda_adv_a: f64,
    pub lambda_emd_a: f64,
    pub lambda_adv_s: f64,
    pub lambda_geo_s: f64,
    /// Generator learning rate.
    pub learning_rate: f64,
    /// Discriminator learning rate as a multiple of `learning_rate`.
    pub lr_scale_d: f64,
    /// Fraction of `steps` after which both learning rates decay linearly
    /// toward zero; 1 keeps them constant.
    pub lr_decay_start: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub emd_mode: EmdMode,
    /// Up-sampling factor applied to every ATM sample.
    pub upsample_factor: usize,
    pub upsample_neighbors: usize,
    /// Points per up-sampled ATM training sample.
    pub train_points: usize,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iterations: usize,
    /// Temperature of the relaxed occupancy sample in the STM backward pass.
    pub tau: f64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            lambda_adv_a: 0.01,
            lambda_emd_a: 1.0,
            lambda_adv_s: 5.0,
            lambda_geo_s: 1.0,
            learning_rate: 2e-4,
            lr_scale_d: 1.0,
            lr_decay_start: 1.0,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 200,
            batch_size: 4,
            seed: 0,
            emd_mode: EmdMode::Exact,
            upsample_factor: crate::sampling::DEFAULT_UPSAMPLE_FACTOR,
            upsample_neighbors: crate::sampling::DEFAULT_UPSAMPLE_NEIGHBORS,
            train_points: 256,
            sinkhorn_epsilon: 0.01,
            sinkhorn_iterations: 200,
            tau: 1.0,
        }
    }
}

impl GanTrainConfig {
    /// Key names as used in configuration files and checkpoints.
    pub const KEYS: [&'static str; 20] = [
        "lambda_adv_A",
        "lambda_emd_A",
        "lambda_adv_S",
        "lambda_geo_S",
        "learning_rate",
        "lr_scale_D",
        "lr_decay_start",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "steps",
        "batch_size",
        "seed",
        "emd_mode",
        "upsample_factor",
        "upsample_neighbors",
        "train_points",
        "sinkhorn_epsilon",
        "sinkhorn_iterations",
        "tau",
    ];

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_adv_A", self.lambda_adv_a),
            ("lambda_emd_A", self.lambda_emd_a),
            ("lambda_adv_S", self.lambda_adv_s),
            ("lambda_geo_S", self.lambda_geo_s),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(PctError::parameter(name, "must be a non-negative number"));
            }
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("lr_scale_D", self.lr_scale_d),
            ("adam_eps", self.adam_eps),
            ("sinkhorn_epsilon", self.sinkhorn_epsilon),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(PctError::parameter(name, "must be positive"));
            }
        }
        if !(self.lr_decay_start > 0.0 && self.lr_decay_start <= 1.0) {
            return Err(PctError::parameter("lr_decay_start", "must lie in (0, 1]"));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(PctError::parameter(name, "must lie in [0, 1)"));
            }
        }
        let counts = [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("upsample_factor", self.upsample_factor),
            ("upsample_neighbors", self.upsample_neighbors),
            ("sinkhorn_iterations", self.sinkhorn_iterations),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(PctError::parameter(name, "must be at least 1"));
            }
        }
        if self.train_points < 2 * self.upsample_factor {
            return Err(PctError::parameter("train_points", "must allow at least two points before up-sampling"));
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| PctError::parameter(key, format!("cannot parse `{value}`")))
        }
        match key {
            "lambda_adv_A" => self.lambda_adv_a = num(key, value)?,
            "lambda_emd_A" => self.lambda_emd_a = num(key, value)?,
            "lambda_adv_S" => self.lambda_adv_s = num(key, value)?,
            "lambda_geo_S" => self.lambda_geo_s = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "lr_scale_D" => self.lr_scale_d = num(key, value)?,
            "lr_decay_start" => self.lr_decay_start = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "emd_mode" => self.emd_mode = value.parse()?,
            "upsample_factor" => self.upsample_factor = num(key, value)?,
            "upsample_neighbors" => self.upsample_neighbors = num(key, value)?,
            "train_points" => self.train_points = num(key, value)?,
            "sinkhorn_epsilon" => self.sinkhorn_epsilon = num(key, value)?,
            "sinkhorn_iterations" => self.sinkhorn_iterations = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            _ => return Err(PctError::parameter(key, "unknown training key")),
        }
        Ok(())
    }

    /// The same settings with the discriminator's learning rate.
    pub fn discriminator_config(&self) -> Self {
        Self {
            learning_rate: self.learning_rate * self.lr_scale_d,
            ..self.clone()
        }
    }

    /// The settings for optimizer step `step`, with the learning rate decayed.
    pub fn at_step(&self, step: usize) -> Self {
        let start = self.lr_decay_start * self.steps as f64;
        if (step as f64) < start {
            return self.clone();
        }
        let factor = self.steps.saturating_sub(step) as f64 / (self.steps as f64 - start);
        Self {
            learning_rate: self.learning_rate * factor,
            ..self.clone()
        }
    }

    /// `(key, value)` pairs in `KEYS` order; `set` parses them back exactly.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            format!("{:?}", self.lambda_adv_a),
            format!("{:?}", self.lambda_emd_a),
            format!("{:?}", self.lambda_adv_s),
            format!("{:?}", self.lambda_geo_s),
            format!("{:?}", self.learning_rate),
            format!("{:?}", self.lr_scale_d),
            format!("{:?}", self.lr_decay_start),
            format!("{:?}", self.adam_beta1),
            format!("{:?}", self.adam_beta2),
            format!("{:?}", self.adam_eps),
            self.steps.to_string(),
            self.batch_size.to_string(),
            self.seed.to_string(),
            self.emd_mode.to_string(),
            self.upsample_factor.to_string(),
            self.upsample_neighbors.to_string(),
            self.train_points.to_string(),
            format!("{:?}", self.sinkhorn_epsilon),
            self.sinkhorn_iterations.to_string(),
            format!("{:?}", self.tau),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossComponent {
    /// Discriminator objective.
    Discriminator,
    /// Unweighted generator adversarial term.
    GeneratorAdversarial,
    /// Unweighted EMD term (ATM).
    Emd,
    /// Unweighted sum of both geometry-consistency terms (STM).
    Consistency,
    /// Weighted generator objective.
    GeneratorTotal,
}

impl LossComponent {
    pub fn name(&self) -> &'static str {
        match self {
            LossComponent::Discriminator => "d_loss",
            LossComponent::GeneratorAdversarial => "g_adv",
            LossComponent::Emd => "g_emd",
            LossComponent::Consistency => "g_geo",
            LossComponent::GeneratorTotal => "g_total",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub component: LossComponent,
    pub value: f64,
}

/// Trained generator, discriminator, and per-step loss records.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub generator: NetParams,
    pub discriminator: NetParams,
    pub history: Vec<LossRecord>,
}

/// Values of one component in step order.
pub fn component_series(history: &[LossRecord], component: LossComponent) -> Vec<f64> {
    history.iter().filter(|r| r.component == component).map(|r| r.value).collect()
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,component,value\n");
    for r in history {
        let _ = writeln!(out, "{},{},{:?}", r.step, r.component.name(), r.value);
    }
    out
}
