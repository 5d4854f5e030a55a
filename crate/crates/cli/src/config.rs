//! Pipeline configuration: a TOML file with dotted sections, overridden by
//! `--key value` pairs on the command line.

use std::path::{Path, PathBuf};

use pct_core::neural::GanTrainConfig;
use pct_core::projection::BeamModel;
use pct_core::sampling::{DEFAULT_MAX_POINTS, DEFAULT_VOXEL_SIZE};
use pct_core::simulator::{DegradeSpec, IntensityModel};
use pct_core::PctError;

use crate::CliError;

/// File name of the resolved configuration written next to every output.
pub const CONFIG_COPY_NAME: &str = "pct.toml";

const SECTION_KEYS: [&str; 24] = [
    "beam.rows",
    "beam.cols",
    "beam.fov_up_deg",
    "beam.fov_down_deg",
    "beam.max_range",
    "sampling.voxel_size",
    "sampling.max_points",
    "degrade.keep_row_stride",
    "degrade.pixel_dropout_p",
    "degrade.range_noise_sigma",
    "simulate.attenuation_length",
    "fusion.label_neighbors",
    "gradcheck.instances",
    "paths.input",
    "paths.target",
    "paths.output",
    "paths.scene",
    "paths.trajectory",
    "paths.generator_a",
    "paths.generator_s",
    "paths.prediction",
    "paths.ground_truth",
    "paths.class_map",
    "paths.labels",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Paths {
    /// Scan file or directory of scans.
    pub input: Option<PathBuf>,
    /// Target-domain scans for training.
    pub target: Option<PathBuf>,
    pub output: PathBuf,
    /// Scene description; the bundled scene when unset.
    pub scene: Option<PathBuf>,
    /// Sensor trajectory; the bundled trajectory when unset.
    pub trajectory: Option<PathBuf>,
    pub generator_a: Option<PathBuf>,
    pub generator_s: Option<PathBuf>,
    pub prediction: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub class_map: Option<PathBuf>,
    /// Label file for a single-file input; defaults to the `.label` sibling.
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub beam: BeamModel,
    pub train: GanTrainConfig,
    pub voxel_size: f64,
    pub max_points: usize,
    /// Degradation settings; the seed is taken from `train.seed`.
    pub degrade: DegradeSpec,
    pub intensity: IntensityModel,
    pub label_neighbors: usize,
    pub gradcheck_instances: usize,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            beam: BeamModel::default(),
            train: GanTrainConfig::default(),
            voxel_size: DEFAULT_VOXEL_SIZE,
            max_points: DEFAULT_MAX_POINTS,
            degrade: DegradeSpec::default(),
            intensity: IntensityModel::default(),
            label_neighbors: 1,
            gradcheck_instances: 50,
            paths: Paths {
                output: PathBuf::from("out"),
                ..Default::default()
            },
        }
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| config_err(key, format!("cannot parse `{value}`")))
}

fn path(key: &str, value: &str) -> Result<Option<PathBuf>, CliError> {
    if value.is_empty() {
        return Err(config_err(key, "path must not be empty"));
    }
    Ok(Some(PathBuf::from(value)))
}

/// Degrees rounded past the radian round-trip error, so `3` prints as `3.0`.
fn degrees(radians: f64) -> f64 {
    (radians.to_degrees() * 1e9).round() / 1e9
}

fn show(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

impl PipelineConfig {
    /// Every accepted key, top-level training keys first.
    pub fn keys() -> impl Iterator<Item = &'static str> {
        GanTrainConfig::KEYS.into_iter().chain(SECTION_KEYS)
    }

    /// Sets one key from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if GanTrainConfig::KEYS.contains(&key) {
            return self.train.set(key, value.trim()).map_err(|e| match e {
                PctError::Parameter { name, reason } => config_err(&name, reason),
                other => config_err(key, other.to_string()),
            });
        }
        let p = &mut self.paths;
        match key {
            "beam.rows" => self.beam.rows = parse(key, value)?,
            "beam.cols" => self.beam.cols = parse(key, value)?,
            "beam.fov_up_deg" => self.beam.fov_up = parse::<f64>(key, value)?.to_radians(),
            "beam.fov_down_deg" => self.beam.fov_down = parse::<f64>(key, value)?.to_radians(),
            "beam.max_range" => self.beam.max_range = parse(key, value)?,
            "sampling.voxel_size" => self.voxel_size = parse(key, value)?,
            "sampling.max_points" => self.max_points = parse(key, value)?,
            "degrade.keep_row_stride" => self.degrade.keep_row_stride = parse(key, value)?,
            "degrade.pixel_dropout_p" => self.degrade.pixel_dropout_p = parse(key, value)?,
            "degrade.range_noise_sigma" => self.degrade.range_noise_sigma = parse(key, value)?,
            "simulate.attenuation_length" => self.intensity.attenuation_length = parse(key, value)?,
            "fusion.label_neighbors" => self.label_neighbors = parse(key, value)?,
            "gradcheck.instances" => self.gradcheck_instances = parse(key, value)?,
            "paths.input" => p.input = path(key, value)?,
            "paths.target" => p.target = path(key, value)?,
            "paths.output" => p.output = path(key, value)?.unwrap_or_default(),
            "paths.scene" => p.scene = path(key, value)?,
            "paths.trajectory" => p.trajectory = path(key, value)?,
            "paths.generator_a" => p.generator_a = path(key, value)?,
            "paths.generator_s" => p.generator_s = path(key, value)?,
            "paths.prediction" => p.prediction = path(key, value)?,
            "paths.ground_truth" => p.ground_truth = path(key, value)?,
            "paths.class_map" => p.class_map = path(key, value)?,
            "paths.labels" => p.labels = path(key, value)?,
            _ => return Err(config_err(key, "unknown key")),
        }
        Ok(())
    }

    /// Textual value of a key, `None` for unset paths.
    pub fn get(&self, key: &str) -> Option<String> {
        if let Some((_, v)) = self.train.to_pairs().into_iter().find(|(k, _)| *k == key) {
            return Some(v);
        }
        let p = &self.paths;
        Some(match key {
            "beam.rows" => self.beam.rows.to_string(),
            "beam.cols" => self.beam.cols.to_string(),
            "beam.fov_up_deg" => format!("{:?}", degrees(self.beam.fov_up)),
            "beam.fov_down_deg" => format!("{:?}", degrees(self.beam.fov_down)),
            "beam.max_range" => format!("{:?}", self.beam.max_range),
            "sampling.voxel_size" => format!("{:?}", self.voxel_size),
            "sampling.max_points" => self.max_points.to_string(),
            "degrade.keep_row_stride" => self.degrade.keep_row_stride.to_string(),
            "degrade.pixel_dropout_p" => format!("{:?}", self.degrade.pixel_dropout_p),
            "degrade.range_noise_sigma" => format!("{:?}", self.degrade.range_noise_sigma),
            "simulate.attenuation_length" => format!("{:?}", self.intensity.attenuation_length),
            "fusion.label_neighbors" => self.label_neighbors.to_string(),
            "gradcheck.instances" => self.gradcheck_instances.to_string(),
            "paths.output" => p.output.display().to_string(),
            "paths.input" => return show(&p.input),
            "paths.target" => return show(&p.target),
            "paths.scene" => return show(&p.scene),
            "paths.trajectory" => return show(&p.trajectory),
            "paths.generator_a" => return show(&p.generator_a),
            "paths.generator_s" => return show(&p.generator_s),
            "paths.prediction" => return show(&p.prediction),
            "paths.ground_truth" => return show(&p.ground_truth),
            "paths.class_map" => return show(&p.class_map),
            "paths.labels" => return show(&p.labels),
            _ => return None,
        })
    }

    /// Checks every field against the invariants of the module that owns it.
    pub fn validate(&self) -> Result<(), CliError> {
        let named = |e: PctError| match e {
            PctError::Parameter { name, reason } => config_err(&name, reason),
            other => config_err("config", other.to_string()),
        };
        self.beam.validate().map_err(named)?;
        self.train.validate().map_err(named)?;
        let degrade = DegradeSpec {
            max_range: self.beam.max_range,
            ..self.degrade
        };
        degrade.validate().map_err(|e| match e {
            PctError::Parameter { name, reason } => config_err(&format!("degrade.{name}"), reason),
            other => named(other),
        })?;
        IntensityModel::new(self.intensity.attenuation_length)
            .map_err(|_| config_err("simulate.attenuation_length", "must be positive"))?;
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(config_err("sampling.voxel_size", "must be positive"));
        }
        for (key, v) in [
            ("sampling.max_points", self.max_points),
            ("fusion.label_neighbors", self.label_neighbors),
            ("gradcheck.instances", self.gradcheck_instances),
        ] {
            if v == 0 {
                return Err(config_err(key, "must be at least 1"));
            }
        }
        if self.paths.output.as_os_str().is_empty() {
            return Err(config_err("paths.output", "path must not be empty"));
        }
        Ok(())
    }

    /// Serializes the full configuration as TOML that [`parse_config`] reads
    /// back to an equal value.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in Self::keys() {
            let Some(value) = self.get(key) else { continue };
            let (head, leaf) = key.split_once('.').unwrap_or(("", key));
            if head != section {
                out.push_str(&format!("\n[{head}]\n"));
                section = head;
            }
            let numeric = !key.starts_with("paths.") && key != "emd_mode";
            let value = if numeric {
                value
            } else {
                toml::Value::String(value).to_string()
            };
            out.push_str(&format!("{leaf} = {value}\n"));
        }
        out
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses configuration text on top of the defaults and validates the result.
pub fn parse_config(text: &str) -> Result<PipelineConfig, CliError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::ConfigParse {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().trim().to_string(),
    })?;
    let mut config = PipelineConfig::default();
    for (head, value) in &table {
        match value {
            toml::Value::Table(section) => {
                if head == "beam" {
                    // A partial beam is ambiguous; the grid must be spelled out.
                    for required in ["rows", "cols"] {
                        if !section.contains_key(required) {
                            return Err(config_err(&format!("beam.{required}"), "missing from the beam section"));
                        }
                    }
                }
                for (leaf, v) in section {
                    set_value(&mut config, &format!("{head}.{leaf}"), v)?;
                }
            }
            v => set_value(&mut config, head, v)?,
        }
    }
    config.validate()?;
    Ok(config)
}

fn set_value(config: &mut PipelineConfig, key: &str, value: &toml::Value) -> Result<(), CliError> {
    let text = match value {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => format!("{f:?}"),
        toml::Value::Boolean(_) | toml::Value::Datetime(_) | toml::Value::Array(_) | toml::Value::Table(_) => {
            if PipelineConfig::keys().any(|k| k == key) {
                return Err(config_err(key, "expected a number or a string"));
            }
            return Err(config_err(key, "unknown key"));
        }
    };
    config.set(key, &text)
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<PipelineConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}
