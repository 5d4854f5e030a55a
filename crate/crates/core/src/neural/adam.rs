use std::collections::BTreeMap;

use super::layers::NetParams;
use super::tensor::Tensor;
use super::GanTrainConfig;
use crate::error::{PctError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub first_moment: BTreeMap<String, Vec<f64>>,
    pub second_moment: BTreeMap<String, Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Element-wise mean of per-sample gradients, summed in list order.
pub(crate) fn average_gradients(list: Vec<BTreeMap<String, Tensor>>) -> BTreeMap<String, Tensor> {
    let n = list.len().max(1) as f64;
    let mut iter = list.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for grads in iter {
        for (name, t) in grads {
            if let Some(a) = acc.get_mut(&name) {
                a.values_mut().iter_mut().zip(t.values()).for_each(|(x, y)| *x += y);
            }
        }
    }
    for t in acc.values_mut() {
        t.values_mut().iter_mut().for_each(|v| *v /= n);
    }
    acc
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut NetParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    config: &GanTrainConfig,
) -> Result<()> {
    for (name, p) in &params.params {
        let g = grads.get(name).ok_or_else(|| PctError::shape("adam", format!("no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(PctError::shape(
                "adam",
                format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
            ));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.params.iter_mut() {
        let g = grads[name].values();
        let m = state.first_moment.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.second_moment.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (k, w) in p.values_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            *w -= config.learning_rate * mh / (vh.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}
