use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::model::{LoraAdapterSet, ModelParams, Selection};
use crate::tensor::Tensor;

/// Gradients keyed by tensor name. Row-restricted selections carry only the
/// selected rows, in selection order.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }
}

/// First and second moments per trainable tensor, shaped like the selected
/// slice of that tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

pub(crate) fn tensor_mut<'a>(
    params: &'a mut ModelParams,
    adapters: Option<&'a mut LoraAdapterSet>,
    name: &str,
) -> Result<&'a mut Tensor> {
    if name.starts_with("lora.") {
        let set = adapters.ok_or(TrainError::Model(crate::model::ModelError::MissingAdapters))?;
        return Ok(set.get_mut(name)?);
    }
    Ok(params.get_mut(name)?)
}

impl OptimizerState {
    /// Fresh state for a selection; every stage starts from here.
    pub fn new(selection: &Selection, params: &ModelParams, adapters: Option<&LoraAdapterSet>) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for sel in &selection.tensors {
            let shape = match params.get(&sel.name) {
                Ok(t) => t.shape().to_vec(),
                Err(_) => adapters
                    .and_then(|a| a.named().into_iter().find(|(n, _)| *n == sel.name))
                    .map(|(_, t)| t.shape().to_vec())
                    .ok_or_else(|| TrainError::Config(format!("unknown tensor {}", sel.name)))?,
            };
            let shape = match &sel.rows {
                Some(r) => vec![r.len(), shape[1]],
                None => shape,
            };
            moments.insert(sel.name.clone(), (Tensor::zeros(&shape), Tensor::zeros(&shape)));
        }
        Ok(Self { step: 0, moments })
    }

    /// One bias-corrected adaptive-moment update of the selected tensors.
    pub fn apply(
        &mut self,
        cfg: &AdamConfig,
        selection: &Selection,
        grads: &GradMap,
        params: &mut ModelParams,
        mut adapters: Option<&mut LoraAdapterSet>,
    ) -> Result<()> {
        let clip = match cfg.grad_clip {
            Some(max) => {
                let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for sel in &selection.tensors {
            let g = grads
                .get(&sel.name)
                .ok_or_else(|| TrainError::Config(format!("no gradient for {}", sel.name)))?;
            let (m, v) = self
                .moments
                .get_mut(&sel.name)
                .ok_or_else(|| TrainError::Config(format!("no optimizer slot for {}", sel.name)))?;
            if m.shape() != g.shape() {
                return Err(TrainError::Config(format!("gradient shape for {} changed", sel.name)));
            }
            let target = tensor_mut(params, adapters.as_deref_mut(), &sel.name)?;
            let cols = target.cols();
            let rows: Vec<usize> = match &sel.rows {
                Some(r) => r.clone(),
                None => (0..target.len() / cols).collect(),
            };
            for (ri, &row) in rows.iter().enumerate() {
                let dst = target.row_mut(row);
                for j in 0..cols {
                    let k = ri * cols + j;
                    let gk = g.data()[k] * clip;
                    let mk = cfg.beta1 * m.data()[k] + (1.0 - cfg.beta1) * gk;
                    let vk = cfg.beta2 * v.data()[k] + (1.0 - cfg.beta2) * gk * gk;
                    m.data_mut()[k] = mk;
                    v.data_mut()[k] = vk;
                    let update = (mk / bc1) / ((vk / bc2).sqrt() + cfg.eps);
                    dst[j] -= cfg.lr * (update + cfg.weight_decay * dst[j]);
                }
            }
            if !target.is_finite() {
                return Err(TrainError::Divergence {
                    step: self.step as usize,
                    loss: f64::NAN,
                });
            }
        }
        Ok(())
    }
}
