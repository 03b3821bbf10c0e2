use crate::error::{bail, Error, Result};
use crate::model::TransformerModel;

use super::OptimizerConfig;

/// Adam moments for every parameter tensor, in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn zeros(model: &TransformerModel<f32>) -> Self {
        let shape = || {
            model
                .parameters()
                .iter()
                .map(|p| vec![0.0; p.value.numel()])
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            m: shape(),
            v: shape(),
        }
    }

    pub fn check_matches(&self, model: &TransformerModel<f32>) -> Result<()> {
        let params = model.parameters();
        if self.m.len() != params.len() || self.v.len() != params.len() {
            bail!(
                Integrity,
                "optimizer state holds {} tensors for {} parameters",
                self.m.len(),
                params.len()
            );
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if m.len() != p.value.numel() || v.len() != p.value.numel() {
                bail!(Integrity, "optimizer state shape mismatch for {}", p.name);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients, accumulated in f64.
pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// One AdamW step: clip the global gradient norm, update the moments, shrink
/// decaying parameters by `1 - lr * wd`, then apply the bias-corrected Adam
/// step. Returns the pre-clip gradient norm.
pub fn adamw_step(
    model: &mut TransformerModel<f32>,
    state: &mut AdamState,
    grads: &[Vec<f32>],
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::numerical(format!("gradient norm is {norm}")));
    }
    let clip = if norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let shrink = 1.0 - lr * cfg.weight_decay;
    let decays: Vec<bool> = (0..model.parameters().len())
        .map(|i| model.decays(i))
        .collect();
    for (i, p) in model.parameters_mut().iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64 * clip;
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let mut x = *w as f64;
            if decays[i] {
                x *= shrink;
            }
            x -= lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            *w = x as f32;
        }
    }
    Ok(norm)
}
