//! AdamW with decoupled weight decay and global gradient clipping.

use crate::error::{Error, Result};
use crate::model::{ParamGroup, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWSettings {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates for every parameter of one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub settings: AdamWSettings,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ParamSet, settings: AdamWSettings) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect::<Vec<_>>();
        Self {
            settings,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update from the gradients stored in `params`.
///
/// Weight decay touches only [`ParamGroup::Weight`]; frozen parameters are
/// skipped. A NaN gradient aborts before any parameter changes.
pub fn adamw_step(params: &mut ParamSet, opt: &mut OptimState) -> Result<()> {
    for p in params.iter() {
        if let Some(i) = p.tensor.grad().iter().position(|g| g.is_nan()) {
            return Err(Error::Numeric {
                op: "adamw",
                index: i,
                detail: format!("NaN gradient in parameter `{}`", p.name),
            });
        }
    }
    let s = opt.settings;
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - s.beta1.powi(t);
    let bc2 = 1.0 - s.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut opt.m).zip(&mut opt.v) {
        if !p.trainable {
            continue;
        }
        let decay = if p.group == ParamGroup::Weight {
            1.0 - s.lr * s.weight_decay
        } else {
            1.0
        };
        let (data, grad) = (p.tensor.data().to_vec(), p.tensor.grad().to_vec());
        let out = p.tensor.data_mut();
        for i in 0..out.len() {
            let g = grad[i];
            m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g;
            v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            out[i] = data[i] * decay - s.lr * mhat / (vhat.sqrt() + s.eps);
        }
    }
    Ok(())
}

/// Global L2 norm over all gradients.
pub fn grad_norm(params: &ParamSet) -> f64 {
    params
        .iter()
        .flat_map(|p| p.tensor.grad().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the factor applied.
pub fn clip_gradients(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if !(norm > max_norm) {
        return 1.0;
    }
    let factor = max_norm / norm;
    for p in params.iter_mut() {
        p.tensor.grad_mut().iter_mut().for_each(|g| *g *= factor);
    }
    factor
}
