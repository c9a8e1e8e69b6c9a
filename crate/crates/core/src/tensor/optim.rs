//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::nn::ParamSet;
use crate::error::{Error, Result};

/// Learning-rate schedule over a run of known length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to `floor * lr` at the last step.
    Cosine { floor: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub decay: LrDecay,
}

impl AdamWConfig {
    /// Copy with the learning rate for `step` (0-based) of `total`.
    pub fn at_step(&self, step: usize, total: usize) -> AdamWConfig {
        let lr = match self.decay {
            LrDecay::Constant => self.lr,
            LrDecay::Cosine { floor } => {
                let frac = if total > 1 { step as f64 / (total - 1) as f64 } else { 0.0 };
                let c = 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos());
                self.lr * (floor + (1.0 - floor) * c)
            }
        };
        AdamWConfig { lr, ..*self }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
            decay: LrDecay::Constant,
        }
    }
}

/// First/second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamWState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |_| Vec::new();
        AdamWState {
            step: 0,
            m: (0..params.len()).map(zeros).collect(),
            v: (0..params.len()).map(zeros).collect(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }
}

/// Applies one AdamW update using each parameter's `grad` field.
///
/// Parameters without a gradient are treated as having a zero gradient.
/// All gradients are validated before any parameter is touched.
pub fn adamw_step(params: &mut ParamSet, state: &mut AdamWState, cfg: &AdamWConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "optimizer state tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (name, t) in params.iter() {
        if let Some(g) = &t.grad {
            if g.len() != t.numel() {
                return Err(Error::shape("adamw_step", t.shape(), &[g.len()]));
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of `{name}`"),
                    detail: format!("element {pos} = {}", g[pos]),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let n = p.numel();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        if m.len() != n {
            m.resize(n, 0.0);
            v.resize(n, 0.0);
        }
        let grad = p.grad.take();
        let data = p.data_mut();
        for j in 0..n {
            let gj = grad.as_ref().map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * data[j]);
        }
        p.grad = grad;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64, grad: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut t = Tensor::scalar(value);
        t.grad = Some(vec![grad]);
        ps.add("p", t);
        ps
    }

    #[test]
    fn cosine_decay_endpoints() {
        let cfg = AdamWConfig {
            lr: 1.0,
            decay: LrDecay::Cosine { floor: 0.1 },
            ..Default::default()
        };
        assert_eq!(cfg.at_step(0, 11).lr, 1.0);
        assert!((cfg.at_step(5, 11).lr - 0.55).abs() < 1e-12);
        assert!((cfg.at_step(10, 11).lr - 0.1).abs() < 1e-12);
        assert_eq!(AdamWConfig::default().at_step(7, 11).lr, 1e-4);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = single(0.7, 0.0);
        let mut st = AdamWState::new(&ps);
        let cfg = AdamWConfig::default();
        adamw_step(&mut ps, &mut st, &cfg).unwrap();
        assert_eq!(ps.iter().next().unwrap().1.item(), 0.7);
        assert_eq!(st.first_moment(0), &[0.0]);
        assert_eq!(st.second_moment(0), &[0.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; bias-corrected both are 1, so the step is
        // lr * 1 / (1 + eps).
        let mut ps = single(0.0, 1.0);
        let mut st = AdamWState::new(&ps);
        let cfg = AdamWConfig {
            lr: 1e-3,
            ..Default::default()
        };
        adamw_step(&mut ps, &mut st, &cfg).unwrap();
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        let got = ps.iter().next().unwrap().1.item();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut ps = single(2.0, 0.0);
        let mut st = AdamWState::new(&ps);
        let cfg = AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.1,
            ..Default::default()
        };
        adamw_step(&mut ps, &mut st, &cfg).unwrap();
        let got = ps.iter().next().unwrap().1.item();
        assert!((got - (2.0 - 1e-2 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = single(1.0, f64::NAN);
        let mut st = AdamWState::new(&ps);
        let err = adamw_step(&mut ps, &mut st, &AdamWConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
        assert_eq!(st.step, 0);
        assert_eq!(ps.iter().next().unwrap().1.item(), 1.0);
    }
}
