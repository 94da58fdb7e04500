use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::float::{powi, sqrt, Float};
use crate::lm::ParamSet;

/// Adam with decoupled weight decay. Moments are laid out in the visiting
/// order of the parameter set they were first used with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: Float,
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
    pub weight_decay: Float,
    pub step: u64,
    m: Vec<Float>,
    v: Vec<Float>,
}

impl AdamW {
    pub fn new(learning_rate: Float, beta1: Float, beta2: Float, eps: Float, weight_decay: Float) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(
            cfg.learning_rate,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
            cfg.weight_decay,
        )
    }

    /// One update. Fails without touching anything if a gradient entry is
    /// not finite.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grad: &P) -> Result<(), TrainError> {
        let mut bad: Option<String> = None;
        grad.visit(&mut |name, t| {
            if bad.is_none() && t.iter().any(|x| !x.is_finite()) {
                bad = Some(name.into());
            }
        });
        if let Some(tensor) = bad {
            return Err(TrainError::NonFinite {
                tensor,
                step: self.step + 1,
            });
        }
        let g = grad.flatten();
        if self.m.is_empty() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        if self.m.len() != g.len() || params.num_params() != g.len() {
            return Err(TrainError::Config(
                "optimizer state does not match the parameters".into(),
            ));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - powi(b1, self.step as i32);
        let c2 = 1.0 - powi(b2, self.step as i32);
        let decay = 1.0 - self.learning_rate * self.weight_decay;
        let (m, v) = (&mut self.m, &mut self.v);
        let (lr, eps) = (self.learning_rate, self.eps);
        let mut k = 0;
        params.visit_mut(&mut |_, t| {
            for x in t.iter_mut() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *x = *x * decay - lr * mhat / (sqrt(vhat) + eps);
                k += 1;
            }
        });
        Ok(())
    }
}

pub fn grad_norm<P: ParamSet>(grad: &P) -> Float {
    let mut s = 0.0;
    grad.visit(&mut |_, t| s += t.iter().map(|x| x * x).sum::<Float>());
    sqrt(s)
}

/// Rescales `grad` so its global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<P: ParamSet>(grad: &mut P, max_norm: Float) -> Float {
    let norm = grad_norm(grad);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.visit_mut(&mut |_, t| t.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Scalars(Vec<Float>);

    impl ParamSet for Scalars {
        fn visit(&self, f: &mut dyn FnMut(&str, &[Float])) {
            f("w", &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [Float])) {
            f("w", &mut self.0);
        }
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters() {
        let mut p = Scalars(vec![0.3, -2.0]);
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 1e-8, 0.0);
        for _ in 0..3 {
            opt.step(&mut p, &Scalars(vec![0.0, 0.0])).unwrap();
        }
        assert_eq!(p, Scalars(vec![0.3, -2.0]));
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn three_steps_match_hand_computation() {
        let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-8, 0.01);
        let grads = [1.0, -2.0, 0.5];
        let mut p = Scalars(vec![0.5]);
        let mut opt = AdamW::new(lr, b1, b2, eps, wd);
        for g in grads {
            opt.step(&mut p, &Scalars(vec![g])).unwrap();
        }
        // step 1: m = 0.1, v = 0.001, mhat = 1, vhat = 1
        let x1 = 0.5 * (1.0 - lr * wd) - lr * 1.0 / (1.0 + eps);
        // step 2: m = 0.09 - 0.2 = -0.11, v = 0.000999 + 0.004 = 0.004999
        let m2: Float = -0.11;
        let v2: Float = 0.004999;
        let x2 = x1 * (1.0 - lr * wd) - lr * (m2 / 0.19) / (sqrt(v2 / (1.0 - 0.998001)) + eps);
        // step 3: m = -0.099 + 0.05, v = 0.004994001 + 0.00025
        let m3: Float = -0.049;
        let v3: Float = 0.005244001;
        let x3 = x2 * (1.0 - lr * wd) - lr * (m3 / 0.271) / (sqrt(v3 / (1.0 - 0.997002999)) + eps);
        assert!((p.0[0] - x3).abs() < 1e-12, "{} vs {x3}", p.0[0]);
    }

    #[test]
    fn non_finite_gradient_is_reported_and_nothing_moves() {
        let mut p = Scalars(vec![1.0]);
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 1e-8, 0.0);
        let err = opt.step(&mut p, &Scalars(vec![Float::NAN])).unwrap_err();
        assert_eq!(
            err,
            TrainError::NonFinite {
                tensor: "w".into(),
                step: 1
            }
        );
        assert_eq!(p.0[0], 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = Scalars(vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = Scalars(vec![0.3, 0.4]);
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small.0, vec![0.3, 0.4]);
    }
}
