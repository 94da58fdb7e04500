//! Low-rank adapters on every linear map.
//!
//! Each adapted map uses `W + (alpha / r) · A · B` with `A: d_in x r` and
//! `B: r x d_out`. `B` starts at zero, so a fresh adapter leaves the model
//! unchanged.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kernels::{matmul, matmul_at, matmul_bt};
use super::params::{ModelParams, ParamSet};
use super::LmError;
use crate::float::{sqrt, Float};
use crate::rng::{stream, stream_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    pub d_in: usize,
    pub d_out: usize,
    /// `d_in x rank`.
    pub a: Vec<Float>,
    /// `rank x d_out`.
    pub b: Vec<Float>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: Float,
    /// One pair per linear map, in [`ModelParams::linears`] order.
    pub pairs: Vec<LoraPair>,
}

impl LoraAdapter {
    /// `A` drawn from N(0, 1/d_in), `B` zero.
    pub fn new(base: &ModelParams, rank: usize, alpha: Float, seed: u64) -> Result<Self, LmError> {
        if rank == 0 {
            return Err(LmError::Config("adapter rank must be > 0".into()));
        }
        let mut rng = stream_rng(seed, stream::INIT ^ 0x10a);
        let pairs = base
            .linears()
            .into_iter()
            .map(|l| {
                let normal = Normal::new(0.0, 1.0 / libm::sqrt(l.d_in as f64)).expect("finite std");
                LoraPair {
                    d_in: l.d_in,
                    d_out: l.d_out,
                    a: (0..l.d_in * rank).map(|_| normal.sample(&mut rng) as Float).collect(),
                    b: vec![0.0; rank * l.d_out],
                }
            })
            .collect();
        Ok(Self { rank, alpha, pairs })
    }

    /// Same shapes, every entry zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn scale(&self) -> Float {
        self.alpha / self.rank as Float
    }

    pub fn check_compatible(&self, base: &ModelParams) -> Result<(), LmError> {
        let linears = base.linears();
        if linears.len() != self.pairs.len() {
            return Err(LmError::Shape(format!(
                "adapter has {} pairs, model has {} linear maps",
                self.pairs.len(),
                linears.len()
            )));
        }
        for (i, (l, p)) in linears.iter().zip(&self.pairs).enumerate() {
            if l.d_in != p.d_in
                || l.d_out != p.d_out
                || p.a.len() != p.d_in * self.rank
                || p.b.len() != self.rank * p.d_out
            {
                return Err(LmError::Shape(format!(
                    "adapter pair {i} does not match its linear map"
                )));
            }
        }
        Ok(())
    }

    /// Maps a gradient with respect to the effective weights onto `A` and
    /// `B`, accumulating into `out`.
    pub fn project_grad(&self, weight_grad: &ModelParams, out: &mut LoraAdapter) {
        let s = self.scale();
        let r = self.rank;
        for ((p, g), l) in self.pairs.iter().zip(&mut out.pairs).zip(weight_grad.linears()) {
            let mut da = vec![0.0; p.d_in * r];
            matmul_bt(&l.weight, &p.b, p.d_in, p.d_out, r, &mut da);
            let mut db = vec![0.0; r * p.d_out];
            matmul_at(&p.a, &l.weight, p.d_in, r, p.d_out, &mut db);
            for (o, x) in g.a.iter_mut().zip(&da) {
                *o += s * x;
            }
            for (o, x) in g.b.iter_mut().zip(&db) {
                *o += s * x;
            }
        }
    }

    /// `sqrt` of the summed squares of all entries.
    pub fn norm(&self) -> Float {
        let mut s = 0.0;
        self.visit(&mut |_, t| s += t.iter().map(|x| x * x).sum::<Float>());
        sqrt(s)
    }
}

impl ParamSet for LoraAdapter {
    fn visit(&self, f: &mut dyn FnMut(&str, &[Float])) {
        for (i, p) in self.pairs.iter().enumerate() {
            f(&format!("pair{i}.a"), &p.a);
            f(&format!("pair{i}.b"), &p.b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [Float])) {
        for (i, p) in self.pairs.iter_mut().enumerate() {
            f(&format!("pair{i}.a"), &mut p.a);
            f(&format!("pair{i}.b"), &mut p.b);
        }
    }
}

/// Adds the adapter's low-rank update to `params` in place.
pub fn apply_adapter(params: &mut ModelParams, adapter: &LoraAdapter) -> Result<(), LmError> {
    adapter.check_compatible(params)?;
    let s = adapter.scale();
    let r = adapter.rank;
    for (l, p) in params.linears_mut().into_iter().zip(&adapter.pairs) {
        let mut delta = vec![0.0; p.d_in * p.d_out];
        matmul(&p.a, &p.b, p.d_in, r, p.d_out, &mut delta);
        for (w, d) in l.weight.iter_mut().zip(&delta) {
            *w += s * d;
        }
    }
    Ok(())
}

/// Returns `base` with the adapter folded into its weights.
pub fn merge_adapter(base: &ModelParams, adapter: &LoraAdapter) -> Result<ModelParams, LmError> {
    let mut merged = base.clone();
    apply_adapter(&mut merged, adapter)?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    fn tiny() -> ModelParams {
        ModelParams::init(
            ModelConfig {
                vocab_size: 7,
                n_layers: 2,
                d_model: 8,
                n_heads: 2,
                context_length: 6,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn parameter_count_is_rank_times_fan_sum() {
        let base = tiny();
        let adapter = LoraAdapter::new(&base, 4, 8.0, 1).unwrap();
        let expected: usize = base.linears().iter().map(|l| 4 * (l.d_in + l.d_out)).sum();
        assert_eq!(adapter.num_params(), expected);
        // 6 maps per block plus the head
        assert_eq!(adapter.pairs.len(), 13);
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let base = tiny();
        let adapter = LoraAdapter::new(&base, 2, 4.0, 1).unwrap();
        assert_eq!(merge_adapter(&base, &adapter).unwrap(), base);
    }

    #[test]
    fn merge_matches_explicit_low_rank_sum() {
        let base = tiny();
        let mut adapter = LoraAdapter::new(&base, 2, 3.0, 1).unwrap();
        for (i, p) in adapter.pairs.iter_mut().enumerate() {
            for (j, b) in p.b.iter_mut().enumerate() {
                *b = ((i * 31 + j) % 7) as Float * 0.01 - 0.03;
            }
        }
        let merged = merge_adapter(&base, &adapter).unwrap();
        let s = 1.5;
        for ((l0, l1), p) in base.linears().iter().zip(merged.linears()).zip(&adapter.pairs) {
            for i in 0..p.d_in {
                for o in 0..p.d_out {
                    let low: Float = (0..2).map(|k| p.a[i * 2 + k] * p.b[k * p.d_out + o]).sum();
                    let want = l0.weight[i * p.d_out + o] + s * low;
                    assert!((l1.weight[i * p.d_out + o] - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let base = tiny();
        let mut adapter = LoraAdapter::new(&base, 2, 2.0, 1).unwrap();
        adapter.pairs.pop();
        assert!(matches!(merge_adapter(&base, &adapter), Err(LmError::Shape(_))));
        assert!(LoraAdapter::new(&base, 0, 1.0, 1).is_err());
    }
}
