use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LmError, ModelConfig};
use crate::float::Float;
use crate::rng::{stream, stream_rng, Rng};

/// Named parameter tensors, visited in a fixed order.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[Float]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [Float]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn fill(&mut self, value: Float) {
        self.visit_mut(&mut |_, t| t.iter_mut().for_each(|x| *x = value));
    }

    /// Copies every value into one vector, in visiting order.
    fn flatten(&self) -> Vec<Float> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| out.extend_from_slice(t));
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|x| x.is_finite()));
        ok
    }
}

/// Row-vector affine map `y = x W + b` with `W` stored `d_in x d_out`,
/// row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: Vec<Float>,
    pub bias: Vec<Float>,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            weight: vec![0.0; d_in * d_out],
            bias: vec![0.0; d_out],
        }
    }

    fn random(rng: &mut Rng, d_in: usize, d_out: usize, std: Float) -> Self {
        let mut l = Self::zeros(d_in, d_out);
        fill_normal(rng, &mut l.weight, std);
        l
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vec<Float>,
    pub bias: Vec<Float>,
}

impl LayerNorm {
    fn zeros(d: usize) -> Self {
        Self {
            gain: vec![0.0; d],
            bias: vec![0.0; d],
        }
    }

    /// Unit gain, zero bias.
    pub fn new(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc_in: Linear,
    pub fc_out: Linear,
}

/// Number of linear maps per block.
pub(crate) const BLOCK_LINEARS: usize = 6;

impl Block {
    pub(crate) fn linears(&self) -> [&Linear; BLOCK_LINEARS] {
        [
            &self.query,
            &self.key,
            &self.value,
            &self.out,
            &self.fc_in,
            &self.fc_out,
        ]
    }

    pub(crate) fn linears_mut(&mut self) -> [&mut Linear; BLOCK_LINEARS] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.out,
            &mut self.fc_in,
            &mut self.fc_out,
        ]
    }
}

pub(crate) const LINEAR_NAMES: [&str; BLOCK_LINEARS] = ["query", "key", "value", "out", "fc_in", "fc_out"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `vocab_size x d_model`.
    pub token_embedding: Vec<Float>,
    /// `context_length x d_model`.
    pub position_embedding: Vec<Float>,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub head: Linear,
}

fn fill_normal(rng: &mut Rng, values: &mut [Float], std: Float) {
    let normal = Normal::new(0.0, std as f64).expect("finite std");
    for v in values {
        *v = normal.sample(rng) as Float;
    }
}

impl ModelParams {
    /// Every tensor zero, layer-norm gains included. Used for gradients.
    pub fn zeros(config: ModelConfig) -> Result<Self, LmError> {
        config.validate()?;
        let d = config.d_model;
        let block = Block {
            ln1: LayerNorm::zeros(d),
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            out: Linear::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            fc_in: Linear::zeros(d, config.d_ff()),
            fc_out: Linear::zeros(config.d_ff(), d),
        };
        Ok(Self {
            config,
            token_embedding: vec![0.0; config.vocab_size * d],
            position_embedding: vec![0.0; config.context_length * d],
            blocks: vec![block; config.n_layers],
            ln_final: LayerNorm::zeros(d),
            head: Linear::zeros(d, config.vocab_size),
        })
    }

    /// Gaussian initialisation: embeddings and weights N(0, 0.02^2), residual
    /// projections scaled down by `sqrt(2 n_layers)`, biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, LmError> {
        let mut p = Self::zeros(config)?;
        let mut rng = stream_rng(seed, stream::INIT);
        let d = config.d_model;
        let std = 0.02;
        let resid_std = std / libm::sqrt(2.0 * config.n_layers as f64) as Float;
        fill_normal(&mut rng, &mut p.token_embedding, std);
        fill_normal(&mut rng, &mut p.position_embedding, std);
        p.ln_final = LayerNorm::new(d);
        for b in &mut p.blocks {
            b.ln1 = LayerNorm::new(d);
            b.ln2 = LayerNorm::new(d);
            b.query = Linear::random(&mut rng, d, d, std);
            b.key = Linear::random(&mut rng, d, d, std);
            b.value = Linear::random(&mut rng, d, d, std);
            b.out = Linear::random(&mut rng, d, d, resid_std);
            b.fc_in = Linear::random(&mut rng, d, config.d_ff(), std);
            b.fc_out = Linear::random(&mut rng, config.d_ff(), d, resid_std);
        }
        p.head = Linear::random(&mut rng, d, config.vocab_size, std);
        Ok(p)
    }

    /// All linear maps: six per block in block order, then the head.
    pub fn linears(&self) -> Vec<&Linear> {
        let mut out: Vec<&Linear> = self.blocks.iter().flat_map(|b| b.linears()).collect();
        out.push(&self.head);
        out
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = self.blocks.iter_mut().flat_map(|b| b.linears_mut()).collect();
        out.push(&mut self.head);
        out
    }

    pub fn linear_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.blocks.len() {
            for name in LINEAR_NAMES {
                out.push(format!("layer{l}.{name}"));
            }
        }
        out.push("head".into());
        out
    }

    pub fn check_shapes(&self) -> Result<(), LmError> {
        let c = self.config;
        c.validate()?;
        let d = c.d_model;
        let bad = |what: &str| Err(LmError::Shape(format!("{what} does not match the config")));
        if self.token_embedding.len() != c.vocab_size * d {
            return bad("token embedding");
        }
        if self.position_embedding.len() != c.context_length * d {
            return bad("position embedding");
        }
        if self.blocks.len() != c.n_layers {
            return bad("layer count");
        }
        let expected = |l: &Linear, i: usize, o: usize| {
            l.d_in == i && l.d_out == o && l.weight.len() == i * o && l.bias.len() == o
        };
        for b in &self.blocks {
            let ok = [&b.query, &b.key, &b.value, &b.out].iter().all(|l| expected(l, d, d))
                && expected(&b.fc_in, d, c.d_ff())
                && expected(&b.fc_out, c.d_ff(), d)
                && [&b.ln1, &b.ln2].iter().all(|n| n.gain.len() == d && n.bias.len() == d);
            if !ok {
                return bad("block tensor");
            }
        }
        if !expected(&self.head, d, c.vocab_size) {
            return bad("output head");
        }
        Ok(())
    }
}

impl ParamSet for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[Float])) {
        f("token_embedding", &self.token_embedding);
        f("position_embedding", &self.position_embedding);
        for (l, b) in self.blocks.iter().enumerate() {
            f(&format!("layer{l}.ln1.gain"), &b.ln1.gain);
            f(&format!("layer{l}.ln1.bias"), &b.ln1.bias);
            f(&format!("layer{l}.ln2.gain"), &b.ln2.gain);
            f(&format!("layer{l}.ln2.bias"), &b.ln2.bias);
            for (name, lin) in LINEAR_NAMES.iter().zip(b.linears()) {
                f(&format!("layer{l}.{name}.weight"), &lin.weight);
                f(&format!("layer{l}.{name}.bias"), &lin.bias);
            }
        }
        f("ln_final.gain", &self.ln_final.gain);
        f("ln_final.bias", &self.ln_final.bias);
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [Float])) {
        f("token_embedding", &mut self.token_embedding);
        f("position_embedding", &mut self.position_embedding);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("layer{l}.ln1.gain"), &mut b.ln1.gain);
            f(&format!("layer{l}.ln1.bias"), &mut b.ln1.bias);
            f(&format!("layer{l}.ln2.gain"), &mut b.ln2.gain);
            f(&format!("layer{l}.ln2.bias"), &mut b.ln2.bias);
            for (name, lin) in LINEAR_NAMES.iter().zip(b.linears_mut()) {
                f(&format!("layer{l}.{name}.weight"), &mut lin.weight);
                f(&format!("layer{l}.{name}.bias"), &mut lin.bias);
            }
        }
        f("ln_final.gain", &mut self.ln_final.gain);
        f("ln_final.bias", &mut self.ln_final.bias);
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }
}
