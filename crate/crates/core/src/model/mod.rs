//! Miniature multimodal decoder.
//!
//! A grid of `G×G` visual embeddings is projected into the residual stream and
//! followed by text tokens. Every layer is pre-norm: multi-head causal
//! self-attention, then a GELU feed-forward block. The forward pass exposes
//! every post-softmax attention map and every per-head state, accepts edit
//! hooks on both, and has a hand-written reverse pass that yields gradients
//! for all weights and for the attention maps themselves.

mod backward;
mod checkpoint;
mod decode;
mod forward;
mod hooks;
mod math;

pub(crate) use backward::backward;
pub use backward::{backward_attention, nll_loss, AttentionGrads, Gradients, LossSpec, LossTarget, LossValue};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use decode::{argmax, greedy_decode, DecodedSequence};
pub(crate) use decode::{check_budget, step_decode};
pub use forward::{forward, ForwardTrace, PromptInput, TokenLayout, VisualInput};
pub use hooks::{AttentionEdit, HeadSite, HookScope, HookSet, PositionRange, StateEdit};
pub use math::{log_softmax, softmax};

pub(crate) use forward::{forward_cached, Sequence};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Shape hyperparameters of the decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub grid_side: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 8,
            model_dim: 32,
            grid_side: 8,
            vocab_size: crate::tokens::vocab_size(16),
            max_seq_len: 80,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.model_dim
    }

    pub fn num_visual(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn total_heads(&self) -> usize {
        self.num_layers * self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("grid_side", self.grid_side),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(LabError::config(format!("{name} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(LabError::config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.num_visual() >= self.max_seq_len {
            return Err(LabError::config(format!(
                "{} visual tokens leave no room in max_seq_len {}",
                self.num_visual(),
                self.max_seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All parameters of the decoder. Also used as the container for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub version: u32,
    pub token_embed: Array2<f64>,
    pub visual_proj: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Array1<f64>,
    pub lnf_bias: Array1<f64>,
    pub unembed: Array2<f64>,
}

pub const WEIGHTS_VERSION: u32 = 1;

impl ModelWeights {
    /// All-zero weights (layer-norm gains included).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let f = config.ffn_dim();
        let layer = LayerWeights {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
        };
        Ok(Self {
            config: config.clone(),
            version: WEIGHTS_VERSION,
            token_embed: Array2::zeros((config.vocab_size, d)),
            visual_proj: Array2::zeros((d, d)),
            pos_embed: Array2::zeros((config.max_seq_len, d)),
            layers: vec![layer; config.num_layers],
            lnf_gain: Array1::zeros(d),
            lnf_bias: Array1::zeros(d),
            unembed: Array2::zeros((d, config.vocab_size)),
        })
    }

    /// Seeded Gaussian initialisation, scaled by fan-in.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.model_dim as f64;
        let f = config.ffn_dim() as f64;
        let depth = (2.0 * config.num_layers as f64).sqrt();
        let mut fill = |a: &mut [f64], std: f64| {
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in a.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        };
        fill(slice_mut(&mut w.token_embed), 1.0);
        fill(slice_mut(&mut w.visual_proj), 1.0 / d.sqrt());
        fill(slice_mut(&mut w.pos_embed), 0.1);
        for layer in &mut w.layers {
            layer.ln1_gain.fill(1.0);
            layer.ln2_gain.fill(1.0);
            fill(slice_mut(&mut layer.wq), 1.0 / d.sqrt());
            fill(slice_mut(&mut layer.wk), 1.0 / d.sqrt());
            fill(slice_mut(&mut layer.wv), 1.0 / d.sqrt());
            fill(slice_mut(&mut layer.wo), 1.0 / (d.sqrt() * depth));
            fill(slice_mut(&mut layer.w1), 1.0 / d.sqrt());
            fill(slice_mut(&mut layer.w2), 1.0 / (f.sqrt() * depth));
        }
        w.lnf_gain.fill(1.0);
        fill(slice_mut(&mut w.unembed), 1.0 / d.sqrt());
        Ok(w)
    }

    /// Visits every tensor in a fixed order with its name and shape.
    pub fn for_each_tensor<'a>(&'a self, mut f: impl FnMut(String, Vec<usize>, &'a [f64])) {
        f(
            "token_embed".into(),
            self.token_embed.shape().to_vec(),
            slice(&self.token_embed),
        );
        f(
            "visual_proj".into(),
            self.visual_proj.shape().to_vec(),
            slice(&self.visual_proj),
        );
        f(
            "pos_embed".into(),
            self.pos_embed.shape().to_vec(),
            slice(&self.pos_embed),
        );
        for (i, l) in self.layers.iter().enumerate() {
            f(
                format!("layers.{i}.ln1_gain"),
                l.ln1_gain.shape().to_vec(),
                slice1(&l.ln1_gain),
            );
            f(
                format!("layers.{i}.ln1_bias"),
                l.ln1_bias.shape().to_vec(),
                slice1(&l.ln1_bias),
            );
            f(format!("layers.{i}.wq"), l.wq.shape().to_vec(), slice(&l.wq));
            f(format!("layers.{i}.wk"), l.wk.shape().to_vec(), slice(&l.wk));
            f(format!("layers.{i}.wv"), l.wv.shape().to_vec(), slice(&l.wv));
            f(format!("layers.{i}.wo"), l.wo.shape().to_vec(), slice(&l.wo));
            f(
                format!("layers.{i}.ln2_gain"),
                l.ln2_gain.shape().to_vec(),
                slice1(&l.ln2_gain),
            );
            f(
                format!("layers.{i}.ln2_bias"),
                l.ln2_bias.shape().to_vec(),
                slice1(&l.ln2_bias),
            );
            f(format!("layers.{i}.w1"), l.w1.shape().to_vec(), slice(&l.w1));
            f(format!("layers.{i}.b1"), l.b1.shape().to_vec(), slice1(&l.b1));
            f(format!("layers.{i}.w2"), l.w2.shape().to_vec(), slice(&l.w2));
            f(format!("layers.{i}.b2"), l.b2.shape().to_vec(), slice1(&l.b2));
        }
        f(
            "lnf_gain".into(),
            self.lnf_gain.shape().to_vec(),
            slice1(&self.lnf_gain),
        );
        f(
            "lnf_bias".into(),
            self.lnf_bias.shape().to_vec(),
            slice1(&self.lnf_bias),
        );
        f("unembed".into(), self.unembed.shape().to_vec(), slice(&self.unembed));
    }

    /// Mutable counterpart of [`for_each_tensor`](Self::for_each_tensor), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            slice_mut(&mut self.token_embed),
            slice_mut(&mut self.visual_proj),
            slice_mut(&mut self.pos_embed),
        ];
        for l in &mut self.layers {
            out.push(slice1_mut(&mut l.ln1_gain));
            out.push(slice1_mut(&mut l.ln1_bias));
            out.push(slice_mut(&mut l.wq));
            out.push(slice_mut(&mut l.wk));
            out.push(slice_mut(&mut l.wv));
            out.push(slice_mut(&mut l.wo));
            out.push(slice1_mut(&mut l.ln2_gain));
            out.push(slice1_mut(&mut l.ln2_bias));
            out.push(slice_mut(&mut l.w1));
            out.push(slice1_mut(&mut l.b1));
            out.push(slice_mut(&mut l.w2));
            out.push(slice1_mut(&mut l.b2));
        }
        out.push(slice1_mut(&mut self.lnf_gain));
        out.push(slice1_mut(&mut self.lnf_bias));
        out.push(slice_mut(&mut self.unembed));
        out
    }

    pub fn tensor_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        self.for_each_tensor(|_, _, s| out.push(s));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensor_slices().iter().map(|s| s.len()).sum()
    }

    /// Checks shapes against the config and that every entry is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = Self::zeros(&self.config)?;
        let mut expected = Vec::new();
        reference.for_each_tensor(|name, shape, _| expected.push((name, shape)));
        let mut actual = Vec::new();
        self.for_each_tensor(|name, shape, data| actual.push((name, shape, data)));
        if expected.len() != actual.len() {
            return Err(LabError::config("tensor count does not match config"));
        }
        for ((en, es), (an, ashape, data)) in expected.iter().zip(actual.iter()) {
            if en != an || es != ashape {
                return Err(LabError::config(format!(
                    "tensor {an} has shape {ashape:?}, expected {en} {es:?}"
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(LabError::config(format!("tensor {an} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelWeights, scale: f64) {
        let src = other.tensor_slices();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += scale * v;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensor_slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum()
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = ModelConfig {
            model_dim: 30,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(LabError::Config(_))));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        assert_eq!(ModelWeights::init(&cfg).unwrap(), ModelWeights::init(&cfg).unwrap());
        let other = ModelConfig { seed: 1, ..cfg.clone() };
        assert_ne!(ModelWeights::init(&cfg).unwrap(), ModelWeights::init(&other).unwrap());
    }

    #[test]
    fn tensor_visitors_agree() {
        let mut w = ModelWeights::init(&ModelConfig::default()).unwrap();
        let lens: Vec<usize> = w.tensor_slices().iter().map(|s| s.len()).collect();
        let lens_mut: Vec<usize> = w.tensors_mut().iter().map(|s| s.len()).collect();
        assert_eq!(lens, lens_mut);
        w.validate().unwrap();
    }
}
