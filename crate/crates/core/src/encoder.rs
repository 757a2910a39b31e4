//! Bidirectional transformer encoder exposing every intermediate hidden state.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{FeatureFrames, LOG_EPSILON};
use crate::error::{Error, Result};
use crate::nn::{Block, BlockCache, Linear};
use crate::params::{Grads, Init, ModuleGroup, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    /// Feature bands per input frame.
    pub input_dim: usize,
    /// Longest frame sequence (one padded chunk).
    pub max_frames: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { num_layers: 4, model_dim: 32, num_heads: 4, ff_dim: 128, input_dim: 32, max_frames: 300 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.model_dim == 0 || self.num_heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "encoder model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.input_dim == 0 || self.max_frames == 0 {
            return Err(Error::Config("encoder input_dim and max_frames must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form scalar count of the encoder's parameters.
    pub fn param_count(&self) -> usize {
        let d = self.model_dim;
        self.input_dim * d + d + self.max_frames * d + self.num_layers * Block::params(d, self.ff_dim)
    }

    pub fn tensor_count(&self) -> usize {
        3 + self.num_layers * Block::TENSORS
    }
}

/// Hidden states `layers[0..=num_layers]`; index 0 is the projected input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderActivations {
    pub layers: Vec<Array2<f64>>,
}

impl EncoderActivations {
    pub fn num_frames(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn model_dim(&self) -> usize {
        self.layers[0].ncols()
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    input: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
}

pub struct EncoderCache {
    input: Array2<f64>,
    blocks: Vec<BlockCache>,
}

/// Maps log energies so that the silence floor lands on 0 and loud frames
/// sit near 1.
fn normalize_features(frames: ArrayView2<f64>) -> Array2<f64> {
    let floor = LOG_EPSILON.ln();
    frames.mapv(|v| (v - floor) / -floor)
}

impl Encoder {
    /// Registers the encoder's tensors in `ps`.
    pub fn new(cfg: &EncoderConfig, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let g = ModuleGroup::Encoder;
        let d = cfg.model_dim;
        let input = Linear::new(ps, rng, "encoder.input", g, cfg.input_dim, d, true);
        let pos = ps.register(rng, "encoder.pos", g, &[cfg.max_frames, d], Init::Normal(0.1));
        let blocks = (0..cfg.num_layers)
            .map(|i| Block::new(ps, rng, &format!("encoder.block{i}"), g, d, cfg.num_heads, cfg.ff_dim, false))
            .collect();
        Ok(Self { cfg: *cfg, input, pos, blocks })
    }

    pub fn forward(&self, ps: &ParamSet, frames: &FeatureFrames) -> Result<(EncoderActivations, EncoderCache)> {
        let t = frames.num_frames();
        if t == 0 || t > self.cfg.max_frames {
            return Err(Error::InvalidInput(format!("encoder takes 1..={} frames, got {t}", self.cfg.max_frames)));
        }
        if frames.frames.ncols() != self.cfg.input_dim {
            return Err(Error::Config(format!(
                "encoder expects {} bands, got {}",
                self.cfg.input_dim,
                frames.frames.ncols()
            )));
        }
        if frames.frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("encoder input {}", frames.source_id)));
        }
        let input = normalize_features(frames.frames.view());
        let mut h = self.input.forward(ps, input.view());
        h += &ps.m(self.pos).slice(s![..t, ..]);
        let mut layers = Vec::with_capacity(self.blocks.len() + 1);
        let mut caches = Vec::with_capacity(self.blocks.len());
        layers.push(h);
        for block in &self.blocks {
            let (next, cache) = block.forward(ps, layers.last().expect("non-empty").view());
            layers.push(next);
            caches.push(cache);
        }
        Ok((EncoderActivations { layers }, EncoderCache { input, blocks: caches }))
    }

    pub fn encode(&self, ps: &ParamSet, frames: &FeatureFrames) -> Result<EncoderActivations> {
        self.forward(ps, frames).map(|(acts, _)| acts)
    }

    /// Backpropagates gradients arriving at any subset of hidden states.
    /// `d_layers[i]` is the gradient w.r.t. `layers[i]`, if that state is used.
    pub fn backward(&self, ps: &ParamSet, g: &mut Grads, cache: &EncoderCache, mut d_layers: Vec<Option<Array2<f64>>>) {
        assert_eq!(d_layers.len(), self.blocks.len() + 1);
        let mut carry: Option<Array2<f64>> = None;
        for i in (0..=self.blocks.len()).rev() {
            let grad = match (carry.take(), d_layers[i].take()) {
                (Some(a), Some(b)) => Some(a + b),
                (a, b) => a.or(b),
            };
            let Some(grad) = grad else { continue };
            if i == 0 {
                let t = grad.nrows();
                g.m_mut(self.pos).slice_mut(s![..t, ..]).scaled_add(1.0, &grad);
                ndarray::linalg::general_mat_mul(1.0, &cache.input.t(), &grad, 1.0, &mut g.m_mut(self.input.w));
                if let Some(b) = self.input.b {
                    g.v_mut(b).scaled_add(1.0, &grad.sum_axis(Axis(0)));
                }
            } else {
                carry = Some(self.blocks[i - 1].backward(ps, g, &cache.blocks[i - 1], grad.view()));
            }
        }
    }
}

/// Builds a freshly initialized encoder and its parameters from a seed.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<(Encoder, ParamSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let enc = Encoder::new(cfg, &mut ps, &mut rng)?;
    Ok((enc, ps))
}
