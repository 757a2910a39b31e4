//! Decoder-only language model over interleaved audio-embedding and text
//! positions, plus the sample types it consumes.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::nn::{Block, BlockCache, LayerNorm, LayerNormCache, Linear};
use crate::params::{Grads, Init, ModuleGroup, ParamId, ParamSet};
use crate::synth::{render, AudioSpec};
use crate::tokenizer::{TokenId, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { num_layers: 4, model_dim: 128, num_heads: 4, ff_dim: 512, max_positions: 512 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.model_dim == 0 || self.num_heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "decoder model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("decoder max_positions must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.model_dim;
        VOCAB_SIZE * d
            + self.max_positions * d
            + self.num_layers * Block::params(d, self.ff_dim)
            + 2 * d
            + d * VOCAB_SIZE
    }

    pub fn tensor_count(&self) -> usize {
        2 + self.num_layers * Block::TENSORS + 2 + 1
    }
}

/// Where an audio segment's clip comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AudioRef {
    /// Procedural description rendered on demand.
    Spec { spec: AudioSpec },
    /// Mono 16-bit WAV file.
    File { path: PathBuf },
    /// Clip registered with an [`AudioStore`].
    Id { id: String },
}

impl AudioRef {
    pub fn label(&self) -> String {
        match self {
            AudioRef::Spec { spec } => spec.id.clone(),
            AudioRef::File { path } => path.display().to_string(),
            AudioRef::Id { id } => id.clone(),
        }
    }
}

/// Resolves audio references into clips.
#[derive(Debug, Clone)]
pub struct AudioStore {
    pub sample_rate: u32,
    clips: HashMap<String, AudioClip>,
}

impl AudioStore {
    pub fn new(sample_rate: u32) -> Self {
        Self { sample_rate, clips: HashMap::new() }
    }

    pub fn insert(&mut self, clip: AudioClip) {
        self.clips.insert(clip.id.clone(), clip);
    }

    pub fn resolve(&self, r: &AudioRef) -> Result<AudioClip> {
        match r {
            AudioRef::Spec { spec } => render(spec, self.sample_rate),
            AudioRef::File { path } => AudioClip::read_wav(path),
            AudioRef::Id { id } => {
                self.clips.get(id).cloned().ok_or_else(|| Error::InvalidInput(format!("unknown audio clip {id:?}")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Audio(AudioRef),
    Text(String),
}

/// `[A1, T1, …, An, Tn]` input plus the text the model should produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterleavedSample {
    pub segments: Vec<Segment>,
    pub target_text: String,
    pub max_audio_seconds: f64,
}

impl InterleavedSample {
    pub fn new(segments: Vec<Segment>, target_text: impl Into<String>, max_audio_seconds: f64) -> Self {
        Self { segments, target_text: target_text.into(), max_audio_seconds }
    }

    pub fn validate(&self, training: bool) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidInput("sample has no segments".into()));
        }
        if training && self.target_text.is_empty() {
            return Err(Error::EmptyTarget);
        }
        Ok(())
    }
}

/// Source of one LM input position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Token(TokenId),
    /// Row `row` of the `segment`-th audio block.
    Audio {
        segment: usize,
        row: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

pub struct DecoderCache {
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
    normed: Array2<f64>,
    rows: Vec<usize>,
}

impl Decoder {
    pub fn new(cfg: &DecoderConfig, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let g = ModuleGroup::Lm;
        let d = cfg.model_dim;
        let tok = ps.register(rng, "lm.tok", g, &[VOCAB_SIZE, d], Init::Normal(0.5));
        let pos = ps.register(rng, "lm.pos", g, &[cfg.max_positions, d], Init::Normal(0.1));
        let blocks = (0..cfg.num_layers)
            .map(|i| Block::new(ps, rng, &format!("lm.block{i}"), g, d, cfg.num_heads, cfg.ff_dim, true))
            .collect();
        let ln_f = LayerNorm::new(ps, rng, "lm.ln_f", g, d);
        let head = Linear::new(ps, rng, "lm.head", g, d, VOCAB_SIZE, false);
        Ok(Self { cfg: *cfg, tok, pos, blocks, ln_f, head })
    }

    pub fn head_weight(&self) -> ParamId {
        self.head.w
    }

    /// Input embeddings: token rows or audio rows, plus learned positions.
    pub fn embed(&self, ps: &ParamSet, slots: &[Slot], audio: &[Array2<f64>]) -> Result<Array2<f64>> {
        if slots.len() > self.cfg.max_positions {
            return Err(Error::ContextOverflow { len: slots.len(), limit: self.cfg.max_positions });
        }
        let tok = ps.m(self.tok);
        let mut x = ps.m(self.pos).slice(s![..slots.len(), ..]).to_owned();
        for (mut row, slot) in x.axis_iter_mut(Axis(0)).zip(slots) {
            match *slot {
                Slot::Token(id) => row += &tok.row(id as usize),
                Slot::Audio { segment, row: r } => row += &audio[segment].row(r),
            }
        }
        Ok(x)
    }

    /// Scatters input-embedding gradients; returns per-segment audio gradients.
    pub fn embed_backward(
        &self,
        g: &mut Grads,
        slots: &[Slot],
        audio: &[Array2<f64>],
        dx: ArrayView2<f64>,
    ) -> Vec<Array2<f64>> {
        g.m_mut(self.pos).slice_mut(s![..slots.len(), ..]).scaled_add(1.0, &dx);
        let mut d_audio: Vec<Array2<f64>> = audio.iter().map(|a| Array2::zeros(a.dim())).collect();
        let mut dtok = g.m_mut(self.tok);
        for (row, slot) in dx.axis_iter(Axis(0)).zip(slots) {
            match *slot {
                Slot::Token(id) => {
                    let mut r = dtok.row_mut(id as usize);
                    r += &row;
                }
                Slot::Audio { segment, row: r } => d_audio[segment].row_mut(r).assign(&row),
            }
        }
        d_audio
    }

    /// Runs the causal stack and returns logits for the requested positions.
    pub fn forward(&self, ps: &ParamSet, x: Array2<f64>, rows: &[usize]) -> (Array2<f64>, DecoderCache) {
        let mut h = x;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(ps, h.view());
            h = next;
            caches.push(cache);
        }
        let (normed, ln_f) = self.ln_f.forward(ps, h.view());
        let picked = normed.select(Axis(0), rows);
        let logits = self.head.forward(ps, picked.view());
        (logits, DecoderCache { blocks: caches, ln_f, normed, rows: rows.to_vec() })
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        g: &mut Grads,
        cache: &DecoderCache,
        dlogits: ArrayView2<f64>,
    ) -> Array2<f64> {
        let picked = cache.normed.select(Axis(0), &cache.rows);
        let dpicked = self.head.backward(ps, g, picked.view(), dlogits);
        let mut dnormed = Array2::zeros(cache.normed.dim());
        for (k, &r) in cache.rows.iter().enumerate() {
            let mut row = dnormed.row_mut(r);
            row += &dpicked.row(k);
        }
        let mut dh = self.ln_f.backward(ps, g, &cache.ln_f, dnormed.view());
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = block.backward(ps, g, c, dh.view());
        }
        dh
    }
}

/// Summed cross-entropy of `logits` rows against `labels`, with the gradient
/// of that sum w.r.t. the logits.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[TokenId]) -> (f64, Array2<f64>) {
    let mut grad = logits.to_owned();
    let mut total = 0.0;
    for (mut row, &label) in grad.axis_iter_mut(Axis(0)).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
        total -= row[label as usize].ln();
        row[label as usize] -= 1.0;
    }
    (total, grad)
}

/// Mean next-token cross-entropy over loss-masked positions of full-length
/// logits (`logits[t]` predicts `labels[t + 1]`).
pub fn masked_loss(logits: ArrayView2<f64>, labels: &[TokenId], loss_mask: &[bool]) -> Result<f64> {
    let rows: Vec<usize> = (1..labels.len()).filter(|&t| loss_mask[t]).map(|t| t - 1).collect();
    if rows.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let targets: Vec<TokenId> = rows.iter().map(|&r| labels[r + 1]).collect();
    let picked = logits.select(Axis(0), &rows);
    let (sum, _) = cross_entropy(picked.view(), &targets);
    Ok(sum / rows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::PAD;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Array2::zeros((6, VOCAB_SIZE));
        let labels = [PAD, 65, 66, 67, 68, 69];
        let mask = [false, false, true, true, true, true];
        let loss = masked_loss(logits.view(), &labels, &mask).unwrap();
        assert!((loss - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn unmasked_rows_do_not_matter() {
        let mut logits = Array2::from_shape_fn((5, VOCAB_SIZE), |(i, j)| ((i * 7 + j * 3) % 11) as f64 * 0.1);
        let labels = [PAD, 1, 2, 3, 4];
        let mask = [false, false, false, true, true];
        let before = masked_loss(logits.view(), &labels, &mask).unwrap();
        // rows 0 and 1 predict positions 1 and 2, which carry no loss
        logits.row_mut(0).fill(0.0);
        logits.row_mut(1).fill(9.0);
        assert_eq!(before, masked_loss(logits.view(), &labels, &mask).unwrap());
        logits.row_mut(2).fill(0.0);
        assert_ne!(before, masked_loss(logits.view(), &labels, &mask).unwrap());
    }

    #[test]
    fn saturated_logits_drive_loss_to_zero() {
        let labels = [PAD, 10, 20, 30];
        let mask = [false, true, true, true];
        let mut logits = Array2::zeros((4, VOCAB_SIZE));
        for t in 1..4 {
            logits[[t - 1, labels[t] as usize]] = 60.0;
        }
        let loss = masked_loss(logits.view(), &labels, &mask).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn empty_mask_is_an_error() {
        let logits = Array2::zeros((3, VOCAB_SIZE));
        assert!(matches!(masked_loss(logits.view(), &[1, 2, 3], &[false; 3]), Err(Error::EmptyTarget)));
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let logits = Array2::from_shape_fn((2, VOCAB_SIZE), |(i, j)| ((i + 1) * j % 13) as f64 * 0.2);
        let labels = [4, 200];
        let (_, grad) = cross_entropy(logits.view(), &labels);
        let h = 1e-6;
        for &(i, j) in &[(0, 4), (0, 5), (1, 200), (1, 0)] {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p[[i, j]] += h;
            m[[i, j]] -= h;
            let num = (cross_entropy(p.view(), &labels).0 - cross_entropy(m.view(), &labels).0) / (2.0 * h);
            assert!((num - grad[[i, j]]).abs() < 1e-7);
        }
    }
}
