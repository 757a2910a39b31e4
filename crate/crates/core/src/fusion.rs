//! Multi-layer feature fusion, temporal mean pooling, the MLP connector, and
//! the chunked long-audio pipeline that chains them.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{chunk_audio, AudioClip, FeatureExtractor, FeatureFrames, FrontendConfig};
use crate::encoder::{Encoder, EncoderActivations, EncoderCache};
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, Linear};
use crate::params::{Grads, ModuleGroup, ParamSet};

/// Encoder layers whose hidden states are concatenated along the feature axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub tap_indices: Vec<usize>,
}

impl FusionConfig {
    pub fn paper() -> Self {
        Self { tap_indices: vec![0, 7, 15, 32] }
    }

    pub fn toy() -> Self {
        Self { tap_indices: vec![0, 1, 2, 4] }
    }

    /// Only the final encoder state.
    pub fn last_hidden(num_layers: usize) -> Self {
        Self { tap_indices: vec![num_layers] }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.tap_indices.is_empty() {
            return Err(Error::Config("at least one fusion tap is required".into()));
        }
        if self.tap_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("fusion taps {:?} must be strictly increasing", self.tap_indices)));
        }
        if let Some(&bad) = self.tap_indices.iter().find(|&&t| t > num_layers) {
            return Err(Error::Config(format!("fusion tap {bad} is outside 0..={num_layers}")));
        }
        Ok(())
    }

    pub fn fused_dim(&self, model_dim: usize) -> usize {
        self.tap_indices.len() * model_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub kernel: usize,
    pub stride: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { kernel: 5, stride: 5 }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kernel != self.stride {
            return Err(Error::Config(format!(
                "pooling needs kernel == stride > 0, got kernel {} stride {}",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectorConfig {
    pub in_dim: usize,
    pub expansion: usize,
    pub out_dim: usize,
}

impl ConnectorConfig {
    pub fn hidden_dim(&self) -> usize {
        self.expansion * self.in_dim
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim();
        self.in_dim * h + h + h * self.out_dim + self.out_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.expansion == 0 || self.out_dim == 0 {
            return Err(Error::Config("connector dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Concatenates the tapped hidden states, in tap order: column block `k` is
/// `acts.layers[tap_indices[k]]`.
pub fn fuse_layers(acts: &EncoderActivations, cfg: &FusionConfig) -> Result<Array2<f64>> {
    cfg.validate(acts.layers.len() - 1)?;
    let views: Vec<ArrayView2<f64>> = cfg.tap_indices.iter().map(|&i| acts.layers[i].view()).collect();
    Ok(concatenate(Axis(1), &views).expect("activation stack shares T"))
}

/// Splits a fused gradient back onto the tapped layers.
fn unfuse_grad(d_fused: ArrayView2<f64>, cfg: &FusionConfig, num_states: usize) -> Vec<Option<Array2<f64>>> {
    let d = d_fused.ncols() / cfg.tap_indices.len();
    let mut out = vec![None; num_states];
    for (k, &tap) in cfg.tap_indices.iter().enumerate() {
        out[tap] = Some(d_fused.slice(s![.., k * d..(k + 1) * d]).to_owned());
    }
    out
}

/// Non-overlapping mean pooling along time: row `j` of the output is the mean
/// of input rows `[j·stride, (j+1)·stride)`.
pub fn temporal_pool(seq: ArrayView2<f64>, cfg: &PoolConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let (t, d) = seq.dim();
    if t % cfg.stride != 0 {
        return Err(Error::Contract(format!(
            "{t} frames are not divisible by pooling stride {}; pad the audio first",
            cfg.stride
        )));
    }
    let mut out = Array2::zeros((t / cfg.stride, d));
    for (j, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        for i in 0..cfg.stride {
            row += &seq.row(j * cfg.stride + i);
        }
        row /= cfg.stride as f64;
    }
    Ok(out)
}

fn temporal_pool_backward(d_out: ArrayView2<f64>, stride: usize) -> Array2<f64> {
    let (n, d) = d_out.dim();
    let mut d_in = Array2::zeros((n * stride, d));
    for (i, mut row) in d_in.axis_iter_mut(Axis(0)).enumerate() {
        row.assign(&(&d_out.row(i / stride) / stride as f64));
    }
    d_in
}

/// Two-layer GELU MLP projecting fused audio features into the LM width.
#[derive(Debug, Clone, Copy)]
pub struct Connector {
    pub cfg: ConnectorConfig,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct ConnectorCache {
    input: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

impl Connector {
    pub fn new(cfg: &ConnectorConfig, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let g = ModuleGroup::FusionConnector;
        let fc1 = Linear::new(ps, rng, "connector.fc1", g, cfg.in_dim, cfg.hidden_dim(), true);
        let fc2 = Linear::new(ps, rng, "connector.fc2", g, cfg.hidden_dim(), cfg.out_dim, true);
        Ok(Self { cfg: *cfg, fc1, fc2 })
    }

    pub fn forward(&self, ps: &ParamSet, seq: ArrayView2<f64>) -> Result<(Array2<f64>, ConnectorCache)> {
        if seq.ncols() != self.cfg.in_dim {
            return Err(Error::Config(format!(
                "connector expects {} input columns, got {}",
                self.cfg.in_dim,
                seq.ncols()
            )));
        }
        let pre_act = self.fc1.forward(ps, seq);
        let act = pre_act.mapv(gelu);
        let out = self.fc2.forward(ps, act.view());
        Ok((out, ConnectorCache { input: seq.to_owned(), pre_act, act }))
    }

    pub fn connect(&self, ps: &ParamSet, seq: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward(ps, seq).map(|(out, _)| out)
    }

    pub fn backward(&self, ps: &ParamSet, g: &mut Grads, cache: &ConnectorCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let dact = self.fc2.backward(ps, g, cache.act.view(), dy);
        let dpre = dact * cache.pre_act.mapv(gelu_grad);
        self.fc1.backward(ps, g, cache.input.view(), dpre.view())
    }
}

/// Audio tokens for one clip, ready to be spliced into the LM input.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEmbeddingSequence {
    pub tokens: Array2<f64>,
    pub tokens_per_second: f64,
    pub source_id: String,
}

/// Everything needed to backpropagate through one chunk's pipeline.
pub struct ChunkCache {
    encoder: EncoderCache,
    num_states: usize,
    connector: ConnectorCache,
}

/// Frontend → encoder → fuse → pool → connector, applied chunk by chunk.
pub struct AudioPipeline {
    pub frontend: FrontendConfig,
    pub encoder: Encoder,
    pub fusion: FusionConfig,
    pub pool: PoolConfig,
    pub connector: Connector,
    extractors: Mutex<HashMap<u32, Arc<FeatureExtractor>>>,
}

impl AudioPipeline {
    pub fn new(
        frontend: FrontendConfig,
        encoder: Encoder,
        fusion: FusionConfig,
        pool: PoolConfig,
        connector: Connector,
    ) -> Result<Self> {
        frontend.validate()?;
        fusion.validate(encoder.cfg.num_layers)?;
        pool.validate()?;
        let frames = frontend.frames_per_chunk()?;
        if frames % pool.stride != 0 {
            return Err(Error::Config(format!(
                "{frames} frames per chunk are not divisible by pooling stride {}",
                pool.stride
            )));
        }
        if frames > encoder.cfg.max_frames || frontend.num_bands != encoder.cfg.input_dim {
            return Err(Error::Config("encoder input shape does not match the frontend".into()));
        }
        if connector.cfg.in_dim != fusion.fused_dim(encoder.cfg.model_dim) {
            return Err(Error::Config(format!(
                "connector in_dim {} != fused width {}",
                connector.cfg.in_dim,
                fusion.fused_dim(encoder.cfg.model_dim)
            )));
        }
        Ok(Self { frontend, encoder, fusion, pool, connector, extractors: Mutex::new(HashMap::new()) })
    }

    pub fn tokens_per_second(&self) -> f64 {
        self.frontend.frame_rate as f64 / self.pool.stride as f64
    }

    pub fn tokens_per_chunk(&self) -> usize {
        self.frontend.frames_per_chunk().expect("validated") / self.pool.stride
    }

    /// Number of audio tokens a clip of `num_samples` produces.
    pub fn token_count(&self, num_samples: usize, sample_rate: u32) -> Result<usize> {
        Ok(self.frontend.chunk_count(num_samples, sample_rate)? * self.tokens_per_chunk())
    }

    fn extractor(&self, sample_rate: u32) -> Result<Arc<FeatureExtractor>> {
        let mut map = self.extractors.lock().expect("extractor cache poisoned");
        if let Some(e) = map.get(&sample_rate) {
            return Ok(e.clone());
        }
        let e = Arc::new(FeatureExtractor::new(&self.frontend, sample_rate)?);
        map.insert(sample_rate, e.clone());
        Ok(e)
    }

    /// Frozen frontend features for each chunk of the clip.
    pub fn features(&self, clip: &AudioClip) -> Result<Vec<FeatureFrames>> {
        let extractor = self.extractor(clip.sample_rate)?;
        chunk_audio(clip, &self.frontend)?.iter().map(|c| extractor.compute(c)).collect()
    }

    /// Per-chunk pipeline after the frontend.
    pub fn forward_chunk(&self, ps: &ParamSet, frames: &FeatureFrames) -> Result<(Array2<f64>, ChunkCache)> {
        let (acts, encoder) = self.encoder.forward(ps, frames)?;
        let fused = fuse_layers(&acts, &self.fusion)?;
        let pooled = temporal_pool(fused.view(), &self.pool)?;
        let (tokens, connector) = self.connector.forward(ps, pooled.view())?;
        Ok((tokens, ChunkCache { encoder, num_states: acts.layers.len(), connector }))
    }

    /// Accumulates connector gradients and, when `through_encoder` is set,
    /// encoder gradients as well.
    pub fn backward_chunk(
        &self,
        ps: &ParamSet,
        g: &mut Grads,
        cache: &ChunkCache,
        d_tokens: ArrayView2<f64>,
        through_encoder: bool,
    ) {
        let d_pooled = self.connector.backward(ps, g, &cache.connector, d_tokens);
        if !through_encoder {
            return;
        }
        let d_fused = temporal_pool_backward(d_pooled.view(), self.pool.stride);
        let d_layers = unfuse_grad(d_fused.view(), &self.fusion, cache.num_states);
        self.encoder.backward(ps, g, &cache.encoder, d_layers);
    }

    /// Forward over precomputed chunk features, keeping caches for backward.
    pub fn forward_features(&self, ps: &ParamSet, chunks: &[FeatureFrames]) -> Result<(Array2<f64>, Vec<ChunkCache>)> {
        let mut parts = Vec::with_capacity(chunks.len());
        let mut caches = Vec::with_capacity(chunks.len());
        for frames in chunks {
            let (tokens, cache) = self.forward_chunk(ps, frames)?;
            parts.push(tokens);
            caches.push(cache);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok((concatenate(Axis(0), &views).expect("uniform width"), caches))
    }

    pub fn backward_features(
        &self,
        ps: &ParamSet,
        g: &mut Grads,
        caches: &[ChunkCache],
        d_tokens: ArrayView2<f64>,
        through_encoder: bool,
    ) {
        let per = d_tokens.nrows() / caches.len();
        for (k, cache) in caches.iter().enumerate() {
            self.backward_chunk(ps, g, cache, d_tokens.slice(s![k * per..(k + 1) * per, ..]), through_encoder);
        }
    }

    /// Encodes a clip of any length up to `max_seconds`: each chunk runs
    /// through the pipeline independently (in parallel) and the token blocks
    /// are concatenated in chunk order.
    pub fn encode_long_audio(&self, ps: &ParamSet, clip: &AudioClip) -> Result<AudioEmbeddingSequence> {
        let chunks = self.features(clip)?;
        let parts: Vec<Array2<f64>> = chunks
            .par_iter()
            .map(|frames| self.forward_chunk(ps, frames).map(|(tokens, _)| tokens))
            .collect::<Result<_>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(AudioEmbeddingSequence {
            tokens: concatenate(Axis(0), &views).expect("uniform width"),
            tokens_per_second: self.tokens_per_second(),
            source_id: clip.id.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, EncoderConfig};
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn acts(num_layers: usize, t: usize, d: usize) -> EncoderActivations {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        EncoderActivations {
            layers: (0..=num_layers).map(|_| Array2::from_shape_fn((t, d), |_| rng.gen::<f64>())).collect(),
        }
    }

    #[test]
    fn paper_taps_give_5120_columns() {
        let a = acts(32, 3, 1280);
        let fused = fuse_layers(&a, &FusionConfig::paper()).unwrap();
        assert_eq!(fused.ncols(), 5120);
        assert_eq!(FusionConfig::paper().fused_dim(1280), 5120);
        assert_eq!(fused.slice(s![.., 3840..]), a.layers[32]);
    }

    #[test]
    fn last_hidden_tap_is_final_state() {
        let a = acts(4, 10, 32);
        let fused = fuse_layers(&a, &FusionConfig::last_hidden(4)).unwrap();
        assert_eq!(fused, a.layers[4]);
    }

    #[test]
    fn toy_taps_blocks_are_exact() {
        let a = acts(4, 300, 32);
        let cfg = FusionConfig::toy();
        let fused = fuse_layers(&a, &cfg).unwrap();
        assert_eq!(fused.dim(), (300, 128));
        for (k, &tap) in cfg.tap_indices.iter().enumerate() {
            assert_eq!(fused.slice(s![.., k * 32..(k + 1) * 32]), a.layers[tap]);
        }
    }

    #[test]
    fn bad_taps_are_rejected() {
        let a = acts(4, 3, 8);
        for taps in [vec![0, 5], vec![2, 2], vec![3, 1], vec![]] {
            assert!(matches!(fuse_layers(&a, &FusionConfig { tap_indices: taps }), Err(Error::Config(_))));
        }
    }

    #[test]
    fn pooling_examples() {
        let col = array![[1.0], [2.0], [3.0], [4.0], [5.0]];
        assert_eq!(temporal_pool(col.view(), &PoolConfig::default()).unwrap(), array![[3.0]]);
        let c = Array2::from_elem((1500, 3), 0.7);
        let p = temporal_pool(c.view(), &PoolConfig::default()).unwrap();
        assert_eq!(p.nrows(), 300);
        assert!(p.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let ragged = Array2::<f64>::zeros((7, 2));
        assert!(matches!(temporal_pool(ragged.view(), &PoolConfig::default()), Err(Error::Contract(_))));
        assert!(PoolConfig { kernel: 5, stride: 4 }.validate().is_err());
    }

    #[test]
    fn connector_zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let cfg = ConnectorConfig { in_dim: 6, expansion: 2, out_dim: 4 };
        let conn = Connector::new(&cfg, &mut ps, &mut rng).unwrap();
        for t in ps.tensors_mut() {
            t.data.fill(0.0);
        }
        let x = Array2::from_elem((3, 6), 1.3);
        assert_eq!(conn.connect(&ps, x.view()).unwrap(), Array2::<f64>::zeros((3, 4)));
        let wrong = Array2::<f64>::zeros((3, 5));
        assert!(matches!(conn.connect(&ps, wrong.view()), Err(Error::Config(_))));
    }

    #[test]
    fn paper_connector_widths() {
        let cfg = ConnectorConfig { in_dim: 5120, expansion: 2, out_dim: 4096 };
        assert_eq!(cfg.hidden_dim(), 10240);
        assert_eq!(cfg.param_count(), 5120 * 10240 + 10240 + 10240 * 4096 + 4096);
    }

    fn small_pipeline(fusion: FusionConfig) -> (AudioPipeline, ParamSet) {
        let frontend = FrontendConfig { frame_rate: 10, num_bands: 16, chunk_seconds: 2.0, max_seconds: 10.0 };
        let ecfg =
            EncoderConfig { num_layers: 2, model_dim: 8, num_heads: 2, ff_dim: 16, input_dim: 16, max_frames: 20 };
        let (encoder, mut ps) = init_encoder(&ecfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ccfg = ConnectorConfig { in_dim: fusion.fused_dim(8), expansion: 2, out_dim: 12 };
        let connector = Connector::new(&ccfg, &mut ps, &mut rng).unwrap();
        (AudioPipeline::new(frontend, encoder, fusion, PoolConfig::default(), connector).unwrap(), ps)
    }

    #[test]
    fn long_audio_is_chunk_compositional() {
        let (pipe, ps) = small_pipeline(FusionConfig { tap_indices: vec![0, 1, 2] });
        let samples: Vec<f64> = (0..8000 * 5).map(|i| (i as f64 * 0.031).sin() * 0.5).collect();
        let clip = AudioClip::new("x", 8000, samples.clone()).unwrap();
        let whole = pipe.encode_long_audio(&ps, &clip).unwrap();
        assert_eq!(whole.tokens.dim(), (3 * 4, 12));
        assert_eq!(whole.tokens_per_second, 2.0);
        let head = AudioClip::new("h", 8000, samples[..16000].to_vec()).unwrap();
        let first = pipe.encode_long_audio(&ps, &head).unwrap();
        assert_eq!(whole.tokens.slice(s![..4, ..]), first.tokens);
    }
}
