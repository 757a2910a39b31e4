//! The full audio language model: audio pipeline, connector and decoder over
//! one shared parameter set.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{FeatureFrames, FrontendConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{AudioPipeline, ChunkCache, Connector, ConnectorConfig, FusionConfig, PoolConfig};
use crate::lm::{cross_entropy, AudioStore, Decoder, DecoderConfig, InterleavedSample, Segment, Slot};
use crate::params::{Grads, ModuleGroup, ParamSet};
use crate::tokenizer::{TokenId, Tokenizer, AUDIO_END, AUDIO_START, BOS, EOS, PAD, VOCAB_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub pool: PoolConfig,
    pub connector_expansion: usize,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Full-size reference dimensions. Documented and validated, far too large
    /// to instantiate on a desktop.
    pub fn paper() -> Self {
        Self {
            frontend: FrontendConfig { frame_rate: 50, num_bands: 64, chunk_seconds: 30.0, max_seconds: 390.0 },
            encoder: EncoderConfig {
                num_layers: 32,
                model_dim: 1280,
                num_heads: 20,
                ff_dim: 5120,
                input_dim: 64,
                max_frames: 1500,
            },
            fusion: FusionConfig::paper(),
            pool: PoolConfig::default(),
            connector_expansion: 2,
            decoder: DecoderConfig {
                num_layers: 36,
                model_dim: 4096,
                num_heads: 32,
                ff_dim: 12288,
                max_positions: 8192,
            },
        }
    }

    /// Desk-scale configuration the test suite trains.
    pub fn toy() -> Self {
        Self {
            frontend: FrontendConfig { frame_rate: 10, num_bands: 64, chunk_seconds: 10.0, max_seconds: 180.0 },
            encoder: EncoderConfig {
                num_layers: 4,
                model_dim: 32,
                num_heads: 4,
                ff_dim: 128,
                input_dim: 64,
                max_frames: 100,
            },
            fusion: FusionConfig::toy(),
            pool: PoolConfig::default(),
            connector_expansion: 2,
            decoder: DecoderConfig { num_layers: 4, model_dim: 128, num_heads: 4, ff_dim: 512, max_positions: 512 },
        }
    }

    /// Smallest consistent configuration: 2 s chunks, two encoder layers and
    /// a two-layer decoder. Used for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            frontend: FrontendConfig { frame_rate: 10, num_bands: 16, chunk_seconds: 2.0, max_seconds: 10.0 },
            encoder: EncoderConfig {
                num_layers: 2,
                model_dim: 8,
                num_heads: 2,
                ff_dim: 16,
                input_dim: 16,
                max_frames: 20,
            },
            fusion: FusionConfig { tap_indices: vec![0, 1, 2] },
            pool: PoolConfig::default(),
            connector_expansion: 2,
            decoder: DecoderConfig { num_layers: 2, model_dim: 16, num_heads: 2, ff_dim: 32, max_positions: 96 },
        }
    }

    pub fn connector(&self) -> ConnectorConfig {
        ConnectorConfig {
            in_dim: self.fusion.fused_dim(self.encoder.model_dim),
            expansion: self.connector_expansion,
            out_dim: self.decoder.model_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        self.fusion.validate(self.encoder.num_layers)?;
        self.pool.validate()?;
        self.connector().validate()?;
        self.decoder.validate()?;
        let frames = self.frontend.frames_per_chunk()?;
        if frames % self.pool.stride != 0 {
            return Err(Error::Config(format!(
                "{frames} frames per chunk are not divisible by pooling stride {}",
                self.pool.stride
            )));
        }
        if frames > self.encoder.max_frames {
            return Err(Error::Config(format!(
                "{frames} frames per chunk exceed encoder max_frames {}",
                self.encoder.max_frames
            )));
        }
        if self.frontend.num_bands != self.encoder.input_dim {
            return Err(Error::Config(format!(
                "frontend produces {} bands but the encoder takes {}",
                self.frontend.num_bands, self.encoder.input_dim
            )));
        }
        let longest = self.max_audio_tokens() + 2;
        if self.decoder.max_positions < longest {
            return Err(Error::Config(format!(
                "decoder max_positions {} cannot hold the longest audio block ({longest} positions)",
                self.decoder.max_positions
            )));
        }
        Ok(())
    }

    pub fn tokens_per_chunk(&self) -> usize {
        self.frontend.frames_per_chunk().unwrap_or(0) / self.pool.stride
    }

    /// Audio tokens produced for a clip of `seconds`.
    pub fn audio_tokens(&self, seconds: f64) -> usize {
        let chunks = ((seconds / self.frontend.chunk_seconds) - 1e-9).ceil().max(1.0) as usize;
        chunks * self.tokens_per_chunk()
    }

    pub fn max_audio_tokens(&self) -> usize {
        self.audio_tokens(self.frontend.max_seconds)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.connector().param_count() + self.decoder.param_count()
    }

    pub fn tensor_count(&self) -> usize {
        self.encoder.tensor_count() + 4 + self.decoder.tensor_count()
    }
}

/// A sample turned into LM positions, with audio kept as frozen frontend
/// features so the trainable pipeline can run on it.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub slots: Vec<Slot>,
    /// Token id at each position; audio positions hold `PAD`.
    pub labels: Vec<TokenId>,
    /// True where the position is a target predicted from the one before.
    pub loss_mask: Vec<bool>,
    /// Chunk features for each audio segment, in order.
    pub audio: Vec<Vec<FeatureFrames>>,
}

impl Assembled {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn target_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Rows of the logit matrix that predict a masked position.
    fn predicting_rows(&self) -> (Vec<usize>, Vec<TokenId>) {
        (1..self.len()).filter(|&t| self.loss_mask[t]).map(|t| (t - 1, self.labels[t])).unzip()
    }
}

/// Which parts of the model receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub connector: bool,
    pub lm: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable { encoder: true, connector: true, lm: true };

    pub fn from_groups(groups: &[ModuleGroup]) -> Self {
        Self {
            encoder: groups.contains(&ModuleGroup::Encoder),
            connector: groups.contains(&ModuleGroup::FusionConnector),
            lm: groups.contains(&ModuleGroup::Lm),
        }
    }
}

pub struct AudioLm {
    pub cfg: ModelConfig,
    pub pipeline: AudioPipeline,
    pub decoder: Decoder,
    pub tokenizer: Tokenizer,
}

impl AudioLm {
    /// Builds the model and registers its freshly initialized parameters.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let encoder = Encoder::new(&cfg.encoder, &mut ps, &mut rng)?;
        let connector = Connector::new(&cfg.connector(), &mut ps, &mut rng)?;
        let decoder = Decoder::new(&cfg.decoder, &mut ps, &mut rng)?;
        let pipeline = AudioPipeline::new(cfg.frontend, encoder, cfg.fusion.clone(), cfg.pool, connector)?;
        Ok((Self { cfg: cfg.clone(), pipeline, decoder, tokenizer: Tokenizer }, ps))
    }

    /// Builds the structure only, for loading a checkpoint into.
    pub fn skeleton(cfg: &ModelConfig) -> Result<(Self, ParamSet)> {
        Self::init(cfg, 0)
    }

    fn assemble_inner(&self, sample: &InterleavedSample, store: &AudioStore, with_target: bool) -> Result<Assembled> {
        sample.validate(with_target)?;
        let mut out = Assembled { slots: Vec::new(), labels: Vec::new(), loss_mask: Vec::new(), audio: Vec::new() };
        let push_token = |out: &mut Assembled, id: TokenId, target: bool| {
            out.slots.push(Slot::Token(id));
            out.labels.push(id);
            out.loss_mask.push(target);
        };
        for segment in &sample.segments {
            match segment {
                Segment::Text(text) => {
                    for id in self.tokenizer.encode(text) {
                        push_token(&mut out, id, false);
                    }
                }
                Segment::Audio(r) => {
                    let clip = store.resolve(r)?;
                    if clip.duration() > sample.max_audio_seconds + 1e-9 {
                        return Err(Error::DataContract {
                            sample: r.label(),
                            reason: format!(
                                "audio is {:.3} s, over the {} s cap",
                                clip.duration(),
                                sample.max_audio_seconds
                            ),
                        });
                    }
                    let features = self.pipeline.features(&clip)?;
                    let index = out.audio.len();
                    push_token(&mut out, AUDIO_START, false);
                    for row in 0..features.len() * self.pipeline.tokens_per_chunk() {
                        out.slots.push(Slot::Audio { segment: index, row });
                        out.labels.push(PAD);
                        out.loss_mask.push(false);
                    }
                    push_token(&mut out, AUDIO_END, false);
                    out.audio.push(features);
                }
            }
        }
        if with_target {
            if out.slots.is_empty() {
                push_token(&mut out, BOS, false);
            }
            for id in self.tokenizer.encode(&sample.target_text) {
                push_token(&mut out, id, true);
            }
            push_token(&mut out, EOS, true);
        } else if out.slots.is_empty() {
            push_token(&mut out, BOS, false);
        }
        let limit = self.cfg.decoder.max_positions;
        if out.len() > limit {
            return Err(Error::ContextOverflow { len: out.len(), limit });
        }
        Ok(out)
    }

    /// Training layout: inputs followed by target text and EOS.
    pub fn assemble(&self, sample: &InterleavedSample, store: &AudioStore) -> Result<Assembled> {
        self.assemble_inner(sample, store, true)
    }

    /// Generation layout: inputs only.
    pub fn assemble_prompt(&self, sample: &InterleavedSample, store: &AudioStore) -> Result<Assembled> {
        self.assemble_inner(sample, store, false)
    }

    fn audio_forward(&self, ps: &ParamSet, a: &Assembled) -> Result<(Vec<Array2<f64>>, Vec<Vec<ChunkCache>>)> {
        let mut blocks = Vec::with_capacity(a.audio.len());
        let mut caches = Vec::with_capacity(a.audio.len());
        for chunks in &a.audio {
            let (tokens, cache) = self.pipeline.forward_features(ps, chunks)?;
            blocks.push(tokens);
            caches.push(cache);
        }
        Ok((blocks, caches))
    }

    /// Audio embedding blocks for every audio segment.
    pub fn audio_embeddings(&self, ps: &ParamSet, a: &Assembled) -> Result<Vec<Array2<f64>>> {
        a.audio
            .iter()
            .map(|chunks| {
                let parts: Vec<Array2<f64>> =
                    chunks.iter().map(|f| self.pipeline.forward_chunk(ps, f).map(|(t, _)| t)).collect::<Result<_>>()?;
                let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
                Ok(ndarray::concatenate(Axis(0), &views).expect("uniform width"))
            })
            .collect()
    }

    /// Logits at every position.
    pub fn logits(&self, ps: &ParamSet, a: &Assembled) -> Result<Array2<f64>> {
        let audio = self.audio_embeddings(ps, a)?;
        let x = self.decoder.embed(ps, &a.slots, &audio)?;
        let rows: Vec<usize> = (0..a.len()).collect();
        Ok(self.decoder.forward(ps, x, &rows).0)
    }

    /// Summed target cross-entropy of one sample, and the number of target
    /// positions.
    pub fn loss_sum(&self, ps: &ParamSet, a: &Assembled) -> Result<(f64, usize)> {
        let (rows, targets) = a.predicting_rows();
        if rows.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let audio = self.audio_embeddings(ps, a)?;
        let x = self.decoder.embed(ps, &a.slots, &audio)?;
        let (logits, _) = self.decoder.forward(ps, x, &rows);
        let (sum, _) = cross_entropy(logits.view(), &targets);
        Ok((sum, rows.len()))
    }

    /// Mean cross-entropy over every target position of the batch.
    pub fn lm_loss(&self, ps: &ParamSet, batch: &[Assembled]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut total = 0.0;
        let mut count = 0;
        for a in batch {
            let (sum, n) = self.loss_sum(ps, a)?;
            total += sum;
            count += n;
        }
        Ok(total / count as f64)
    }

    /// Adds `scale ×` the gradient of the summed target loss into `g` and
    /// returns the unscaled summed loss with its position count. Backward
    /// work for frozen parts is skipped where nothing upstream needs it.
    pub fn accumulate_grad(
        &self,
        ps: &ParamSet,
        a: &Assembled,
        scale: f64,
        trainable: Trainable,
        g: &mut Grads,
    ) -> Result<(f64, usize)> {
        let (rows, targets) = a.predicting_rows();
        if rows.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let (audio, caches) = self.audio_forward(ps, a)?;
        let x = self.decoder.embed(ps, &a.slots, &audio)?;
        let (logits, cache) = self.decoder.forward(ps, x, &rows);
        let (sum, mut dlogits) = cross_entropy(logits.view(), &targets);
        if !sum.is_finite() {
            return Ok((sum, rows.len()));
        }
        let needs_audio = trainable.encoder || trainable.connector;
        if !trainable.lm && !needs_audio {
            return Ok((sum, rows.len()));
        }
        dlogits *= scale;
        let dx = self.decoder.backward(ps, g, &cache, dlogits.view());
        let d_audio = self.decoder.embed_backward(g, &a.slots, &audio, dx.view());
        if needs_audio {
            for ((chunks, cache), d) in a.audio.iter().zip(&caches).zip(&d_audio) {
                debug_assert_eq!(chunks.len(), cache.len());
                self.pipeline.backward_features(ps, g, cache, d.view(), trainable.encoder);
            }
        }
        Ok((sum, rows.len()))
    }

    /// Greedy decoding at temperature 0, softmax sampling otherwise.
    pub fn generate(
        &self,
        ps: &ParamSet,
        sample: &InterleavedSample,
        store: &AudioStore,
        max_new_tokens: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<String> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidInput(format!("temperature must be finite and ≥ 0, got {temperature}")));
        }
        let prompt = self.assemble_prompt(sample, store)?;
        let ids = self.generate_ids(ps, &prompt, max_new_tokens, temperature, seed)?;
        Ok(self.tokenizer.decode(&ids))
    }

    /// Token ids produced after `prompt`, excluding the final EOS.
    pub fn generate_ids(
        &self,
        ps: &ParamSet,
        prompt: &Assembled,
        max_new_tokens: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<TokenId>> {
        let audio = self.audio_embeddings(ps, prompt)?;
        let mut slots = prompt.slots.clone();
        let mut out = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..max_new_tokens {
            let x = self.decoder.embed(ps, &slots, &audio)?;
            let last = slots.len() - 1;
            let (logits, _) = self.decoder.forward(ps, x, &[last]);
            let row = logits.row(0);
            let next = if temperature == 0.0 {
                argmax(row.iter().copied())
            } else {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let weights: Vec<f64> = row.iter().map(|&v| ((v - max) / temperature).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut pick = VOCAB_SIZE - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                pick
            } as TokenId;
            if next == EOS {
                break;
            }
            out.push(next);
            slots.push(Slot::Token(next));
        }
        Ok(out)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
