//! Audio frontend: waveform container, fixed-window chunking and log
//! filterbank features emitted directly at the encoder frame rate.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView1};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor added to filterbank energies before the logarithm.
pub const LOG_EPSILON: f64 = 1e-10;

/// Smallest FFT used per frame; short hops are zero-padded up to this so the
/// lowest mel bands still cover at least one bin.
const MIN_FFT: usize = 1024;

/// Mono waveform with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub id: String,
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl AudioClip {
    pub fn new(id: impl Into<String>, sample_rate: u32, samples: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if sample_rate == 0 {
            return Err(Error::InvalidInput(format!("clip {id}: sample rate must be positive")));
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput(format!("clip {id} has no samples")));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::InvalidInput(format!("clip {id}: sample {i} = {} is outside [-1, 1]", samples[i])));
        }
        Ok(Self { id, sample_rate, samples })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Reads a mono 16-bit PCM WAV file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::InvalidInput(format!(
                "{}: expected mono 16-bit PCM, got {} channel(s) at {} bits",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(id, spec.sample_rate, samples)
    }

    /// Writes the clip as mono 16-bit PCM with the canonical 44-byte header.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
        for &s in &self.samples {
            writer.write_sample((s * 32767.0).round().clamp(-32768.0, 32767.0) as i16)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    /// Output frames per second.
    pub frame_rate: u32,
    pub num_bands: usize,
    pub chunk_seconds: f64,
    pub max_seconds: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self { frame_rate: 50, num_bands: 64, chunk_seconds: 30.0, max_seconds: 390.0 }
    }
}

fn exact_count(value: f64, what: &str) -> Result<usize> {
    let rounded = value.round();
    if value <= 0.0 || (value - rounded).abs() > 1e-9 * value.max(1.0) {
        return Err(Error::Config(format!("{what} = {value} is not a positive integer")));
    }
    Ok(rounded as usize)
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_rate == 0 || self.num_bands == 0 {
            return Err(Error::Config("frame_rate and num_bands must be positive".into()));
        }
        if !(self.chunk_seconds > 0.0) || !(self.max_seconds > 0.0) {
            return Err(Error::Config("chunk_seconds and max_seconds must be positive".into()));
        }
        self.frames_per_chunk()?;
        Ok(())
    }

    /// T = chunk_seconds × frame_rate.
    pub fn frames_per_chunk(&self) -> Result<usize> {
        exact_count(self.chunk_seconds * self.frame_rate as f64, "chunk_seconds × frame_rate")
    }

    pub fn samples_per_chunk(&self, sample_rate: u32) -> Result<usize> {
        exact_count(self.chunk_seconds * sample_rate as f64, "chunk_seconds × sample_rate")
    }

    pub fn hop(&self, sample_rate: u32) -> Result<usize> {
        if !sample_rate.is_multiple_of(self.frame_rate) {
            return Err(Error::Config(format!(
                "sample rate {sample_rate} is not a multiple of frame rate {}",
                self.frame_rate
            )));
        }
        Ok((sample_rate / self.frame_rate) as usize)
    }

    /// Largest clip length in samples accepted by [`chunk_audio`].
    pub fn max_samples(&self, sample_rate: u32) -> usize {
        (self.max_seconds * sample_rate as f64 + 1e-6).floor() as usize
    }

    /// Number of chunks a clip of `num_samples` is split into.
    pub fn chunk_count(&self, num_samples: usize, sample_rate: u32) -> Result<usize> {
        Ok(num_samples.div_ceil(self.samples_per_chunk(sample_rate)?))
    }
}

/// Log filterbank energies, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrames {
    pub frames: Array2<f64>,
    pub frame_rate: u32,
    pub source_id: String,
}

impl FeatureFrames {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Splits a clip into consecutive non-overlapping windows of
/// `chunk_seconds`, zero-padding the tail of the last one.
pub fn chunk_audio(clip: &AudioClip, cfg: &FrontendConfig) -> Result<Vec<AudioClip>> {
    if clip.is_empty() {
        return Err(Error::InvalidInput(format!("clip {} has no samples", clip.id)));
    }
    if clip.len() > cfg.max_samples(clip.sample_rate) {
        return Err(Error::OverLength { duration: clip.duration(), limit: cfg.max_seconds });
    }
    let chunk_len = cfg.samples_per_chunk(clip.sample_rate)?;
    Ok(clip
        .samples
        .chunks(chunk_len)
        .enumerate()
        .map(|(k, part)| {
            let mut samples = part.to_vec();
            samples.resize(chunk_len, 0.0);
            AudioClip { id: format!("{}#{k}", clip.id), sample_rate: clip.sample_rate, samples }
        })
        .collect())
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the mel-spaced triangular bands spanning
/// 0..Nyquist.
pub fn band_centers(num_bands: usize, sample_rate: u32) -> Vec<f64> {
    band_edges(num_bands, sample_rate)[1..=num_bands].to_vec()
}

fn band_edges(num_bands: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..num_bands + 2).map(|i| mel_to_hz(top * i as f64 / (num_bands + 1) as f64)).collect()
}

/// Non-zero span of one filterbank row.
struct Band {
    start: usize,
    weights: Vec<f64>,
}

impl Band {
    fn from_row(row: ArrayView1<f64>) -> Self {
        let start = row.iter().position(|&w| w != 0.0).unwrap_or(0);
        let end = row.iter().rposition(|&w| w != 0.0).map_or(start, |e| e + 1);
        Self { start, weights: row.slice(s![start..end]).to_vec() }
    }

    fn energy(&self, power: &[f64]) -> f64 {
        self.weights.iter().zip(&power[self.start..]).map(|(w, p)| w * p).sum()
    }
}

/// Triangular filterbank sampled at FFT bin frequencies, peak weight 1.
/// Shape: num_bands × (n_fft / 2 + 1).
fn filterbank(num_bands: usize, sample_rate: u32, n_fft: usize) -> Array2<f64> {
    let edges = band_edges(num_bands, sample_rate);
    let bins = n_fft / 2 + 1;
    let mut fb = Array2::zeros((num_bands, bins));
    for b in 0..num_bands {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[b, k]] = w;
        }
    }
    fb
}

/// Per-(config, sample rate) analysis state: FFT plan, window and filterbank.
pub struct FeatureExtractor {
    cfg: FrontendConfig,
    sample_rate: u32,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bank: Vec<Band>,
    scratch_len: usize,
}

impl FeatureExtractor {
    pub fn new(cfg: &FrontendConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let hop = cfg.hop(sample_rate)?;
        let n_fft = hop.next_power_of_two().max(MIN_FFT);
        let window = (0..hop).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / hop as f64).cos()).collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        let bank = filterbank(cfg.num_bands, sample_rate, n_fft).rows().into_iter().map(Band::from_row).collect();
        let scratch_len = fft.get_inplace_scratch_len();
        Ok(Self { cfg: *cfg, sample_rate, hop, n_fft, window, fft, bank, scratch_len })
    }

    pub fn compute(&self, chunk: &AudioClip) -> Result<FeatureFrames> {
        if chunk.sample_rate != self.sample_rate {
            return Err(Error::InvalidInput(format!(
                "chunk {} has sample rate {}, extractor expects {}",
                chunk.id, chunk.sample_rate, self.sample_rate
            )));
        }
        let expected = self.cfg.samples_per_chunk(self.sample_rate)?;
        if chunk.len() != expected {
            return Err(Error::InvalidInput(format!(
                "chunk {} has {} samples, expected exactly {expected}",
                chunk.id,
                chunk.len()
            )));
        }
        let frames = self.cfg.frames_per_chunk()?;
        let bins = self.n_fft / 2 + 1;
        let mut out = Array2::zeros((frames, self.cfg.num_bands));
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0; bins];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.scratch_len];
        for t in 0..frames {
            let seg = &chunk.samples[t * self.hop..(t + 1) * self.hop];
            for (slot, (x, w)) in buf.iter_mut().zip(seg.iter().zip(&self.window)) {
                *slot = Complex::new(x * w, 0.0);
            }
            for slot in buf[self.hop..].iter_mut() {
                *slot = Complex::new(0.0, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf[..bins]) {
                *p = c.norm_sqr() / self.hop as f64;
            }
            for (b, band) in self.bank.iter().enumerate() {
                out[[t, b]] = (LOG_EPSILON + band.energy(&power)).ln();
            }
        }
        Ok(FeatureFrames { frames: out, frame_rate: self.cfg.frame_rate, source_id: chunk.id.clone() })
    }
}

/// One-shot feature computation; build a [`FeatureExtractor`] when
/// processing many chunks.
pub fn compute_features(chunk: &AudioClip, cfg: &FrontendConfig) -> Result<FeatureFrames> {
    FeatureExtractor::new(cfg, chunk.sample_rate)?.compute(chunk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> FrontendConfig {
        FrontendConfig { frame_rate: 10, num_bands: 32, chunk_seconds: 30.0, max_seconds: 390.0 }
    }

    fn clip_secs(secs: f64, sr: u32) -> AudioClip {
        let n = (secs * sr as f64) as usize;
        let samples = (0..n).map(|i| ((i % 97) as f64 / 97.0) - 0.5).collect();
        AudioClip::new("c", sr, samples).unwrap()
    }

    #[test]
    fn rejects_bad_clips() {
        assert!(AudioClip::new("x", 8000, vec![]).is_err());
        assert!(AudioClip::new("x", 0, vec![0.0]).is_err());
        assert!(AudioClip::new("x", 8000, vec![1.5]).is_err());
        assert!(AudioClip::new("x", 8000, vec![f64::NAN]).is_err());
    }

    #[test]
    fn full_length_clip_gives_thirteen_chunks() {
        let cfg = FrontendConfig::default();
        let chunks = chunk_audio(&clip_secs(390.0, 100), &cfg).unwrap();
        assert_eq!(chunks.len(), 13);
        assert!(chunks.iter().all(|c| c.len() == 3000));
    }

    #[test]
    fn exact_chunk_is_not_padded() {
        let clip = clip_secs(30.0, 100);
        let chunks = chunk_audio(&clip, &FrontendConfig::default()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].samples, clip.samples);
    }

    #[test]
    fn partial_tail_is_zero_padded() {
        let clip = clip_secs(65.0, 100);
        let chunks = chunk_audio(&clip, &FrontendConfig::default()).unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(&chunks[2].samples[..500], &clip.samples[6000..]);
        assert!(chunks[2].samples[500..].iter().all(|&s| s == 0.0));
        assert_eq!(chunks[2].samples.len(), 3000);
    }

    #[test]
    fn over_length_names_limit() {
        let err = chunk_audio(&clip_secs(391.0, 100), &FrontendConfig::default()).unwrap_err();
        assert!(err.to_string().contains("390"), "{err}");
    }

    #[test]
    fn paper_rate_frame_count() {
        let cfg = FrontendConfig::default();
        let chunk = clip_secs(30.0, 8000);
        let f = compute_features(&chunk, &cfg).unwrap();
        assert_eq!(f.frames.dim(), (1500, 64));
        assert!(f.frames.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = toy_cfg();
        let chunk = AudioClip::new("z", 8000, vec![0.0; 240_000]).unwrap();
        let f = compute_features(&chunk, &cfg).unwrap();
        let floor = LOG_EPSILON.ln();
        assert!(f.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn wrong_chunk_length_is_rejected() {
        let chunk = clip_secs(10.0, 8000);
        assert!(matches!(compute_features(&chunk, &toy_cfg()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn hop_must_divide_sample_rate() {
        let cfg = FrontendConfig { frame_rate: 7, ..toy_cfg() };
        assert!(FeatureExtractor::new(&cfg, 8000).is_err());
    }

    #[test]
    fn features_are_deterministic() {
        let cfg = toy_cfg();
        let chunk = clip_secs(30.0, 8000);
        assert_eq!(compute_features(&chunk, &cfg).unwrap(), compute_features(&chunk, &cfg).unwrap());
    }

    #[test]
    fn edits_stay_inside_their_frame() {
        let cfg = toy_cfg();
        let chunk = clip_secs(30.0, 8000);
        let mut edited = chunk.clone();
        // frame 7 covers samples 5600..6400 at 8 kHz / 10 Hz
        for s in &mut edited.samples[5700..6300] {
            *s = 0.25;
        }
        let a = compute_features(&chunk, &cfg).unwrap();
        let b = compute_features(&edited, &cfg).unwrap();
        for t in 0..a.num_frames() {
            let same = a.frames.row(t) == b.frames.row(t);
            assert_eq!(same, t != 7, "frame {t}");
        }
    }

    #[test]
    fn wav_round_trip_uses_44_byte_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let clip = AudioClip::new("tone", 8000, (0..800).map(|i| (i as f64 * 0.05).sin() * 0.5).collect()).unwrap();
        clip.write_wav(&path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 44 + 2 * 800);
        let back = AudioClip::read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 8000);
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
    }
}
