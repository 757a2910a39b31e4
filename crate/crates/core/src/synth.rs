//! Deterministic synthetic audio tasks: procedural audio specs, additive
//! rendering, and one generator per task family.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Default rendering rate for synthetic audio.
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

const PEAK: f64 = 0.9;
const NOTE_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

/// Equal-tempered frequency of a MIDI note (A4 = 69 = 440 Hz).
pub fn midi_to_hz(midi: i32) -> f64 {
    440.0 * 2f64.powf((midi - 69) as f64 / 12.0)
}

/// Scientific pitch notation, e.g. 69 → "A4".
pub fn note_name(midi: i32) -> String {
    format!("{}{}", NOTE_NAMES[midi.rem_euclid(12) as usize], midi.div_euclid(12) - 1)
}

pub fn parse_note(name: &str) -> Option<i32> {
    let split = name.find(|c: char| c.is_ascii_digit() || c == '-')?;
    let (pc, oct) = name.split_at(split);
    let idx = NOTE_NAMES.iter().position(|n| *n == pc)? as i32;
    let octave: i32 = oct.parse().ok()?;
    Some((octave + 1) * 12 + idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Waveform {
    Sine,
    Square,
    Sawtooth,
    Triangle,
}

impl Waveform {
    pub const ALL: [Waveform; 4] = [Waveform::Sine, Waveform::Square, Waveform::Sawtooth, Waveform::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Waveform::Sine => "sine",
            Waveform::Square => "square",
            Waveform::Sawtooth => "sawtooth",
            Waveform::Triangle => "triangle",
        }
    }

    /// Band-limited Fourier series: (harmonic number, relative amplitude).
    fn partials(self, fundamental: f64, nyquist: f64) -> Vec<(f64, f64)> {
        let max_k = (nyquist / fundamental).ceil() as usize;
        let harmonics = (1..max_k.max(2)).map(|k| k as f64).filter(|k| k * fundamental < nyquist);
        match self {
            Waveform::Sine => vec![(1.0, 1.0)],
            Waveform::Square => harmonics.filter(|k| *k as usize % 2 == 1).map(|k| (k, 4.0 / (PI * k))).collect(),
            Waveform::Sawtooth => {
                harmonics.map(|k| (k, if k as usize % 2 == 1 { 2.0 } else { -2.0 } / (PI * k))).collect()
            }
            Waveform::Triangle => harmonics
                .filter(|k| *k as usize % 2 == 1)
                .map(|k| {
                    let sign = if (k as usize / 2).is_multiple_of(2) { 1.0 } else { -1.0 };
                    (k, sign * 8.0 / (PI * PI * k * k))
                })
                .collect(),
        }
    }
}

/// One sounding event: a set of simultaneous fundamentals sharing a timbre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneEvent {
    pub onset: f64,
    pub offset: f64,
    pub freqs: Vec<f64>,
    pub waveform: Waveform,
    pub amplitude: f64,
}

/// Procedural description of a clip; rendering is a pure function of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioSpec {
    pub id: String,
    pub duration: f64,
    pub events: Vec<ToneEvent>,
}

/// Additive synthesis of `spec`, peak-normalized to 0.9.
/// Samples between exact re-evaluations of the oscillator phase.
const ANCHOR: usize = 256;

/// Adds `amp · sin(w·i)` to `out[i]`, advancing a unit phasor by rotation and
/// re-anchoring it exactly every [`ANCHOR`] samples.
fn add_sine(out: &mut [f64], w: f64, amp: f64) {
    let (ds, dc) = w.sin_cos();
    for (b, block) in out.chunks_mut(ANCHOR).enumerate() {
        let (mut s, mut c) = (w * (b * ANCHOR) as f64).sin_cos();
        for slot in block {
            *slot += amp * s;
            (s, c) = (s * dc + c * ds, c * dc - s * ds);
        }
    }
}

pub fn render(spec: &AudioSpec, sample_rate: u32) -> Result<AudioClip> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(spec.duration > 0.0) {
        return Err(Error::Spec(format!("{}: duration must be positive", spec.id)));
    }
    for ev in &spec.events {
        if let Some(f) = ev.freqs.iter().find(|&&f| !(f > 0.0) || f >= nyquist) {
            return Err(Error::Spec(format!(
                "{}: frequency {f} Hz is not below the Nyquist limit {nyquist} Hz",
                spec.id
            )));
        }
        if !(ev.onset >= 0.0 && ev.offset > ev.onset && ev.offset <= spec.duration + 1e-9) {
            return Err(Error::Spec(format!("{}: event [{}, {}) lies outside the clip", spec.id, ev.onset, ev.offset)));
        }
    }
    let sr = sample_rate as f64;
    let n = (spec.duration * sr).round() as usize;
    let mut out = vec![0.0; n.max(1)];
    for ev in &spec.events {
        let start = (ev.onset * sr).round() as usize;
        let end = ((ev.offset * sr).round() as usize).min(n);
        let gain = ev.amplitude / ev.freqs.len() as f64;
        for &f in &ev.freqs {
            for (k, a) in ev.waveform.partials(f, nyquist) {
                add_sine(&mut out[start..end], 2.0 * PI * f * k / sr, gain * a);
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = PEAK / peak;
        out.iter_mut().for_each(|v| *v *= scale);
    }
    AudioClip::new(spec.id.clone(), sample_rate, out)
}

/// Task families standing in for the training corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    PitchId,
    ChordId,
    InstrumentId,
    TempoId,
    ScoreTranscription,
    SymbolTranscription,
    StructureLong,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 7] = [
        TaskFamily::PitchId,
        TaskFamily::ChordId,
        TaskFamily::InstrumentId,
        TaskFamily::TempoId,
        TaskFamily::ScoreTranscription,
        TaskFamily::SymbolTranscription,
        TaskFamily::StructureLong,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::PitchId => "pitch_id",
            TaskFamily::ChordId => "chord_id",
            TaskFamily::InstrumentId => "instrument_id",
            TaskFamily::TempoId => "tempo_id",
            TaskFamily::ScoreTranscription => "score_transcription",
            TaskFamily::SymbolTranscription => "symbol_transcription",
            TaskFamily::StructureLong => "structure_long",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name).ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    /// Families covering a task name from the curriculum table.
    pub fn for_curriculum_task(task: &str) -> Vec<TaskFamily> {
        use TaskFamily::*;
        match task {
            "speech transcription" | "lyrics transcription" => vec![SymbolTranscription],
            "music score transcription" => vec![ScoreTranscription],
            "pitch identification" => vec![PitchId],
            "instrument identification" => vec![InstrumentId],
            "various MIR tasks (short)" => vec![PitchId, ChordId, InstrumentId, TempoId],
            "various MIR tasks (song level)" => vec![StructureLong],
            _ => vec![],
        }
    }

    /// Attribute whose value is the answer for multiple-choice items.
    pub fn mcq_attribute(self) -> Option<&'static str> {
        match self {
            TaskFamily::PitchId => Some("pitch"),
            TaskFamily::ChordId => Some("chord"),
            TaskFamily::InstrumentId => Some("instrument"),
            TaskFamily::TempoId => Some("tempo"),
            TaskFamily::StructureLong => Some("section_count"),
            _ => None,
        }
    }

    pub fn question(self) -> &'static str {
        match self {
            TaskFamily::PitchId => "What is the pitch of this note?",
            TaskFamily::ChordId => "Which chord is played?",
            TaskFamily::InstrumentId => "Which waveform timbre is this?",
            TaskFamily::TempoId => "What is the tempo of the click track?",
            TaskFamily::ScoreTranscription => "Transcribe the notes.",
            TaskFamily::SymbolTranscription => "Transcribe the symbols.",
            TaskFamily::StructureLong => "How many sections does this piece have?",
        }
    }
}

pub const PATTERN_QUESTION: &str = "What is the section pattern?";

/// Knobs for the generators. Defaults describe the reference catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogConfig {
    pub sample_rate: u32,
    /// MIDI range (inclusive) for pitch_id labels.
    pub pitch_range: (i32, i32),
    pub tempos: Vec<u32>,
    pub section_seconds: f64,
    pub min_sections: usize,
    pub max_sections: usize,
    /// Longest clip any short family renders.
    pub short_seconds: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            pitch_range: (60, 71),
            tempos: vec![60, 90, 120, 150],
            section_seconds: 30.0,
            min_sections: 3,
            max_sections: 6,
            short_seconds: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub task_name: String,
    pub audio_spec: AudioSpec,
    pub prompt: String,
    pub target: String,
    pub labels: BTreeMap<String, String>,
}

/// Symbol alphabet for the transcription stand-in; each symbol is a dyad.
const SYMBOLS: [(char, f64, f64); 8] = [
    ('a', 300.0, 450.0),
    ('b', 350.0, 700.0),
    ('c', 400.0, 1000.0),
    ('d', 500.0, 625.0),
    ('e', 550.0, 1650.0),
    ('f', 650.0, 975.0),
    ('g', 750.0, 1125.0),
    ('h', 850.0, 1275.0),
];

const SCALE: [i32; 7] = [60, 62, 64, 65, 67, 69, 71];
const CUE_HZ: f64 = 3000.0;
const CUE_SECONDS: f64 = 0.3;

#[derive(Debug, Clone, Default)]
pub struct TaskCatalog {
    pub cfg: CatalogConfig,
}

impl TaskCatalog {
    pub fn new(cfg: CatalogConfig) -> Self {
        Self { cfg }
    }

    /// All labels a classification family can emit, in a fixed order.
    pub fn label_space(&self, family: TaskFamily) -> Vec<String> {
        match family {
            TaskFamily::PitchId => (self.cfg.pitch_range.0..=self.cfg.pitch_range.1).map(note_name).collect(),
            TaskFamily::ChordId => {
                (0..12).flat_map(|pc| ["maj", "min"].map(|q| format!("{}{q}", NOTE_NAMES[pc]))).collect()
            }
            TaskFamily::InstrumentId => Waveform::ALL.iter().map(|w| w.name().to_string()).collect(),
            TaskFamily::TempoId => self.cfg.tempos.iter().map(|b| format!("{b} bpm")).collect(),
            TaskFamily::StructureLong => {
                (self.cfg.min_sections..=self.cfg.max_sections).map(|n| n.to_string()).collect()
            }
            TaskFamily::ScoreTranscription | TaskFamily::SymbolTranscription => vec![],
        }
    }

    /// Generates `n` samples; identical arguments give identical output.
    pub fn generate(&self, task_name: &str, n: usize, seed: u64, duration_cap: f64) -> Result<Vec<TaskSample>> {
        let family = TaskFamily::from_name(task_name)?;
        self.check_cap(family, duration_cap)?;
        (0..n).map(|i| self.sample(family, seed, i as u64, duration_cap)).collect()
    }

    fn check_cap(&self, family: TaskFamily, cap: f64) -> Result<()> {
        let needed = match family {
            TaskFamily::StructureLong => self.cfg.min_sections as f64 * self.cfg.section_seconds,
            TaskFamily::TempoId => 4.0,
            TaskFamily::ScoreTranscription => 6.0,
            TaskFamily::SymbolTranscription => 5.0,
            _ => 3.0,
        };
        if cap < needed {
            return Err(Error::Duration(format!(
                "{} needs at least {needed} s of audio, cap is {cap} s",
                family.name()
            )));
        }
        Ok(())
    }

    /// The `index`-th sample of a seeded stream; independent of other indices.
    pub fn sample(&self, family: TaskFamily, seed: u64, index: u64, cap: f64) -> Result<TaskSample> {
        self.check_cap(family, cap)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, family as u64, index));
        let id = format!("{}-{seed:x}-{index}", family.name());
        let short = self.cfg.short_seconds.min(cap);
        let mut labels = BTreeMap::new();
        let (events, duration, prompt, target) = match family {
            TaskFamily::PitchId => {
                let midi = rng.gen_range(self.cfg.pitch_range.0..=self.cfg.pitch_range.1);
                let wave = *Waveform::ALL.choose(&mut rng).expect("non-empty");
                let onset = rng.gen_range(0.0..0.5);
                let len = rng.gen_range(1.0..2.5f64).min(short - onset);
                let name = note_name(midi);
                labels.insert("pitch".into(), name.clone());
                labels.insert("instrument".into(), wave.name().into());
                let ev = tone(onset, onset + len, vec![midi_to_hz(midi)], wave, rng.gen_range(0.5..1.0));
                (vec![ev], (onset + len).ceil().min(short), family.question().to_string(), name)
            }
            TaskFamily::ChordId => {
                let root = rng.gen_range(60..72);
                let minor = rng.gen_bool(0.5);
                let third = if minor { 3 } else { 4 };
                let freqs = [root, root + third, root + 7].map(midi_to_hz).to_vec();
                let name = format!("{}{}", NOTE_NAMES[(root % 12) as usize], if minor { "min" } else { "maj" });
                labels.insert("chord".into(), name.clone());
                let len = rng.gen_range(1.0..2.5f64).min(short);
                let ev = tone(0.0, len, freqs, Waveform::Sine, rng.gen_range(0.5..1.0));
                (vec![ev], len.ceil(), family.question().to_string(), name)
            }
            TaskFamily::InstrumentId => {
                let wave = *Waveform::ALL.choose(&mut rng).expect("non-empty");
                let midi = rng.gen_range(48..=72);
                labels.insert("instrument".into(), wave.name().into());
                labels.insert("pitch".into(), note_name(midi));
                let len = rng.gen_range(1.0..2.5f64).min(short);
                let ev = tone(0.0, len, vec![midi_to_hz(midi)], wave, rng.gen_range(0.5..1.0));
                (vec![ev], len.ceil(), family.question().to_string(), wave.name().to_string())
            }
            TaskFamily::TempoId => {
                let bpm = *self.cfg.tempos.choose(&mut rng).expect("tempos configured");
                let duration = short.min(8.0);
                let period = 60.0 / bpm as f64;
                let phase = rng.gen_range(0.0..period);
                let events = (0..)
                    .map(|k| phase + k as f64 * period)
                    .take_while(|&t| t + 0.03 <= duration)
                    .map(|t| tone(t, t + 0.03, vec![1000.0], Waveform::Sine, 1.0))
                    .collect();
                let name = format!("{bpm} bpm");
                labels.insert("tempo".into(), name.clone());
                (events, duration, family.question().to_string(), name)
            }
            TaskFamily::ScoreTranscription => {
                let count = rng.gen_range(3..=6);
                let mut t = 0.0;
                let mut names = Vec::with_capacity(count);
                let mut events = Vec::with_capacity(count);
                for _ in 0..count {
                    let midi = *SCALE.choose(&mut rng).expect("non-empty");
                    let len = rng.gen_range(0.4..0.8);
                    events.push(tone(t, t + len, vec![midi_to_hz(midi)], Waveform::Sine, 0.8));
                    names.push(note_name(midi));
                    t += len + 0.1;
                }
                let target = names.join(" ");
                labels.insert("notes".into(), target.clone());
                (events, t.ceil().min(short), family.question().to_string(), target)
            }
            TaskFamily::SymbolTranscription => {
                let count = rng.gen_range(3..=8);
                let mut text = String::with_capacity(count);
                let mut events = Vec::with_capacity(count);
                for k in 0..count {
                    let (c, f1, f2) = *SYMBOLS.choose(&mut rng).expect("non-empty");
                    let t = k as f64 * 0.6;
                    events.push(tone(t, t + 0.5, vec![f1, f2], Waveform::Sine, 0.8));
                    text.push(c);
                }
                labels.insert("symbols".into(), text.clone());
                let duration = (count as f64 * 0.6).ceil().min(short);
                (events, duration, family.question().to_string(), text)
            }
            TaskFamily::StructureLong => {
                let max_fit = ((cap / self.cfg.section_seconds) + 1e-9).floor() as usize;
                let hi = self.cfg.max_sections.min(max_fit);
                let count = rng.gen_range(self.cfg.min_sections..=hi);
                let layout = random_layout(&mut rng, count);
                let (events, duration) = self.structure_events(&mut rng, &layout);
                labels.insert("section_count".into(), count.to_string());
                labels.insert("pattern".into(), layout.clone());
                let (prompt, target) = if rng.gen_bool(0.5) {
                    (family.question().to_string(), count.to_string())
                } else {
                    (PATTERN_QUESTION.to_string(), layout)
                };
                (events, duration, prompt, target)
            }
        };
        let audio_spec = AudioSpec { id, duration, events };
        Ok(TaskSample { task_name: family.name().to_string(), audio_spec, prompt, target, labels })
    }

    /// Structure audio for an explicit layout such as "AABA".
    pub fn structure_spec(&self, id: &str, layout: &str, seed: u64) -> AudioSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (events, duration) = self.structure_events(&mut rng, layout);
        AudioSpec { id: id.to_string(), duration, events }
    }

    fn structure_events(&self, rng: &mut ChaCha8Rng, layout: &str) -> (Vec<ToneEvent>, f64) {
        let sec = self.cfg.section_seconds;
        let mut roots: Vec<i32> = (48..72).collect();
        roots.shuffle(rng);
        let mut events = Vec::new();
        for (k, letter) in layout.chars().enumerate() {
            let slot = (letter as u8 - b'A') as usize;
            let root = roots[slot];
            let t0 = k as f64 * sec;
            events.push(tone(t0, t0 + CUE_SECONDS, vec![CUE_HZ], Waveform::Sine, 1.0));
            let freqs = [root, root + 4, root + 7].map(midi_to_hz).to_vec();
            events.push(tone(t0 + CUE_SECONDS, t0 + sec, freqs, Waveform::Sine, 0.6));
        }
        (events, layout.len() as f64 * sec)
    }
}

fn tone(onset: f64, offset: f64, freqs: Vec<f64>, waveform: Waveform, amplitude: f64) -> ToneEvent {
    ToneEvent { onset, offset, freqs, waveform, amplitude }
}

/// Section layout in first-occurrence order over {A, B, C}.
fn random_layout(rng: &mut ChaCha8Rng, count: usize) -> String {
    let mut out = String::from("A");
    let mut used = 1u8;
    while out.len() < count {
        let choices = (used + 1).min(3);
        let pick = rng.gen_range(0..choices);
        if pick == used {
            used += 1;
        }
        out.push((b'A' + pick) as char);
    }
    out
}

/// SplitMix64-style mixing of seed material into one stream seed.
pub fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
