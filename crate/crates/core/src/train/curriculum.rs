//! Stage definitions, the staged plan, synthetic data sources and the loop
//! that runs them.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::optimizer::{clip_tunable, cosine_lr, Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::eval::mcq_prompt;
use crate::lm::{AudioRef, AudioStore, InterleavedSample, Segment};
use crate::model::{Assembled, AudioLm, Trainable};
use crate::params::{Grads, ModuleGroup, ParamSet};
use crate::synth::{mix, TaskCatalog, TaskFamily};

pub const WARMUP: &str = "warmup";
pub const ALIGN1: &str = "align1";
pub const ALIGN2: &str = "align2";
pub const CONTEXT_EXTEND: &str = "context_extend";
pub const FINETUNE_SHORT: &str = "finetune_short";
pub const FINETUNE_LONG: &str = "finetune_long";
pub const FINETUNE_COMBINED: &str = "finetune_combined";
pub const INSTRUCT: &str = "instruct";

/// Canonical position of each stage name; plans must be strictly increasing.
fn stage_rank(name: &str) -> Option<usize> {
    Some(match name {
        WARMUP => 0,
        ALIGN1 => 1,
        ALIGN2 => 2,
        CONTEXT_EXTEND => 3,
        FINETUNE_SHORT => 4,
        FINETUNE_LONG | FINETUNE_COMBINED => 5,
        INSTRUCT => 6,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub steps: usize,
    pub batch_size: usize,
    pub tunable_modules: Vec<ModuleGroup>,
    /// `(task family, weight)`; weights sum to 1.
    pub task_mix: Vec<(String, f64)>,
    pub max_audio_seconds: f64,
    /// Share of classification samples posed as lettered multiple choice.
    pub mcq_fraction: f64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("stage {}: {msg}", self.name)));
        if stage_rank(&self.name).is_none() {
            return bad("unknown stage name".into());
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if self.tunable_modules.is_empty() {
            return bad("no tunable modules".into());
        }
        if self.name == WARMUP && self.tunable_modules != [ModuleGroup::FusionConnector] {
            return bad("warmup may tune only the fusion connector".into());
        }
        if self.task_mix.is_empty() {
            return bad("empty task mix".into());
        }
        for (task, w) in &self.task_mix {
            TaskFamily::from_name(task)?;
            if !(*w > 0.0) {
                return bad(format!("task {task} has non-positive weight {w}"));
            }
        }
        let total: f64 = self.task_mix.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("task weights sum to {total}"));
        }
        if !(self.max_audio_seconds > 0.0) {
            return bad("max_audio_seconds must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mcq_fraction) {
            return bad("mcq_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn trainable(&self) -> Trainable {
        Trainable::from_groups(&self.tunable_modules)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub stages: Vec<StageConfig>,
    pub base_lr: f64,
    pub max_grad_norm: f64,
}

/// Reference step counts and batch sizes, in stage order.
pub const PAPER_STEPS: [usize; 6] = [400, 2500, 3500, 540, 1000, 700];
pub const PAPER_BATCHES: [usize; 6] = [384, 384, 384, 144, 384, 144];
pub const PAPER_LR: f64 = 2e-5;
pub const PAPER_SHORT_SECONDS: f64 = 30.0;
pub const PAPER_LONG_SECONDS: f64 = 390.0;

fn mix_of(pairs: &[(&str, f64)]) -> Vec<(String, f64)> {
    pairs.iter().map(|&(t, w)| (t.to_string(), w)).collect()
}

fn short_mir() -> Vec<(String, f64)> {
    mix_of(&[("pitch_id", 0.55), ("chord_id", 0.15), ("instrument_id", 0.15), ("tempo_id", 0.15)])
}

/// Share of the long finetuning stage replaying the short finetuning mix.
pub const LONG_REPLAY: f64 = 0.4;

/// Adds `weight` × `mix` into `into`, merging repeated tasks.
fn blend(into: &mut Vec<(String, f64)>, mix: &[(String, f64)], weight: f64) {
    for (t, w) in mix {
        match into.iter_mut().find(|(u, _)| u == t) {
            Some(slot) => slot.1 += w * weight,
            None => into.push((t.clone(), w * weight)),
        }
    }
}

/// Scaling knobs for a desk-sized plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanScale {
    /// Multiplies every reference step count (rounded, at least 1).
    pub step_factor: f64,
    /// Batch size standing in for the reference 384; other batches keep
    /// their ratio to 384 unless `uniform_batch` is set.
    pub batch: usize,
    /// Long-audio stages use `batch` too instead of the reduced ratio.
    pub uniform_batch: bool,
    pub short_seconds: f64,
    pub long_seconds: f64,
    pub base_lr: f64,
    pub mcq_fraction: f64,
}

impl PlanScale {
    pub fn paper() -> Self {
        Self {
            step_factor: 1.0,
            batch: 384,
            uniform_batch: false,
            short_seconds: PAPER_SHORT_SECONDS,
            long_seconds: PAPER_LONG_SECONDS,
            base_lr: PAPER_LR,
            mcq_fraction: 0.5,
        }
    }

    pub fn toy() -> Self {
        Self {
            step_factor: 0.15,
            batch: 16,
            uniform_batch: true,
            short_seconds: 30.0,
            long_seconds: 180.0,
            base_lr: 1e-3,
            mcq_fraction: 0.5,
        }
    }
}

impl CurriculumPlan {
    pub fn paper() -> Self {
        Self::scaled(&PlanScale::paper())
    }

    pub fn toy() -> Self {
        Self::scaled(&PlanScale::toy())
    }

    pub fn scaled(scale: &PlanScale) -> Self {
        let names = [WARMUP, ALIGN1, ALIGN2, CONTEXT_EXTEND, FINETUNE_SHORT, FINETUNE_LONG];
        let transcription = mix_of(&[("symbol_transcription", 0.5), ("score_transcription", 0.5)]);
        let mixes = [
            transcription.clone(),
            transcription.clone(),
            mix_of(&[
                ("symbol_transcription", 0.3),
                ("score_transcription", 0.2),
                ("pitch_id", 0.3),
                ("instrument_id", 0.2),
            ]),
            {
                let mut m = mix_of(&[("structure_long", 0.5)]);
                blend(&mut m, &transcription, 0.5);
                m
            },
            short_mir(),
            {
                let mut m = mix_of(&[("structure_long", 1.0 - LONG_REPLAY)]);
                blend(&mut m, &short_mir(), LONG_REPLAY);
                m
            },
        ];
        let all = ModuleGroup::ALL.to_vec();
        let stages = (0..6)
            .map(|i| {
                let long = PAPER_BATCHES[i] != 384;
                let fine = i >= 4;
                StageConfig {
                    name: names[i].to_string(),
                    steps: ((PAPER_STEPS[i] as f64 * scale.step_factor).round() as usize).max(1),
                    batch_size: if scale.uniform_batch {
                        scale.batch.max(1)
                    } else {
                        ((scale.batch * PAPER_BATCHES[i]) as f64 / 384.0).round().max(1.0) as usize
                    },
                    tunable_modules: if i == 0 { vec![ModuleGroup::FusionConnector] } else { all.clone() },
                    task_mix: mixes[i].clone(),
                    max_audio_seconds: if long { scale.long_seconds } else { scale.short_seconds },
                    mcq_fraction: if fine { scale.mcq_fraction } else { 0.0 },
                }
            })
            .collect();
        Self { stages, base_lr: scale.base_lr, max_grad_norm: 1.0 }
    }

    /// Replaces the two finetuning stages with a single stage over the union
    /// of their data, for the same total number of steps.
    pub fn with_combined_finetuning(mut self) -> Result<Self> {
        let short = self.stages.iter().position(|s| s.name == FINETUNE_SHORT);
        let long = self.stages.iter().position(|s| s.name == FINETUNE_LONG);
        let (Some(i), Some(j)) = (short, long) else {
            return Err(Error::Config("combined finetuning needs both finetuning stages".into()));
        };
        let (a, b) = (self.stages[i].clone(), self.stages[j].clone());
        let total = (a.steps + b.steps) as f64;
        let mut task_mix = Vec::new();
        blend(&mut task_mix, &a.task_mix, a.steps as f64 / total);
        blend(&mut task_mix, &b.task_mix, b.steps as f64 / total);
        let merged = StageConfig {
            name: FINETUNE_COMBINED.to_string(),
            steps: a.steps + b.steps,
            batch_size: a.batch_size,
            tunable_modules: a.tunable_modules.clone(),
            task_mix,
            max_audio_seconds: a.max_audio_seconds.max(b.max_audio_seconds),
            mcq_fraction: a.mcq_fraction,
        };
        self.stages.remove(j);
        self.stages[i] = merged;
        Ok(self)
    }

    /// Appends a stage training every classification family in lettered
    /// multiple-choice form.
    pub fn with_instruct_stage(mut self, steps: usize) -> Self {
        let last = self.stages.last().cloned();
        let batch_size = last.as_ref().map_or(16, |s| s.batch_size.max(1));
        let cap = self.stages.iter().map(|s| s.max_audio_seconds).fold(0.0, f64::max);
        self.stages.push(StageConfig {
            name: INSTRUCT.to_string(),
            steps,
            batch_size,
            tunable_modules: ModuleGroup::ALL.to_vec(),
            task_mix: mix_of(&[
                ("pitch_id", 0.2),
                ("chord_id", 0.2),
                ("instrument_id", 0.2),
                ("tempo_id", 0.2),
                ("structure_long", 0.2),
            ]),
            max_audio_seconds: cap,
            mcq_fraction: 1.0,
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("plan has no stages".into()));
        }
        if !(self.base_lr > 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        let mut prev = None;
        for s in &self.stages {
            s.validate()?;
            let rank = stage_rank(&s.name);
            if prev.is_some() && rank <= prev {
                return Err(Error::Config(format!("stage {} is out of order", s.name)));
            }
            prev = rank;
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }
}

/// Supplies the `slot`-th sample of a training step. Implementations must be
/// pure functions of their arguments so that runs replay exactly.
pub trait DataSource: Sync {
    fn sample(&self, stage: &StageConfig, stage_index: usize, step: usize, slot: usize) -> Result<InterleavedSample>;
}

/// Procedural tasks drawn per stage mix.
#[derive(Debug, Clone)]
pub struct SynthSource {
    pub catalog: TaskCatalog,
    pub seed: u64,
}

impl SynthSource {
    pub fn new(catalog: TaskCatalog, seed: u64) -> Self {
        Self { catalog, seed }
    }
}

/// Draws `n - 1` distractors from `space` (excluding `answer`) and shuffles
/// them in with the answer. Returns the choices and the answer position.
pub fn draw_choices<R: Rng>(rng: &mut R, space: &[String], answer: &str, n: usize) -> (Vec<String>, usize) {
    let others: Vec<&String> = space.iter().filter(|l| l.as_str() != answer).collect();
    let mut choices: Vec<String> = others.choose_multiple(rng, n.saturating_sub(1)).map(|s| (*s).clone()).collect();
    choices.push(answer.to_string());
    choices.shuffle(rng);
    let idx = choices.iter().position(|c| c == answer).expect("answer present");
    (choices, idx)
}

impl DataSource for SynthSource {
    fn sample(&self, stage: &StageConfig, stage_index: usize, step: usize, slot: usize) -> Result<InterleavedSample> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix(self.seed, ((stage_index as u64) << 32) | step as u64, slot as u64));
        let mut u = rng.gen::<f64>();
        let mut task = &stage.task_mix[stage.task_mix.len() - 1].0;
        for (t, w) in &stage.task_mix {
            if u < *w {
                task = t;
                break;
            }
            u -= w;
        }
        let family = TaskFamily::from_name(task)?;
        let index = (step * stage.batch_size + slot) as u64;
        let s =
            self.catalog.sample(family, mix(self.seed, stage_index as u64, 0x5eed), index, stage.max_audio_seconds)?;
        let as_mcq = family.mcq_attribute().and_then(|attr| s.labels.get(attr)).is_some_and(|label| *label == s.target)
            && rng.gen::<f64>() < stage.mcq_fraction;
        let prompt = if as_mcq {
            let space = self.catalog.label_space(family);
            let (choices, _) = draw_choices(&mut rng, &space, &s.target, 4);
            mcq_prompt(&s.prompt, &choices)
        } else {
            s.prompt.clone()
        };
        Ok(InterleavedSample::new(
            vec![Segment::Audio(AudioRef::Spec { spec: s.audio_spec }), Segment::Text(prompt)],
            s.target,
            stage.max_audio_seconds,
        ))
    }
}

/// Position within the plan: the next step to run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub stage: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Global optimizer step, starting at 0.
    pub step: u64,
    pub stage: String,
    pub loss: f64,
    pub lr: f64,
}

impl MetricRow {
    pub fn line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.step, self.stage, self.loss, self.lr)
    }
}

/// Everything that evolves during training. Sample order is a function of
/// `seed` and `cursor`, so these two stand in for a random-generator state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub adam: Adam,
    pub seed: u64,
    pub cursor: Cursor,
    pub metrics: Vec<MetricRow>,
}

impl TrainState {
    pub fn new(params: ParamSet, seed: u64) -> Self {
        let adam = Adam::new(&params, AdamConfig::default());
        Self { params, adam, seed, cursor: Cursor::default(), metrics: Vec::new() }
    }
}

pub struct Trainer<'a, D: DataSource> {
    pub model: &'a AudioLm,
    pub plan: &'a CurriculumPlan,
    pub source: &'a D,
    pub store: AudioStore,
    /// Appended with one line per optimizer step.
    pub metrics_log: Option<PathBuf>,
    /// Receives a checkpoint after every completed stage.
    pub checkpoint_dir: Option<PathBuf>,
}

impl<'a, D: DataSource> Trainer<'a, D> {
    pub fn new(model: &'a AudioLm, plan: &'a CurriculumPlan, source: &'a D) -> Result<Self> {
        plan.validate()?;
        let store = AudioStore::new(crate::synth::DEFAULT_SAMPLE_RATE);
        Ok(Self { model, plan, source, store, metrics_log: None, checkpoint_dir: None })
    }

    pub fn with_store(mut self, store: AudioStore) -> Self {
        self.store = store;
        self
    }

    pub fn finished(&self, state: &TrainState) -> bool {
        state.cursor.stage >= self.plan.stages.len()
    }

    fn batch(&self, stage: &StageConfig, cursor: Cursor) -> Result<Vec<Assembled>> {
        (0..stage.batch_size)
            .into_par_iter()
            .map(|slot| {
                let mut sample = self.source.sample(stage, cursor.stage, cursor.step, slot)?;
                sample.max_audio_seconds = stage.max_audio_seconds;
                self.model.assemble(&sample, &self.store)
            })
            .collect()
    }

    /// Runs one optimizer step at the cursor and returns its loss.
    pub fn step(&self, state: &mut TrainState) -> Result<f64> {
        let cursor = state.cursor;
        let Some(stage) = self.plan.stages.get(cursor.stage) else {
            return Err(Error::StageOrder { expected: "end of plan".into(), got: "another step".into() });
        };
        let lr = cosine_lr(self.plan.base_lr, cursor.step, stage.steps);
        let batch = self.batch(stage, cursor)?;
        let total: usize = batch.iter().map(Assembled::target_count).sum();
        let trainable = stage.trainable();
        let scale = 1.0 / total as f64;
        let ps = &state.params;
        let parts: Vec<(f64, Grads)> = batch
            .par_iter()
            .map(|a| {
                let mut g = ps.zeros_like();
                let (sum, _) = self.model.accumulate_grad(ps, a, scale, trainable, &mut g)?;
                Ok((sum, g))
            })
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut grads = ps.zeros_like();
        for (sum, g) in &parts {
            loss += sum;
            grads.add_assign(g);
        }
        loss /= total as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { stage: stage.name.clone(), step: cursor.step, loss });
        }
        clip_tunable(&state.params, &mut grads, &stage.tunable_modules, self.plan.max_grad_norm);
        state.adam.update(&mut state.params, &grads, lr, &stage.tunable_modules);
        let row = MetricRow { step: state.metrics.len() as u64, stage: stage.name.clone(), loss, lr };
        if let Some(path) = &self.metrics_log {
            append_line(path, &row.line())?;
        }
        state.metrics.push(row);
        state.cursor.step += 1;
        if state.cursor.step == stage.steps {
            state.cursor = Cursor { stage: cursor.stage + 1, step: 0 };
        }
        Ok(loss)
    }

    /// Runs up to `n` steps, stopping early at the end of the plan.
    pub fn run_steps(&self, state: &mut TrainState, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.finished(state) {
                break;
            }
            out.push(self.step(state)?);
        }
        Ok(out)
    }

    /// Runs the remainder of stage `stage_index`, which must be the stage at
    /// the cursor.
    pub fn run_stage(&self, state: &mut TrainState, stage_index: usize) -> Result<()> {
        let expected = state.cursor.stage;
        if stage_index != expected {
            let name = |i: usize| self.plan.stages.get(i).map_or("end of plan".to_string(), |s| s.name.clone());
            return Err(Error::StageOrder { expected: name(expected), got: name(stage_index) });
        }
        while state.cursor.stage == stage_index {
            self.step(state)?;
        }
        Ok(())
    }

    /// Runs every remaining stage in order, writing a checkpoint after each.
    /// Calling it again on a state loaded from one of those checkpoints
    /// resumes where it stopped.
    pub fn run_curriculum(&self, state: &mut TrainState) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        while !self.finished(state) {
            let index = state.cursor.stage;
            self.run_stage(state, index)?;
            if let Some(dir) = &self.checkpoint_dir {
                let path = stage_checkpoint_path(dir, index, &self.plan.stages[index].name);
                save_checkpoint(&path, state, &self.model.cfg)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

pub fn stage_checkpoint_path(dir: &Path, index: usize, name: &str) -> PathBuf {
    dir.join(format!("stage{index}-{name}.ckpt"))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
