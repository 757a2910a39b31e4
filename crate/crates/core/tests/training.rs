use std::fs;

use audiolm::lm::{AudioRef, InterleavedSample, Segment};
use audiolm::synth::{AudioSpec, TaskCatalog, ToneEvent, Waveform};
use audiolm::train::checkpoint::{FORMAT_VERSION, MAGIC};
use audiolm::train::{
    load_checkpoint, load_checkpoint_for, read_manifest, save_checkpoint, CurriculumPlan, DataSource, PlanScale,
    StageConfig, SynthSource, TrainState, Trainer,
};
use audiolm::{AudioLm, Error, ModelConfig, ModuleGroup};

fn tiny_plan() -> CurriculumPlan {
    let stage = |name: &str, steps, tunable: Vec<ModuleGroup>, mix: &[(&str, f64)]| StageConfig {
        name: name.into(),
        steps,
        batch_size: 3,
        tunable_modules: tunable,
        task_mix: mix.iter().map(|&(t, w)| (t.to_string(), w)).collect(),
        max_audio_seconds: 10.0,
        mcq_fraction: 0.0,
    };
    let all = ModuleGroup::ALL.to_vec();
    CurriculumPlan {
        stages: vec![
            stage(
                "warmup",
                4,
                vec![ModuleGroup::FusionConnector],
                &[("symbol_transcription", 0.5), ("score_transcription", 0.5)],
            ),
            stage("align1", 5, all.clone(), &[("score_transcription", 1.0)]),
            stage("align2", 6, all, &[("pitch_id", 0.5), ("instrument_id", 0.5)]),
        ],
        base_lr: 1e-3,
        max_grad_norm: 1.0,
    }
}

fn setup(seed: u64) -> (AudioLm, TrainState, SynthSource) {
    let (model, ps) = AudioLm::init(&ModelConfig::tiny(), seed).unwrap();
    (model, TrainState::new(ps, seed), SynthSource::new(TaskCatalog::default(), seed))
}

#[test]
fn warmup_changes_only_the_connector() {
    let (model, mut state, source) = setup(1);
    let plan = tiny_plan();
    let trainer = Trainer::new(&model, &plan, &source).unwrap();
    let before = state.params.clone();
    trainer.run_stage(&mut state, 0).unwrap();
    let mut changed = 0;
    let mut total = 0;
    for (a, b) in before.tensors().iter().zip(state.params.tensors()) {
        match a.group {
            ModuleGroup::FusionConnector => {
                total += a.data.len();
                changed += a.data.iter().zip(&b.data).filter(|(x, y)| x != y).count();
            }
            _ => assert_eq!(a.data, b.data, "{} moved during warmup", a.name),
        }
    }
    assert!(changed as f64 >= 0.99 * total as f64, "{changed}/{total} connector scalars changed");
}

#[test]
fn stages_must_run_in_order() {
    let (model, mut state, source) = setup(1);
    let plan = tiny_plan();
    let trainer = Trainer::new(&model, &plan, &source).unwrap();
    let err = trainer.run_stage(&mut state, 1).unwrap_err();
    assert!(matches!(&err, Error::StageOrder { expected, got } if expected == "warmup" && got == "align1"));
    trainer.run_stage(&mut state, 0).unwrap();
    assert!(trainer.run_stage(&mut state, 0).is_err());
    trainer.run_stage(&mut state, 1).unwrap();
}

#[test]
fn metrics_follow_schedule_and_log_format() {
    let dir = tempfile::tempdir().unwrap();
    let (model, mut state, source) = setup(2);
    let plan = tiny_plan();
    let mut trainer = Trainer::new(&model, &plan, &source).unwrap();
    trainer.metrics_log = Some(dir.path().join("metrics.tsv"));
    trainer.run_steps(&mut state, 6).unwrap();
    assert_eq!(state.metrics[0].lr, 1e-3);
    assert_eq!(state.metrics[4].lr, 1e-3, "second stage restarts the schedule");
    assert!(state.metrics[3].lr < state.metrics[2].lr);
    let log = fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 6);
    for (line, row) in lines.iter().zip(&state.metrics) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 4);
        assert_eq!(cols[0].parse::<u64>().unwrap(), row.step);
        assert_eq!(cols[1], row.stage);
        assert_eq!(cols[2].parse::<f64>().unwrap(), row.loss);
        assert_eq!(cols[3].parse::<f64>().unwrap(), row.lr);
        assert!(row.loss.is_finite());
    }
}

#[test]
fn identical_runs_give_identical_losses() {
    let plan = tiny_plan();
    let run = || {
        let (model, mut state, source) = setup(3);
        let trainer = Trainer::new(&model, &plan, &source).unwrap();
        trainer.run_steps(&mut state, 8).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let plan = tiny_plan();
    let (model, mut state, source) = setup(4);
    let trainer = Trainer::new(&model, &plan, &source).unwrap();
    trainer.run_steps(&mut state, 3).unwrap();
    save_checkpoint(&path, &state, &model.cfg).unwrap();
    let straight = trainer.run_steps(&mut state, 10).unwrap();

    let (skeleton_model, skeleton) = AudioLm::skeleton(&ModelConfig::tiny()).unwrap();
    let mut resumed = load_checkpoint_for(&path, &model.cfg, &skeleton).unwrap();
    let trainer2 = Trainer::new(&skeleton_model, &plan, &source).unwrap();
    let again = trainer2.run_steps(&mut resumed, 10).unwrap();
    assert_eq!(straight, again);
    assert_eq!(state, resumed);
}

#[test]
fn checkpoint_round_trip_restores_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    let plan = tiny_plan();
    let (model, mut state, source) = setup(5);
    Trainer::new(&model, &plan, &source).unwrap().run_steps(&mut state, 5).unwrap();
    save_checkpoint(&path, &state, &model.cfg).unwrap();
    let (loaded, cfg) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, state);
    assert_eq!(cfg, model.cfg);
    assert_eq!(loaded.cursor.stage, 1);
    assert_eq!(loaded.cursor.step, 1);
    let manifest = read_manifest(&path).unwrap();
    assert_eq!(manifest.tensors.len(), ModelConfig::tiny().tensor_count());
    assert_eq!(state.params.num_scalars(), ModelConfig::tiny().param_count());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    let (model, state, _) = setup(6);
    save_checkpoint(&path, &state, &model.cfg).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], MAGIC);

    let truncated = dir.path().join("t.ckpt");
    fs::write(&truncated, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(load_checkpoint(&truncated), Err(Error::Corrupt(_))));

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    let flipped_path = dir.path().join("f.ckpt");
    fs::write(&flipped_path, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&flipped_path), Err(Error::Corrupt(_))));

    let mut versioned = bytes.clone();
    versioned[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let versioned_path = dir.path().join("v.ckpt");
    fs::write(&versioned_path, &versioned).unwrap();
    assert!(matches!(load_checkpoint(&versioned_path), Err(Error::Incompatible(_))));

    let other = ModelConfig { connector_expansion: 3, ..ModelConfig::tiny() };
    let (_, skeleton) = AudioLm::skeleton(&other).unwrap();
    assert!(matches!(load_checkpoint_for(&path, &other, &skeleton), Err(Error::Incompatible(_))));
}

struct LongAudio;

impl DataSource for LongAudio {
    fn sample(&self, _: &StageConfig, _: usize, step: usize, slot: usize) -> audiolm::Result<InterleavedSample> {
        let seconds = if slot == 1 { 12.0 } else { 2.0 };
        let spec = AudioSpec {
            id: format!("clip-{step}-{slot}"),
            duration: seconds,
            events: vec![ToneEvent {
                onset: 0.0,
                offset: 1.0,
                freqs: vec![300.0],
                waveform: Waveform::Sine,
                amplitude: 1.0,
            }],
        };
        Ok(InterleavedSample::new(vec![Segment::Audio(AudioRef::Spec { spec })], "x", 1000.0))
    }
}

#[test]
fn over_cap_sample_is_reported_by_id() {
    let (model, ps) = AudioLm::init(
        &ModelConfig {
            frontend: audiolm::audio::FrontendConfig { max_seconds: 20.0, ..ModelConfig::tiny().frontend },
            ..ModelConfig::tiny()
        },
        0,
    )
    .unwrap();
    let mut state = TrainState::new(ps, 0);
    let plan = tiny_plan();
    let trainer = Trainer::new(&model, &plan, &LongAudio).unwrap();
    let err = trainer.step(&mut state).unwrap_err();
    assert!(matches!(&err, Error::DataContract { sample, .. } if sample == "clip-0-1"), "{err}");
    assert!(state.metrics.is_empty());
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let (model, mut state, source) = setup(7);
    let plan = tiny_plan();
    let trainer = Trainer::new(&model, &plan, &source).unwrap();
    trainer.run_steps(&mut state, 2).unwrap();
    let head = state.params.tensors().iter().position(|t| t.name == "lm.head.weight").unwrap();
    state.params.tensors_mut()[head].data[0] = f64::NAN;
    let err = trainer.step(&mut state).unwrap_err();
    assert!(matches!(&err, Error::Divergence { stage, step: 2, .. } if stage == "warmup"), "{err}");
}

#[test]
fn curriculum_writes_one_checkpoint_per_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = CurriculumPlan::scaled(&PlanScale { step_factor: 1.0 / 50.0, ..PlanScale::toy() });
    assert_eq!(plan.stages.iter().map(|s| s.steps).collect::<Vec<_>>(), [8, 50, 70, 11, 20, 14]);
    assert_eq!(plan.stages.iter().map(|s| s.batch_size).collect::<Vec<_>>(), [16, 16, 16, 16, 16, 16]);
    for s in &mut plan.stages {
        s.steps = 1;
        s.batch_size = 1;
    }
    let combined = plan.clone().with_combined_finetuning().unwrap();
    for (plan, expected) in [(plan, 6), (combined, 5)] {
        let (model, ps) = AudioLm::init(&ModelConfig::toy(), 1).unwrap();
        let mut state = TrainState::new(ps, 1);
        let source = SynthSource::new(TaskCatalog::default(), 1);
        let mut trainer = Trainer::new(&model, &plan, &source).unwrap();
        let sub = dir.path().join(expected.to_string());
        trainer.checkpoint_dir = Some(sub.clone());
        let written = trainer.run_curriculum(&mut state).unwrap();
        assert_eq!(written.len(), expected);
        for (i, (p, s)) in written.iter().zip(&plan.stages).enumerate() {
            assert_eq!(p.file_name().unwrap().to_str().unwrap(), format!("stage{i}-{}.ckpt", s.name));
            assert_eq!(read_manifest(p).unwrap().cursor.stage, i + 1);
        }
        // resuming a finished run does nothing
        let (mut done, _) = load_checkpoint(written.last().unwrap()).unwrap();
        assert!(trainer.run_curriculum(&mut done).unwrap().is_empty());
    }
}

#[test]
fn malformed_plans_are_rejected() {
    let base = CurriculumPlan::toy();
    base.validate().unwrap();
    let mut zero = base.clone();
    zero.stages[2].steps = 0;
    assert!(zero.validate().is_err());
    let mut warm = base.clone();
    warm.stages[0].tunable_modules.push(ModuleGroup::Lm);
    assert!(warm.validate().is_err());
    let mut weights = base.clone();
    weights.stages[4].task_mix[0].1 = 0.5;
    assert!(weights.validate().is_err());
    let mut order = base.clone();
    order.stages.swap(1, 2);
    assert!(order.validate().is_err());
    let mut task = base;
    task.stages[1].task_mix[0].0 = "genre_id".into();
    assert!(matches!(task.validate(), Err(Error::UnknownTask(_))));
}

#[test]
fn paper_plan_reference_values() {
    let plan = CurriculumPlan::paper();
    assert_eq!(plan.stages.iter().map(|s| s.steps).collect::<Vec<_>>(), [400, 2500, 3500, 540, 1000, 700]);
    assert_eq!(plan.stages.iter().map(|s| s.batch_size).collect::<Vec<_>>(), [384, 384, 384, 144, 384, 144]);
    assert_eq!(
        plan.stages.iter().map(|s| s.max_audio_seconds).collect::<Vec<_>>(),
        [30.0, 30.0, 30.0, 390.0, 30.0, 390.0]
    );
    assert_eq!(plan.base_lr, 2e-5);
    assert_eq!(plan.stages[0].tunable_modules, [ModuleGroup::FusionConnector]);
    assert!(plan.stages[1..].iter().all(|s| s.tunable_modules == ModuleGroup::ALL));
}
