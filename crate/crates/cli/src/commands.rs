//! The subcommands, as library functions returning structured results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use audiolm::eval::{
    bar_chart, evaluate, read_items, read_report, synth_benchmark, write_items, write_report, EvalReport, LmAdapter,
    MCQItem, ModelAdapter, OracleAdapter, RandomAdapter,
};
use audiolm::lm::AudioStore;
use audiolm::synth::{TaskCatalog, DEFAULT_SAMPLE_RATE};
use audiolm::train::{
    load_checkpoint, load_checkpoint_for, read_manifest, stage_checkpoint_path, SynthSource, TrainState, Trainer,
};
use audiolm::{AudioLm, Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

use crate::config::{Profile, RunConfig};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const METRICS_LOG: &str = "metrics.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub steps_run: usize,
    pub final_loss: Option<f64>,
}

/// Latest stage checkpoint in `dir`, if any.
fn latest_checkpoint(dir: &Path, cfg: &RunConfig) -> Result<Option<PathBuf>> {
    let plan = cfg.plan()?;
    Ok((0..plan.stages.len()).rev().map(|i| stage_checkpoint_path(dir, i, &plan.stages[i].name)).find(|p| p.exists()))
}

/// Runs the curriculum into `out`. A directory holding a run with the same
/// resolved configuration resumes from its latest stage checkpoint; one with
/// a different configuration is refused.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.profile == Profile::Paper && !cfg.acknowledge_scale {
        return Err(Error::Config(
            "profile \"paper\" needs acknowledge_scale = true (or --acknowledge-scale) to train".into(),
        ));
    }
    let model_cfg = cfg.model()?;
    let plan = cfg.plan()?;
    let snapshot = cfg.to_toml();
    let snapshot_path = out.join(RESOLVED_CONFIG);
    if snapshot_path.exists() {
        let existing = fs::read_to_string(&snapshot_path).map_err(io_err(&snapshot_path))?;
        if existing != snapshot {
            return Err(Error::Incompatible(format!("{} holds a run with a different configuration", out.display())));
        }
    } else {
        write(&snapshot_path, &snapshot)?;
    }
    let (model, params) = AudioLm::init(&model_cfg, cfg.seed)?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let mut state = match latest_checkpoint(&ckpt_dir, cfg)? {
        Some(p) => load_checkpoint_for(&p, &model_cfg, &params)?,
        None => {
            let log = out.join(METRICS_LOG);
            if log.exists() {
                fs::remove_file(&log).map_err(io_err(&log))?;
            }
            TrainState::new(params, cfg.seed)
        }
    };
    let already = state.metrics.len();
    let source = SynthSource::new(TaskCatalog::default(), cfg.seed);
    let mut trainer = Trainer::new(&model, &plan, &source)?;
    trainer.metrics_log = Some(out.join(METRICS_LOG));
    trainer.checkpoint_dir = Some(ckpt_dir.clone());
    trainer.run_curriculum(&mut state)?;
    let checkpoints: Vec<PathBuf> =
        (0..plan.stages.len()).map(|i| stage_checkpoint_path(&ckpt_dir, i, &plan.stages[i].name)).collect();
    Ok(TrainOutcome {
        final_checkpoint: checkpoints.last().cloned().expect("non-empty plan"),
        checkpoints,
        steps_run: state.metrics.len() - already,
        final_loss: state.metrics.last().map(|r| r.loss),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchDataset {
    pub name: String,
    pub file: PathBuf,
    pub items: usize,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub seed: u64,
    pub datasets: Vec<BenchDataset>,
}

pub fn build_bench_items(cfg: &RunConfig) -> Result<Vec<(String, Vec<MCQItem>)>> {
    let catalog = TaskCatalog::default();
    let long = cfg.scale().long_seconds;
    cfg.bench_families()?
        .into_iter()
        .map(|f| {
            let items = synth_benchmark(&catalog, f, cfg.bench.items, cfg.bench_seed(), long, cfg.bench.n_choices)?;
            Ok((audiolm::eval::dataset_name(f).to_string(), items))
        })
        .collect()
}

/// Writes one JSONL file per dataset plus `summary.json`.
pub fn cmd_build_bench(cfg: &RunConfig, out: &Path) -> Result<BenchSummary> {
    cfg.validate()?;
    let mut datasets = Vec::new();
    for (name, items) in build_bench_items(cfg)? {
        let file = out.join(format!("{name}.jsonl"));
        write_items(&file, &items)?;
        let mut labels: Vec<String> = items.iter().map(|it| it.choices[it.answer_index].clone()).collect();
        labels.sort();
        labels.dedup();
        datasets.push(BenchDataset { name, file, items: items.len(), labels });
    }
    let summary = BenchSummary { seed: cfg.bench_seed(), datasets };
    write(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Model,
    Oracle,
    Random(u64),
}

pub fn load_bench(files: &[PathBuf]) -> Result<Vec<MCQItem>> {
    let mut items = Vec::new();
    for f in files {
        items.extend(read_items(f)?);
    }
    Ok(items)
}

/// Evaluates a checkpoint (or a reference adapter) on benchmark files and
/// writes the report into `out`.
pub fn cmd_eval(
    checkpoint: Option<&Path>,
    expected: Option<&ModelConfig>,
    benches: &[PathBuf],
    adapter: AdapterKind,
    out: &Path,
) -> Result<EvalReport> {
    let items = load_bench(benches)?;
    let report = match adapter {
        AdapterKind::Oracle => evaluate(&OracleAdapter::new(&items), &items)?,
        AdapterKind::Random(seed) => evaluate(&RandomAdapter { seed }, &items)?,
        AdapterKind::Model => {
            let path = checkpoint.ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
            let (state, model_cfg) = load_checkpoint(path)?;
            if let Some(exp) = expected {
                if exp != &model_cfg {
                    return Err(Error::Incompatible(format!(
                        "checkpoint {} does not match the configured model",
                        path.display()
                    )));
                }
            }
            let (model, skeleton) = AudioLm::skeleton(&model_cfg)?;
            if !state.params.same_layout(&skeleton) {
                return Err(Error::Incompatible(format!("checkpoint {} has an unexpected layout", path.display())));
            }
            let adapter = LmAdapter::new(&model, &state.params, AudioStore::new(DEFAULT_SAMPLE_RATE));
            evaluate(&adapter as &dyn ModelAdapter, &items)?
        }
    };
    write_report(out, &report, true)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub macro_average: f64,
    pub datasets: BTreeMap<String, f64>,
    pub items_per_dataset: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    /// Macro-average deltas observed at full scale, shown for context only.
    pub reference_deltas: BTreeMap<String, f64>,
}

pub const ABLATION_VARIANTS: [&str; 3] = ["base", "last_hidden_only", "combined_finetuning"];

impl AblationReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<22} {:>9} {:>9} {:>14}\n", "variant", "average", "delta", "reference delta");
        let base = self.rows.first().map_or(0.0, |r| r.macro_average);
        for r in &self.rows {
            let reference = self.reference_deltas.get(&r.variant).map_or("-".to_string(), |d| format!("{d:+.3}"));
            out.push_str(&format!(
                "{:<22} {:>9.3} {:>+9.3} {:>14}\n",
                r.variant,
                r.macro_average,
                r.macro_average - base,
                reference
            ));
        }
        out
    }

    pub fn chart(&self) -> String {
        let bars: Vec<(&str, f64)> = self.rows.iter().map(|r| (r.variant.as_str(), r.macro_average)).collect();
        bar_chart("ablation: macro average", &bars)
    }
}

/// Trains and evaluates the base configuration and each ablated variant on
/// the same benchmark. Variant runs live in `out/<variant>` and resume like
/// `train`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    let bench_dir = out.join("bench");
    let summary = cmd_build_bench(cfg, &bench_dir)?;
    let files: Vec<PathBuf> = summary.datasets.iter().map(|d| d.file.clone()).collect();
    let mut rows = Vec::new();
    for variant in ABLATION_VARIANTS {
        let mut vcfg = cfg.clone();
        vcfg.ablation = Default::default();
        if variant != "base" {
            vcfg.set_ablation(variant)?;
        }
        let dir = out.join(variant);
        let trained = cmd_train(&vcfg, &dir)?;
        let report = cmd_eval(
            Some(&trained.final_checkpoint),
            Some(&vcfg.model()?),
            &files,
            AdapterKind::Model,
            &dir.join("eval"),
        )?;
        rows.push(AblationRow {
            variant: variant.to_string(),
            macro_average: report.macro_average,
            datasets: report.datasets.iter().map(|(k, d)| (k.clone(), d.accuracy)).collect(),
            items_per_dataset: report.datasets.iter().map(|(k, d)| (k.clone(), d.total)).collect(),
        });
    }
    let reference_deltas =
        BTreeMap::from([("last_hidden_only".to_string(), -1.250), ("combined_finetuning".to_string(), -0.143)]);
    let report = AblationReport { seed: cfg.seed, rows, reference_deltas };
    write_ablation(out, &report)?;
    Ok(report)
}

fn write_ablation(out: &Path, report: &AblationReport) -> Result<()> {
    write(&out.join("ablation.json"), &serde_json::to_string_pretty(report)?)?;
    write(&out.join("ablation.txt"), &report.table())?;
    write(&out.join("ablation.svg"), &report.chart())
}

/// Re-renders tables and charts from a stored evaluation or ablation report.
pub fn cmd_report(input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    if let Ok(report) = read_report(input) {
        return write_report(out, &report, true);
    }
    let text = fs::read_to_string(input).map_err(io_err(input))?;
    let ablation: AblationReport = serde_json::from_str(&text).map_err(|e| {
        Error::InvalidInput(format!("{} is neither an evaluation nor an ablation report: {e}", input.display()))
    })?;
    write_ablation(out, &ablation)?;
    Ok(["ablation.json", "ablation.txt", "ablation.svg"].iter().map(|f| out.join(f)).collect())
}

/// Model configuration recorded in a checkpoint.
pub fn checkpoint_model(path: &Path) -> Result<ModelConfig> {
    Ok(read_manifest(path)?.model)
}
