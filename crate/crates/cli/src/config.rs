//! Run configuration: a TOML file whose keys all have defaults, overridden by
//! command-line flags.

use std::path::{Path, PathBuf};

use audiolm::fusion::FusionConfig;
use audiolm::synth::TaskFamily;
use audiolm::train::{CurriculumPlan, PlanScale};
use audiolm::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct CurriculumSection {
    pub step_factor: Option<f64>,
    pub batch: Option<usize>,
    pub uniform_batch: Option<bool>,
    pub base_lr: Option<f64>,
    pub short_seconds: Option<f64>,
    pub long_seconds: Option<f64>,
    pub mcq_fraction: Option<f64>,
}


#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub last_hidden_only: bool,
    pub combined_finetuning: bool,
    pub instruct_extra_stage: bool,
    pub instruct_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Task family names with a multiple-choice attribute.
    pub tasks: Vec<String>,
    pub items: usize,
    pub n_choices: usize,
    /// Seed of the benchmark streams; defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { tasks: vec!["pitch_id".into(), "structure_long".into()], items: 200, n_choices: 4, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Required before the full-size `paper` profile will train.
    pub acknowledge_scale: bool,
    pub workers: Option<usize>,
    /// Encoder taps; defaults to the profile's.
    pub taps: Option<Vec<usize>>,
    pub curriculum: CurriculumSection,
    pub ablation: AblationSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Toy,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            acknowledge_scale: false,
            workers: None,
            taps: None,
            curriculum: CurriculumSection::default(),
            ablation: AblationSection::default(),
            bench: BenchSection::default(),
        }
    }
}

/// Default number of instruct-stage steps at full scale.
pub const INSTRUCT_STEPS: usize = 500;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn scale(&self) -> PlanScale {
        let base = match self.profile {
            Profile::Paper => PlanScale::paper(),
            Profile::Toy => PlanScale::toy(),
        };
        let c = &self.curriculum;
        PlanScale {
            step_factor: c.step_factor.unwrap_or(base.step_factor),
            batch: c.batch.unwrap_or(base.batch),
            uniform_batch: c.uniform_batch.unwrap_or(base.uniform_batch),
            short_seconds: c.short_seconds.unwrap_or(base.short_seconds),
            long_seconds: c.long_seconds.unwrap_or(base.long_seconds),
            base_lr: c.base_lr.unwrap_or(base.base_lr),
            mcq_fraction: c.mcq_fraction.unwrap_or(base.mcq_fraction),
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let mut m = match self.profile {
            Profile::Paper => ModelConfig::paper(),
            Profile::Toy => ModelConfig::toy(),
        };
        if let Some(taps) = &self.taps {
            m.fusion = FusionConfig { tap_indices: taps.clone() };
        }
        if self.ablation.last_hidden_only {
            m.fusion = FusionConfig::last_hidden(m.encoder.num_layers);
        }
        m.frontend.max_seconds = m.frontend.max_seconds.max(self.scale().long_seconds);
        m.validate()?;
        Ok(m)
    }

    pub fn plan(&self) -> Result<CurriculumPlan> {
        let scale = self.scale();
        let mut plan = CurriculumPlan::scaled(&scale);
        if self.ablation.combined_finetuning {
            plan = plan.with_combined_finetuning()?;
        }
        if self.ablation.instruct_extra_stage {
            let steps = self
                .ablation
                .instruct_steps
                .unwrap_or(((INSTRUCT_STEPS as f64 * scale.step_factor).round() as usize).max(1));
            plan = plan.with_instruct_stage(steps);
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn bench_families(&self) -> Result<Vec<TaskFamily>> {
        self.bench
            .tasks
            .iter()
            .map(|t| {
                let f = TaskFamily::from_name(t)?;
                if f.mcq_attribute().is_none() {
                    return Err(Error::Config(format!("{t} has no multiple-choice attribute")));
                }
                Ok(f)
            })
            .collect()
    }

    pub fn bench_seed(&self) -> u64 {
        self.bench.seed.unwrap_or(self.seed)
    }

    /// Full validation; runs before any work is done.
    pub fn validate(&self) -> Result<()> {
        self.model()?;
        self.plan()?;
        self.bench_families()?;
        if self.bench.items == 0 || self.bench.n_choices < 2 {
            return Err(Error::Config("bench needs items > 0 and n_choices ≥ 2".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }

    pub fn set_ablation(&mut self, name: &str) -> Result<()> {
        match name {
            "last_hidden_only" => self.ablation.last_hidden_only = true,
            "combined_finetuning" => self.ablation.combined_finetuning = true,
            "instruct_extra_stage" => self.ablation.instruct_extra_stage = true,
            other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(())
    }
}
