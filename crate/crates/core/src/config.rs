//! Run configuration files.
//!
//! A config is a TOML document. Top-level keys are `seed` and `out`; the
//! tables are `[model]`, `[routing]`, `[schedule]`, `[workload]`, `[task]`,
//! `[train]`, `[ablation]`, `[probe]` and `[trace]`. Every table is optional
//! and falls back to the toy preset, but unknown keys anywhere are an error.
//! `[schedule]` selects its shape with `kind`:
//!
//! ```toml
//! [schedule]
//! kind = "cosine"      # beta, min_ratio, max_ratio, clamp
//! # kind = "search"    # beta, target: thresholds found by grid search
//! # kind = "linear"    # start, end
//! # kind = "stepped"   # levels
//! # kind = "interleaved" # low
//! # kind = "constant"  # ratio
//! # kind = "dense"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::costmodel::WorkloadSpec;
use crate::harness::{Experiment, HarnessError, SynthTask, TrainConfig};
use crate::model::{ModelConfig, ModelError};
use crate::pmod::{ReweightMode, Routing, DEFAULT_ALPHA};
use crate::schedule::{build_schedule, search_thresholds, RatioSchedule, ScheduleConfig, ScheduleError, ScheduleVariant};

pub const TOY_PRESET: &str = include_str!("../configs/toy.toml");
pub const LLAMA_7B_PRESET: &str = include_str!("../configs/7b.toml");

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingSection {
    pub mode: ReweightMode,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_true() -> bool {
    true
}

fn default_min() -> f64 {
    0.1
}

fn default_max() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSection {
    Cosine {
        beta: f64,
        #[serde(default = "default_min")]
        min_ratio: f64,
        #[serde(default = "default_max")]
        max_ratio: f64,
        #[serde(default = "default_true")]
        clamp: bool,
    },
    Search {
        beta: f64,
        target: f64,
    },
    Linear {
        start: f64,
        end: f64,
    },
    Stepped {
        levels: Vec<f64>,
    },
    Interleaved {
        low: f64,
    },
    Constant {
        ratio: f64,
    },
    Dense,
}

impl ScheduleSection {
    /// Schedule configuration for `n_layers` layers. `search` runs the
    /// threshold search and fails when no pair is within tolerance.
    pub fn resolve(&self, n_layers: usize) -> Result<ScheduleConfig, ConfigError> {
        let plain = |v| ScheduleConfig::with_variant(v, 0.0, 1.0, n_layers);
        Ok(match self {
            ScheduleSection::Cosine {
                beta,
                min_ratio,
                max_ratio,
                clamp,
            } => {
                if *clamp {
                    ScheduleConfig::cosine(*beta, *min_ratio, *max_ratio, n_layers)
                } else {
                    ScheduleConfig::cosine_unclamped(*beta, n_layers)
                }
            }
            ScheduleSection::Search { beta, target } => {
                let found = search_thresholds(*target, *beta, n_layers)?;
                if !found.within_tolerance {
                    return Err(ConfigError::Invalid(format!(
                        "no thresholds reach mean retention {target} (best {})",
                        found.achieved
                    )));
                }
                found.config
            }
            ScheduleSection::Linear { start, end } => plain(ScheduleVariant::Linear {
                start: *start,
                end: *end,
            }),
            ScheduleSection::Stepped { levels } => plain(ScheduleVariant::Stepped { levels: levels.clone() }),
            ScheduleSection::Interleaved { low } => plain(ScheduleVariant::Interleaved { low: *low }),
            ScheduleSection::Constant { ratio } => plain(ScheduleVariant::Constant { ratio: *ratio }),
            ScheduleSection::Dense => plain(ScheduleVariant::Constant { ratio: 1.0 }),
        })
    }
}

/// `[task]`: the synthetic task without its seed, which comes from the
/// top-level seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub n_vision: usize,
    pub n_signal: usize,
    pub n_keys: usize,
    pub n_values: usize,
    pub noise_std: f64,
    pub signal_scale: f64,
    #[serde(default)]
    pub distractor_rate: f64,
}

impl TaskSection {
    pub fn with_seed(&self, seed: u64) -> SynthTask {
        SynthTask {
            n_vision: self.n_vision,
            n_signal: self.n_signal,
            n_keys: self.n_keys,
            n_values: self.n_values,
            noise_std: self.noise_std,
            signal_scale: self.signal_scale,
            distractor_rate: self.distractor_rate,
            seed,
        }
    }
}

impl From<SynthTask> for TaskSection {
    fn from(t: SynthTask) -> Self {
        Self {
            n_vision: t.n_vision,
            n_signal: t.n_signal,
            n_keys: t.n_keys,
            n_values: t.n_values,
            noise_std: t.noise_std,
            signal_scale: t.signal_scale,
            distractor_rate: t.distractor_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Reweight,
    Schedule,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub kind: AblationKind,
    /// Model seeds `seed .. seed + seeds`.
    pub seeds: usize,
    /// Mean retention every schedule arm is tuned to.
    pub schedule_target: f64,
    /// Shift factor of the searched cosine arm.
    pub schedule_beta: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            kind: AblationKind::Both,
            seeds: 1,
            schedule_target: 0.54,
            schedule_beta: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    /// Constant ratio the probed model is trained at.
    pub base_ratio: f64,
    pub ratios: Vec<f64>,
    pub eval_samples: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            base_ratio: 0.7,
            ratios: vec![0.7, 0.5, 0.3, 0.1],
            eval_samples: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    pub samples: usize,
}

impl Default for TraceSection {
    fn default() -> Self {
        Self { samples: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default = "default_routing")]
    pub routing: RoutingSection,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleSection,
    #[serde(default = "default_workload")]
    pub workload: WorkloadSpec,
    #[serde(default = "default_task")]
    pub task: TaskSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub trace: TraceSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_model() -> ModelConfig {
    ModelConfig::TOY
}

fn default_routing() -> RoutingSection {
    RoutingSection {
        mode: ReweightMode::TanhNormSTRing,
        alpha: DEFAULT_ALPHA,
    }
}

fn default_schedule() -> ScheduleSection {
    ScheduleSection::Cosine {
        beta: 0.5,
        min_ratio: 0.1,
        max_ratio: 0.9,
        clamp: true,
    }
}

fn default_workload() -> WorkloadSpec {
    WorkloadSpec {
        n_vision: SynthTask::TOY.n_vision,
        n_text_prompt: 1,
        n_decode: 0,
        bytes_per_element: 2,
    }
}

fn default_task() -> TaskSection {
    SynthTask::TOY.into()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a file, or a shipped preset when `path` is `toy` or `7b`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        match path.to_str() {
            Some("toy") => Self::parse(TOY_PRESET),
            Some("7b") => Self::parse(LLAMA_7B_PRESET),
            _ => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                Self::parse(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        let sched = self.schedule.resolve(self.model.n_layers)?;
        sched.validate()?;
        if !(self.routing.alpha > 0.0) {
            return Err(ConfigError::Invalid(format!("routing.alpha {} must be positive", self.routing.alpha)));
        }
        self.train.validate()?;
        self.task().validate(self.model.d_model, self.model.vocab_size)?;
        if self.ablation.seeds == 0 {
            return Err(ConfigError::Invalid("ablation.seeds must be at least 1".into()));
        }
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.probe.base_ratio) || !self.probe.ratios.iter().all(|&r| unit(r)) {
            return Err(ConfigError::Invalid("probe ratios must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn task(&self) -> SynthTask {
        self.task.with_seed(self.seed)
    }

    pub fn schedule_config(&self) -> Result<ScheduleConfig, ConfigError> {
        self.schedule.resolve(self.model.n_layers)
    }

    pub fn ratio_schedule(&self) -> Result<RatioSchedule, ConfigError> {
        Ok(build_schedule(&self.schedule_config()?)?)
    }

    pub fn routing(&self) -> Result<Routing, ConfigError> {
        let s = self.ratio_schedule()?;
        if s.ratios().iter().any(|&r| r <= 0.0) {
            return Err(ConfigError::Invalid("unclamped schedule has non-positive ratios and cannot route".into()));
        }
        Ok(Routing::from_schedule(&s, self.routing.mode, self.routing.alpha))
    }

    pub fn experiment(&self, seed: u64) -> Experiment {
        Experiment {
            model: self.model,
            task: self.task(),
            train: self.train,
            alpha: self.routing.alpha,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        let toy = RunConfig::parse(TOY_PRESET).unwrap();
        assert_eq!(toy.model, ModelConfig::TOY);
        assert_eq!(toy.task(), SynthTask::TOY);
        let big = RunConfig::parse(LLAMA_7B_PRESET).unwrap();
        assert_eq!(big.model, ModelConfig::LLAMA_7B);
        assert_eq!(big.workload, WorkloadSpec::HIGH_RES);
    }

    #[test]
    fn empty_document_is_the_toy_default() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.model, ModelConfig::TOY);
        assert_eq!(c.schedule, default_schedule());
        assert_eq!(c.out, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            "colour = 1",
            "[model]\nn_layers = 8\nd_model = 64\nn_heads = 4\nd_ff = 128\nvocab_size = 32\nmax_seq = 256\nextra = 1",
            "[schedule]\nkind = \"constant\"\nratio = 0.5\nbeta = 0.2",
            "[schedule]\nkind = \"spiral\"",
            "[train]\nsteps = 1\nbatch_size = 1\nlr = 0.1\noptimizer = \"adam\"\neval_samples = 1\nwarmup = 3",
        ] {
            assert!(matches!(RunConfig::parse(doc), Err(ConfigError::Parse(_))), "{doc}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad = [
            "[schedule]\nkind = \"cosine\"\nbeta = 1.5",
            "[schedule]\nkind = \"constant\"\nratio = 0.0",
            "[routing]\nmode = \"vanilla_mod\"\nalpha = -1.0",
            "[ablation]\nkind = \"both\"\nseeds = 0\nschedule_target = 0.5\nschedule_beta = 0.5",
            "[model]\nn_layers = 8\nd_model = 30\nn_heads = 4\nd_ff = 128\nvocab_size = 32\nmax_seq = 256",
        ];
        for doc in bad {
            assert!(RunConfig::parse(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn schedule_kinds_resolve() {
        let c = RunConfig::parse("[schedule]\nkind = \"search\"\nbeta = 0.5\ntarget = 0.537").unwrap();
        assert!(matches!(c.schedule_config().unwrap().variant, ScheduleVariant::Cosine));
        let c = RunConfig::parse("[schedule]\nkind = \"dense\"").unwrap();
        assert_eq!(c.ratio_schedule().unwrap().ratios(), &[1.0; 8]);
        let c = RunConfig::parse("[schedule]\nkind = \"cosine\"\nbeta = 0.3\nclamp = false").unwrap();
        assert!(c.routing().is_err());
        assert!(RunConfig::parse("[schedule]\nkind = \"search\"\nbeta = 0.5\ntarget = 0.05").is_err());
    }

    #[test]
    fn seed_reaches_the_task() {
        let c = RunConfig::parse("seed = 17").unwrap();
        assert_eq!(c.task().seed, 17);
        assert_eq!(c.experiment(3).seed, 3);
    }
}
