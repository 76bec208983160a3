//! Experiment configuration: one JSON file per run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unforge::applications::DefenseConfig;
use unforge::baselines::{Method, MethodParams};
use unforge::condense::{CondenseMethod, FdmConfig, InversionConfig};
use unforge::data::{DatasetName, ForgetSpec, SyntheticConfig};
use unforge::metrics::{RbeNormalization, ShadowConfig, GRADIENT_CAP};
use unforge::modular::{ModularSchedule, OnlineSchedule};
use unforge::nnkit::HeadArch;
use unforge::{ArchId, ArchSpec, TrainConfig};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const CACHE_ENV: &str = "UNFORGE_CACHE";
pub const OUTPUT_ENV: &str = "UNFORGE_OUTPUT";

/// A method of a run: the modular scheme or one of the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RunMethod {
    Mu,
    Baseline(Method),
}

impl RunMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMethod::Mu => "MU",
            RunMethod::Baseline(m) => m.as_str(),
        }
    }
}

impl fmt::Display for RunMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("MU") {
            return Ok(RunMethod::Mu);
        }
        s.parse::<Method>().map(RunMethod::Baseline).map_err(|e| e.to_string())
    }
}

impl TryFrom<String> for RunMethod {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<RunMethod> for String {
    fn from(m: RunMethod) -> String {
        m.as_str().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub name: DatasetName,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    /// Seed of the remembrance/eval carve of the test split.
    #[serde(default)]
    pub split_seed: u64,
    /// Overrides `UNFORGE_CACHE`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondenserSection {
    pub method: CondenseMethod,
    #[serde(default)]
    pub fdm: FdmConfig,
    #[serde(default)]
    pub inversion: InversionConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportSection {
    pub unlearning_metric: bool,
    pub overfitting_metric: bool,
    pub gradient_cap: usize,
    pub rbe_normalization: RbeNormalization,
    pub histogram_bins: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            unlearning_metric: true,
            overfitting_metric: true,
            gradient_cap: GRADIENT_CAP,
            rbe_normalization: RbeNormalization::WithinDataset,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseSection {
    pub epochs: usize,
    pub online: OnlineSchedule,
    pub shadow_count: usize,
    /// Shadow training; the pretraining config when absent.
    #[serde(default)]
    pub shadow_train: Option<TrainConfig>,
    /// Seed offset of the synthetic shadow population.
    pub population_seed_offset: u64,
    pub population_per_class: usize,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self {
            epochs: 3,
            online: OnlineSchedule {
                steps: 3,
                tau: 1,
                final_epochs: 5,
                lr: 3e-3,
                lr_final: 3e-3,
                batch_size: 16,
            },
            shadow_count: 4,
            shadow_train: None,
            population_seed_offset: 1000,
            population_per_class: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondensedModelSection {
    pub head: HeadArch,
    pub head_train: TrainConfig,
}

impl Default for CondensedModelSection {
    fn default() -> Self {
        Self {
            head: HeadArch::Mlp { hidden: 32 },
            head_train: TrainConfig::new(1e-2, 8, 30, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSection,
    pub arch: ArchSpec,
    /// Segment cuts; the architecture default when absent.
    #[serde(default)]
    pub cuts: Option<(usize, usize)>,
    pub pretrain: TrainConfig,
    pub forget: ForgetSpec,
    pub k: usize,
    pub condenser: CondenserSection,
    /// Remembrance samples per class.
    pub remembrance_m: usize,
    pub schedule: ModularSchedule,
    /// Pick the online step count from η.
    #[serde(default)]
    pub eta_schedule: bool,
    pub methods: Vec<RunMethod>,
    pub baseline_train: TrainConfig,
    #[serde(default)]
    pub baseline_params: MethodParams,
    /// R trains epoch by epoch until it reaches MU's retain accuracy,
    /// with `baseline_train.epochs` as the cap.
    #[serde(default)]
    pub r_matched_ra: bool,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(default)]
    pub defense: DefenseSection,
    #[serde(default)]
    pub condensed_model: CondensedModelSection,
    /// Seed of model initialization, clustering and remembrance draws.
    pub seed: u64,
    /// Run directory; relative paths resolve against `UNFORGE_OUTPUT`.
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Class-0 forgetting on the toy set with an MLP.
    pub fn toy(seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetSection {
                name: DatasetName::SyntheticGaussians,
                synthetic: SyntheticConfig {
                    per_class: 2000,
                    test_per_class: 100,
                    spread: 0.6,
                    pixel_noise: 0.1,
                    seed,
                    ..SyntheticConfig::default()
                },
                split_seed: seed,
                cache_dir: None,
            },
            arch: ArchSpec::mlp(64),
            cuts: None,
            pretrain: TrainConfig::new(1e-2, 32, 30, seed),
            forget: ForgetSpec::class(0),
            k: 10,
            condenser: CondenserSection {
                method: CondenseMethod::Fdm,
                fdm: FdmConfig::default(),
                inversion: InversionConfig::default(),
            },
            remembrance_m: 10,
            schedule: ModularSchedule {
                online: OnlineSchedule {
                    steps: 20,
                    tau: 10,
                    final_epochs: 5,
                    lr: 0.2,
                    lr_final: 0.1,
                    batch_size: 8,
                },
                seed,
                ..ModularSchedule::default()
            },
            eta_schedule: false,
            methods: vec![RunMethod::Baseline(Method::R), RunMethod::Baseline(Method::Cf), RunMethod::Mu],
            baseline_train: TrainConfig::new(1e-2, 32, 10, seed),
            baseline_params: MethodParams::default(),
            r_matched_ra: true,
            report: ReportSection::default(),
            defense: DefenseSection::default(),
            condensed_model: CondensedModelSection {
                head_train: TrainConfig::new(1e-2, 8, 30, seed),
                ..CondensedModelSection::default()
            },
            seed,
            output_dir: PathBuf::from(format!("runs/toy-{seed}")),
        }
    }

    /// The toy preset with random forgetting of `fraction` of the samples.
    /// Small clusters keep η below one; the online step count follows η.
    pub fn toy_random(seed: u64, fraction: f64) -> Self {
        let toy = Self::toy(seed);
        Self {
            forget: ForgetSpec::random(fraction, seed),
            k: 400,
            eta_schedule: true,
            schedule: ModularSchedule {
                online: OnlineSchedule {
                    lr: 1e-2,
                    lr_final: 1e-2,
                    batch_size: 32,
                    ..toy.schedule.online
                },
                ..toy.schedule
            },
            baseline_train: TrainConfig::new(1e-2, 32, 40, seed),
            output_dir: PathBuf::from(format!("runs/toy-random-{seed}")),
            ..toy
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.arch.arch == ArchId::Custom {
            return bad("custom architectures cannot be built from a config".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if let unforge::data::ForgetMode::RandomFraction { fraction } = self.forget.mode {
            if !(fraction > 0.0 && fraction < 1.0) {
                return bad(format!("forget fraction {fraction} not in (0, 1)"));
            }
        }
        if self.remembrance_m == 0 {
            return bad("remembrance_m must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("methods must name at least one method".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(m) = self.methods.iter().find(|m| !seen.insert(**m)) {
            return bad(format!("method {m} listed twice"));
        }
        self.pretrain.validate().map_err(|e| CliError::Config(format!("pretrain: {e}")))?;
        self.baseline_train
            .validate()
            .map_err(|e| CliError::Config(format!("baseline_train: {e}")))?;
        self.schedule
            .validate()
            .map_err(|e| CliError::Config(format!("schedule: {e}")))?;
        for m in &self.methods {
            if let RunMethod::Baseline(b) = m {
                self.baseline_config(*b)
                    .validate()
                    .map_err(|e| CliError::Config(format!("{b:?}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn baseline_config(&self, method: Method) -> unforge::baselines::BaselineConfig {
        let mut c = unforge::baselines::BaselineConfig::new(method, self.baseline_train).with_arch(self.arch);
        c.params = self.baseline_params;
        c
    }

    pub fn defense_config(&self) -> DefenseConfig {
        DefenseConfig {
            epochs: self.defense.epochs,
            schedule: ModularSchedule {
                online: self.defense.online,
                ..self.schedule
            },
            shadow: ShadowConfig {
                arch: self.arch,
                train: self.defense.shadow_train.unwrap_or(self.pretrain),
            },
            shadow_count: self.defense.shadow_count,
        }
    }

    /// Run directory after applying `UNFORGE_OUTPUT` to relative paths.
    pub fn run_dir(&self) -> PathBuf {
        resolve_root(&self.output_dir, OUTPUT_ENV)
    }

    pub fn cache_dir(&self) -> PathBuf {
        match &self.dataset.cache_dir {
            Some(p) => p.clone(),
            None => std::env::var_os(CACHE_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("data")),
        }
    }

    pub fn has(&self, m: RunMethod) -> bool {
        self.methods.contains(&m)
    }
}

fn resolve_root(p: &Path, var: &str) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(var) {
        Some(root) => PathBuf::from(root).join(p),
        None => p.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_round_trips() {
        let c = ExperimentConfig::toy(3);
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        back.validate().unwrap();
    }

    #[test]
    fn methods_parse_case_insensitively() {
        assert_eq!("mu".parse::<RunMethod>().unwrap(), RunMethod::Mu);
        assert_eq!("cf".parse::<RunMethod>().unwrap(), RunMethod::Baseline(Method::Cf));
        assert!("XX".parse::<RunMethod>().is_err());
    }

    #[test]
    fn wrong_schema_is_a_config_error() {
        let mut c = ExperimentConfig::toy(0);
        c.schema_version = 99;
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }
}
