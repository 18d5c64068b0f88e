//! Experiment configuration: TOML with fixed sections and no unknown keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{RegressionToy, ScenarioKind, ScenarioSpec, SyntheticSource};
use crate::error::{FlicError, Result};
use crate::federation::AggregationRule;
use crate::model::{LocalTraining, ModelKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub federation: FederationConfig,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    #[serde(default)]
    pub threat: ThreatConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub clients: usize,
    #[serde(default = "one")]
    pub num_groups: usize,
    #[serde(default = "default_train")]
    pub train_per_client: usize,
    #[serde(default = "default_test")]
    pub test_per_client: usize,
    /// Directory with MNIST IDX files; synthetic data is generated otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mnist_dir: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: SyntheticSource,
    #[serde(default)]
    pub regression: RegressionToy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_model_kind")]
    pub kind: ModelKind,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { kind: default_model_kind(), hidden: default_hidden() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    /// Client fraction `C` sampled per round.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Phase-1 rounds `T`.
    pub rounds: usize,
    /// Per-cluster rounds `T_f` after the split.
    #[serde(default)]
    pub cluster_rounds: usize,
    #[serde(default)]
    pub aggregation: AggregationRule,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringMethod {
    #[default]
    Flic,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignUnsampled {
    #[default]
    AfterPhase2,
    AtSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    #[serde(default)]
    pub method: ClusteringMethod,
    /// Run Louvain after every phase-1 round without splitting training.
    #[serde(default)]
    pub diagnostic_per_round: bool,
    #[serde(default)]
    pub assign_unsampled: AssignUnsampled,
    /// Rounds whose similarity matrix is exported; defaults to `0, T/2, T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_rounds: Option<Vec<usize>>,
    /// Give each node a loop weighted by its update's self-similarity.
    #[serde(default = "yes")]
    pub self_loops: bool,
    /// Record update-bias distance terms for every stored pair each round.
    #[serde(default)]
    pub bias_diagnostics: bool,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            method: ClusteringMethod::default(),
            diagnostic_per_round: false,
            assign_unsampled: AssignUnsampled::default(),
            snapshot_rounds: None,
            self_loops: true,
            bias_diagnostics: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreatKind {
    #[default]
    None,
    MinusGrad,
    Omniscient,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreatConfig {
    #[serde(default)]
    pub kind: ThreatKind,
    /// Number of attackers drawn at random from all clients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attackers: Option<usize>,
    /// Explicit attacker ids; exclusive with `attackers`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacker_ids: Option<Vec<usize>>,
    /// Omniscient target update: whitespace- or comma-separated numbers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_train() -> usize {
    600
}
fn default_test() -> usize {
    100
}
fn default_model_kind() -> ModelKind {
    ModelKind::MlpClassifier
}
fn default_hidden() -> Vec<usize> {
    vec![32]
}
fn default_fraction() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    5
}
fn default_batch() -> usize {
    10
}
fn default_lr() -> f64 {
    0.01
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn training(&self) -> LocalTraining {
        LocalTraining {
            epochs: self.federation.epochs,
            batch_size: self.federation.batch_size,
            learning_rate: self.federation.learning_rate,
        }
    }

    pub fn scenario_spec(&self) -> ScenarioSpec {
        let s = &self.scenario;
        ScenarioSpec {
            kind: s.kind,
            num_groups: s.num_groups,
            clients: s.clients,
            train_per_client: s.train_per_client,
            test_per_client: s.test_per_client,
            seed: self.federation.seed,
            synthetic: s.synthetic.clone(),
            regression: s.regression.clone(),
        }
    }

    /// Snapshot rounds, sorted and deduplicated.
    pub fn snapshot_rounds(&self) -> Vec<usize> {
        let t = self.federation.rounds;
        let mut rounds = self.clustering.snapshot_rounds.clone().unwrap_or_else(|| vec![0, t / 2, t]);
        rounds.sort_unstable();
        rounds.dedup();
        rounds
    }

    /// Range and consistency checks that the TOML schema cannot express.
    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        if !(f.fraction > 0.0 && f.fraction <= 1.0) {
            return Err(FlicError::config(format!("federation.fraction must be in (0, 1], got {}", f.fraction)));
        }
        if f.rounds == 0 {
            return Err(FlicError::config("federation.rounds must be at least 1"));
        }
        self.training().validate()?;
        if self.scenario.clients == 0 {
            return Err(FlicError::config("scenario.clients must be positive"));
        }
        let regression = self.scenario.kind == ScenarioKind::RegressionToy;
        if regression != (self.model.kind == ModelKind::LinearRegression1d) {
            return Err(FlicError::config(
                "model.kind linear_regression1d goes with scenario.kind regression_toy and only with it",
            ));
        }
        if let Some(dir) = &self.scenario.mnist_dir {
            if !dir.is_dir() {
                return Err(FlicError::config(format!("scenario.mnist_dir {} does not exist", dir.display())));
            }
        }
        if let Some(&bad) = self.snapshot_rounds().iter().find(|&&r| r > f.rounds) {
            return Err(FlicError::config(format!(
                "clustering.snapshot_rounds entry {bad} exceeds federation.rounds {}",
                f.rounds
            )));
        }
        let t = &self.threat;
        if t.attackers.is_some() && t.attacker_ids.is_some() {
            return Err(FlicError::config("threat.attackers and threat.attacker_ids are exclusive"));
        }
        if let Some(n) = t.attackers {
            if n > self.scenario.clients {
                return Err(FlicError::config(format!(
                    "threat.attackers {n} exceeds scenario.clients {}",
                    self.scenario.clients
                )));
            }
        }
        if let Some(ids) = &t.attacker_ids {
            if let Some(bad) = ids.iter().find(|&&k| k >= self.scenario.clients) {
                return Err(FlicError::config(format!("threat.attacker_ids entry {bad} is not a client")));
            }
        }
        match t.kind {
            ThreatKind::None => {}
            ThreatKind::MinusGrad | ThreatKind::Omniscient if t.attackers.is_none() && t.attacker_ids.is_none() => {
                return Err(FlicError::config("threat needs attackers or attacker_ids"));
            }
            ThreatKind::Omniscient => {
                if f.aggregation != AggregationRule::WeightedMean {
                    return Err(FlicError::config("the omniscient attack targets weighted_mean aggregation"));
                }
                match &t.target_file {
                    None => return Err(FlicError::config("omniscient threat needs threat.target_file")),
                    Some(p) if !p.is_file() => {
                        return Err(FlicError::config(format!("threat.target_file {} does not exist", p.display())))
                    }
                    Some(_) => {}
                }
            }
            ThreatKind::MinusGrad => {}
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.scenario.mnist_dir.as_mut() {
            resolve(p);
        }
        if let Some(p) = self.threat.target_file.as_mut() {
            resolve(p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FlicError::config(format!("cannot serialize config: {e}")))
    }
}

/// Parses and validates a config; relative paths resolve against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| FlicError::config(e.to_string().trim_end().to_string()))?;
    let mut config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().message().trim_end().to_string();
        FlicError::config(format!("at `{path}`: {inner}"))
    })?;
    config.resolve_paths(base_dir);
    config.validate()?;
    Ok(config)
}

/// Reads a config file; relative paths inside resolve against its directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| FlicError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

/// Parses a whitespace- or comma-separated vector of numbers.
pub fn parse_vector(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| FlicError::Format(format!("`{t}` is not a number"))))
        .collect()
}
