use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exit_head::HeadConfig;
use crate::predictor::PredictorConfig;
use crate::scalar::Scalar;
use crate::trainer::{IterationUnit, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StrategyConfig {
    Classic,
    Hierarchical {
        /// Defaults to the quarter/half/three-quarter positions.
        #[serde(default)]
        positions: Option<Vec<usize>>,
    },
    Placement {
        /// Skips the search when given.
        #[serde(default)]
        positions: Option<Vec<usize>>,
        #[serde(default = "default_max_exits")]
        max_exits: usize,
        #[serde(default = "default_budget")]
        accuracy_budget: f64,
    },
    Predictive,
}

fn default_max_exits() -> usize {
    3
}

fn default_budget() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorParams {
    pub l0: usize,
    /// Defaults to `L_total - l0`.
    #[serde(default)]
    pub tau: Option<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Defaults to all ones of length `k`.
    #[serde(default)]
    pub filter: Option<Vec<f64>>,
    #[serde(default)]
    pub normalize_steps: bool,
}

fn default_k() -> usize {
    3
}

impl PredictorParams {
    pub fn to_config<T: Scalar>(&self, beta: f64, l_total: usize) -> Result<PredictorConfig<T>> {
        let filter = match &self.filter {
            Some(h) if h.len() != self.k => {
                return Err(Error::Config(format!("filter has {} taps but k = {}", h.len(), self.k)))
            }
            Some(h) => h.iter().map(|&v| T::narrow(v)).collect(),
            None => vec![T::one(); self.k],
        };
        let cfg = PredictorConfig {
            l0: self.l0,
            beta: T::narrow(beta),
            tau: self.tau.unwrap_or(l_total.saturating_sub(self.l0)),
            filter,
            normalize_steps: self.normalize_steps,
        };
        cfg.validate(l_total)?;
        Ok(cfg)
    }
}

/// Desk-scale training settings. Seeds are derived from the experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingParams {
    pub backbone_eta: f64,
    pub backbone_iterations: usize,
    pub heads_eta: f64,
    pub heads_iterations: usize,
    pub unit: IterationUnit,
    pub batch_size: usize,
    pub head: HeadConfig,
}

impl Default for TrainingParams {
    fn default() -> Self {
        Self {
            backbone_eta: 0.01,
            backbone_iterations: 2,
            heads_eta: 0.5,
            heads_iterations: 8,
            unit: IterationUnit::Epochs,
            batch_size: 32,
            head: HeadConfig::default(),
        }
    }
}

impl TrainingParams {
    pub fn backbone(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            eta: self.backbone_eta,
            iterations: self.backbone_iterations,
            unit: self.unit,
            batch_size: self.batch_size,
            seed,
        }
    }

    pub fn heads(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            eta: self.heads_eta,
            iterations: self.heads_iterations,
            ..self.backbone(seed)
        }
    }
}

/// Experiment file. Relative paths are resolved against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    pub heads: PathBuf,
    /// Dataset directory written by `gen-data`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Recorded traces, for replay.
    #[serde(default)]
    pub traces: Option<PathBuf>,
    /// CSV DVFS table; the bundled GV100 table when absent.
    #[serde(default)]
    pub dvfs_table: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub strategy: StrategyConfig,
    pub beta: f64,
    #[serde(default)]
    pub predictor: Option<PredictorParams>,
    #[serde(default = "default_period_ms")]
    pub period_ms: f64,
    #[serde(default)]
    pub switch_joules: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub training: TrainingParams,
}

fn default_period_ms() -> f64 {
    20.0
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.model);
        fix(&mut self.heads);
        fix(&mut self.output_dir);
        for p in [&mut self.dataset, &mut self.traces, &mut self.dvfs_table]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        if !(self.period_ms > 0.0) {
            return Err(Error::Config(format!("period_ms {} must be positive", self.period_ms)));
        }
        if !(self.switch_joules >= 0.0) {
            return Err(Error::Config("switch_joules must be non-negative".into()));
        }
        self.training.backbone(0).validate()?;
        self.training.heads(0).validate()?;
        if matches!(self.strategy, StrategyConfig::Predictive) && self.predictor.is_none() {
            return Err(Error::Config("predictive strategy needs a `predictor` section".into()));
        }
        Ok(())
    }

    /// Fails on the first input path that does not exist.
    pub fn check_inputs(&self) -> Result<()> {
        let mut inputs = vec![("model", &self.model), ("heads", &self.heads)];
        for (name, p) in [
            ("dataset", &self.dataset),
            ("traces", &self.traces),
            ("dvfs_table", &self.dvfs_table),
        ] {
            if let Some(p) = p {
                inputs.push((name, p));
            }
        }
        for (name, p) in inputs {
            if !p.exists() {
                return Err(Error::Config(format!("{name} path {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
