//! Run configuration, training, checkpointing, evaluation and gradient checks.

mod checks;
mod eval;
mod optim;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{LossConfig, LossError};
use crate::model::{ModelConfig, ModelError};
use crate::numerics::archive::ArchiveError;
use crate::numerics::NumericsError;
use crate::scene::{build_rank_table, generate_dataset, load_dataset, RankTable, SceneConfig, SceneError, SceneSample};

pub use checks::{composition_checks, gradcheck, model_check, CheckLine, Scope};
pub use eval::{calibrate_theta_rel, evaluate, evaluate_ground_truth};
pub use optim::{clip_global_norm, AdamW};
pub use train::{ablate_rho, train, AblationRow, Checkpoint, TraceRow, Trainer};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("non-finite {component} at iteration {iteration}")]
    NonFinite { component: &'static str, iteration: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
}

impl HarnessError {
    /// True for failures of the arithmetic itself rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, HarnessError::NonFinite { .. } | HarnessError::Numerics(_))
    }
}

/// Linear temperature annealing from `start` to `end` over the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.5 }
    }
}

impl TauSchedule {
    pub fn at(&self, iteration: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.end;
        }
        let t = iteration.min(total - 1) as f64 / (total - 1) as f64;
        self.start + (self.end - self.start) * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Where scenes come from: files when paths are given, otherwise generated
/// from the seeds and counts below. The rank table is always rebuilt from
/// its own parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub table_seed: u64,
    pub n_affordances: usize,
    pub contexts_per_affordance: usize,
    pub n_categories: usize,
    pub scene: SceneConfig,
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub train_seed: u64,
    pub n_train: usize,
    pub eval_seed: u64,
    pub n_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            table_seed: 7,
            n_affordances: 4,
            contexts_per_affordance: 2,
            n_categories: 12,
            scene: SceneConfig::default(),
            train_path: None,
            eval_path: None,
            train_seed: 1,
            n_train: 500,
            eval_seed: 2,
            n_eval: 100,
        }
    }
}

impl DataConfig {
    pub fn table(&self) -> Result<RankTable, HarnessError> {
        Ok(build_rank_table(self.table_seed, self.n_affordances, self.contexts_per_affordance, self.n_categories)?)
    }

    fn split(&self, path: Option<&Path>, seed: u64, n: usize) -> Result<Vec<SceneSample>, HarnessError> {
        let table = self.table()?;
        let scenes = match path {
            Some(p) => load_dataset(p, &table.vocabulary())?,
            None => generate_dataset(seed, n, &table, &self.scene)?,
        };
        if scenes.is_empty() {
            return Err(HarnessError::Invalid("dataset is empty".into()));
        }
        Ok(scenes)
    }

    pub fn train_split(&self) -> Result<Vec<SceneSample>, HarnessError> {
        self.split(self.train_path.as_deref(), self.train_seed, self.n_train)
    }

    pub fn eval_split(&self) -> Result<Vec<SceneSample>, HarnessError> {
        self.split(self.eval_path.as_deref(), self.eval_seed, self.n_eval)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub tau: TauSchedule,
    pub optim: OptimConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub log_every: usize,
    pub data: DataConfig,
    /// Relevance threshold on rank scores; calibrated on the training split
    /// when absent.
    pub theta_rel: Option<f64>,
    pub det_thresh: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            tau: TauSchedule::default(),
            optim: OptimConfig::default(),
            iterations: 2000,
            batch_size: 4,
            log_every: 50,
            data: DataConfig::default(),
            theta_rel: None,
            det_thresh: 0.5,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate()?;
        let bad = |m: String| Err(HarnessError::Config(m));
        let o = &self.optim;
        if !(o.lr > 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0 && o.clip_norm >= 0.0) {
            return bad("optimizer needs lr > 0, eps > 0, weight_decay >= 0 and clip_norm >= 0".into());
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("optimizer betas must lie in [0, 1)".into());
        }
        if !(self.tau.start > 0.0 && self.tau.end > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if self.loss.weights.iter().any(|w| !(*w >= 0.0)) || !(self.loss.rho >= 0.0) {
            return bad("loss weights and rho must be non-negative".into());
        }
        if self.iterations == 0 || self.batch_size == 0 || self.log_every == 0 {
            return bad("iterations, batch_size and log_every must be positive".into());
        }
        if !(self.det_thresh >= 0.0 && self.det_thresh <= 1.0) {
            return bad(format!("det_thresh {} outside [0, 1]", self.det_thresh));
        }
        if self.theta_rel.is_some_and(|t| !t.is_finite()) {
            return bad("theta_rel must be finite".into());
        }
        let table = self.data.table()?;
        if table.vocabulary().size() > self.model.vocab_size {
            return bad(format!(
                "task vocabulary has {} tokens but the model embeds only {}",
                table.vocabulary().size(),
                self.model.vocab_size
            ));
        }
        if table.n_categories() > self.model.n_categories {
            return bad(format!(
                "{} object categories exceed the model's {}",
                table.n_categories(),
                self.model.n_categories
            ));
        }
        if self.data.scene.max_objects > self.model.k_o {
            return bad(format!(
                "scenes may hold {} objects but only {} queries are decoded",
                self.data.scene.max_objects, self.model.k_o
            ));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_exactly() {
        let mut c = RunConfig::default();
        c.optim.lr = 0.1 + 0.2;
        c.theta_rel = Some(std::f64::consts::PI);
        c.data.train_path = Some("a/b.jsonl".into());
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_values() {
        let cases: Vec<fn(&mut RunConfig)> = vec![
            |c| c.optim.lr = 0.0,
            |c| c.optim.beta2 = 1.0,
            |c| c.batch_size = 0,
            |c| c.tau.end = 0.0,
            |c| c.loss.weights[2] = -1.0,
            |c| c.det_thresh = 1.5,
            |c| c.model.vocab_size = 4,
            |c| c.model.k_o = 4,
            |c| c.model.heads = 3,
        ];
        for (i, f) in cases.into_iter().enumerate() {
            let mut c = RunConfig::default();
            f(&mut c);
            assert!(c.validate().is_err(), "case {i}");
        }
        assert!(RunConfig::from_json("{\"iterations\": \"many\"}").is_err());
    }

    #[test]
    fn tau_schedule_endpoints() {
        let s = TauSchedule { start: 2.0, end: 1.0 };
        assert_eq!(s.at(0, 11), 2.0);
        assert_eq!(s.at(10, 11), 1.0);
        assert!((s.at(5, 11) - 1.5).abs() < 1e-15);
        assert_eq!(s.at(0, 1), 1.0);
    }
}
