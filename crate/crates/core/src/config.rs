//! Run configuration: strict JSON schema, validation and defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelSpec};
use crate::train::optim::AdamWConfig;
use crate::train::suite::SuiteParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d: usize,
    pub depth: usize,
    pub n_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterDims {
    /// Abstract task count `T`.
    pub tasks: usize,
    pub skills: usize,
    pub rank: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteDims {
    pub real_tasks: usize,
    pub groups: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerDims {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub architecture: Architecture,
    pub model: ModelDims,
    pub router: RouterDims,
    pub suite: SuiteDims,
    pub optimizer: OptimizerDims,
    pub seed: u64,
    pub out_dir: String,
}

impl RunConfig {
    /// Desk-scale defaults: 10 tasks in 3 groups, 4 skills of rank 4, one abstract
    /// task per real task, AdamW at `1e-2` with 6% warmup, 10 epochs, batch 4.
    pub fn desk_default() -> Self {
        Self {
            architecture: Architecture::Orchmoe,
            model: ModelDims {
                d: 32,
                depth: 1,
                n_tokens: 4,
            },
            router: RouterDims {
                tasks: 10,
                skills: 4,
                rank: 4,
                k: 2,
            },
            suite: SuiteDims {
                real_tasks: 10,
                groups: 3,
                n_train: 64,
                n_eval: 32,
                noise_std: 0.01,
            },
            optimizer: OptimizerDims {
                lr_max: 1e-2,
                weight_decay: 0.01,
                warmup_ratio: 0.06,
                epochs: 10,
                batch_size: 4,
            },
            seed: 0,
            out_dir: "runs/default".into(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            arch: self.architecture,
            d: self.model.d,
            depth: self.model.depth,
            tasks: self.router.tasks,
            skills: self.router.skills,
            rank: self.router.rank,
            k: self.router.k,
            real_tasks: self.suite.real_tasks,
        }
    }

    /// Copies skill count, rank and k from `spec`.
    pub fn with_spec(&self, spec: &ModelSpec) -> Self {
        let mut c = self.clone();
        c.architecture = spec.arch;
        c.router.skills = spec.skills;
        c.router.rank = spec.rank;
        c.router.k = spec.k;
        c.router.tasks = spec.tasks;
        c
    }

    pub fn suite_params(&self) -> SuiteParams {
        SuiteParams {
            real_tasks: self.suite.real_tasks,
            groups: self.suite.groups,
            n_train: self.suite.n_train,
            n_eval: self.suite.n_eval,
            d: self.model.d,
            n_tokens: self.model.n_tokens,
            depth: self.model.depth,
            noise_std: self.suite.noise_std,
            seed: self.seed,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.suite.real_tasks * self.suite.n_train).div_ceil(self.optimizer.batch_size.max(1))
    }

    pub fn adamw(&self, total_steps: usize) -> AdamWConfig {
        AdamWConfig {
            lr_max: self.optimizer.lr_max,
            weight_decay: self.optimizer.weight_decay,
            warmup_ratio: self.optimizer.warmup_ratio,
            total_steps,
            ..AdamWConfig::new(total_steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        self.suite_params().validate()?;
        let o = &self.optimizer;
        if !(o.lr_max > 0.0 && o.lr_max.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr_max must be positive, got {}", o.lr_max)));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config(format!("optimizer.weight_decay must be >= 0, got {}", o.weight_decay)));
        }
        if !(0.0..1.0).contains(&o.warmup_ratio) {
            return Err(Error::Config(format!("optimizer.warmup_ratio must be in [0, 1), got {}", o.warmup_ratio)));
        }
        if o.epochs == 0 || o.batch_size == 0 {
            return Err(Error::Config("optimizer.epochs and optimizer.batch_size must be >= 1".into()));
        }
        if self.suite.real_tasks > u16::MAX as usize || self.optimizer.batch_size > u16::MAX as usize {
            return Err(Error::Config("suite.real_tasks and optimizer.batch_size must fit in 16 bits".into()));
        }
        Ok(())
    }

    /// Ensures two configs generate the same task suite.
    pub fn same_suite(&self, other: &RunConfig) -> bool {
        self.suite == other.suite && self.seed == other.seed && self.model == other.model
    }
}
