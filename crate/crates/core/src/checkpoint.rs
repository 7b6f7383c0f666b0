//! Versioned JSON checkpoints: configs, counters, multiplier state and every
//! parameter store with its layout manifest.

use crate::cmdp::{Env, EnvConfig};
use crate::lagrange::LagrangeState;
use crate::nnfa::{NnError, ParamStore};
use crate::trainer::{Critics, PolicyNet, TrainError, Trainer, TrainerConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const FORMAT: &str = "qcpo-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("not a checkpoint (format `{0}`)")]
    Format(String),
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    Version { found: u32 },
    #[error("checkpoint does not fit the configured networks: {0}")]
    Layout(#[from] NnError),
    #[error("checkpoint was trained on {saved:?}, requested {requested:?}")]
    EnvMismatch { saved: String, requested: String },
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub iteration: usize,
    pub env_steps: u64,
    pub lagrange: LagrangeState,
    pub policy: ParamStore,
    pub value: ParamStore,
    pub quantile: ParamStore,
    pub tail: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let h: Header = serde_json::from_str(text)?;
        if h.format != FORMAT {
            return Err(CheckpointError::Format(h.format));
        }
        if h.version != VERSION {
            return Err(CheckpointError::Version { found: h.version });
        }
        let ck: Checkpoint = serde_json::from_str(text)?;
        for s in [&ck.policy, &ck.value, &ck.quantile, &ck.tail] {
            s.validate()?;
        }
        Ok(ck)
    }

    /// Rebuilds the policy, checking that it fits `env`.
    pub fn policy_for(&self, env: &EnvConfig) -> Result<PolicyNet, CheckpointError> {
        if env.env_id != self.env.env_id {
            return Err(CheckpointError::EnvMismatch {
                saved: format!("{:?}", self.env.env_id),
                requested: format!("{:?}", env.env_id),
            });
        }
        let e = Env::new(env.clone()).map_err(TrainError::from)?;
        Ok(PolicyNet::attach(
            self.policy.clone(),
            e.obs_dim(),
            &e.action_space(),
            &self.trainer.hidden,
        )?)
    }
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            env: self.env_config.clone(),
            trainer: self.config.clone(),
            iteration: self.iteration,
            env_steps: self.env_steps,
            lagrange: self.lagrange.clone(),
            policy: self.policy.store.clone(),
            value: self.critics.value_store.clone(),
            quantile: self.critics.quantile_store.clone(),
            tail: self.critics.tail_store.clone(),
        }
    }

    /// Restores networks, counters and the multiplier. Optimizer moments and
    /// RNG streams start fresh.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, CheckpointError> {
        ck.trainer.validate()?;
        let env = Env::new(ck.env.clone()).map_err(TrainError::from)?;
        let policy = ck.policy_for(&ck.env)?;
        let critics = Critics::attach(
            [ck.value, ck.quantile, ck.tail],
            env.obs_dim(),
            &ck.trainer.hidden,
            ck.trainer.n_q,
        )?;
        let mut t = Trainer::assemble(ck.env, ck.trainer, env, policy, critics)?;
        t.lagrange = ck.lagrange;
        t.iteration = ck.iteration;
        t.env_steps = ck.env_steps;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnfa::Matrix;

    fn small() -> TrainerConfig {
        TrainerConfig {
            batch_steps: 100,
            subtraj_len: 50,
            epochs_per_batch: 1,
            hidden: vec![6],
            n_q: 9,
            tail_k: 3,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_everything_saved() {
        let mut t = Trainer::new(EnvConfig::two_path(), small()).unwrap();
        t.train_iteration().unwrap();
        t.lagrange.lambda = 0.37;
        let ck = t.checkpoint();
        let dir = std::env::temp_dir().join(format!("qcpo-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let r = Trainer::from_checkpoint(back).unwrap();
        assert_eq!(r.policy.store.values(), t.policy.store.values());
        assert_eq!(r.lagrange.lambda, 0.37);
        assert_eq!(r.iteration, 1);
        let x = Matrix::from_vec(1, 4, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.critics.quantiles(&x).unwrap(), t.critics.quantiles(&x).unwrap());
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn header_and_layout_errors() {
        let t = Trainer::new(EnvConfig::two_path(), small()).unwrap();
        let mut v = serde_json::to_value(t.checkpoint()).unwrap();
        v["version"] = 7.into();
        assert!(matches!(
            Checkpoint::from_json(&v.to_string()),
            Err(CheckpointError::Version { found: 7 })
        ));
        v["version"] = VERSION.into();
        v["format"] = "other".into();
        assert!(matches!(Checkpoint::from_json(&v.to_string()), Err(CheckpointError::Format(_))));
        assert!(matches!(Checkpoint::from_json("{"), Err(CheckpointError::Parse(_))));

        let mut ck = t.checkpoint();
        ck.trainer.hidden = vec![7];
        assert!(matches!(Trainer::from_checkpoint(ck), Err(CheckpointError::Layout(_))));
        let ck = t.checkpoint();
        assert!(matches!(
            ck.policy_for(&EnvConfig::hazard_grid()),
            Err(CheckpointError::EnvMismatch { .. })
        ));
    }
}
