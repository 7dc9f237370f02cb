use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossCoefficients;
use crate::model::ModelConfig;

/// Base learning rate of each parameter group in each stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub warm_prototypes: f64,
    pub secondary_prototypes: f64,
    pub secondary_features: f64,
    pub joint_prototypes: f64,
    pub joint_features: f64,
    pub joint_head: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            warm_prototypes: 0.003,
            secondary_prototypes: 0.003,
            secondary_features: 0.001,
            joint_prototypes: 0.05,
            joint_features: 0.001,
            joint_head: 1e-5,
        }
    }
}

/// Stopping rule of the last-layer proximal gradient solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvexConfig {
    pub max_iters: usize,
    /// Stop once one iteration lowers the objective by less than this.
    pub tol: f64,
    pub initial_step: f64,
}

impl Default for ConvexConfig {
    fn default() -> Self {
        ConvexConfig {
            max_iters: 2000,
            tol: 1e-12,
            initial_step: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub num_train_epochs: u32,
    pub num_warm_epochs: u32,
    pub num_secondary_warm_epochs: u32,
    pub push_start: u32,
    pub push_epochs: Vec<u32>,
    pub joint_lr_step_size: u32,
    pub joint_lr_gamma: f64,
    pub lr: LearningRates,
    pub batch_size: usize,
    pub train_push_batch_size: usize,
    pub coefs: LossCoefficients,
    pub convex: ConvexConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            num_train_epochs: 130,
            num_warm_epochs: 10,
            num_secondary_warm_epochs: 10,
            push_start: 70,
            push_epochs: vec![110, 120, 130],
            joint_lr_step_size: 30,
            joint_lr_gamma: 0.5,
            lr: LearningRates::default(),
            batch_size: 32,
            train_push_batch_size: 75,
            coefs: LossCoefficients::default(),
            convex: ConvexConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.coefs.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_train_epochs == 0 {
            return bad("num_train_epochs must be positive".into());
        }
        if self.num_warm_epochs + self.num_secondary_warm_epochs > self.num_train_epochs {
            return bad(format!(
                "{} warm + {} secondary warm epochs exceed {} total",
                self.num_warm_epochs, self.num_secondary_warm_epochs, self.num_train_epochs
            ));
        }
        if self.push_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("push_epochs {:?} must be strictly increasing", self.push_epochs));
        }
        if let Some(e) = self.push_epochs.iter().find(|&&e| e <= self.push_start) {
            return bad(format!("push epoch {e} is not after push_start {}", self.push_start));
        }
        if self.push_epochs.last() != Some(&self.num_train_epochs) {
            return bad(format!(
                "the last push epoch must equal num_train_epochs ({})",
                self.num_train_epochs
            ));
        }
        if self.batch_size == 0 || self.train_push_batch_size == 0 || self.joint_lr_step_size == 0 {
            return bad("batch sizes and joint_lr_step_size must be positive".into());
        }
        if !(self.joint_lr_gamma > 0.0 && self.joint_lr_gamma <= 1.0) {
            return bad(format!("joint_lr_gamma {} outside (0, 1]", self.joint_lr_gamma));
        }
        let lr = &self.lr;
        let rates = [
            lr.warm_prototypes,
            lr.secondary_prototypes,
            lr.secondary_features,
            lr.joint_prototypes,
            lr.joint_features,
            lr.joint_head,
        ];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return bad(format!("learning rates must be positive and finite: {rates:?}"));
        }
        let c = &self.convex;
        if c.max_iters == 0 || !(c.tol >= 0.0) || !(c.initial_step > 0.0) {
            return bad("convex solver needs max_iters > 0, tol >= 0, initial_step > 0".into());
        }
        Ok(())
    }

    pub fn first_joint_epoch(&self) -> u32 {
        self.num_warm_epochs + self.num_secondary_warm_epochs + 1
    }

    pub fn stage_of(&self, epoch: u32) -> Stage {
        if epoch <= self.num_warm_epochs {
            Stage::Warm
        } else if epoch <= self.num_warm_epochs + self.num_secondary_warm_epochs {
            Stage::SecondaryWarm
        } else {
            Stage::Joint
        }
    }

    /// Learning rates in effect during `epoch` (1-based). Joint rates are
    /// multiplied by `joint_lr_gamma` every `joint_lr_step_size` epochs.
    pub fn group_lrs(&self, epoch: u32) -> GroupLrs {
        let lr = &self.lr;
        match self.stage_of(epoch) {
            Stage::Warm => GroupLrs {
                features: 0.0,
                prototypes: lr.warm_prototypes,
                head: 0.0,
            },
            Stage::SecondaryWarm => GroupLrs {
                features: lr.secondary_features,
                prototypes: lr.secondary_prototypes,
                head: 0.0,
            },
            Stage::Joint => {
                let steps = (epoch - self.first_joint_epoch()) / self.joint_lr_step_size;
                let f = self.joint_lr_gamma.powi(steps as i32);
                GroupLrs {
                    features: lr.joint_features * f,
                    prototypes: lr.joint_prototypes * f,
                    head: lr.joint_head * f,
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warm,
    SecondaryWarm,
    Joint,
}

/// Per-group learning rates; zero means frozen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLrs {
    pub features: f64,
    pub prototypes: f64,
    pub head: f64,
}
