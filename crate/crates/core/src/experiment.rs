//! Train one loss on a dataset and score it on the held-out split.

use serde::{Deserialize, Serialize};

use crate::apmetric::coco_thresholds;
use crate::error::Result;
use crate::paploss::{LossParams, PapLoss};
use crate::search::RewardFn;
use crate::toybench::{self, Dataset, TrainConfig};

#[derive(Debug, Clone)]
pub struct Experiment {
    pub dataset: Dataset,
    pub train: TrainConfig,
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEvalReport {
    pub reward: f64,
    /// `(threshold, AP)` pairs.
    pub per_threshold: Vec<(f64, f64)>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub skipped_steps: usize,
}

impl Experiment {
    pub fn new(dataset: Dataset, train: TrainConfig) -> Self {
        Self { dataset, train, thresholds: coco_thresholds() }
    }

    pub fn with_thresholds(mut self, thresholds: Vec<f64>) -> Self {
        self.thresholds = thresholds;
        self
    }

    /// Reward only; this is what the search calls per sample.
    pub fn score(&self, loss: &PapLoss) -> Result<f64> {
        let out = toybench::train_inner(loss, &self.dataset.train, &self.train)?;
        toybench::reward(&out.model, &self.dataset.eval, &self.thresholds)
    }

    pub fn run(&self, loss: &PapLoss) -> Result<TrainEvalReport> {
        let out = toybench::train_inner(loss, &self.dataset.train, &self.train)?;
        let reward = toybench::reward(&out.model, &self.dataset.eval, &self.thresholds)?;
        let per = toybench::ap_per_threshold(&out.model, &self.dataset.eval, &self.thresholds)?;
        Ok(TrainEvalReport {
            reward,
            per_threshold: self.thresholds.iter().copied().zip(per).collect(),
            initial_loss: out.initial_loss,
            final_loss: out.final_loss,
            skipped_steps: out.skipped_steps,
        })
    }
}

impl RewardFn for Experiment {
    fn reward(&self, params: &LossParams) -> Result<f64> {
        self.score(&PapLoss::new(params)?)
    }
}
