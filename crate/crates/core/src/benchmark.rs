//! Small end-to-end benchmark: simulated dataset, imitation-trained policy
//! and held-out goals.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{simulate_record, split_of, Split};
use crate::diffusion::denoiser::DenoiserConfig;
use crate::diffusion::train::{Policy, TrainConfig, Trainer, TrainingSet};
use crate::dynamics::{Dynamics, Trajectory};
use crate::error::Result;
use crate::model::RodModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub n_trajectories: usize,
    pub data_seed: u64,
    pub iterations: usize,
    pub train: TrainConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 200,
            data_seed: 11,
            iterations: 10_000,
            train: TrainConfig {
                lr: 1e-3,
                ema_decay: 0.995,
                batch: 8,
                diffusion_steps: 512,
                denoiser: DenoiserConfig {
                    horizon: 51,
                    d_model: 32,
                    blocks: 2,
                    heads: 4,
                    goal_tokens: 4,
                    ffn_mult: 2,
                    skip: true,
                },
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyBenchmark {
    pub config: ToyConfig,
    pub model: RodModel,
    pub dynamics: Dynamics,
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub data: TrainingSet,
    pub trainer: Trainer,
    pub policy: Policy,
}

/// Simulates records `0..n` of run `seed`, returning the valid ones split.
pub fn simulate_split(dynamics: &Dynamics, n: usize, seed: u64) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    let trajs = (0..n)
        .into_par_iter()
        .map(|i| simulate_record(dynamics, seed, i).map(|t| (i, t)))
        .collect::<Result<Vec<_>>>()?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, t) in trajs.into_iter().filter(|(_, t)| t.valid) {
        match split_of(i) {
            Split::Train => train.push(t),
            Split::Test => test.push(t),
        }
    }
    Ok((train, test))
}

impl ToyBenchmark {
    pub fn build(model: RodModel, config: ToyConfig) -> Result<Self> {
        let dynamics = Dynamics::new(&model)?;
        let (train, test) = simulate_split(&dynamics, config.n_trajectories, config.data_seed)?;
        Self::from_split(model, config, train, test)
    }

    pub fn from_split(model: RodModel, config: ToyConfig, train: Vec<Trajectory>, test: Vec<Trajectory>) -> Result<Self> {
        let dynamics = Dynamics::new(&model)?;
        let data = TrainingSet::from_trajectories(&train, &config.train)?;
        let mut trainer = Trainer::new(config.train.clone())?;
        trainer.train(&data, config.iterations)?;
        let policy = trainer.policy(&data.normalizer)?;
        Ok(Self {
            config,
            model,
            dynamics,
            train,
            test,
            data,
            trainer,
            policy,
        })
    }

    pub fn test_goals(&self) -> Vec<Vector3<f64>> {
        self.test.iter().map(|t| t.goal).collect()
    }

    pub fn train_goals(&self) -> Vec<Vector3<f64>> {
        self.train.iter().map(|t| t.goal).collect()
    }
}
