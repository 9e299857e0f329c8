//! Velocity networks, optimizer, checkpoints and the two toy-scale training
//! experiments.

pub mod checkpoint;
pub mod field;
pub mod metrics;
pub mod mlp;
pub mod optim;
pub mod tinyimage;
pub mod toy2d;

use rayon::prelude::*;

use crate::error::{arg_err, Error, Result};
use mlp::{MlpNet, Workspace};
use optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Toy2d,
    TinyImage,
}

/// How the two endpoints of a window share noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// One noise draw for both endpoints.
    Ours,
    /// Independent draws for start and end.
    Random,
}

impl std::str::FromStr for Coupling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Coupling::Ours),
            "random" => Ok(Coupling::Random),
            other => arg_err(format!("unknown coupling mode {other:?} (ours|random)")),
        }
    }
}

impl std::fmt::Display for Coupling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Coupling::Ours => "ours",
            Coupling::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub coupling: Coupling,
    pub batch: usize,
    pub optim: AdamConfig,
    pub steps: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Sinusoidal frequencies in the time embedding.
    pub frequencies: usize,
    /// Euler steps per window when sampling for evaluation.
    pub sample_steps: usize,
    /// Number of generated samples used for evaluation metrics.
    pub eval_samples: usize,
    /// Toy task: number of target points (1 or 3).
    pub points: usize,
    /// Image task: pyramid stages (1 = full-resolution baseline).
    pub stages: usize,
    /// Image task: stop once this many pixel evaluations have been trained on.
    /// Overrides `steps` when set.
    pub pixel_budget: Option<u64>,
    /// Image task: number of training images.
    pub dataset_size: usize,
    /// Optional per-stage loss weights (index = stage); all ones when `None`.
    pub stage_weights: Option<Vec<f64>>,
}

impl TrainConfig {
    pub fn toy2d() -> Self {
        Self {
            task: Task::Toy2d,
            coupling: Coupling::Ours,
            batch: 256,
            optim: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            steps: 5000,
            seed: 0,
            hidden: vec![64, 64],
            frequencies: 4,
            sample_steps: 16,
            eval_samples: 256,
            points: 1,
            stages: 2,
            pixel_budget: None,
            dataset_size: 0,
            stage_weights: None,
        }
    }

    pub fn tiny_image() -> Self {
        Self {
            task: Task::TinyImage,
            coupling: Coupling::Ours,
            batch: 16,
            optim: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            steps: 2000,
            seed: 0,
            hidden: vec![64, 64],
            frequencies: 4,
            sample_steps: 16,
            eval_samples: 256,
            points: 0,
            stages: 3,
            pixel_budget: None,
            dataset_size: 2048,
            stage_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.batch == 0 {
            return arg_err("batch size must be positive");
        }
        if self.sample_steps == 0 || self.eval_samples == 0 {
            return arg_err("sample steps and evaluation samples must be positive");
        }
        if self.hidden.contains(&0) {
            return arg_err("hidden widths must be positive");
        }
        if let Some(w) = &self.stage_weights {
            if w.len() != self.stages || w.iter().any(|v| !(*v >= 0.0)) {
                return arg_err("stage weights need one non-negative value per stage");
            }
        }
        Ok(())
    }

    pub(crate) fn stage_weight(&self, stage: usize) -> f64 {
        self.stage_weights
            .as_ref()
            .and_then(|w| w.get(stage).copied())
            .unwrap_or(1.0)
    }
}

/// One row of a training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetric {
    pub step: usize,
    pub loss: f64,
    /// Cumulative pixel (or point) evaluations so far.
    pub evaluations: u64,
}

/// Sums per-item losses and parameter gradients over `items` in a fixed order.
///
/// Items are processed in parallel chunks of `chunk` and the chunk partials are
/// reduced sequentially, so results do not depend on the thread count.
pub(crate) fn batch_gradient<T, F>(
    net: &MlpNet,
    items: &[T],
    chunk: usize,
    per_item: F,
) -> Result<(f64, Vec<f64>)>
where
    T: Sync,
    F: Fn(&MlpNet, &mut Workspace, &T, &mut [f64]) -> Result<f64> + Sync,
{
    let partials: Vec<Result<(f64, Vec<f64>)>> = items
        .par_chunks(chunk.max(1))
        .map(|chunk| {
            let mut ws = net.workspace();
            let mut grads = vec![0.0; net.num_params()];
            let mut loss = 0.0;
            for item in chunk {
                loss += per_item(net, &mut ws, item, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = vec![0.0; net.num_params()];
    for part in partials {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grads))
}
