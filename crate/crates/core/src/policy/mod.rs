//! Learned driving policy: convolutional BEV encoder, GRU waypoint decoder,
//! imitation loss, training loop and checkpoints.
//!
//! The decoder predicts offsets between consecutive waypoints,
//! `w_{t+tau} = w_{t+tau-1} + head(h_tau)` with `w_t = (0, 0)`, and its hidden
//! state starts from the 64-dimensional encoder feature.

pub mod checkpoint;
pub mod gradcheck;
pub mod net;
pub mod train;

use crate::geom::Vec2;
use crate::sensors::Observation;
use crate::series::{WaypointSeries, HORIZON};
use net::{Layout, Scalar, Workspace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use train::{offline_val_loss, train, train_resume, TrainConfig, TrainOutcome};

/// BEV counts are divided by this and clamped to 1 before entering the encoder.
pub const COUNT_NORMALISER: f32 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("observation shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("waypoint series length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Sum of L1 norms over the horizon.
    #[default]
    Sum,
    /// Mean absolute error over all horizon coordinates.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub grid: usize,
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub horizon: usize,
    #[serde(default)]
    pub loss_reduction: LossReduction,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            grid: crate::sensors::GRID_CELLS,
            channels: vec![2, 8, 16, 32, 64],
            hidden: 64,
            horizon: HORIZON,
            loss_reduction: LossReduction::Sum,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::BadConfig(m.to_string()));
        if self.channels.len() < 2 || self.channels[0] != 2 {
            return bad("encoder must start from the 2 BEV channels");
        }
        if self.channels.last() != Some(&self.hidden) {
            return bad("encoder output width must equal the GRU hidden size");
        }
        if self.grid % (1 << (self.channels.len() - 1)) != 0 {
            return bad("grid size must be divisible by the total encoder stride");
        }
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        Ok(())
    }
}

/// Flat parameter vector in declaration order (see [`Layout`]).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<S = f32> {
    pub config: PolicyConfig,
    pub data: Vec<S>,
}

impl<S: Scalar> PolicyParams<S> {
    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn zeros(config: PolicyConfig) -> Self {
        let n = Layout::new(&config).total;
        Self { config, data: vec![S::ZERO; n] }
    }

    /// Uniform initialisation in `±sqrt(1 / fan_in)` per tensor.
    pub fn init(config: PolicyConfig, seed: u64) -> Self {
        let layout = Layout::new(&config);
        let mut data = vec![S::ZERO; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, off, len, fan_in) in layout.groups() {
            let bound = (1.0 / fan_in as f64).sqrt();
            for v in &mut data[off..off + len] {
                *v = S::from_f64(rng.random_range(-bound..bound));
            }
        }
        Self { config, data }
    }

    pub fn count(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> PolicyParams<T> {
        PolicyParams { config: self.config.clone(), data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect() }
    }
}

/// Writes one observation into batch slot `b` of the workspace.
pub fn load_observation<S: Scalar>(cfg: &PolicyConfig, ws: &mut Workspace<S>, b: usize, counts: &[u16], goal: Vec2) {
    let g = cfg.grid;
    let batch = ws.batch();
    for c in 0..2 {
        let base = (c * batch + b) * g * g;
        for cell in 0..g * g {
            let v = (counts[cell * 2 + c] as f32 / COUNT_NORMALISER).min(1.0);
            ws.input[base + cell] = S::from_f64(v as f64);
        }
    }
    ws.goals[b * 2] = S::from_f64(goal.x);
    ws.goals[b * 2 + 1] = S::from_f64(goal.y);
}

fn check_shape(cfg: &PolicyConfig, obs: &Observation) -> Result<(), PolicyError> {
    if obs.bev.rows != cfg.grid || obs.bev.cols != cfg.grid || obs.bev.counts.len() != cfg.grid * cfg.grid * 2 {
        return Err(PolicyError::ShapeMismatch {
            expected: format!("{}x{}x2", cfg.grid, cfg.grid),
            got: format!("{}x{}x2 ({} values)", obs.bev.rows, obs.bev.cols, obs.bev.counts.len()),
        });
    }
    Ok(())
}

/// Predicts the ego-frame waypoint series for a single observation.
pub fn forward<S: Scalar>(params: &PolicyParams<S>, obs: &Observation) -> Result<WaypointSeries, PolicyError> {
    check_shape(&params.config, obs)?;
    let layout = params.layout();
    let mut ws = Workspace::new(&params.config, 1);
    load_observation(&params.config, &mut ws, 0, &obs.bev.counts, obs.goal.goal);
    net::forward(&params.config, &layout, &params.data, &mut ws);
    Ok(WaypointSeries(
        (0..params.config.horizon)
            .map(|t| {
                let (x, y) = ws.waypoint(t, 0);
                Vec2::new(x.to_f64(), y.to_f64())
            })
            .collect(),
    ))
}

/// Closed-loop driver that queries the network on every planning step.
pub struct PolicyDriver {
    pub params: PolicyParams<f32>,
}

impl PolicyDriver {
    pub fn new(params: PolicyParams<f32>) -> Self {
        Self { params }
    }
}

impl crate::simcore::Driver for PolicyDriver {
    fn needs_observation(&self) -> bool {
        true
    }

    fn plan(&mut self, ctx: &crate::simcore::DriverContext) -> Result<WaypointSeries, String> {
        let obs = ctx.observation.ok_or_else(|| "no observation supplied".to_string())?;
        forward(&self.params, obs).map_err(|e| e.to_string())
    }
}

/// Imitation loss `sum_tau ||w_tau - w_bar_tau||_1`.
pub fn loss(w: &WaypointSeries, target: &WaypointSeries) -> Result<f64, PolicyError> {
    if w.len() != target.len() {
        return Err(PolicyError::LengthMismatch(w.len(), target.len()));
    }
    Ok(w.0.iter().zip(&target.0).map(|(a, b)| (a.x - b.x).abs() + (a.y - b.y).abs()).sum())
}

/// Loss under the configured reduction.
pub fn reduced_loss(cfg: &PolicyConfig, w: &WaypointSeries, target: &WaypointSeries) -> Result<f64, PolicyError> {
    let l = loss(w, target)?;
    Ok(match cfg.loss_reduction {
        LossReduction::Sum => l,
        LossReduction::Mean => l / (2 * w.len()) as f64,
    })
}
