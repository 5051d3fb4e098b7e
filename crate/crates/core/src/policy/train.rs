use super::checkpoint::Checkpoint;
use super::net::{self, Layout, Workspace};
use super::{load_observation, PolicyConfig, PolicyError, PolicyParams};
use crate::geom::Vec2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Anything the trainer can fit: a BEV grid, a goal and the expert target.
pub trait TrainingSample {
    /// Channel-last `H x W x 2` point counts.
    fn bev_counts(&self) -> &[u16];
    fn goal(&self) -> Vec2;
    fn target(&self) -> &[Vec2];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub policy: PolicyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            policy: PolicyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        self.policy.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PolicyError::BadConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(PolicyError::BadConfig("learning_rate/weight_decay must be >= 0, eps > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(PolicyError::BadConfig("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&json).into()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// One checkpoint per epoch, epochs 1..=N.
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.checkpoints.iter().map(|c| c.train_loss).collect()
    }
}

/// Trains from a fresh seeded initialisation; returns one checkpoint per epoch.
pub fn train<T: TrainingSample>(data: &[T], cfg: &TrainConfig) -> Result<TrainOutcome, PolicyError> {
    let mut out = Vec::with_capacity(cfg.epochs);
    train_with(data, cfg, None, |c| out.push(c.clone()))?;
    Ok(TrainOutcome { checkpoints: out })
}

/// Continues training from `start` up to `cfg.epochs`.
pub fn train_resume<T: TrainingSample>(data: &[T], start: &Checkpoint) -> Result<TrainOutcome, PolicyError> {
    let mut out = Vec::new();
    train_with(data, &start.config, Some(start), |c| out.push(c.clone()))?;
    Ok(TrainOutcome { checkpoints: out })
}

struct AdamW {
    step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamW {
    fn update(&mut self, cfg: &TrainConfig, params: &mut [f32], grads: &[f32]) {
        self.step += 1;
        let lr = cfg.learning_rate as f32;
        let b1 = cfg.beta1 as f32;
        let b2 = cfg.beta2 as f32;
        let eps = cfg.eps as f32;
        let decay = 1.0 - lr * cfg.weight_decay as f32;
        let bc1 = 1.0 - (cfg.beta1).powi(self.step as i32) as f32;
        let bc2 = 1.0 - (cfg.beta2).powi(self.step as i32) as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Shared training loop; `on_epoch` receives each end-of-epoch checkpoint.
pub fn train_with<T: TrainingSample>(
    data: &[T],
    cfg: &TrainConfig,
    start: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&Checkpoint),
) -> Result<(), PolicyError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let pcfg = &cfg.policy;
    let layout = Layout::new(pcfg);
    let (mut params, mut opt, first_epoch, mut rng) = match start {
        None => {
            let params = PolicyParams::<f32>::init(pcfg.clone(), cfg.seed);
            let n = params.data.len();
            let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
            (params, AdamW { step: 0, m: vec![0.0; n], v: vec![0.0; n] }, 1, rng)
        }
        Some(c) => {
            if c.config != *cfg {
                return Err(PolicyError::BadConfig("checkpoint config differs from requested config".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
            rng.set_word_pos(c.rng_word_pos);
            let opt = AdamW { step: c.adam_step, m: c.adam_m.clone(), v: c.adam_v.clone() };
            (c.params.clone(), opt, c.epoch + 1, rng)
        }
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = vec![0.0f32; layout.total];
    let mut ws_full = Workspace::<f32>::new(pcfg, cfg.batch_size.min(data.len()));
    let horizon = pcfg.horizon;
    for epoch in first_epoch..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut ws_tail;
            let ws = if chunk.len() == ws_full.batch() {
                &mut ws_full
            } else {
                ws_tail = Workspace::<f32>::new(pcfg, chunk.len());
                &mut ws_tail
            };
            let targets = fill_batch(pcfg, ws, data, chunk);
            net::forward(pcfg, &layout, &params.data, ws);
            let loss = net::batch_loss(pcfg, ws, &targets);
            if !loss.is_finite() {
                return Err(PolicyError::NonFiniteLoss { epoch, batch: bi });
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            net::backward(pcfg, &layout, &params.data, ws, &targets, &mut grads);
            opt.update(cfg, &mut params.data, &grads);
        }
        debug_assert_eq!(horizon, pcfg.horizon);
        let ckpt = Checkpoint {
            epoch,
            params: params.clone(),
            train_loss: loss_sum / data.len() as f64,
            config: cfg.clone(),
            adam_step: opt.step,
            adam_m: opt.m.clone(),
            adam_v: opt.v.clone(),
            rng_word_pos: rng.get_word_pos(),
        };
        on_epoch(&ckpt);
    }
    Ok(())
}

/// Loads `chunk` into the workspace and returns targets in `[T][B][2]` layout.
fn fill_batch<T: TrainingSample>(cfg: &PolicyConfig, ws: &mut Workspace<f32>, data: &[T], chunk: &[usize]) -> Vec<f32> {
    let batch = chunk.len();
    let mut targets = vec![0.0f32; cfg.horizon * batch * 2];
    for (b, &i) in chunk.iter().enumerate() {
        let s = &data[i];
        load_observation(cfg, ws, b, s.bev_counts(), s.goal());
        for (tau, p) in s.target().iter().take(cfg.horizon).enumerate() {
            targets[(tau * batch + b) * 2] = p.x as f32;
            targets[(tau * batch + b) * 2 + 1] = p.y as f32;
        }
    }
    targets
}

/// Mean per-frame imitation loss of `params` on `data`, without updates.
pub fn offline_val_loss<T: TrainingSample>(params: &PolicyParams<f32>, data: &[T]) -> Result<f64, PolicyError> {
    if data.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let cfg = &params.config;
    let layout = Layout::new(cfg);
    let order: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0f64;
    for chunk in order.chunks(256) {
        let mut ws = Workspace::<f32>::new(cfg, chunk.len());
        let targets = fill_batch(cfg, &mut ws, data, chunk);
        net::forward(cfg, &layout, &params.data, &mut ws);
        for b in 0..chunk.len() {
            let mut l = 0.0f64;
            for tau in 0..cfg.horizon {
                let i = (tau * chunk.len() + b) * 2;
                l += (ws.waypoints[i] - targets[i]).abs() as f64 + (ws.waypoints[i + 1] - targets[i + 1]).abs() as f64;
            }
            if cfg.loss_reduction == super::LossReduction::Mean {
                l /= (2 * cfg.horizon) as f64;
            }
            total += l;
        }
    }
    Ok(total / data.len() as f64)
}
