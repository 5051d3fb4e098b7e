//! Central finite-difference check of the hand-written backward pass.

use super::net::{self, Layout, Workspace};
use super::train::TrainingSample;
use super::{load_observation, PolicyParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub probes: usize,
    pub resampled: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Relative error with an absolute floor below which both values count as zero.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-9 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares analytic gradients of the batch loss against central differences.
///
/// `groups` selects parameter tensors by name prefix (empty = all); each gets
/// `probes_per_group` random probes (all entries when the tensor is smaller).
/// Probes whose ±h evaluations straddle a ReLU or L1 kink are redrawn.
pub fn grad_check<T: TrainingSample>(
    params: &PolicyParams<f64>,
    samples: &[T],
    tolerance: f64,
    probes_per_group: usize,
    groups: &[&str],
    seed: u64,
) -> GradCheckReport {
    let cfg = &params.config;
    let layout = Layout::new(cfg);
    let batch = samples.len();
    let mut ws = Workspace::<f64>::new(cfg, batch);
    let mut targets = vec![0.0f64; cfg.horizon * batch * 2];
    for (b, s) in samples.iter().enumerate() {
        load_observation(cfg, &mut ws, b, s.bev_counts(), s.goal());
        for (tau, p) in s.target().iter().take(cfg.horizon).enumerate() {
            targets[(tau * batch + b) * 2] = p.x;
            targets[(tau * batch + b) * 2 + 1] = p.y;
        }
    }
    net::forward(cfg, &layout, &params.data, &mut ws);
    let mut grads = vec![0.0f64; layout.total];
    net::backward(cfg, &layout, &params.data, &ws, &targets, &mut grads);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = params.data.clone();
    let eval = |theta: &[f64], ws: &mut Workspace<f64>| {
        net::forward(cfg, &layout, theta, ws);
        let loss = net::batch_loss(cfg, ws, &targets);
        let mut sig = ws.relu_signature();
        sig.extend(ws.waypoints.iter().zip(&targets).map(|(w, t)| w > t));
        (loss, sig)
    };
    let mut reports = Vec::new();
    for (name, off, len, _) in layout.groups() {
        if !groups.is_empty() && !groups.iter().any(|g| name.starts_with(g)) {
            continue;
        }
        let exhaustive = len <= probes_per_group;
        let count = if exhaustive { len } else { probes_per_group };
        let mut max_err = 0.0f64;
        let mut resampled = 0;
        for k in 0..count {
            let mut attempts = 0;
            loop {
                let idx = if exhaustive && attempts == 0 { off + k } else { off + rng.random_range(0..len) };
                let orig = theta[idx];
                theta[idx] = orig + FD_STEP;
                let (lp, sp) = eval(&theta, &mut ws);
                theta[idx] = orig - FD_STEP;
                let (lm, sm) = eval(&theta, &mut ws);
                theta[idx] = orig;
                if sp != sm && attempts < 20 {
                    attempts += 1;
                    resampled += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * FD_STEP);
                max_err = max_err.max(rel_error(grads[idx], numeric));
                break;
            }
        }
        reports.push(GroupReport { name, probes: count, resampled, max_rel_error: max_err });
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    GradCheckReport { groups: reports, max_rel_error, passed: max_rel_error < tolerance }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;
    use crate::policy::PolicyConfig;

    struct S {
        counts: Vec<u16>,
        goal: Vec2,
        target: Vec<Vec2>,
    }

    impl TrainingSample for S {
        fn bev_counts(&self) -> &[u16] {
            &self.counts
        }
        fn goal(&self) -> Vec2 {
            self.goal
        }
        fn target(&self) -> &[Vec2] {
            &self.target
        }
    }

    fn small_cfg() -> PolicyConfig {
        PolicyConfig { grid: 16, channels: vec![2, 4, 8], hidden: 8, ..PolicyConfig::default() }
    }

    #[test]
    fn small_network_gradients_match() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<S> = (0..2)
            .map(|_| S {
                counts: (0..16 * 16 * 2).map(|_| rng.random_range(0..4)).collect(),
                goal: Vec2::new(rng.random_range(5.0..20.0), rng.random_range(-5.0..5.0)),
                target: (1..=4).map(|k| Vec2::new(3.0 * k as f64, rng.random_range(-1.0..1.0))).collect(),
            })
            .collect();
        let p = PolicyParams::<f64>::init(cfg, 3);
        let report = grad_check(&p, &samples, 1e-4, 50, &[], 9);
        assert!(report.passed, "{report:#?}");
    }

    #[test]
    fn zero_grid_gives_zero_first_layer_weight_gradient() {
        let cfg = small_cfg();
        let layout = Layout::new(&cfg);
        let p = PolicyParams::<f64>::init(cfg.clone(), 4);
        let mut ws = Workspace::<f64>::new(&cfg, 1);
        load_observation(&cfg, &mut ws, 0, &vec![0u16; 16 * 16 * 2], Vec2::new(10.0, 1.0));
        net::forward(&cfg, &layout, &p.data, &mut ws);
        let targets: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let mut grads = vec![0.0; layout.total];
        net::backward(&cfg, &layout, &p.data, &ws, &targets, &mut grads);
        let c = layout.conv[0];
        assert!(grads[c.w..c.w + c.cout * c.cin * 9].iter().all(|&g| g == 0.0));
    }
}
