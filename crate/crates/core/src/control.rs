//! Lateral and longitudinal PID controllers that turn a waypoint series into
//! steering, throttle and brake.
//!
//! Steering is left-negative: a target to the left of the vehicle yields
//! `steer < 0`.

use crate::series::{WaypointSeries, WAYPOINT_DT};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlCommand {
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
}

impl ControlCommand {
    pub fn new(steer: f64, throttle: f64, brake: f64) -> Self {
        Self { steer, throttle, brake }.clamped()
    }

    /// Clamps to the valid ranges; non-finite components become 0.
    pub fn clamped(self) -> Self {
        let fix = |v: f64, lo: f64, hi: f64| if v.is_finite() { v.clamp(lo, hi) } else { 0.0 };
        Self { steer: fix(self.steer, -1.0, 1.0), throttle: fix(self.throttle, 0.0, 1.0), brake: fix(self.brake, 0.0, 1.0) }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("controller needs at least 2 waypoints, got {0}")]
    DegenerateSeries(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidConfig {
    pub lateral: Gains,
    pub longitudinal: Gains,
    pub integral_max: f64,
    /// Speed errors between `-deadband` and 0 neither throttle nor brake.
    pub brake_deadband: f64,
    /// Below this desired speed the controller commands a full stop.
    pub stop_speed: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            lateral: Gains { kp: 1.0, ki: 0.05, kd: 0.3 },
            longitudinal: Gains { kp: 0.8, ki: 0.05, kd: 0.1 },
            integral_max: 2.0,
            brake_deadband: 0.3,
            stop_speed: 0.2,
        }
    }
}

/// One scalar PID loop.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pid {
    pub integral: f64,
    pub prev_error: Option<f64>,
}

impl Pid {
    pub fn step(&mut self, gains: Gains, error: f64, dt: f64, integral_max: f64) -> f64 {
        self.integral = (self.integral + error * dt).clamp(-integral_max, integral_max);
        let derivative = match self.prev_error {
            Some(p) if dt > 0.0 => (error - p) / dt,
            _ => 0.0,
        };
        self.prev_error = Some(error);
        gains.kp * error + gains.ki * self.integral + gains.kd * derivative
    }
}

/// Per-episode controller state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub lateral: Pid,
    pub longitudinal: Pid,
}

impl PidState {
    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Heading error towards the midpoint of the first two waypoints, positive when
/// the target lies to the right.
pub fn lateral_error(waypoints: &WaypointSeries) -> f64 {
    let w = waypoints.points();
    let mid = (w[0] + w[1]) * 0.5;
    if mid.norm() < 1e-6 {
        0.0
    } else {
        (-mid.y).atan2(mid.x)
    }
}

pub fn desired_speed(waypoints: &WaypointSeries) -> f64 {
    let w = waypoints.points();
    w[1].dist(w[0]) / WAYPOINT_DT
}

/// Runs both controllers for one tick of length `dt`.
pub fn pid(
    waypoints: &WaypointSeries,
    ego_speed: f64,
    state: &mut PidState,
    cfg: &PidConfig,
    dt: f64,
) -> Result<ControlCommand, ControlError> {
    if waypoints.len() < 2 {
        return Err(ControlError::DegenerateSeries(waypoints.len()));
    }
    let e_lat = lateral_error(waypoints);
    let steer = state.lateral.step(cfg.lateral, e_lat, dt, cfg.integral_max);

    let desired = desired_speed(waypoints);
    if !(desired >= cfg.stop_speed) {
        state.longitudinal.step(cfg.longitudinal, desired - ego_speed, dt, cfg.integral_max);
        return Ok(ControlCommand::new(steer, 0.0, 1.0));
    }
    let e_lon = desired - ego_speed;
    let u = state.longitudinal.step(cfg.longitudinal, e_lon, dt, cfg.integral_max);
    let cmd = if e_lon >= -cfg.brake_deadband {
        ControlCommand::new(steer, u, 0.0)
    } else {
        ControlCommand::new(steer, 0.0, -u)
    };
    Ok(cmd)
}
