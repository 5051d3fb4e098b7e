use crate::geom::Vec2;
use serde::{Deserialize, Serialize};

/// Default number of predicted future waypoints.
pub const HORIZON: usize = 4;
/// Time between consecutive waypoints, seconds.
pub const WAYPOINT_DT: f64 = 0.5;

/// Future ego-frame positions `w_{t+1} .. w_{t+T}` in metres (x forward, y left).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WaypointSeries(pub Vec<Vec2>);

impl WaypointSeries {
    pub fn new(points: Vec<Vec2>) -> Self {
        Self(points)
    }

    /// `n` coincident waypoints at the ego origin (the stop command).
    pub fn stopped(n: usize) -> Self {
        Self(vec![Vec2::ZERO; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[Vec2] {
        &self.0
    }
}
