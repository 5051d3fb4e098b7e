//! LiDAR-like point clouds, the two-channel BEV histogram and the goal input.

use crate::geom::{Pose, Vec2};
use crate::roadnet::{RoadNetwork, RoutePlan};
use crate::routegen::Route;
use crate::simcore::WorldState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Region covered by the BEV grid: x in [0, 32) m ahead, y in [-16, 16) m.
pub const BEV_FORWARD: f64 = 32.0;
pub const BEV_SIDE: f64 = 16.0;
pub const GRID_CELLS: usize = 64;
pub const CELL_SIZE: f64 = BEV_FORWARD / GRID_CELLS as f64;
/// Points with z above this count as "over the ground plane".
pub const Z_SPLIT: f64 = 0.2;
pub const N_RAYS: usize = 360;
pub const RAY_RANGE: f64 = 32.0;
/// Points emitted per ray that hits an actor.
pub const HITS_PER_RAY: usize = 4;
/// Step of the road-edge march along each ray.
pub const EDGE_STEP: f64 = 0.25;
/// Arrival radius for advancing the goal waypoint.
pub const GOAL_RADIUS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Ego-frame points (x forward, y left, z up), metres.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

/// `rows x cols x 2` counts, row-major and channel-last.
///
/// Row `r` covers x in `[r * CELL_SIZE, (r + 1) * CELL_SIZE)`, column `c`
/// covers y in `[-16 + c * CELL_SIZE, -16 + (c + 1) * CELL_SIZE)`.
/// Channel 0 counts points with z <= [`Z_SPLIT`], channel 1 the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevImage {
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<u16>,
}

impl BevImage {
    pub fn zeros() -> Self {
        Self { rows: GRID_CELLS, cols: GRID_CELLS, counts: vec![0; GRID_CELLS * GRID_CELLS * 2] }
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> u16 {
        self.counts[(row * self.cols + col) * 2 + channel]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Next route goal expressed in the ego frame, with its 1-based route index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalInput {
    pub goal: Vec2,
    pub index: usize,
}

/// Policy input: BEV pseudo-image plus the ego-frame goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub bev: BevImage,
    pub goal: GoalInput,
}

/// Grid cell of an ego-frame point, if inside the BEV extent.
pub fn cell_of(x: f64, y: f64) -> Option<(usize, usize)> {
    if !(0.0..BEV_FORWARD).contains(&x) || !(-BEV_SIDE..BEV_SIDE).contains(&y) {
        return None;
    }
    let row = ((x / CELL_SIZE).floor() as usize).min(GRID_CELLS - 1);
    let col = (((y + BEV_SIDE) / CELL_SIZE).floor() as usize).min(GRID_CELLS - 1);
    Some((row, col))
}

pub fn bev_histogram(cloud: &PointCloud) -> BevImage {
    let mut img = BevImage::zeros();
    for p in &cloud.points {
        if let Some((row, col)) = cell_of(p.x, p.y) {
            let ch = usize::from(p.z > Z_SPLIT);
            let c = &mut img.counts[(row * GRID_CELLS + col) * 2 + ch];
            *c = c.saturating_add(1);
        }
    }
    img
}

/// Casts 360 azimuth rays from the ego centre.
///
/// A ray hitting an actor within range yields [`HITS_PER_RAY`] points at the
/// hit location with heights uniform in `[0, actor height]`. Otherwise it
/// yields one ground point where the drivable surface ends, or at full range.
pub fn raycast_pointcloud(world: &WorldState, net: &RoadNetwork) -> PointCloud {
    let ego = world.ego.pose;
    let origin = ego.position;
    let near: Vec<_> = world
        .actors
        .iter()
        .filter(|a| a.pose.position.dist(origin) <= RAY_RANGE + a.half_extents.norm())
        .map(|a| (a.obb(), a.height))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed ^ world.tick.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let drivable = net.drivable();
    let start_on = drivable.is_drivable(origin);
    let mut points = Vec::with_capacity(N_RAYS * 2);
    for k in 0..N_RAYS {
        let local = Vec2::from_angle(std::f64::consts::TAU * k as f64 / N_RAYS as f64);
        let dir = local.rotate(ego.heading);
        let hit = near
            .iter()
            .filter_map(|(b, h)| b.ray_hit(origin, dir).filter(|&t| t <= RAY_RANGE).map(|t| (t, *h)))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((t, h)) = hit {
            let p = local * t;
            for _ in 0..HITS_PER_RAY {
                points.push(Point3 { x: p.x, y: p.y, z: rng.random_range(0.0..=h) });
            }
            continue;
        }
        let mut t = EDGE_STEP;
        while t < RAY_RANGE && drivable.is_drivable(origin + dir * t) == start_on {
            t += EDGE_STEP;
        }
        let p = local * t.min(RAY_RANGE);
        points.push(Point3 { x: p.x, y: p.y, z: 0.0 });
    }
    PointCloud { points }
}

/// Advances a 1-based goal index while the ego is within [`GOAL_RADIUS`] of
/// the current goal and it is not the last one.
pub fn advance_goal(waypoints: &[Vec2], ego: Vec2, g_prev: usize) -> usize {
    let n = waypoints.len();
    let mut g = g_prev.clamp(1, n.max(1));
    while g < n && ego.dist(waypoints[g - 1]) <= GOAL_RADIUS {
        g += 1;
    }
    g
}

/// Goal waypoint `u_g` in the ego frame.
pub fn goal_input(ego: &Pose, plan: &RoutePlan, g: usize) -> GoalInput {
    let g = g.clamp(1, plan.waypoints.len());
    GoalInput { goal: ego.to_ego(plan.waypoints[g - 1]), index: g }
}

/// Arrival-based goal update followed by the ego-frame transform.
pub fn goal_in_ego_frame(world: &WorldState, route: &Route, g_prev: usize) -> GoalInput {
    let g = advance_goal(&route.plan.waypoints, world.ego.pose.position, g_prev);
    goal_input(&world.ego.pose, &route.plan, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_mapping() {
        assert_eq!(cell_of(10.0, 0.0), Some((20, 32)));
        assert_eq!(cell_of(-1.0, 0.0), None);
        assert_eq!(cell_of(0.0, -16.0), Some((0, 0)));
        assert_eq!(cell_of(31.99, 15.99), Some((63, 63)));
        assert_eq!(cell_of(32.0, 0.0), None);
        let img = bev_histogram(&PointCloud { points: vec![Point3 { x: 10.0, y: 0.0, z: 1.0 }] });
        assert_eq!(img.get(20, 32, 1), 1);
        assert_eq!(img.total(), 1);
    }

    #[test]
    fn goal_advances_on_arrival_only() {
        let w = vec![Vec2::new(0.0, 0.0), Vec2::new(50.0, 0.0), Vec2::new(100.0, 0.0)];
        assert_eq!(advance_goal(&w, Vec2::new(0.0, 0.0), 1), 2);
        assert_eq!(advance_goal(&w, Vec2::new(20.0, 0.0), 2), 2);
        assert_eq!(advance_goal(&w, Vec2::new(100.0, 0.0), 3), 3);
    }
}
