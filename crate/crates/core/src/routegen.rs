//! Route sampling around intersections, route classes, tiny-route extraction,
//! deduplication and maneuver statistics.

use crate::geom::Vec2;
use crate::roadnet::{Control, Intersection, LaneKind, LaneSpan, RoadNetError, RoadNetwork, RoutePlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::fmt;
use thiserror::Error;

/// Half side of the sampling square around an intersection.
pub const SQUARE_HALF_SIDE: f64 = 50.0;
pub const SNAP_RADIUS: f64 = 30.0;
pub const TINY_MARGIN: f64 = 30.0;
pub const TURN_THRESHOLD_DEG: f64 = 45.0;
pub const DEFAULT_MAX_TRIES: usize = 8;
pub const TINY_MAX_LENGTH: f64 = 100.0;
pub const LONG_MIN_LENGTH: f64 = 1000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RouteGenError {
    #[error("no lane within {radius} m of square vertex ({x:.1}, {y:.1})")]
    SnapFailure { x: f64, y: f64, radius: f64 },
    #[error(transparent)]
    Net(#[from] RoadNetError),
    #[error("empty input")]
    EmptyInput,
    #[error("gave up after {0} attempts")]
    Exhausted(usize),
    #[error("route file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteType {
    Tiny,
    Short,
    Long,
}

impl RouteType {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tiny" => Some(Self::Tiny),
            "short" => Some(Self::Short),
            "long" => Some(Self::Long),
            _ => None,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Self::Tiny => 'T',
            Self::Short => 'S',
            Self::Long => 'L',
        }
    }
}

impl fmt::Display for RouteType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tiny => "tiny",
            Self::Short => "short",
            Self::Long => "long",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum ManeuverLabel {
    FollowLane = 0,
    GoStraight = 1,
    TurnLeft = 2,
    TurnRight = 3,
}

impl ManeuverLabel {
    pub const ALL: [ManeuverLabel; 4] = [Self::FollowLane, Self::GoStraight, Self::TurnLeft, Self::TurnRight];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    /// Label of a junction crossing with the given counter-clockwise heading change.
    pub fn for_crossing(heading_change: f64) -> Self {
        let deg = heading_change.to_degrees();
        if deg > TURN_THRESHOLD_DEG {
            Self::TurnLeft
        } else if deg < -TURN_THRESHOLD_DEG {
            Self::TurnRight
        } else {
            Self::GoStraight
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub id: String,
    pub route_type: RouteType,
    pub n_intersections: usize,
    pub town_seed: u64,
    pub plan: RoutePlan,
}

impl Route {
    pub fn new(town_seed: u64, plan: RoutePlan) -> Self {
        Self {
            id: route_id(&plan.waypoints),
            route_type: classify_route(&plan),
            n_intersections: plan.n_intersections(),
            town_seed,
            plan,
        }
    }

    pub fn length(&self) -> f64 {
        self.plan.total_length
    }
}

/// Stable identifier: SHA-256 over waypoints rounded to whole metres.
pub fn route_id(waypoints: &[Vec2]) -> String {
    let mut h = Sha256::new();
    for p in waypoints {
        h.update((p.x.round() as i64).to_le_bytes());
        h.update((p.y.round() as i64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

pub fn classify_route(plan: &RoutePlan) -> RouteType {
    let len = plan.total_length;
    if plan.n_intersections() <= 1 && len < TINY_MAX_LENGTH {
        RouteType::Tiny
    } else if len > LONG_MIN_LENGTH {
        RouteType::Long
    } else {
        RouteType::Short
    }
}

/// All intersections, light-controlled ones first, each group in id order.
pub fn locate_intersections(net: &RoadNetwork) -> Vec<Intersection> {
    let mut out: Vec<Intersection> =
        net.intersections.iter().filter(|i| matches!(i.control, Control::TrafficLight(_))).cloned().collect();
    out.extend(net.intersections.iter().filter(|i| !matches!(i.control, Control::TrafficLight(_))).cloned());
    out
}

fn square_vertices(center: Vec2) -> [Vec2; 4] {
    let h = SQUARE_HALF_SIDE;
    [
        center + Vec2::new(-h, -h),
        center + Vec2::new(h, -h),
        center + Vec2::new(h, h),
        center + Vec2::new(-h, h),
    ]
}

fn snap_vertex(net: &RoadNetwork, v: Vec2) -> Result<Vec2, RouteGenError> {
    net.nearest_road_point(v, SNAP_RADIUS)
        .map(|lp| lp.point)
        .ok_or(RouteGenError::SnapFailure { x: v.x, y: v.y, radius: SNAP_RADIUS })
}

/// Route between two distinct vertices of the 100 m square around `inter`.
pub fn sample_route(net: &RoadNetwork, inter: &Intersection, rng_seed: u64) -> Result<Route, RouteGenError> {
    sample_route_tries(net, inter, rng_seed, DEFAULT_MAX_TRIES)
}

pub fn sample_route_tries(
    net: &RoadNetwork,
    inter: &Intersection,
    rng_seed: u64,
    max_tries: usize,
) -> Result<Route, RouteGenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let verts = square_vertices(inter.center);
    let mut last_err = RouteGenError::Exhausted(max_tries);
    for _ in 0..max_tries.max(1) {
        let a = rng.random_range(0..4);
        let b = (a + rng.random_range(1..4)) % 4;
        let (pa, pb) = match (snap_vertex(net, verts[a]), snap_vertex(net, verts[b])) {
            (Ok(pa), Ok(pb)) => (pa, pb),
            (Err(e), _) | (_, Err(e)) => {
                last_err = e;
                continue;
            }
        };
        if pa.dist(pb) < 1.0 {
            continue;
        }
        let plan = match net.plan_route(pa, pb) {
            Ok(p) => p,
            Err(e) => {
                last_err = e.into();
                continue;
            }
        };
        let near = plan.centerline.points.iter().any(|p| p.dist(inter.center) <= SQUARE_HALF_SIDE);
        if plan.total_length > 0.0 && near {
            return Ok(Route::new(net.town_seed, plan));
        }
    }
    Err(last_err)
}

/// Routes never U-turn through the dead-end loops at the town edge.
fn uses_turnaround(net: &RoadNetwork, plan: &RoutePlan) -> bool {
    plan.spans.iter().any(|sp| net.lanes[sp.lane].kind == LaneKind::Turnaround)
}

/// One tiny route per junction crossing: 30 m before the stop line to 30 m
/// after the exit.
pub fn tinyfy(net: &RoadNetwork, route: &Route) -> Vec<Route> {
    route
        .plan
        .passes
        .iter()
        .filter_map(|pass| {
            let plan = route.plan.slice(net, pass.s_entry - TINY_MARGIN, pass.s_exit + TINY_MARGIN);
            let r = Route::new(route.town_seed, plan);
            (r.route_type == RouteType::Tiny && r.n_intersections == 1).then_some(r)
        })
        .collect()
}

/// Keeps the first route per id, preserving order.
pub fn dedupe_routes(routes: &[Route]) -> Vec<Route> {
    let mut seen = HashSet::new();
    routes.iter().filter(|r| seen.insert(r.id.clone())).cloned().collect()
}

/// Label at route arclength `s`.
pub fn maneuver_at(plan: &RoutePlan, s: f64) -> ManeuverLabel {
    plan.passes
        .iter()
        .find(|p| s >= p.s_entry && s < p.s_exit)
        .map(|p| ManeuverLabel::for_crossing(p.heading_change))
        .unwrap_or(ManeuverLabel::FollowLane)
}

/// Labelled segments `(s_from, s_to, label)` between consecutive sparse waypoints.
pub fn route_segments(plan: &RoutePlan) -> Vec<(f64, f64, ManeuverLabel)> {
    plan.waypoint_s
        .windows(2)
        .map(|w| (w[0], w[1], maneuver_at(plan, 0.5 * (w[0] + w[1]))))
        .collect()
}

/// Percentages in [`ManeuverLabel::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManeuverDistribution {
    pub follow_lane: f64,
    pub go_straight: f64,
    pub turn_left: f64,
    pub turn_right: f64,
}

impl ManeuverDistribution {
    pub fn from_weights(w: [f64; 4]) -> Result<Self, RouteGenError> {
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return Err(RouteGenError::EmptyInput);
        }
        let p = w.map(|v| 100.0 * v / total);
        Ok(Self { follow_lane: p[0], go_straight: p[1], turn_left: p[2], turn_right: p[3] })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.follow_lane, self.go_straight, self.turn_left, self.turn_right]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.as_array().iter().zip(other.as_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Row in the shape `69.8 / 11.3 / 6.9 / 10.3`.
    pub fn row(&self) -> String {
        let a = self.as_array();
        format!("{:.1} / {:.1} / {:.1} / {:.1}", a[0], a[1], a[2], a[3])
    }
}

/// Arc-length weighted distribution over route segments.
pub fn maneuver_distribution(routes: &[Route]) -> Result<ManeuverDistribution, RouteGenError> {
    if routes.is_empty() {
        return Err(RouteGenError::EmptyInput);
    }
    let mut w = [0.0; 4];
    for r in routes {
        for (a, b, label) in route_segments(&r.plan) {
            w[label as usize] += b - a;
        }
    }
    if w.iter().sum::<f64>() == 0.0 {
        // Only zero-length routes: count them as lane following.
        w[0] = routes.len() as f64;
    }
    ManeuverDistribution::from_weights(w)
}

/// Frame-count weighted distribution.
pub fn maneuver_distribution_of_labels(labels: impl IntoIterator<Item = ManeuverLabel>) -> Result<ManeuverDistribution, RouteGenError> {
    let mut w = [0.0; 4];
    for l in labels {
        w[l as usize] += 1.0;
    }
    ManeuverDistribution::from_weights(w)
}

/// Random multi-leg route through lane midpoints, at least `min_length` long.
/// Legs run between junctions only; plans that need a turnaround loop are
/// rejected.
pub fn random_route(net: &RoadNetwork, seed: u64, min_length: f64, max_length: f64) -> Result<Route, RouteGenError> {
    let roads: Vec<usize> = net
        .lanes
        .iter()
        .filter(|l| {
            l.kind == LaneKind::Road && l.length() > 10.0 && l.from_intersection.is_some() && l.to_intersection.is_some()
        })
        .map(|l| l.id)
        .collect();
    if roads.is_empty() {
        return Err(RouteGenError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const ATTEMPTS: usize = 64;
    for _ in 0..ATTEMPTS {
        let pick = |rng: &mut ChaCha8Rng| {
            let lane = &net.lanes[roads[rng.random_range(0..roads.len())]];
            lane.points.sample(rng.random_range(0.2..0.8) * lane.length()).0
        };
        let mut pts = vec![pick(&mut rng)];
        let mut plan = net.plan_route_via(&pts)?;
        while plan.total_length < min_length {
            let mut next = pick(&mut rng);
            while next.dist(*pts.last().unwrap()) < 20.0 {
                next = pick(&mut rng);
            }
            pts.push(next);
            plan = net.plan_route_via(&pts)?;
        }
        if plan.total_length <= max_length && !uses_turnaround(net, &plan) {
            return Ok(Route::new(net.town_seed, plan));
        }
    }
    Err(RouteGenError::Exhausted(ATTEMPTS))
}

/// Generates `count` distinct routes of one class.
///
/// Tiny routes come from tinyfied square samples, short routes from square
/// samples (falling back to two-leg random routes), long routes from random
/// multi-leg routes.
pub fn generate_routes(
    net: &RoadNetwork,
    route_type: RouteType,
    count: usize,
    seed: u64,
    max_tries: usize,
) -> Result<Vec<Route>, RouteGenError> {
    let inters = locate_intersections(net);
    let mut out: Vec<Route> = Vec::new();
    let mut seen = HashSet::new();
    let budget = 200 + count * 50;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempt = 0;
    while out.len() < count {
        if attempt >= budget {
            return Err(RouteGenError::Exhausted(attempt));
        }
        attempt += 1;
        let s: u64 = rng.random();
        let candidates: Vec<Route> = match route_type {
            RouteType::Tiny | RouteType::Short => {
                if inters.is_empty() {
                    return Err(RouteGenError::EmptyInput);
                }
                let inter = &inters[rng.random_range(0..inters.len())];
                match sample_route_tries(net, inter, s, max_tries) {
                    Ok(r) if route_type == RouteType::Tiny => tinyfy(net, &r),
                    Ok(r) if r.route_type == RouteType::Short && !uses_turnaround(net, &r.plan) => vec![r],
                    _ => match random_route(net, s, 200.0, LONG_MIN_LENGTH) {
                        Ok(r) if route_type == RouteType::Short && r.route_type == RouteType::Short => vec![r],
                        _ => Vec::new(),
                    },
                }
            }
            RouteType::Long => random_route(net, s, 1.1 * LONG_MIN_LENGTH, 2.0 * LONG_MIN_LENGTH).into_iter().collect(),
        };
        for r in candidates {
            if out.len() < count && r.route_type == route_type && !uses_turnaround(net, &r.plan) && seen.insert(r.id.clone()) {
                out.push(r);
            }
        }
    }
    Ok(out)
}

/// One entry of a route-set file. `spans` allows an exact rebuild of the plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub id: String,
    #[serde(rename = "type")]
    pub route_type: RouteType,
    pub waypoints: Vec<Vec2>,
    pub length_m: f64,
    pub n_intersections: usize,
    pub town_seed: u64,
    pub spans: Vec<LaneSpan>,
}

pub fn routes_to_json(routes: &[Route]) -> String {
    let recs: Vec<RouteRecord> = routes
        .iter()
        .map(|r| RouteRecord {
            id: r.id.clone(),
            route_type: r.route_type,
            waypoints: r.plan.waypoints.clone(),
            length_m: r.plan.total_length,
            n_intersections: r.n_intersections,
            town_seed: r.town_seed,
            spans: r.plan.spans.clone(),
        })
        .collect();
    serde_json::to_string_pretty(&recs).expect("routes serialise")
}

/// Rebuilds routes against their town; ids and lengths are verified.
pub fn routes_from_json(text: &str, net: &RoadNetwork) -> Result<Vec<Route>, RouteGenError> {
    let recs: Vec<RouteRecord> = serde_json::from_str(text).map_err(|e| RouteGenError::Format(e.to_string()))?;
    recs.into_iter()
        .map(|rec| {
            if rec.town_seed != net.town_seed {
                return Err(RouteGenError::Format(format!("route {} belongs to town {}", rec.id, rec.town_seed)));
            }
            if rec.spans.iter().any(|s| s.lane >= net.lanes.len()) {
                return Err(RouteGenError::Format(format!("route {} references unknown lanes", rec.id)));
            }
            let r = Route::new(net.town_seed, RoutePlan::from_spans(net, rec.spans));
            if r.id != rec.id || (r.plan.total_length - rec.length_m).abs() > 1e-6 {
                return Err(RouteGenError::Format(format!("route {} does not match its town", rec.id)));
            }
            Ok(r)
        })
        .collect()
}
