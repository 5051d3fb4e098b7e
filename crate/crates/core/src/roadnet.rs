//! Procedural towns, lane-graph routing and route-relative geometry.
//!
//! A town is a `blocks x blocks` grid of four-way intersections joined by
//! two-way streets. Every street is modelled as two opposing lanes offset
//! 1.75 m to the right of the street axis. Streets leaving the grid end in a
//! turnaround loop so that every grid node is a genuine four-way junction.

use crate::geom::{resample, wrap_angle, Polyline, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
/// Lateral offset of a lane centreline from its street axis.
pub const LANE_OFFSET: f64 = 1.75;
/// Half width of a lane; the road edge sits this far outside the lane centreline.
pub const LANE_HALF_WIDTH: f64 = 1.75;
/// Half size of the square intersection box.
pub const INTERSECTION_HALF_SIZE: f64 = 9.0;
pub const LANE_SPACING: f64 = 1.0;
pub const ROAD_SPEED_LIMIT: f64 = 10.0;
pub const CONNECTOR_SPEED_LIMIT: f64 = 5.0;

const STUB_LENGTH: f64 = 40.0;
const LOOP_RADIUS: f64 = 6.0;
const LOOP_LEAD: f64 = 12.0;
const INDEX_CELL: f64 = 10.0;
const DRIVABLE_RES: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoadNetError {
    #[error("town needs at least 2 blocks per side, got {0}")]
    DegenerateTown(usize),
    #[error("invalid block size range [{0}, {1}]")]
    BadBlockSize(f64, f64),
    #[error("point ({x:.2}, {y:.2}) is not within {radius} m of any lane")]
    OffNetwork { x: f64, y: f64, radius: f64 },
    #[error("no path between the requested points")]
    NoPath,
    #[error("unsupported town format {0}")]
    Format(u32),
    #[error("invalid town: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneKind {
    Road,
    Turnaround,
    Connector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: usize,
    pub kind: LaneKind,
    pub points: Polyline,
    pub successors: Vec<usize>,
    pub predecessors: Vec<usize>,
    pub speed_limit: f64,
    /// Intersection the lane leaves from (roads) or lies inside (connectors).
    pub from_intersection: Option<usize>,
    /// Intersection the lane drives into.
    pub to_intersection: Option<usize>,
}

impl Lane {
    pub fn length(&self) -> f64 {
        self.points.length()
    }

    pub fn start(&self) -> Vec2 {
        self.points.points[0]
    }

    pub fn end(&self) -> Vec2 {
        *self.points.points.last().unwrap()
    }

    pub fn start_heading(&self) -> f64 {
        self.points.sample(0.0).1.angle()
    }

    pub fn end_heading(&self) -> f64 {
        self.points.sample(self.length()).1.angle()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightTiming {
    pub green: f64,
    pub yellow: f64,
    pub red: f64,
    pub offset: f64,
}

impl LightTiming {
    pub fn cycle(&self) -> f64 {
        self.green + self.yellow + self.red
    }
}

impl Default for LightTiming {
    fn default() -> Self {
        Self { green: 10.0, yellow: 3.0, red: 15.0, offset: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightColor {
    Green,
    Yellow,
    Red,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Control {
    TrafficLight(LightTiming),
    StopSign,
    Uncontrolled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: usize,
    pub center: Vec2,
    pub half_size: f64,
    pub control: Control,
    /// Road lanes entering or leaving the junction.
    pub incident_lanes: Vec<usize>,
    pub connectors: Vec<usize>,
}

impl Intersection {
    /// Light colour seen by traffic approaching on a lane with heading `approach_heading`.
    ///
    /// East-west approaches run the timing as given; north-south approaches are
    /// shifted by half a cycle. With `red >= green + yellow` the two axes are
    /// never green at once and each change has `(red - green - yellow) / 2` of
    /// all-red.
    pub fn light_color(&self, approach_heading: f64, time: f64) -> Option<LightColor> {
        let Control::TrafficLight(t) = self.control else {
            return None;
        };
        let dir = Vec2::from_angle(approach_heading);
        let shift = if dir.x.abs() >= dir.y.abs() { 0.0 } else { 0.5 * t.cycle() };
        let phase = (time + t.offset - shift).rem_euclid(t.cycle());
        Some(if phase < t.green {
            LightColor::Green
        } else if phase < t.green + t.yellow {
            LightColor::Yellow
        } else {
            LightColor::Red
        })
    }

    pub fn contains(&self, p: Vec2) -> bool {
        (p.x - self.center.x).abs() <= self.half_size && (p.y - self.center.y).abs() <= self.half_size
    }
}

/// Location on a lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanePoint {
    pub lane: usize,
    pub s: f64,
    pub point: Vec2,
    pub distance: f64,
}

#[derive(Debug, Clone, Default)]
struct LaneIndex {
    origin: Vec2,
    cols: usize,
    rows: usize,
    cells: Vec<Vec<(usize, usize)>>,
}

impl LaneIndex {
    fn build(lanes: &[Lane], lo: Vec2, hi: Vec2) -> Self {
        let origin = lo;
        let cols = (((hi.x - lo.x) / INDEX_CELL).ceil() as usize).max(1);
        let rows = (((hi.y - lo.y) / INDEX_CELL).ceil() as usize).max(1);
        let mut cells = vec![Vec::new(); cols * rows];
        for lane in lanes {
            let pts = &lane.points.points;
            for seg in 0..pts.len().saturating_sub(1) {
                let (a, b) = (pts[seg], pts[seg + 1]);
                let (c0, r0) = Self::cell_of(origin, a.x.min(b.x), a.y.min(b.y));
                let (c1, r1) = Self::cell_of(origin, a.x.max(b.x), a.y.max(b.y));
                for r in r0.max(0)..=r1.min(rows as i64 - 1) {
                    for c in c0.max(0)..=c1.min(cols as i64 - 1) {
                        cells[r as usize * cols + c as usize].push((lane.id, seg));
                    }
                }
            }
        }
        Self { origin, cols, rows, cells }
    }

    fn cell_of(origin: Vec2, x: f64, y: f64) -> (i64, i64) {
        (((x - origin.x) / INDEX_CELL).floor() as i64, ((y - origin.y) / INDEX_CELL).floor() as i64)
    }
}

/// Rasterised drivable surface: lanes widened to the road edge plus intersection boxes.
#[derive(Debug, Clone, Default)]
pub struct DrivableMap {
    origin: Vec2,
    cols: usize,
    rows: usize,
    cells: Vec<bool>,
}

impl DrivableMap {
    pub fn is_drivable(&self, p: Vec2) -> bool {
        let c = ((p.x - self.origin.x) / DRIVABLE_RES).floor();
        let r = ((p.y - self.origin.y) / DRIVABLE_RES).floor();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return false;
        }
        self.cells[r as usize * self.cols + c as usize]
    }

    fn build(lanes: &[Lane], intersections: &[Intersection], lo: Vec2, hi: Vec2) -> Self {
        let origin = lo;
        let cols = ((hi.x - lo.x) / DRIVABLE_RES).ceil() as usize + 1;
        let rows = ((hi.y - lo.y) / DRIVABLE_RES).ceil() as usize + 1;
        let mut cells = vec![false; cols * rows];
        let reach = LANE_HALF_WIDTH;
        let mut stamp = |a: Vec2, b: Vec2| {
            let c0 = (((a.x.min(b.x) - reach - origin.x) / DRIVABLE_RES).floor() as i64).max(0);
            let c1 = (((a.x.max(b.x) + reach - origin.x) / DRIVABLE_RES).ceil() as i64).min(cols as i64 - 1);
            let r0 = (((a.y.min(b.y) - reach - origin.y) / DRIVABLE_RES).floor() as i64).max(0);
            let r1 = (((a.y.max(b.y) + reach - origin.y) / DRIVABLE_RES).ceil() as i64).min(rows as i64 - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let center = Vec2::new(
                        origin.x + (c as f64 + 0.5) * DRIVABLE_RES,
                        origin.y + (r as f64 + 0.5) * DRIVABLE_RES,
                    );
                    let (q, _) = crate::geom::closest_on_segment(center, a, b);
                    if center.dist(q) <= reach {
                        cells[r as usize * cols + c as usize] = true;
                    }
                }
            }
        };
        for lane in lanes {
            for w in lane.points.points.windows(2) {
                stamp(w[0], w[1]);
            }
        }
        let mut map = Self { origin, cols, rows, cells };
        for inter in intersections {
            let h = inter.half_size;
            let c0 = ((inter.center.x - h - origin.x) / DRIVABLE_RES).floor().max(0.0) as usize;
            let c1 = (((inter.center.x + h - origin.x) / DRIVABLE_RES).ceil() as usize).min(cols - 1);
            let r0 = ((inter.center.y - h - origin.y) / DRIVABLE_RES).floor().max(0.0) as usize;
            let r1 = (((inter.center.y + h - origin.y) / DRIVABLE_RES).ceil() as usize).min(rows - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    map.cells[r * cols + c] = true;
                }
            }
        }
        map
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub format: u32,
    pub town_seed: u64,
    pub lanes: Vec<Lane>,
    pub intersections: Vec<Intersection>,
    #[serde(skip)]
    index: LaneIndex,
    #[serde(skip)]
    drivable: DrivableMap,
    #[serde(skip)]
    bounds: (Vec2, Vec2),
}

impl PartialEq for RoadNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.format == other.format
            && self.town_seed == other.town_seed
            && self.lanes == other.lanes
            && self.intersections == other.intersections
    }
}

/// Parameters of the procedural town generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TownSpec {
    pub seed: u64,
    pub blocks: usize,
    pub block_size_min: f64,
    pub block_size_max: f64,
}

impl TownSpec {
    pub fn new(seed: u64, blocks: usize, block_size_min: f64, block_size_max: f64) -> Self {
        Self { seed, blocks, block_size_min, block_size_max }
    }
}

pub fn build_town(spec: &TownSpec) -> Result<RoadNetwork, RoadNetError> {
    let n = spec.blocks;
    if n < 2 {
        return Err(RoadNetError::DegenerateTown(n));
    }
    if !(spec.block_size_min > 0.0 && spec.block_size_max >= spec.block_size_min) {
        return Err(RoadNetError::BadBlockSize(spec.block_size_min, spec.block_size_max));
    }
    let min_gap = 2.0 * INTERSECTION_HALF_SIZE + 2.0;
    if spec.block_size_min < min_gap {
        return Err(RoadNetError::BadBlockSize(spec.block_size_min, spec.block_size_max));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw_spacing = |rng: &mut ChaCha8Rng| {
        if spec.block_size_max > spec.block_size_min {
            rng.random_range(spec.block_size_min..spec.block_size_max)
        } else {
            spec.block_size_min
        }
    };
    let mut xs = vec![0.0];
    for _ in 1..n {
        let d = draw_spacing(&mut rng);
        xs.push(xs.last().unwrap() + d);
    }
    let mut ys = vec![0.0];
    for _ in 1..n {
        let d = draw_spacing(&mut rng);
        ys.push(ys.last().unwrap() + d);
    }

    let mut intersections = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let control = match rng.random_range(0.0..1.0) {
                u if u < 0.4 => {
                    let base = LightTiming::default();
                    Control::TrafficLight(LightTiming { offset: rng.random_range(0.0..base.cycle()), ..base })
                }
                u if u < 0.6 => Control::StopSign,
                _ => Control::Uncontrolled,
            };
            intersections.push(Intersection {
                id: j * n + i,
                center: Vec2::new(xs[i], ys[j]),
                half_size: INTERSECTION_HALF_SIZE,
                control,
                incident_lanes: Vec::new(),
                connectors: Vec::new(),
            });
        }
    }

    let mut lanes: Vec<Lane> = Vec::new();
    let push_lane = |lanes: &mut Vec<Lane>, kind, pts: Vec<Vec2>, from, to| {
        let id = lanes.len();
        let speed_limit = if kind == LaneKind::Connector { CONNECTOR_SPEED_LIMIT } else { ROAD_SPEED_LIMIT };
        lanes.push(Lane {
            id,
            kind,
            points: Polyline::new(resample(&pts, LANE_SPACING)),
            successors: Vec::new(),
            predecessors: Vec::new(),
            speed_limit,
            from_intersection: from,
            to_intersection: to,
        });
        id
    };

    let r = INTERSECTION_HALF_SIZE;
    // Streets between neighbouring grid nodes.
    let mut streets: Vec<(usize, usize)> = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let a = j * n + i;
            if i + 1 < n {
                streets.push((a, a + 1));
            }
            if j + 1 < n {
                streets.push((a, a + n));
            }
        }
    }
    for &(a, b) in &streets {
        for (from, to) in [(a, b), (b, a)] {
            let pa = intersections[from].center;
            let pb = intersections[to].center;
            let d = (pb - pa).normalized();
            let off = d.right_normal() * LANE_OFFSET;
            let pts = vec![pa + d * r + off, pb - d * r + off];
            let id = push_lane(&mut lanes, LaneKind::Road, pts, Some(from), Some(to));
            intersections[from].incident_lanes.push(id);
            intersections[to].incident_lanes.push(id);
        }
    }
    // Dead-end stubs with a turnaround loop on every outward face of the grid.
    for j in 0..n {
        for i in 0..n {
            let node = j * n + i;
            let mut dirs = Vec::new();
            if i == 0 {
                dirs.push(Vec2::new(-1.0, 0.0));
            }
            if i == n - 1 {
                dirs.push(Vec2::new(1.0, 0.0));
            }
            if j == 0 {
                dirs.push(Vec2::new(0.0, -1.0));
            }
            if j == n - 1 {
                dirs.push(Vec2::new(0.0, 1.0));
            }
            for d in dirs {
                let c = intersections[node].center;
                let right = d.right_normal();
                let end = c + d * (r + STUB_LENGTH);
                let out_pts = vec![c + d * r + right * LANE_OFFSET, end + right * LANE_OFFSET];
                let out = push_lane(&mut lanes, LaneKind::Road, out_pts, Some(node), None);
                let loop_pts = turnaround(end, d);
                let lp = push_lane(&mut lanes, LaneKind::Turnaround, loop_pts, None, None);
                let back_pts = vec![end - right * LANE_OFFSET, c + d * r - right * LANE_OFFSET];
                let back = push_lane(&mut lanes, LaneKind::Road, back_pts, None, Some(node));
                lanes[out].successors.push(lp);
                lanes[lp].successors.push(back);
                intersections[node].incident_lanes.push(out);
                intersections[node].incident_lanes.push(back);
            }
        }
    }
    // Connectors through each junction: every approach to every other exit.
    for node in 0..intersections.len() {
        let incident = intersections[node].incident_lanes.clone();
        let incoming: Vec<usize> = incident.iter().copied().filter(|&l| lanes[l].to_intersection == Some(node)).collect();
        let outgoing: Vec<usize> =
            incident.iter().copied().filter(|&l| lanes[l].from_intersection == Some(node)).collect();
        for &lin in &incoming {
            for &lout in &outgoing {
                let din = Vec2::from_angle(lanes[lin].end_heading());
                let dout = Vec2::from_angle(lanes[lout].start_heading());
                if din.dot(dout) < -0.9 {
                    continue; // no U-turns inside junctions
                }
                let pts = connector_curve(lanes[lin].end(), din, lanes[lout].start(), dout);
                let id = push_lane(&mut lanes, LaneKind::Connector, pts, Some(node), Some(node));
                lanes[lin].successors.push(id);
                lanes[id].successors.push(lout);
                intersections[node].connectors.push(id);
            }
        }
    }
    // Predecessors mirror successors.
    for id in 0..lanes.len() {
        for k in 0..lanes[id].successors.len() {
            let s = lanes[id].successors[k];
            lanes[s].predecessors.push(id);
        }
    }
    // Connector endpoints must coincide exactly with the lanes they join.
    for id in 0..lanes.len() {
        let succ = lanes[id].successors.clone();
        for s in succ {
            let p = lanes[id].end();
            let mut pts = lanes[s].points.points.clone();
            pts[0] = p;
            lanes[s].points = Polyline::new(pts);
        }
    }
    let mut net = RoadNetwork {
        format: FORMAT_VERSION,
        town_seed: spec.seed,
        lanes,
        intersections,
        index: LaneIndex::default(),
        drivable: DrivableMap::default(),
        bounds: (Vec2::ZERO, Vec2::ZERO),
    };
    net.finalize();
    Ok(net)
}

fn turnaround(end: Vec2, d: Vec2) -> Vec<Vec2> {
    // Balloon loop: S-curve outwards to a circle, half circle, S-curve back.
    let right = d.right_normal();
    let left = -right;
    let a = end + right * LANE_OFFSET;
    let b = end + left * LANE_OFFSET;
    let center = end + d * LOOP_LEAD;
    let c_in = center + right * LOOP_RADIUS;
    let c_out = center + left * LOOP_RADIUS;
    let mut pts = cubic(a, a + d * (LOOP_LEAD / 2.0), c_in - d * (LOOP_LEAD / 2.0), c_in, 24);
    let start_ang = right.angle();
    for k in 1..=48 {
        let ang = start_ang + std::f64::consts::PI * k as f64 / 48.0;
        pts.push(center + Vec2::from_angle(ang) * LOOP_RADIUS);
    }
    let tail = cubic(c_out, c_out - d * (LOOP_LEAD / 2.0), b + d * (LOOP_LEAD / 2.0), b, 24);
    pts.extend(tail.into_iter().skip(1));
    pts
}

fn cubic(p0: Vec2, p1: Vec2, p2: Vec2, p3: Vec2, steps: usize) -> Vec<Vec2> {
    (0..=steps)
        .map(|k| {
            let t = k as f64 / steps as f64;
            let u = 1.0 - t;
            p0 * (u * u * u) + p1 * (3.0 * u * u * t) + p2 * (3.0 * u * t * t) + p3 * (t * t * t)
        })
        .collect()
}

fn connector_curve(p_in: Vec2, d_in: Vec2, p_out: Vec2, d_out: Vec2) -> Vec<Vec2> {
    let cross = d_in.cross(d_out);
    if cross.abs() < 1e-9 {
        return vec![p_in, p_out];
    }
    // Corner where the two lane lines meet; for perpendicular lanes both legs
    // have equal length and the curve is a circular arc of that radius.
    let t = (p_out - p_in).cross(d_out) / cross;
    let corner = p_in + d_in * t;
    let leg_in = corner.dist(p_in);
    let leg_out = corner.dist(p_out);
    if d_in.dot(d_out).abs() < 1e-9 && (leg_in - leg_out).abs() < 1e-6 {
        let turn_left = cross > 0.0;
        let normal = if turn_left { -d_in.right_normal() } else { d_in.right_normal() };
        let center = p_in + normal * leg_in;
        let a0 = (p_in - center).angle();
        let sweep = if turn_left { std::f64::consts::FRAC_PI_2 } else { -std::f64::consts::FRAC_PI_2 };
        let steps = 64;
        let mut pts: Vec<Vec2> =
            (0..=steps).map(|k| center + Vec2::from_angle(a0 + sweep * k as f64 / steps as f64) * leg_in).collect();
        pts[0] = p_in;
        pts[steps] = p_out;
        return pts;
    }
    (0..=64)
        .map(|k| {
            let t = k as f64 / 64.0;
            let u = 1.0 - t;
            p_in * (u * u) + corner * (2.0 * u * t) + p_out * (t * t)
        })
        .collect()
}

impl RoadNetwork {
    /// Rebuilds derived spatial indices; call after deserialising.
    pub fn finalize(&mut self) {
        for lane in &mut self.lanes {
            lane.points.rebuild();
        }
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in self.lanes.iter().flat_map(|l| l.points.points.iter()) {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        if self.lanes.is_empty() {
            lo = Vec2::ZERO;
            hi = Vec2::ZERO;
        }
        let margin = Vec2::new(20.0, 20.0);
        lo = lo - margin;
        hi = hi + margin;
        self.bounds = (lo, hi);
        self.index = LaneIndex::build(&self.lanes, lo, hi);
        self.drivable = DrivableMap::build(&self.lanes, &self.intersections, lo, hi);
    }

    pub fn bounds(&self) -> (Vec2, Vec2) {
        self.bounds
    }

    pub fn drivable(&self) -> &DrivableMap {
        &self.drivable
    }

    pub fn lane(&self, id: usize) -> &Lane {
        &self.lanes[id]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("town serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, RoadNetError> {
        let mut net: RoadNetwork =
            serde_json::from_str(text).map_err(|e| RoadNetError::Invalid(e.to_string()))?;
        if net.format != FORMAT_VERSION {
            return Err(RoadNetError::Format(net.format));
        }
        net.finalize();
        net.validate()?;
        Ok(net)
    }

    /// Checks the structural invariants of the network.
    pub fn validate(&self) -> Result<(), RoadNetError> {
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.id != i {
                return Err(RoadNetError::Invalid(format!("lane {i} has id {}", lane.id)));
            }
            let pts = &lane.points.points;
            if pts.len() < 2 {
                return Err(RoadNetError::Invalid(format!("lane {i} has fewer than 2 points")));
            }
            if pts.windows(2).any(|w| !(w[0].dist(w[1]) > 0.0)) {
                return Err(RoadNetError::Invalid(format!("lane {i} has a zero-length segment")));
            }
            for &s in &lane.successors {
                if !self.lanes.get(s).is_some_and(|l| l.predecessors.contains(&i)) {
                    return Err(RoadNetError::Invalid(format!("lane {i} -> {s} lacks predecessor link")));
                }
            }
            for &p in &lane.predecessors {
                if !self.lanes.get(p).is_some_and(|l| l.successors.contains(&i)) {
                    return Err(RoadNetError::Invalid(format!("lane {p} -> {i} lacks successor link")));
                }
            }
        }
        for inter in &self.intersections {
            if inter.incident_lanes.len() < 3 {
                return Err(RoadNetError::Invalid(format!("intersection {} has < 3 lanes", inter.id)));
            }
            if let Control::TrafficLight(t) = inter.control {
                if !(t.green > 0.0 && t.yellow > 0.0 && t.red >= t.green + t.yellow) {
                    return Err(RoadNetError::Invalid(format!("intersection {} light cycle", inter.id)));
                }
            }
        }
        Ok(())
    }

    /// Nearest point on any lane accepted by `filter`, within `radius`.
    pub fn nearest_lane_point_where(
        &self,
        p: Vec2,
        radius: f64,
        filter: impl Fn(&Lane) -> bool,
    ) -> Option<LanePoint> {
        let idx = &self.index;
        if idx.cells.is_empty() {
            return None;
        }
        let (c0, r0) = LaneIndex::cell_of(idx.origin, p.x - radius, p.y - radius);
        let (c1, r1) = LaneIndex::cell_of(idx.origin, p.x + radius, p.y + radius);
        let mut best: Option<(f64, usize, usize, f64, Vec2)> = None;
        for r in r0.max(0)..=r1.min(idx.rows as i64 - 1) {
            for c in c0.max(0)..=c1.min(idx.cols as i64 - 1) {
                for &(lane_id, seg) in &idx.cells[r as usize * idx.cols + c as usize] {
                    let lane = &self.lanes[lane_id];
                    if !filter(lane) {
                        continue;
                    }
                    let a = lane.points.points[seg];
                    let b = lane.points.points[seg + 1];
                    let (q, t) = crate::geom::closest_on_segment(p, a, b);
                    let d = p.dist(q);
                    if d > radius {
                        continue;
                    }
                    let cum = lane.points.cumulative();
                    let s = cum[seg] + t * (cum[seg + 1] - cum[seg]);
                    let better = match best {
                        None => true,
                        Some((bd, bl, bs, _, _)) => d < bd || (d == bd && (lane_id, seg) < (bl, bs)),
                    };
                    if better {
                        best = Some((d, lane_id, seg, s, q));
                    }
                }
            }
        }
        best.map(|(distance, lane, _, s, point)| LanePoint { lane, s, point, distance })
    }

    pub fn nearest_lane_point(&self, p: Vec2, radius: f64) -> Option<LanePoint> {
        self.nearest_lane_point_where(p, radius, |_| true)
    }

    /// Nearest point on a street lane (connectors and turnarounds excluded).
    pub fn nearest_road_point(&self, p: Vec2, radius: f64) -> Option<LanePoint> {
        self.nearest_lane_point_where(p, radius, |l| l.kind == LaneKind::Road)
    }

    pub fn distance_to_lanes(&self, p: Vec2, radius: f64) -> Option<f64> {
        self.nearest_lane_point(p, radius).map(|lp| lp.distance)
    }

    pub fn plan_route(&self, start: Vec2, end: Vec2) -> Result<RoutePlan, RoadNetError> {
        self.plan_route_via(&[start, end])
    }

    /// Shortest route visiting `points` in order; each point is snapped to the nearest lane within 5 m.
    pub fn plan_route_via(&self, points: &[Vec2]) -> Result<RoutePlan, RoadNetError> {
        const SNAP: f64 = 5.0;
        if points.is_empty() {
            return Err(RoadNetError::NoPath);
        }
        let snapped = points
            .iter()
            .map(|&p| {
                self.nearest_lane_point(p, SNAP).ok_or(RoadNetError::OffNetwork { x: p.x, y: p.y, radius: SNAP })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut spans: Vec<LaneSpan> = Vec::new();
        if snapped.len() == 1 {
            spans.push(LaneSpan { lane: snapped[0].lane, from_s: snapped[0].s, to_s: snapped[0].s });
        }
        for pair in snapped.windows(2) {
            let leg = self.shortest_spans(pair[0], pair[1])?;
            for span in leg {
                match spans.last_mut() {
                    Some(last) if last.lane == span.lane && (last.to_s - span.from_s).abs() < 1e-9 => {
                        last.to_s = span.to_s;
                    }
                    _ => spans.push(span),
                }
            }
        }
        Ok(RoutePlan::from_spans(self, spans))
    }

    fn shortest_spans(&self, a: LanePoint, b: LanePoint) -> Result<Vec<LaneSpan>, RoadNetError> {
        if a.lane == b.lane && b.s >= a.s {
            return Ok(vec![LaneSpan { lane: a.lane, from_s: a.s, to_s: b.s }]);
        }
        let lengths: Vec<f64> = self.lanes.iter().map(|l| l.length()).collect();
        let mut dist = vec![f64::INFINITY; self.lanes.len()];
        let mut prev: Vec<Option<usize>> = vec![None; self.lanes.len()];
        let mut heap = BinaryHeap::new();
        let first = lengths[a.lane] - a.s;
        for &s in &self.lanes[a.lane].successors {
            if first < dist[s] {
                dist[s] = first;
                prev[s] = None;
                heap.push(HeapItem { cost: first, lane: s });
            }
        }
        let mut done = vec![false; self.lanes.len()];
        while let Some(HeapItem { cost, lane }) = heap.pop() {
            if done[lane] {
                continue;
            }
            done[lane] = true;
            if lane == b.lane {
                break;
            }
            let next_cost = cost + lengths[lane];
            for &s in &self.lanes[lane].successors {
                if next_cost < dist[s] {
                    dist[s] = next_cost;
                    prev[s] = Some(lane);
                    heap.push(HeapItem { cost: next_cost, lane: s });
                }
            }
        }
        if !dist[b.lane].is_finite() {
            return Err(RoadNetError::NoPath);
        }
        let mut chain = vec![b.lane];
        let mut cur = b.lane;
        while let Some(p) = prev[cur] {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        let mut spans = vec![LaneSpan { lane: a.lane, from_s: a.s, to_s: lengths[a.lane] }];
        for (k, &l) in chain.iter().enumerate() {
            let to_s = if k + 1 == chain.len() { b.s } else { lengths[l] };
            spans.push(LaneSpan { lane: l, from_s: 0.0, to_s });
        }
        Ok(spans)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapItem {
    cost: f64,
    lane: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.lane.cmp(&self.lane))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Contiguous stretch `[from_s, to_s]` of one lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneSpan {
    pub lane: usize,
    pub from_s: f64,
    pub to_s: f64,
}

impl LaneSpan {
    pub fn length(&self) -> f64 {
        self.to_s - self.from_s
    }
}

/// One traversal of a junction along a route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntersectionPass {
    pub intersection: usize,
    pub connector: usize,
    /// Route arclength of the stop line.
    pub s_entry: f64,
    pub s_exit: f64,
    /// Heading change across the junction, counter-clockwise positive (left).
    pub heading_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutePlan {
    pub waypoints: Vec<Vec2>,
    /// Route arclength of each sparse waypoint.
    pub waypoint_s: Vec<f64>,
    pub lane_trace: Vec<usize>,
    pub spans: Vec<LaneSpan>,
    pub total_length: f64,
    pub passes: Vec<IntersectionPass>,
    /// Densified centreline (1 m lane samples).
    pub centerline: Polyline,
}

/// Sparse waypoint spacing on uninterrupted lanes.
pub const WAYPOINT_SPACING: f64 = 50.0;

impl RoutePlan {
    pub fn from_spans(net: &RoadNetwork, spans: Vec<LaneSpan>) -> RoutePlan {
        let mut dense: Vec<Vec2> = Vec::new();
        let mut span_start_s = Vec::with_capacity(spans.len());
        let mut acc = 0.0;
        for span in &spans {
            span_start_s.push(acc);
            acc += span.length();
            let lane = &net.lanes[span.lane];
            let cum = lane.points.cumulative();
            let mut pts = vec![lane.points.sample(span.from_s).0];
            for (k, &c) in cum.iter().enumerate() {
                if c > span.from_s + 1e-9 && c < span.to_s - 1e-9 {
                    pts.push(lane.points.points[k]);
                }
            }
            if span.to_s > span.from_s {
                pts.push(lane.points.sample(span.to_s).0);
            }
            for p in pts {
                if dense.last().is_none_or(|q: &Vec2| q.dist(p) > 1e-9) {
                    dense.push(p);
                }
            }
        }
        let centerline = Polyline::new(dense);
        let total_length = centerline.length();

        let mut passes = Vec::new();
        for (k, span) in spans.iter().enumerate() {
            let lane = &net.lanes[span.lane];
            if lane.kind == LaneKind::Connector {
                passes.push(IntersectionPass {
                    intersection: lane.from_intersection.expect("connector inside junction"),
                    connector: lane.id,
                    s_entry: span_start_s[k],
                    s_exit: span_start_s[k] + span.length(),
                    heading_change: wrap_angle(lane.end_heading() - lane.start_heading()),
                });
            }
        }

        // Sparse waypoints: start, junction entries/exits, every 50 m otherwise, end.
        let mut marks = vec![0.0];
        for pass in &passes {
            marks.push(pass.s_entry);
            marks.push(pass.s_exit);
        }
        marks.push(total_length);
        marks.sort_by(f64::total_cmp);
        let mut ws: Vec<f64> = Vec::new();
        for w in marks.windows(2) {
            push_mark(&mut ws, w[0]);
            let inside_junction = passes.iter().any(|p| p.s_entry <= w[0] + 1e-9 && w[1] <= p.s_exit + 1e-9);
            if !inside_junction {
                let mut s = w[0] + WAYPOINT_SPACING;
                while s < w[1] - 1.0 {
                    push_mark(&mut ws, s);
                    s += WAYPOINT_SPACING;
                }
            }
        }
        if let Some(&last) = marks.last() {
            if let Some(l) = ws.last_mut() {
                if last - *l < 1.0 {
                    *l = last;
                } else {
                    ws.push(last);
                }
            } else {
                ws.push(last);
            }
        }
        let waypoints = ws.iter().map(|&s| centerline.sample(s).0).collect();
        let mut lane_trace: Vec<usize> = Vec::new();
        for span in &spans {
            if lane_trace.last() != Some(&span.lane) {
                lane_trace.push(span.lane);
            }
        }
        RoutePlan { waypoints, waypoint_s: ws, lane_trace, spans, total_length, passes, centerline }
    }

    /// Rebuilds the cached arc lengths after deserialising.
    pub fn finalize(&mut self) {
        self.centerline.rebuild();
    }

    pub fn n_intersections(&self) -> usize {
        self.passes.len()
    }

    /// Sub-route covering arclength `[s0, s1]` of this plan.
    pub fn slice(&self, net: &RoadNetwork, s0: f64, s1: f64) -> RoutePlan {
        let s0 = s0.clamp(0.0, self.total_length);
        let s1 = s1.clamp(s0, self.total_length);
        let mut spans = Vec::new();
        let mut acc = 0.0;
        for span in &self.spans {
            let a = acc;
            let b = acc + span.length();
            acc = b;
            let lo = a.max(s0);
            let hi = b.min(s1);
            if hi > lo || (spans.is_empty() && hi >= lo && s0 == s1) {
                spans.push(LaneSpan { lane: span.lane, from_s: span.from_s + (lo - a), to_s: span.from_s + (hi - a) });
            }
        }
        if spans.is_empty() {
            let p = self.spans[0];
            spans.push(LaneSpan { lane: p.lane, from_s: p.from_s, to_s: p.from_s });
        }
        RoutePlan::from_spans(net, spans)
    }

    /// Arclength and unsigned lateral offset of `position` relative to the centreline.
    pub fn project(&self, position: Vec2) -> (f64, f64) {
        self.centerline.project(position)
    }

    /// Projection restricted to the centreline between arclengths `[s_lo, s_hi]`.
    pub fn project_window(&self, position: Vec2, s_lo: f64, s_hi: f64) -> (f64, f64) {
        let lo = self.centerline.segment_at(s_lo.max(0.0));
        let hi = self.centerline.segment_at(s_hi.min(self.total_length)) + 1;
        self.centerline.project_range(position, lo, hi)
    }

    /// Signed lateral offset (left positive) at arclength `s`.
    pub fn signed_offset(&self, position: Vec2, s: f64) -> f64 {
        let (p, t) = self.centerline.sample(s);
        t.cross(position - p)
    }

    pub fn pose_at(&self, s: f64) -> (Vec2, f64) {
        let (p, t) = self.centerline.sample(s);
        (p, t.angle())
    }
}

fn push_mark(ws: &mut Vec<f64>, s: f64) {
    if ws.last().is_none_or(|&l| s - l > 1e-6) {
        ws.push(s);
    }
}

/// Convenience for the route-relative query used across the crate.
pub fn project_onto_route(plan: &RoutePlan, position: Vec2) -> (f64, f64) {
    plan.project(position)
}
