//! Privileged rule-based expert and dataset collection.
//!
//! The expert reads the full world state, builds a speed profile along the
//! route centreline (cruise, turn limits, stops for lights, stop signs and
//! obstacles) and places T waypoints 0.5 s apart on that profile. It drives
//! through the same PID controller as the learned policy.

use crate::control::{self, ControlCommand, PidState};
use crate::geom::Vec2;
use crate::policy::train::TrainingSample;
use crate::roadnet::{Control, LightColor, RoadNetwork};
use crate::routegen::{maneuver_distribution_of_labels, ManeuverDistribution, ManeuverLabel, Route};
use crate::simcore::{run_episode, ActorKind, Driver, DriverContext, EpisodeLog, Mode, SimConfig, Sim};
use crate::sensors::GRID_CELLS;
use crate::series::{WaypointSeries, HORIZON, WAYPOINT_DT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub cruise_speed: f64,
    pub turn_speed: f64,
    /// Junction crossings turning more than this (degrees) are driven at `turn_speed`.
    pub turn_slowdown_deg: f64,
    pub max_lateral_accel: f64,
    pub accel: f64,
    pub comfort_decel: f64,
    /// Beyond this deceleration a yellow light is driven through.
    pub yellow_max_decel: f64,
    pub headway: f64,
    pub lookahead: f64,
    pub corridor_margin: f64,
    /// Pedestrians are extrapolated this many seconds ahead.
    pub pedestrian_horizon: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            cruise_speed: 6.0,
            turn_speed: 3.0,
            turn_slowdown_deg: 20.0,
            max_lateral_accel: 2.0,
            accel: 2.0,
            comfort_decel: 2.5,
            yellow_max_decel: 4.0,
            headway: 5.0,
            lookahead: 40.0,
            corridor_margin: 0.4,
            pedestrian_horizon: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Hazards {
    pub red_light_ahead: bool,
    pub lead_vehicle: bool,
    pub pedestrian_ahead: bool,
    pub stop_sign_pending: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPlan {
    pub waypoints: WaypointSeries,
    pub hazards: Hazards,
    /// Route distances (from the ego projection) of the planned waypoints.
    pub distances: Vec<f64>,
}

enum Limit {
    /// Stand still at this distance.
    Stop(f64),
    /// Speed at most `v` on `[from, to]`.
    Zone { from: f64, to: f64, v: f64 },
}

fn speed_cap(limits: &[Limit], cruise: f64, decel: f64, x: f64) -> f64 {
    let mut v = cruise;
    for l in limits {
        let c = match *l {
            Limit::Stop(at) => (2.0 * decel * (at - x).max(0.0)).sqrt(),
            Limit::Zone { from, to, v } => {
                if x < from {
                    (v * v + 2.0 * decel * (from - x)).sqrt()
                } else if x <= to {
                    v
                } else {
                    f64::INFINITY
                }
            }
        };
        v = v.min(c);
    }
    v
}

/// Expert plan for the current simulator state.
pub fn expert_plan(sim: &Sim, cfg: &ExpertConfig) -> ExpertPlan {
    let plan = &sim.route.plan;
    let world = &sim.world;
    let tr = &sim.tracker;
    let s0 = tr.s;
    let v0 = world.ego.speed;
    let ego_half = world.ego_params.half_length;
    let mut hazards = Hazards::default();
    let mut limits = vec![Limit::Stop(plan.total_length + 3.0 - s0)];

    for (k, pass) in plan.passes.iter().enumerate() {
        let to_line = pass.s_entry - s0 - ego_half - 0.5;
        if pass.s_exit - s0 > -1.0 && pass.heading_change.abs().to_degrees() > cfg.turn_slowdown_deg {
            limits.push(Limit::Zone { from: pass.s_entry - s0, to: pass.s_exit - s0, v: cfg.turn_speed });
        }
        if tr.pass_crossed[k] || to_line < -ego_half || to_line > cfg.lookahead {
            continue;
        }
        let inter = &sim.net.intersections[pass.intersection];
        match inter.control {
            Control::TrafficLight(_) => {
                let (_, heading) = plan.pose_at((pass.s_entry - 0.5).max(0.0));
                let colour = inter.light_color(heading, world.time());
                let needed = if to_line > 0.05 { v0 * v0 / (2.0 * to_line) } else { f64::INFINITY };
                let stop = match colour {
                    Some(LightColor::Red) => to_line > -0.5 && needed <= world.ego_params.b_max,
                    Some(LightColor::Yellow) => needed <= cfg.yellow_max_decel,
                    _ => false,
                };
                if stop {
                    hazards.red_light_ahead = true;
                    limits.push(Limit::Stop(to_line.max(0.0)));
                }
            }
            Control::StopSign if !tr.stop_cleared[k] => {
                hazards.stop_sign_pending = true;
                limits.push(Limit::Stop(to_line.max(0.0)));
            }
            _ => {}
        }
    }

    // Curvature limit from the centreline ahead (turnaround loops and turns).
    let mut x = 0.0;
    while x < cfg.lookahead {
        let s = s0 + x;
        if s + 2.0 > plan.total_length {
            break;
        }
        let (_, a) = plan.pose_at((s - 2.0).max(0.0));
        let (_, b) = plan.pose_at(s + 2.0);
        let kappa = crate::geom::wrap_angle(b - a).abs() / 4.0;
        if kappa > 1e-3 {
            let v = (cfg.max_lateral_accel / kappa).sqrt();
            if v < cfg.cruise_speed {
                limits.push(Limit::Zone { from: x - 1.0, to: x + 1.0, v });
            }
        }
        x += 1.0;
    }

    // Obstacles in the driving corridor.
    let pos = world.ego.pose.position;
    for a in &world.actors {
        if a.pose.position.dist(pos) > cfg.lookahead + 10.0 {
            continue;
        }
        let mut probes = vec![a.pose.position];
        if a.kind == ActorKind::Pedestrian && a.speed > 0.0 {
            let moving = match a.behavior {
                crate::simcore::Behavior::Jaywalk { walking, t, .. } => walking && t < 1.0,
                _ => true,
            };
            if moving {
                let dir = Vec2::from_angle(a.pose.heading);
                let n = (cfg.pedestrian_horizon / 0.5).ceil() as usize;
                for k in 1..=n {
                    let t = (k as f64 * 0.5).min(cfg.pedestrian_horizon);
                    probes.push(a.pose.position + dir * (a.speed * t));
                }
            }
        }
        let lat_half = if a.kind == ActorKind::Vehicle { a.half_extents.y } else { a.half_extents.norm() };
        let corridor = world.ego_params.half_width + lat_half + cfg.corridor_margin;
        let mut best: Option<f64> = None;
        for p in probes {
            let (sa, d) = plan.project_window(p, s0, s0 + cfg.lookahead);
            if d < corridor && sa > s0 - 0.5 && sa < s0 + cfg.lookahead {
                best = Some(best.map_or(sa, |b: f64| b.min(sa)));
            }
        }
        if let Some(sa) = best {
            let gap = sa - s0 - ego_half - a.half_extents.x - cfg.headway;
            match a.kind {
                ActorKind::Pedestrian => hazards.pedestrian_ahead = true,
                _ => hazards.lead_vehicle = true,
            }
            limits.push(Limit::Stop(gap.max(0.0)));
        }
    }

    // Integrate the profile.
    let h = 0.05;
    let steps_per_wp = (WAYPOINT_DT / h).round() as usize;
    let hard_stop = limits
        .iter()
        .filter_map(|l| if let Limit::Stop(at) = *l { Some(at) } else { None })
        .fold(f64::INFINITY, f64::min)
        .max(0.0);
    let (mut x, mut v) = (0.0f64, v0);
    let mut distances = Vec::with_capacity(HORIZON);
    for _ in 0..HORIZON {
        for _ in 0..steps_per_wp {
            let cap = speed_cap(&limits, cfg.cruise_speed, cfg.comfort_decel, x);
            let nv = if v < cap {
                (v + cfg.accel * h).min(cap)
            } else {
                (v - world.ego_params.b_max * h).max(cap)
            };
            x = (x + 0.5 * (v + nv) * h).min(hard_stop.max(x));
            v = nv;
        }
        distances.push(x);
    }
    let pose = world.ego.pose;
    let waypoints =
        WaypointSeries(distances.iter().map(|&d| pose.to_ego(plan.centerline.sample(s0 + d).0)).collect());
    ExpertPlan { waypoints, hazards, distances }
}

pub fn expert_waypoints(sim: &Sim, cfg: &ExpertConfig) -> WaypointSeries {
    expert_plan(sim, cfg).waypoints
}

pub fn expert_control(sim: &Sim, cfg: &ExpertConfig, state: &mut PidState) -> ControlCommand {
    let w = expert_waypoints(sim, cfg);
    control::pid(&w, sim.world.ego.speed, state, &sim.cfg.pid, sim.cfg.dt).unwrap_or(ControlCommand::new(0.0, 0.0, 1.0))
}

#[derive(Debug, Clone, Default)]
pub struct ExpertDriver {
    pub cfg: ExpertConfig,
}

impl Driver for ExpertDriver {
    fn plan(&mut self, ctx: &DriverContext) -> Result<WaypointSeries, String> {
        Ok(expert_waypoints(ctx.sim, &self.cfg))
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("route list exhausted after {0} frames")]
    InsufficientRoutes(usize),
    #[error("no routes given")]
    NoRoutes,
    #[error("route {0} is not on a training town")]
    ForeignRoute(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

/// One recorded training example.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFrame {
    /// Channel-last `64 x 64 x 2` counts.
    pub bev: Vec<u16>,
    pub goal: Vec2,
    pub goal_index: u32,
    pub expert: [Vec2; HORIZON],
    pub maneuver: ManeuverLabel,
    pub route_index: u32,
    pub tick: u32,
}

impl TrainingSample for DatasetFrame {
    fn bev_counts(&self) -> &[u16] {
        &self.bev
    }
    fn goal(&self) -> Vec2 {
        self.goal
    }
    fn target(&self) -> &[Vec2] {
        &self.expert
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub route_index: usize,
    pub route_id: String,
    pub town_seed: u64,
    pub scenario_seed: u64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: u32,
    pub seed: u64,
    pub town_seeds: Vec<u64>,
    pub frames: usize,
    pub routes_used: usize,
    pub episodes: Vec<EpisodeEntry>,
    pub maneuver_distribution: Option<ManeuverDistribution>,
    pub grid: [usize; 3],
    pub shard_size: usize,
    pub shards: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<DatasetFrame>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn maneuver_distribution(&self) -> Option<ManeuverDistribution> {
        maneuver_distribution_of_labels(self.frames.iter().map(|f| f.maneuver)).ok()
    }

    /// Per-route frame counts `N_r`, in first-use order.
    pub fn frames_per_route(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for e in &self.manifest.episodes {
            match out.iter_mut().find(|(id, _)| *id == e.route_id) {
                Some(x) => x.1 += e.frames,
                None => out.push((e.route_id.clone(), e.frames)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub frames_target: usize,
    pub seed: u64,
    /// Fail instead of reusing routes with fresh scenario seeds.
    pub no_reuse: bool,
    pub expert: ExpertConfig,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self { frames_target: 0, seed: 0, no_reuse: false, expert: ExpertConfig::default() }
    }
}

pub const DATASET_FORMAT: u32 = 1;
pub const SHARD_SIZE: usize = 10_000;

/// Rolls out the expert over `routes` (cycling with fresh scenario seeds)
/// until at least `frames_target` frames are recorded. The route order is a
/// seeded permutation.
pub fn collect_dataset(
    nets: &[RoadNetwork],
    routes: &[Route],
    cfg: &CollectConfig,
    sim_cfg: &SimConfig,
) -> Result<Dataset, DatasetError> {
    let mut manifest = DatasetManifest {
        format: DATASET_FORMAT,
        seed: cfg.seed,
        town_seeds: nets.iter().map(|n| n.town_seed).collect(),
        frames: 0,
        routes_used: 0,
        episodes: Vec::new(),
        maneuver_distribution: None,
        grid: [GRID_CELLS, GRID_CELLS, 2],
        shard_size: SHARD_SIZE,
        shards: Vec::new(),
    };
    let mut frames = Vec::new();
    if cfg.frames_target == 0 {
        return Ok(Dataset { frames, manifest });
    }
    if routes.is_empty() {
        return Err(DatasetError::NoRoutes);
    }
    for r in routes {
        if !nets.iter().any(|n| n.town_seed == r.town_seed) {
            return Err(DatasetError::ForeignRoute(r.id.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..routes.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut used = std::collections::BTreeSet::new();
    let mut cursor = 0usize;
    let mut rounds = 0usize;
    while frames.len() < cfg.frames_target {
        if cursor == order.len() {
            if cfg.no_reuse {
                return Err(DatasetError::InsufficientRoutes(frames.len()));
            }
            cursor = 0;
            rounds += 1;
            if rounds > 1000 {
                return Err(DatasetError::InsufficientRoutes(frames.len()));
            }
        }
        let ri = order[cursor];
        cursor += 1;
        let route = &routes[ri];
        let net = nets.iter().find(|n| n.town_seed == route.town_seed).expect("checked above");
        let scenario_seed: u64 = rng.random();
        let mut driver = ExpertDriver { cfg: cfg.expert };
        let (_, recorded) = run_episode(net, route, &mut driver, scenario_seed, Mode::Record, sim_cfg);
        manifest.episodes.push(EpisodeEntry {
            route_index: ri,
            route_id: route.id.clone(),
            town_seed: route.town_seed,
            scenario_seed,
            frames: recorded.len(),
        });
        used.insert(ri);
        for f in recorded {
            let mut expert = [Vec2::ZERO; HORIZON];
            for (k, p) in f.target.points().iter().take(HORIZON).enumerate() {
                expert[k] = *p;
            }
            frames.push(DatasetFrame {
                bev: f.observation.bev.counts,
                goal: f.observation.goal.goal,
                goal_index: f.observation.goal.index as u32,
                expert,
                maneuver: f.maneuver,
                route_index: ri as u32,
                tick: f.tick as u32,
            });
        }
    }
    manifest.frames = frames.len();
    manifest.routes_used = used.len();
    let mut ds = Dataset { frames, manifest };
    ds.manifest.maneuver_distribution = ds.maneuver_distribution();
    Ok(ds)
}

/// Replays a recorded frame's episode and returns the expert waypoints
/// recomputed at that tick.
pub fn replay_expert_at(net: &RoadNetwork, route: &Route, scenario_seed: u64, tick: u64, sim_cfg: &SimConfig, cfg: &ExpertConfig) -> Option<WaypointSeries> {
    struct Probe<'c> {
        cfg: &'c ExpertConfig,
        tick: u64,
        out: Option<WaypointSeries>,
    }
    impl Driver for Probe<'_> {
        fn plan(&mut self, ctx: &DriverContext) -> Result<WaypointSeries, String> {
            let w = expert_waypoints(ctx.sim, self.cfg);
            if ctx.sim.world.tick == self.tick {
                self.out = Some(w.clone());
            }
            Ok(w)
        }
    }
    let mut p = Probe { cfg, tick, out: None };
    run_episode(net, route, &mut p, scenario_seed, Mode::Evaluate, sim_cfg);
    p.out
}

const FRAME_BYTES: usize = GRID_CELLS * GRID_CELLS * 2 * 2 + 2 * 4 + 4 + 8 * 4 + 1 + 4 + 4;

fn write_frame(w: &mut impl Write, f: &DatasetFrame) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(FRAME_BYTES);
    for c in &f.bev {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    buf.extend_from_slice(&(f.goal.x as f32).to_le_bytes());
    buf.extend_from_slice(&(f.goal.y as f32).to_le_bytes());
    buf.extend_from_slice(&f.goal_index.to_le_bytes());
    for p in &f.expert {
        buf.extend_from_slice(&(p.x as f32).to_le_bytes());
        buf.extend_from_slice(&(p.y as f32).to_le_bytes());
    }
    buf.push(f.maneuver as u8);
    buf.extend_from_slice(&f.route_index.to_le_bytes());
    buf.extend_from_slice(&f.tick.to_le_bytes());
    w.write_all(&buf)
}

fn read_frame(buf: &[u8]) -> Result<DatasetFrame, DatasetError> {
    let n = GRID_CELLS * GRID_CELLS * 2;
    let u16_at = |i: usize| u16::from_le_bytes([buf[i], buf[i + 1]]);
    let f32_at = |i: usize| f32::from_le_bytes([buf[i], buf[i + 1], buf[i + 2], buf[i + 3]]) as f64;
    let u32_at = |i: usize| u32::from_le_bytes([buf[i], buf[i + 1], buf[i + 2], buf[i + 3]]);
    let bev = (0..n).map(|k| u16_at(2 * k)).collect();
    let mut o = 2 * n;
    let goal = Vec2::new(f32_at(o), f32_at(o + 4));
    o += 8;
    let goal_index = u32_at(o);
    o += 4;
    let mut expert = [Vec2::ZERO; HORIZON];
    for p in expert.iter_mut() {
        *p = Vec2::new(f32_at(o), f32_at(o + 4));
        o += 8;
    }
    let maneuver = ManeuverLabel::from_u8(buf[o]).ok_or_else(|| DatasetError::Format(format!("bad label {}", buf[o])))?;
    o += 1;
    Ok(DatasetFrame { bev, goal, goal_index, expert, maneuver, route_index: u32_at(o), tick: u32_at(o + 4) })
}

impl Dataset {
    /// Writes `manifest.json` and `shard-XXXX.bin` files into `dir`.
    ///
    /// Floats are stored as `f32`, so a reloaded dataset equals
    /// [`Dataset::quantized`] of the original.
    pub fn save(&self, dir: &Path) -> Result<DatasetManifest, DatasetError> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = self.manifest.clone();
        manifest.shards.clear();
        for (k, chunk) in self.frames.chunks(SHARD_SIZE).enumerate() {
            let name = format!("shard-{k:04}.bin");
            let mut w = BufWriter::new(std::fs::File::create(dir.join(&name))?);
            for f in chunk {
                write_frame(&mut w, f)?;
            }
            w.flush()?;
            manifest.shards.push(name);
        }
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serialises"))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DatasetError::Format(e.to_string()))?;
        if manifest.format != DATASET_FORMAT || manifest.grid != [GRID_CELLS, GRID_CELLS, 2] {
            return Err(DatasetError::Format("unsupported dataset format or grid".into()));
        }
        let mut frames = Vec::with_capacity(manifest.frames);
        let mut buf = vec![0u8; FRAME_BYTES];
        for name in &manifest.shards {
            let mut r = BufReader::new(std::fs::File::open(dir.join(name))?);
            loop {
                match r.read_exact(&mut buf) {
                    Ok(()) => frames.push(read_frame(&buf)?),
                    Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                    Err(e) => return Err(e.into()),
                }
            }
        }
        if frames.len() != manifest.frames {
            return Err(DatasetError::Format(format!("manifest lists {} frames, shards hold {}", manifest.frames, frames.len())));
        }
        Ok(Self { frames, manifest })
    }

    /// Copy with goal and waypoint coordinates rounded to `f32`.
    pub fn quantized(&self) -> Self {
        let q = |p: Vec2| Vec2::new(p.x as f32 as f64, p.y as f32 as f64);
        let mut out = self.clone();
        for f in &mut out.frames {
            f.goal = q(f.goal);
            for p in &mut f.expert {
                *p = q(*p);
            }
        }
        out
    }
}

/// Closed-loop expert episode without recording.
pub fn run_expert(net: &RoadNetwork, route: &Route, seed: u64, sim_cfg: &SimConfig, cfg: &ExpertConfig) -> EpisodeLog {
    run_episode(net, route, &mut ExpertDriver { cfg: *cfg }, seed, Mode::Evaluate, sim_cfg).0
}
