//! Seeded closed-loop simulation: ego bicycle model, background traffic,
//! pedestrians, static obstacles, traffic rules and infraction detection.
//!
//! Tick order is ego, actors, lights (a pure function of time), detection.
//! Steering is left-negative, so the yaw rate in the counter-clockwise world
//! frame is `-(v / L) * tan(steer * max_steer)`.

use crate::control::{self, ControlCommand, PidConfig, PidState};
use crate::geom::{Obb, Pose, Vec2};
use crate::roadnet::{Control, LaneKind, LightColor, RoadNetwork};
use crate::routegen::{maneuver_at, ManeuverLabel, Route};
use crate::sensors::{self, GoalInput, Observation};
use crate::series::{WaypointSeries, HORIZON};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

pub const DT: f64 = 0.05;
/// Policy queries happen every this many ticks (2 Hz at the default `dt`).
pub const QUERY_INTERVAL: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub max_steer: f64,
    pub a_max: f64,
    pub b_max: f64,
    pub v_max: f64,
    pub drag: f64,
    pub half_length: f64,
    pub half_width: f64,
    pub height: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.5,
            max_steer: 35f64.to_radians(),
            a_max: 3.0,
            b_max: 8.0,
            v_max: 15.0,
            drag: 0.1,
            half_length: 2.2,
            half_width: 0.95,
            height: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub vehicles: (usize, usize),
    pub pedestrians: (usize, usize),
    pub statics: (usize, usize),
    pub p_jaywalk: f64,
    /// Multiplies the upper bounds of the actor counts.
    pub density: f64,
    /// Actors are placed on lanes within this distance of the route.
    pub spawn_radius: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { vehicles: (0, 4), pedestrians: (2, 6), statics: (0, 4), p_jaywalk: 0.3, density: 1.0, spawn_radius: 60.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesAnchor {
    /// Waypoints are fixed in the world at query time and re-expressed in the
    /// ego frame every tick.
    World,
    /// Waypoints are held in the ego frame until the next query.
    Ego,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub vehicle: VehicleParams,
    pub scenario: ScenarioConfig,
    pub pid: PidConfig,
    pub anchor: SeriesAnchor,
    pub deviation_radius: f64,
    pub blocked_time: f64,
    pub blocked_speed: f64,
    /// time budget = length / budget_speed * budget_factor
    pub budget_speed: f64,
    pub budget_factor: f64,
    pub offroad_distance: f64,
    pub finish_margin: f64,
    pub stop_sign_speed: f64,
    pub stop_sign_window: f64,
    pub collision_nudge: f64,
    pub junction_furniture: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: DT,
            vehicle: VehicleParams::default(),
            scenario: ScenarioConfig::default(),
            pid: PidConfig::default(),
            anchor: SeriesAnchor::World,
            deviation_radius: 30.0,
            blocked_time: 60.0,
            blocked_speed: 0.1,
            budget_speed: 5.0,
            budget_factor: 2.0,
            offroad_distance: 2.0,
            finish_margin: 2.0,
            stop_sign_speed: 0.1,
            stop_sign_window: 20.0,
            collision_nudge: 0.5,
            junction_furniture: true,
        }
    }
}

impl SimConfig {
    pub fn time_budget(&self, route_length: f64) -> f64 {
        route_length / self.budget_speed * self.budget_factor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorKind {
    Vehicle,
    Pedestrian,
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Behavior {
    LaneFollow { lane: usize, s: f64, cruise: f64 },
    /// Walks back and forth along `from -> to`.
    Sidewalk { from: Vec2, to: Vec2, t: f64, forward: bool },
    /// Waits on the kerb until the ego comes within `trigger` metres, then crosses.
    Jaywalk { from: Vec2, to: Vec2, t: f64, trigger: f64, walking: bool },
    Parked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub id: usize,
    pub kind: ActorKind,
    pub pose: Pose,
    pub half_extents: Vec2,
    pub height: f64,
    pub speed: f64,
    pub behavior: Behavior,
}

impl Actor {
    pub fn obb(&self) -> Obb {
        Obb { center: self.pose.position, heading: self.pose.heading, half_extents: self.half_extents }
    }

    pub fn is_jaywalker(&self) -> bool {
        matches!(self.behavior, Behavior::Jaywalk { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub pose: Pose,
    pub speed: f64,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub tick: u64,
    pub dt: f64,
    pub seed: u64,
    pub ego: EgoState,
    pub ego_params: VehicleParams,
    pub actors: Vec<Actor>,
    pub rng: ChaCha8Rng,
}

impl WorldState {
    pub fn time(&self) -> f64 {
        self.tick as f64 * self.dt
    }

    pub fn ego_obb(&self) -> Obb {
        Obb {
            center: self.ego.pose.position,
            heading: self.ego.pose.heading,
            half_extents: Vec2::new(self.ego_params.half_length, self.ego_params.half_width),
        }
    }

    /// Current light colour per intersection for east-west approaches
    /// (`None` for junctions without lights).
    pub fn light_phases(&self, net: &RoadNetwork) -> Vec<Option<LightColor>> {
        net.intersections.iter().map(|i| i.light_color(0.0, self.time())).collect()
    }
}

/// Kinematic bicycle update of the ego.
pub fn step_ego(ego: &mut EgoState, cmd: ControlCommand, p: &VehicleParams, dt: f64) {
    let cmd = cmd.clamped();
    let v = ego.speed;
    ego.pose.position = ego.pose.position + Vec2::from_angle(ego.pose.heading) * (v * dt);
    ego.pose.heading = crate::geom::wrap_angle(ego.pose.heading - v / p.wheelbase * (cmd.steer * p.max_steer).tan() * dt);
    ego.speed = (v + (cmd.throttle * p.a_max - cmd.brake * p.b_max - p.drag * v) * dt).clamp(0.0, p.v_max);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    CollisionPedestrian,
    CollisionVehicle,
    CollisionStatic,
    RedLight,
    StopSign,
    RouteDeviation,
    AgentBlocked,
    RouteTimeout,
    OffRoad,
}

impl InfractionKind {
    pub const ALL: [InfractionKind; 9] = [
        Self::CollisionPedestrian,
        Self::CollisionVehicle,
        Self::CollisionStatic,
        Self::RedLight,
        Self::StopSign,
        Self::RouteDeviation,
        Self::AgentBlocked,
        Self::RouteTimeout,
        Self::OffRoad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::CollisionPedestrian => "collision_pedestrian",
            Self::CollisionVehicle => "collision_vehicle",
            Self::CollisionStatic => "collision_static",
            Self::RedLight => "red_light",
            Self::StopSign => "stop_sign",
            Self::RouteDeviation => "route_deviation",
            Self::AgentBlocked => "agent_blocked",
            Self::RouteTimeout => "route_timeout",
            Self::OffRoad => "off_road",
        }
    }

    fn collision(kind: ActorKind) -> Self {
        match kind {
            ActorKind::Pedestrian => Self::CollisionPedestrian,
            ActorKind::Vehicle => Self::CollisionVehicle,
            ActorKind::Static => Self::CollisionStatic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfractionEvent {
    pub kind: InfractionKind,
    pub tick: u64,
    pub position: Vec2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalCause {
    Finished,
    RouteDeviation,
    AgentBlocked,
    RouteTimeout,
    PolicyError(String),
}

/// Route-relative bookkeeping shared by rule detection and the expert.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteTracker {
    /// Current projected arclength and lateral distance.
    pub s: f64,
    pub d: f64,
    /// Furthest arclength reached.
    pub s_max: f64,
    /// 1-based index of the current goal waypoint.
    pub goal_index: usize,
    /// Per junction pass: whether the stop line has been crossed.
    pub pass_crossed: Vec<bool>,
    /// Per junction pass: whether the ego came to a halt within the stop window.
    pub stop_cleared: Vec<bool>,
    pub overlapping: BTreeSet<usize>,
    pub still_time: f64,
    pub offroad: bool,
    pub driven_distance: f64,
    pub offroad_distance: f64,
}

impl RouteTracker {
    pub fn new(route: &Route, ego: Vec2) -> Self {
        let (s, d) = route.plan.project_window(ego, 0.0, 20.0);
        let n = route.plan.passes.len();
        let mut t = Self {
            s,
            d,
            s_max: s,
            goal_index: 1,
            pass_crossed: vec![false; n],
            stop_cleared: vec![false; n],
            overlapping: BTreeSet::new(),
            still_time: 0.0,
            offroad: false,
            driven_distance: 0.0,
            offroad_distance: 0.0,
        };
        t.update_goal(route, ego);
        t
    }

    /// Advances the goal index on arrival (5 m) or once the route progress
    /// has passed the waypoint.
    pub fn update_goal(&mut self, route: &Route, ego: Vec2) {
        let plan = &route.plan;
        let g_max = plan.waypoints.len();
        let mut g = sensors::advance_goal(&plan.waypoints, ego, self.goal_index);
        while g < g_max && plan.waypoint_s[g - 1] <= self.s_max {
            g += 1;
        }
        self.goal_index = g;
    }
}

pub struct Sim<'a> {
    pub net: &'a RoadNetwork,
    pub route: &'a Route,
    pub cfg: &'a SimConfig,
    pub world: WorldState,
    pub tracker: RouteTracker,
    pub terminal: Option<TerminalCause>,
}

impl<'a> Sim<'a> {
    /// Places the ego at the route start and seeds the scenario.
    pub fn new(net: &'a RoadNetwork, route: &'a Route, cfg: &'a SimConfig, seed: u64) -> Self {
        let (p, h) = route.plan.pose_at(0.0);
        let mut world = WorldState {
            tick: 0,
            dt: cfg.dt,
            seed,
            ego: EgoState { pose: Pose::new(p, h), speed: 0.0 },
            ego_params: cfg.vehicle,
            actors: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        spawn_scenario(&mut world, net, route, cfg);
        let tracker = RouteTracker::new(route, p);
        let mut sim = Self { net, route, cfg, world, tracker, terminal: None };
        if route.plan.total_length <= cfg.finish_margin {
            sim.terminal = Some(TerminalCause::Finished);
        }
        sim
    }

    pub fn time_budget(&self) -> f64 {
        self.cfg.time_budget(self.route.plan.total_length)
    }

    /// One physics tick; returns the infraction events it produced.
    pub fn step(&mut self, cmd: ControlCommand) -> Vec<InfractionEvent> {
        let prev = self.world.ego.pose.position;
        step_ego(&mut self.world.ego, cmd, &self.cfg.vehicle, self.cfg.dt);
        step_actors(&mut self.world, self.net, self.cfg.dt);
        self.world.tick += 1;
        self.detect_infractions(prev)
    }

    fn detect_infractions(&mut self, prev: Vec2) -> Vec<InfractionEvent> {
        let cfg = self.cfg;
        let plan = &self.route.plan;
        let w = &mut self.world;
        let tr = &mut self.tracker;
        let tick = w.tick;
        let mut events = Vec::new();
        let pos = w.ego.pose.position;
        let step_len = pos.dist(prev);
        tr.driven_distance += step_len;

        // Collisions, debounced per actor until the boxes separate again.
        let ego_box = w.ego_obb();
        let mut slack = ego_box;
        slack.half_extents = slack.half_extents + Vec2::new(0.6, 0.6);
        let mut nudge = false;
        for a in &w.actors {
            if a.pose.position.dist(pos) > 12.0 {
                tr.overlapping.remove(&a.id);
                continue;
            }
            let ob = a.obb();
            if ego_box.overlaps(&ob) {
                if tr.overlapping.insert(a.id) {
                    events.push(InfractionEvent { kind: InfractionKind::collision(a.kind), tick, position: pos });
                    nudge = true;
                }
            } else if !slack.overlaps(&ob) {
                tr.overlapping.remove(&a.id);
            }
        }
        if nudge {
            let back = w.ego.pose.position - Vec2::from_angle(w.ego.pose.heading) * cfg.collision_nudge;
            w.ego.pose.position = back;
            w.ego.speed = 0.0;
        }
        let pos = w.ego.pose.position;

        // Route progress.
        let (s, d) = plan.project_window(pos, tr.s - 10.0, tr.s + 15.0);
        tr.s = s;
        tr.d = d;
        let s_before = tr.s_max;
        tr.s_max = tr.s_max.max(s);

        for (k, pass) in plan.passes.iter().enumerate() {
            if s >= pass.s_entry - cfg.stop_sign_window && s <= pass.s_entry + 0.5 && w.ego.speed < cfg.stop_sign_speed {
                tr.stop_cleared[k] = true;
            }
            if !tr.pass_crossed[k] && s_before < pass.s_entry && tr.s_max >= pass.s_entry {
                tr.pass_crossed[k] = true;
                let inter = &self.net.intersections[pass.intersection];
                match inter.control {
                    Control::TrafficLight(_) => {
                        let (_, heading) = plan.pose_at((pass.s_entry - 0.5).max(0.0));
                        if inter.light_color(heading, w.time()) == Some(LightColor::Red) {
                            events.push(InfractionEvent { kind: InfractionKind::RedLight, tick, position: pos });
                        }
                    }
                    Control::StopSign if !tr.stop_cleared[k] => {
                        events.push(InfractionEvent { kind: InfractionKind::StopSign, tick, position: pos });
                    }
                    _ => {}
                }
            }
        }

        let off = self.net.distance_to_lanes(pos, cfg.offroad_distance).is_none();
        if off {
            tr.offroad_distance += step_len;
            if !tr.offroad {
                events.push(InfractionEvent { kind: InfractionKind::OffRoad, tick, position: pos });
            }
        }
        tr.offroad = off;

        if w.ego.speed < cfg.blocked_speed {
            tr.still_time += cfg.dt;
        } else {
            tr.still_time = 0.0;
        }
        tr.update_goal(self.route, pos);

        if tr.s_max >= plan.total_length - cfg.finish_margin {
            self.terminal = Some(TerminalCause::Finished);
        } else if d > cfg.deviation_radius {
            events.push(InfractionEvent { kind: InfractionKind::RouteDeviation, tick, position: pos });
            self.terminal = Some(TerminalCause::RouteDeviation);
        } else if tr.still_time >= cfg.blocked_time - 1e-9 {
            events.push(InfractionEvent { kind: InfractionKind::AgentBlocked, tick, position: pos });
            self.terminal = Some(TerminalCause::AgentBlocked);
        } else if w.time() > self.cfg.time_budget(plan.total_length) {
            events.push(InfractionEvent { kind: InfractionKind::RouteTimeout, tick, position: pos });
            self.terminal = Some(TerminalCause::RouteTimeout);
        }
        events
    }

    pub fn actors_near(&self, p: Vec2, radius: f64) -> Vec<&Actor> {
        self.world.actors.iter().filter(|a| a.pose.position.dist(p) <= radius).collect()
    }

    pub fn goal(&self) -> GoalInput {
        sensors::goal_input(&self.world.ego.pose, &self.route.plan, self.tracker.goal_index)
    }

    pub fn observation(&self) -> Observation {
        let cloud = sensors::raycast_pointcloud(&self.world, self.net);
        Observation { bev: sensors::bev_histogram(&cloud), goal: self.goal() }
    }
}

/// Advances every actor by one tick.
pub fn step_actors(world: &mut WorldState, net: &RoadNetwork, dt: f64) {
    let time = world.time() + dt;
    let ego = world.ego;
    let ego_half = world.ego_params.half_length;
    // Snapshot of the other vehicles for headway checks.
    let vehicles: Vec<(usize, Vec2, f64, f64)> = world
        .actors
        .iter()
        .filter(|a| a.kind == ActorKind::Vehicle)
        .map(|a| (a.id, a.pose.position, a.pose.heading, a.half_extents.x))
        .collect();
    for i in 0..world.actors.len() {
        let a = &mut world.actors[i];
        match &mut a.behavior {
            Behavior::LaneFollow { lane, s, cruise } => {
                let fwd = Vec2::from_angle(a.pose.heading);
                let left = Vec2::new(-fwd.y, fwd.x);
                let mut gap = f64::INFINITY;
                // Same-direction traffic ahead, or anything directly in front.
                let mut consider = |p: Vec2, heading: f64, half: f64| {
                    let r = p - a.pose.position;
                    let x = r.dot(fwd);
                    let y = r.dot(left).abs();
                    let aligned = Vec2::from_angle(heading).dot(fwd) > 0.5;
                    let g = x - a.half_extents.x - half;
                    if x > 0.0 && ((aligned && x < 30.0 && y < 2.2) || (g < 3.0 && y < 1.6)) {
                        gap = gap.min(g);
                    }
                };
                consider(ego.pose.position, ego.pose.heading, ego_half);
                for &(id, p, heading, half) in &vehicles {
                    if id != a.id {
                        consider(p, heading, half);
                    }
                }
                let l = &net.lanes[*lane];
                let mut v_des = if gap < 8.0 { 0.0 } else { *cruise };
                if l.kind == LaneKind::Road {
                    if let Some(to) = l.to_intersection {
                        let to_end = l.length() - *s;
                        let color = net.intersections[to].light_color(l.end_heading(), time);
                        if matches!(color, Some(LightColor::Red) | Some(LightColor::Yellow)) && to_end > 2.0 {
                            v_des = v_des.min((2.0 * 3.0 * (to_end - 2.5).max(0.0)).sqrt());
                        }
                    }
                }
                a.speed = (a.speed + (v_des - a.speed).clamp(-6.0 * dt, 2.0 * dt)).max(0.0);
                *s += a.speed * dt;
                loop {
                    let len = net.lanes[*lane].length();
                    if *s <= len {
                        break;
                    }
                    let succ = &net.lanes[*lane].successors;
                    if succ.is_empty() {
                        *s = len;
                        a.speed = 0.0;
                        break;
                    }
                    *s -= len;
                    *lane = succ[world.rng.random_range(0..succ.len())];
                }
                let (p, t) = net.lanes[*lane].points.sample(*s);
                a.pose = Pose::new(p, t.angle());
            }
            Behavior::Sidewalk { from, to, t, forward } => {
                let len = from.dist(*to).max(1e-9);
                let dir = if *forward { 1.0 } else { -1.0 };
                *t += dir * a.speed * dt / len;
                if *t >= 1.0 {
                    *t = 1.0;
                    *forward = false;
                } else if *t <= 0.0 {
                    *t = 0.0;
                    *forward = true;
                }
                let heading = if *forward { (*to - *from).angle() } else { (*from - *to).angle() };
                a.pose = Pose::new(from.lerp(*to, *t), heading);
            }
            Behavior::Jaywalk { from, to, t, trigger, walking } => {
                if !*walking && ego.pose.position.dist(from.lerp(*to, 0.5)) < *trigger {
                    *walking = true;
                }
                if *walking && *t < 1.0 {
                    let len = from.dist(*to).max(1e-9);
                    *t = (*t + a.speed * dt / len).min(1.0);
                }
                a.pose = Pose::new(from.lerp(*to, *t), (*to - *from).angle());
            }
            Behavior::Parked => {}
        }
    }
}

/// Seeds background vehicles, sidewalk pedestrians, an optional jaywalker,
/// roadside bollards and (if enabled) junction furniture.
pub fn spawn_scenario(world: &mut WorldState, net: &RoadNetwork, route: &Route, cfg: &SimConfig) {
    let sc = &cfg.scenario;
    let rng = &mut world.rng;
    let plan = &route.plan;
    let mut actors: Vec<Actor> = Vec::new();
    let scaled = |(lo, hi): (usize, usize)| {
        let hi = ((hi as f64 * sc.density).round() as usize).max(lo);
        (lo.min(hi), hi)
    };
    let draw = |rng: &mut ChaCha8Rng, r: (usize, usize)| if r.1 > r.0 { rng.random_range(r.0..=r.1) } else { r.0 };
    let start = plan.centerline.points.first().copied().unwrap_or(Vec2::ZERO);
    let route_samples: Vec<Vec2> = (0..=((plan.total_length / 10.0) as usize))
        .map(|k| plan.centerline.sample(k as f64 * 10.0).0)
        .collect();
    let near_route = |p: Vec2| route_samples.iter().any(|q| q.dist(p) < sc.spawn_radius);
    let nearby_roads: Vec<usize> = net
        .lanes
        .iter()
        .filter(|l| l.kind == LaneKind::Road && l.length() > 8.0 && near_route(l.points.sample(l.length() / 2.0).0))
        .map(|l| l.id)
        .collect();

    let n_veh = draw(rng, scaled(sc.vehicles));
    let n_ped = draw(rng, scaled(sc.pedestrians));
    let n_static = draw(rng, scaled(sc.statics));
    let jaywalk = rng.random_range(0.0..1.0) < sc.p_jaywalk;

    if !nearby_roads.is_empty() {
        let mut placed = 0;
        for _ in 0..n_veh * 10 {
            if placed == n_veh {
                break;
            }
            let lane = nearby_roads[rng.random_range(0..nearby_roads.len())];
            let l = &net.lanes[lane];
            let s = rng.random_range(0.0..l.length());
            let (p, t) = l.points.sample(s);
            let clear = p.dist(start) > 20.0
                && actors.iter().all(|a| a.kind != ActorKind::Vehicle || a.pose.position.dist(p) > 12.0);
            if !clear {
                continue;
            }
            let cruise = rng.random_range(3.5..5.5);
            actors.push(Actor {
                id: actors.len(),
                kind: ActorKind::Vehicle,
                pose: Pose::new(p, t.angle()),
                half_extents: Vec2::new(2.2, 0.95),
                height: rng.random_range(1.4..2.0),
                speed: cruise,
                behavior: Behavior::LaneFollow { lane, s, cruise },
            });
            placed += 1;
        }
        for _ in 0..n_ped {
            let lane = nearby_roads[rng.random_range(0..nearby_roads.len())];
            let l = &net.lanes[lane];
            let len = l.length();
            let s0 = rng.random_range(0.0..(len - 4.0).max(0.1));
            let s1 = (s0 + rng.random_range(8.0..25.0)).min(len);
            let kerb = |s: f64| {
                let (p, t) = l.points.sample(s);
                p + t.right_normal() * (SIDEWALK_OFFSET - crate::roadnet::LANE_OFFSET)
            };
            let (from, to) = (kerb(s0), kerb(s1));
            let t = rng.random_range(0.0..1.0);
            actors.push(Actor {
                id: actors.len(),
                kind: ActorKind::Pedestrian,
                pose: Pose::new(from.lerp(to, t), (to - from).angle()),
                half_extents: Vec2::new(0.3, 0.3),
                height: rng.random_range(1.5..1.9),
                speed: rng.random_range(0.8..1.5),
                behavior: Behavior::Sidewalk { from, to, t, forward: true },
            });
        }
    }

    // Bollards beside the route, away from junctions.
    let mut road_ranges = Vec::new();
    let mut acc = 0.0;
    for span in &plan.spans {
        if net.lanes[span.lane].kind == LaneKind::Road {
            road_ranges.push((acc + 8.0, acc + span.length() - 8.0));
        }
        acc += span.length();
    }
    let free_s = |s: f64| road_ranges.iter().any(|&(a, b)| s >= a && s <= b);
    if plan.total_length > 30.0 {
        for _ in 0..n_static {
            let s = rng.random_range(15.0..plan.total_length - 5.0);
            if !free_s(s) {
                continue;
            }
            let (p, t) = plan.centerline.sample(s);
            let pos = p + t.right_normal() * (BOLLARD_OFFSET - crate::roadnet::LANE_OFFSET);
            actors.push(Actor {
                id: actors.len(),
                kind: ActorKind::Static,
                pose: Pose::new(pos, t.angle()),
                half_extents: Vec2::new(0.3, 0.3),
                height: 1.0,
                speed: 0.0,
                behavior: Behavior::Parked,
            });
        }
    }

    if jaywalk {
        let hi = plan.total_length.min(JAYWALK_MAX_AHEAD) - 5.0;
        let lo = (0.4 * hi).min(30.0);
        let candidates: Vec<f64> = (0..40).map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo }).collect();
        if let Some(&s) = candidates.iter().find(|&&s| free_s(s) && s > 0.0) {
            let (p, t) = plan.centerline.sample(s);
            let left = -t.right_normal();
            let axis = p + left * crate::roadnet::LANE_OFFSET;
            let side = if rng.random_range(0.0..1.0) < 0.5 { 1.0 } else { -1.0 };
            let from = axis + left * (side * SIDEWALK_OFFSET);
            let to = axis - left * (side * SIDEWALK_OFFSET);
            actors.push(Actor {
                id: actors.len(),
                kind: ActorKind::Pedestrian,
                pose: Pose::new(from, (to - from).angle()),
                half_extents: Vec2::new(0.3, 0.3),
                height: 1.7,
                speed: rng.random_range(1.0..1.6),
                behavior: Behavior::Jaywalk { from, to, t: 0.0, trigger: rng.random_range(15.0..25.0), walking: false },
            });
        }
    }

    if cfg.junction_furniture {
        for inter in &net.intersections {
            let spots: Vec<Vec2> = match inter.control {
                Control::TrafficLight(_) => {
                    let mut v = corner_spots(6.5, 6.5);
                    v.extend(corner_spots(10.5, 5.0));
                    v
                }
                Control::StopSign => corner_spots(6.5, 6.5),
                Control::Uncontrolled => Vec::new(),
            };
            for off in spots {
                actors.push(Actor {
                    id: actors.len(),
                    kind: ActorKind::Static,
                    pose: Pose::new(inter.center + off, 0.0),
                    half_extents: Vec2::new(0.2, 0.2),
                    height: 3.0,
                    speed: 0.0,
                    behavior: Behavior::Parked,
                });
            }
        }
    }
    world.actors = actors;
}

/// Distance of sidewalks from the road axis.
pub const SIDEWALK_OFFSET: f64 = 5.5;
/// Distance of roadside bollards from the road axis.
pub const BOLLARD_OFFSET: f64 = 4.0;
pub const JAYWALK_MAX_AHEAD: f64 = 100.0;

fn corner_spots(a: f64, b: f64) -> Vec<Vec2> {
    let mut v = vec![Vec2::new(a, b), Vec2::new(-a, b), Vec2::new(-a, -b), Vec2::new(a, -b)];
    if a != b {
        v.extend([Vec2::new(b, a), Vec2::new(-b, a), Vec2::new(-b, -a), Vec2::new(b, -a)]);
    }
    v
}

/// Read-only view handed to drivers at every query.
pub struct DriverContext<'s, 'a> {
    pub sim: &'s Sim<'a>,
    pub observation: Option<&'s Observation>,
}

/// Anything that can drive: produces an ego-frame waypoint series at 2 Hz.
pub trait Driver {
    fn needs_observation(&self) -> bool {
        false
    }
    fn plan(&mut self, ctx: &DriverContext) -> Result<WaypointSeries, String>;
}

/// Always asks to stand still.
pub struct ZeroDriver;

impl Driver for ZeroDriver {
    fn plan(&mut self, _: &DriverContext) -> Result<WaypointSeries, String> {
        Ok(WaypointSeries::stopped(HORIZON))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Record,
    Evaluate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub route_id: String,
    pub seed: u64,
    pub total_length: f64,
    pub driven_distance: f64,
    pub offroad_distance: f64,
    pub s_final: f64,
    pub elapsed: f64,
    pub ticks: usize,
    pub terminal: TerminalCause,
    pub events: Vec<InfractionEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub summary: EpisodeSummary,
    pub ticks: Vec<TickRecord>,
}

impl EpisodeLog {
    pub fn events(&self) -> &[InfractionEvent] {
        &self.summary.events
    }

    pub fn count(&self, kind: InfractionKind) -> usize {
        self.summary.events.iter().filter(|e| e.kind == kind).count()
    }

    /// Summary header followed by one JSON record per tick.
    pub fn to_ndjson(&self) -> String {
        let mut out = serde_json::to_string(&self.summary).expect("summary serialises");
        out.push('\n');
        for t in &self.ticks {
            out.push_str(&serde_json::to_string(t).expect("tick serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self, serde_json::Error> {
        let mut lines = text.lines();
        let summary = serde_json::from_str(lines.next().unwrap_or(""))?;
        let ticks = lines.map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(Self { summary, ticks })
    }
}

/// Frame logged at 2 fps in record mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedFrame {
    pub tick: u64,
    pub observation: Observation,
    pub target: WaypointSeries,
    pub maneuver: ManeuverLabel,
}

/// Runs one closed-loop episode. In record mode the driver's plans are logged
/// as targets together with the observation at each query.
pub fn run_episode(
    net: &RoadNetwork,
    route: &Route,
    driver: &mut dyn Driver,
    seed: u64,
    mode: Mode,
    cfg: &SimConfig,
) -> (EpisodeLog, Vec<RecordedFrame>) {
    let mut sim = Sim::new(net, route, cfg, seed);
    let mut pid_state = PidState::default();
    let mut frames = Vec::new();
    let mut ticks = Vec::new();
    let mut events = Vec::new();
    let mut plan_world: Vec<Vec2> = Vec::new();
    let mut plan_ego = WaypointSeries::stopped(HORIZON);
    while sim.terminal.is_none() {
        if sim.world.tick % QUERY_INTERVAL == 0 {
            let obs = (mode == Mode::Record || driver.needs_observation()).then(|| sim.observation());
            let ctx = DriverContext { sim: &sim, observation: obs.as_ref() };
            match driver.plan(&ctx) {
                Ok(series) if series.len() >= 2 && series.points().iter().all(|p| p.is_finite()) => {
                    if let (Mode::Record, Some(o)) = (mode, obs) {
                        frames.push(RecordedFrame {
                            tick: sim.world.tick,
                            observation: o,
                            target: series.clone(),
                            maneuver: maneuver_at(&route.plan, sim.tracker.s),
                        });
                    }
                    plan_world = series.points().iter().map(|&p| sim.world.ego.pose.to_world(p)).collect();
                    plan_ego = series;
                }
                Ok(series) => {
                    sim.terminal = Some(TerminalCause::PolicyError(format!(
                        "invalid waypoint series of length {}",
                        series.len()
                    )));
                    break;
                }
                Err(e) => {
                    sim.terminal = Some(TerminalCause::PolicyError(e));
                    break;
                }
            }
        }
        let series = match cfg.anchor {
            SeriesAnchor::World => {
                WaypointSeries(plan_world.iter().map(|&p| sim.world.ego.pose.to_ego(p)).collect())
            }
            SeriesAnchor::Ego => plan_ego.clone(),
        };
        let cmd = control::pid(&series, sim.world.ego.speed, &mut pid_state, &cfg.pid, cfg.dt)
            .unwrap_or(ControlCommand::new(0.0, 0.0, 1.0));
        events.extend(sim.step(cmd));
        let e = &sim.world.ego;
        ticks.push(TickRecord {
            tick: sim.world.tick,
            x: e.pose.position.x,
            y: e.pose.position.y,
            heading: e.pose.heading,
            speed: e.speed,
            steer: cmd.steer,
            throttle: cmd.throttle,
            brake: cmd.brake,
            s: sim.tracker.s,
        });
    }
    let summary = EpisodeSummary {
        route_id: route.id.clone(),
        seed,
        total_length: route.plan.total_length,
        driven_distance: sim.tracker.driven_distance,
        offroad_distance: sim.tracker.offroad_distance,
        s_final: sim.tracker.s_max.min(route.plan.total_length),
        elapsed: sim.world.time(),
        ticks: ticks.len(),
        terminal: sim.terminal.clone().unwrap_or(TerminalCause::Finished),
        events,
    };
    (EpisodeLog { summary, ticks }, frames)
}
