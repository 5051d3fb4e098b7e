mod common;

use drivebench::control::ControlCommand;
use drivebench::expert::{ExpertConfig, ExpertDriver};
use drivebench::geom::{Pose, Vec2};
use drivebench::policy::{PolicyConfig, PolicyDriver, PolicyParams};
use drivebench::roadnet::LANE_OFFSET;
use drivebench::routegen::Route;
use drivebench::series::{WaypointSeries, HORIZON};
use drivebench::simcore::{
    run_episode, step_ego, Actor, ActorKind, Behavior, Driver, DriverContext, EgoState, EpisodeLog, InfractionKind, Mode,
    Sim, SimConfig, TerminalCause, VehicleParams, ZeroDriver, JAYWALK_MAX_AHEAD, QUERY_INTERVAL, SIDEWALK_OFFSET,
};
use proptest::prelude::*;

/// Follows the route centreline at a fixed speed.
struct Crawl(f64);

impl Driver for Crawl {
    fn plan(&mut self, ctx: &DriverContext) -> Result<WaypointSeries, String> {
        let sim = ctx.sim;
        let pose = sim.world.ego.pose;
        let step = self.0 * 0.5;
        Ok(WaypointSeries(
            (0..HORIZON)
                .map(|k| pose.to_ego(sim.route.plan.centerline.sample(sim.tracker.s + (k + 1) as f64 * step).0))
                .collect(),
        ))
    }
}

fn driver(kind: u8, seed: u64) -> Box<dyn Driver> {
    match kind % 3 {
        0 => Box::new(ExpertDriver::default()),
        1 => Box::new(ZeroDriver),
        _ => Box::new(PolicyDriver::new(PolicyParams::init(PolicyConfig::default(), seed))),
    }
}

fn path_length(route: &Route, log: &EpisodeLog) -> f64 {
    let mut prev = route.plan.pose_at(0.0).0;
    let mut sum = 0.0;
    for t in &log.ticks {
        let p = Vec2::new(t.x, t.y);
        sum += p.dist(prev);
        prev = p;
    }
    sum
}

#[test]
fn twenty_episodes_replay_bit_identically() {
    let (net, routes) = common::short_fixture();
    let cfg = SimConfig::default();
    let mut rng_state = 0x5eed_u64;
    for k in 0..20u64 {
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let route = &routes[(rng_state >> 33) as usize % routes.len()];
        let seed = rng_state >> 40;
        let run = || run_episode(net, route, driver(k as u8, seed).as_mut(), seed, Mode::Evaluate, &cfg).0;
        let (a, b) = (run(), run());
        assert_eq!(a, b, "triple {k}");
        assert_eq!(a.to_ndjson(), b.to_ndjson());
    }
}

#[test]
fn zero_action_ends_blocked() {
    let (net, routes) = common::short_fixture();
    let cfg = SimConfig::default();
    for (i, route) in routes.iter().enumerate() {
        let log = run_episode(net, route, &mut ZeroDriver, i as u64, Mode::Evaluate, &cfg).0;
        assert_eq!(log.summary.terminal, TerminalCause::AgentBlocked);
        assert!((log.summary.elapsed - cfg.blocked_time).abs() < 1e-9, "{}", log.summary.elapsed);
        assert_eq!(log.summary.driven_distance, 0.0);
        assert_eq!(log.count(InfractionKind::AgentBlocked), 1);
    }
}

#[test]
fn driving_through_an_obstacle_counts_one_collision() {
    let (net, routes) = common::short_fixture();
    let cfg = common::empty_world();
    for route in routes.iter().take(5) {
        let mut sim = Sim::new(net, route, &cfg, 1);
        let pose = sim.world.ego.pose;
        sim.world.actors = vec![Actor {
            id: 0,
            kind: ActorKind::Static,
            pose: Pose::new(pose.position + pose.forward() * 6.0, pose.heading),
            half_extents: Vec2::new(0.4, 0.4),
            height: 1.0,
            speed: 0.0,
            behavior: Behavior::Parked,
        }];
        let mut events = Vec::new();
        for _ in 0..200 {
            events.extend(sim.step(ControlCommand::new(0.0, 1.0, 0.0)));
        }
        let hits = events.iter().filter(|e| e.kind == InfractionKind::CollisionStatic).count();
        assert_eq!(hits, 1, "{events:?}");
    }
}

#[test]
fn jaywalker_placement_follows_probability() {
    let (net, routes) = common::short_fixture();
    let mut cfg = common::empty_world();
    for seed in 0..20u64 {
        let route = &routes[seed as usize % routes.len()];
        cfg.scenario.p_jaywalk = 0.0;
        let sim = Sim::new(net, route, &cfg, seed);
        assert!(!sim.world.actors.iter().any(Actor::is_jaywalker));

        cfg.scenario.p_jaywalk = 1.0;
        let sim = Sim::new(net, route, &cfg, seed);
        let jay: Vec<_> = sim.world.actors.iter().filter(|a| a.is_jaywalker()).collect();
        assert_eq!(jay.len(), 1, "seed {seed}");
        // kerb point within lane offset plus sidewalk offset of the route ahead
        let Behavior::Jaywalk { from, .. } = jay[0].behavior else { unreachable!() };
        let near = (0..=(JAYWALK_MAX_AHEAD * 10.0) as usize)
            .map(|k| route.plan.centerline.sample(k as f64 / 10.0).0.dist(from))
            .fold(f64::INFINITY, f64::min);
        assert!(near <= LANE_OFFSET + SIDEWALK_OFFSET + 0.1, "{near}");
    }
}

#[test]
fn record_mode_logs_one_frame_per_query() {
    let (net, routes) = common::short_fixture();
    let cfg = SimConfig::default();
    for (i, route) in routes.iter().take(4).enumerate() {
        let (log, frames) = run_episode(net, route, &mut ExpertDriver::default(), i as u64, Mode::Record, &cfg);
        let queries = log.summary.ticks.div_ceil(QUERY_INTERVAL as usize);
        assert_eq!(frames.len(), queries);
        let rate = frames.len() as f64 / log.summary.elapsed;
        assert!((rate - 2.0).abs() < 0.1, "{rate} frames/s");
        for w in frames.windows(2) {
            assert_eq!(w[1].tick - w[0].tick, QUERY_INTERVAL);
        }
        let eval = run_episode(net, route, &mut ExpertDriver::default(), i as u64, Mode::Evaluate, &cfg).0;
        assert_eq!(eval, log, "recording does not change the episode");
    }
}

#[test]
fn expert_finishes_in_an_empty_world() {
    let (net, routes) = common::short_fixture();
    let cfg = common::empty_world();
    for route in routes.iter().take(4) {
        let log = run_episode(net, route, &mut ExpertDriver { cfg: ExpertConfig::default() }, 3, Mode::Evaluate, &cfg).0;
        assert_eq!(log.summary.terminal, TerminalCause::Finished, "{}", route.id);
        assert!(log.summary.events.is_empty(), "{:?}", log.summary.events);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn timeout_iff_budget_exceeded(pick in 0usize..100, speed in 0.5..6.0f64) {
        let (net, routes) = common::tiny_fixture();
        let route = &routes[pick % routes.len()];
        let cfg = common::empty_world();
        let log = run_episode(net, route, &mut Crawl(speed), 0, Mode::Evaluate, &cfg).0;
        let budget = cfg.time_budget(route.length());
        let s = &log.summary;
        prop_assert!(matches!(s.terminal, TerminalCause::Finished | TerminalCause::RouteTimeout), "{:?}", s.terminal);
        prop_assert_eq!(s.terminal == TerminalCause::RouteTimeout, s.elapsed > budget);
        if s.terminal == TerminalCause::RouteTimeout {
            prop_assert!(s.elapsed - cfg.dt <= budget);
        }
        // no collisions in an empty world, so every tick's displacement counts
        prop_assert!((s.driven_distance - path_length(route, &log)).abs() < 1e-6);
        prop_assert!(s.s_final <= s.total_length);
        prop_assert_eq!(s.ticks, log.ticks.len());
    }

    #[test]
    fn driven_distance_sums_displacements(pick in 0usize..100, seed in 0u64..1000) {
        let (net, routes) = common::short_fixture();
        let route = &routes[pick % routes.len()];
        let log = run_episode(net, route, &mut ExpertDriver::default(), seed, Mode::Evaluate, &SimConfig::default()).0;
        let collided = log.summary.events.iter().any(|e| {
            matches!(e.kind, InfractionKind::CollisionPedestrian | InfractionKind::CollisionVehicle | InfractionKind::CollisionStatic)
        });
        // the nudge back after a collision is not driving and is not counted
        if !collided {
            prop_assert!((log.summary.driven_distance - path_length(route, &log)).abs() < 1e-6);
        }
        prop_assert!(log.ticks.iter().all(|t| t.speed >= 0.0));
    }

    #[test]
    fn ego_step_is_deterministic_and_clamped(
        speed in 0.0..15.0f64, heading in -3.2..3.2f64,
        steer in -3.0..3.0f64, throttle in -1.0..2.0f64, brake in -1.0..2.0f64,
    ) {
        let p = VehicleParams::default();
        let start = EgoState { pose: Pose::new(Vec2::new(1.0, 2.0), heading), speed };
        let cmd = ControlCommand { steer, throttle, brake };
        let (mut a, mut b) = (start, start);
        step_ego(&mut a, cmd, &p, 0.05);
        step_ego(&mut b, cmd, &p, 0.05);
        prop_assert_eq!(a, b);
        prop_assert!(a.speed >= 0.0 && a.speed <= p.v_max);
        let moved = a.pose.position.dist(start.pose.position);
        prop_assert!((moved - speed * 0.05).abs() < 1e-12);
    }
}
