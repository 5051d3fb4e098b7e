mod common;

use drivebench::expert::{collect_dataset, replay_expert_at, run_expert, CollectConfig, ExpertConfig};
use drivebench::geom::Vec2;
use drivebench::routegen::{maneuver_distribution_of_labels, Route};
use drivebench::series::{HORIZON, WAYPOINT_DT};
use drivebench::simcore::SimConfig;
use std::sync::OnceLock;

fn dataset() -> &'static (Vec<Route>, drivebench::expert::Dataset) {
    static D: OnceLock<(Vec<Route>, drivebench::expert::Dataset)> = OnceLock::new();
    D.get_or_init(|| {
        let (net, routes) = common::tiny_fixture();
        let cfg = CollectConfig { frames_target: 600, seed: 9, ..CollectConfig::default() };
        let ds = collect_dataset(std::slice::from_ref(net), routes, &cfg, &SimConfig::default()).unwrap();
        (routes.clone(), ds)
    })
}

#[test]
fn expert_stays_in_the_lane_corridor() {
    let (net, routes) = common::short_fixture();
    let cfg = common::empty_world();
    for route in routes {
        let log = run_expert(net, route, 0, &cfg, &ExpertConfig::default());
        let worst = log
            .ticks
            .iter()
            .map(|t| route.plan.project_window(Vec2::new(t.x, t.y), t.s - 5.0, t.s + 5.0).1)
            .fold(0.0, f64::max);
        assert!(worst < 1.0, "{}: {worst:.2} m off the centreline", route.id);
    }
}

#[test]
fn frame_counts_add_up() {
    let (_, ds) = dataset();
    assert!(ds.len() >= 600);
    assert_eq!(ds.len(), ds.manifest.frames);
    assert_eq!(ds.len(), ds.manifest.episodes.iter().map(|e| e.frames).sum::<usize>());
    assert_eq!(ds.len(), ds.frames_per_route().iter().map(|(_, n)| n).sum::<usize>());
}

#[test]
fn manifest_distribution_matches_frames() {
    let (_, ds) = dataset();
    let recount = maneuver_distribution_of_labels(ds.frames.iter().map(|f| f.maneuver)).unwrap();
    let stored = ds.manifest.maneuver_distribution.unwrap();
    assert!(stored.max_abs_diff(&recount) < 0.1);
}

#[test]
fn expert_targets_respect_top_speed() {
    let (_, ds) = dataset();
    let v_max = SimConfig::default().vehicle.v_max;
    for f in &ds.frames {
        assert_eq!(f.expert.len(), HORIZON);
        let mut prev = Vec2::ZERO;
        for &p in &f.expert {
            assert!(p.dist(prev) <= v_max * WAYPOINT_DT + 1e-9, "{:?}", f.expert);
            prev = p;
        }
    }
}

#[test]
fn recorded_targets_replay() {
    let (routes, ds) = dataset();
    let (net, _) = common::tiny_fixture();
    let sim_cfg = SimConfig::default();
    for k in (0..ds.len()).step_by(ds.len() / 12) {
        let f = &ds.frames[k];
        let ep = ds.manifest.episodes.iter().find(|e| e.route_index == f.route_index as usize).unwrap();
        // the same route may be driven in several episodes, so look for the one that matches
        let hit = ds
            .manifest
            .episodes
            .iter()
            .filter(|e| e.route_index == ep.route_index)
            .filter_map(|e| {
                replay_expert_at(net, &routes[e.route_index], e.scenario_seed, f.tick as u64, &sim_cfg, &ExpertConfig::default())
            })
            .any(|w| w.points().iter().zip(&f.expert).all(|(a, b)| a.dist(*b) < 1e-12));
        assert!(hit, "frame {k} does not replay");
    }
}
