//! Fixtures shared by the integration suites.
#![allow(dead_code)]

use drivebench::roadnet::{build_town, RoadNetwork, TownSpec};
use drivebench::routegen::{generate_routes, Route, RouteType};
use drivebench::simcore::{ScenarioConfig, SimConfig};
use std::sync::OnceLock;

pub fn town(seed: u64) -> RoadNetwork {
    build_town(&TownSpec::new(seed, 3, 60.0, 90.0)).expect("town builds")
}

/// Town 101 with short routes of at least 200 m, built once per test binary.
pub fn short_fixture() -> &'static (RoadNetwork, Vec<Route>) {
    static F: OnceLock<(RoadNetwork, Vec<Route>)> = OnceLock::new();
    F.get_or_init(|| {
        let net = town(101);
        let routes: Vec<Route> = generate_routes(&net, RouteType::Short, 24, 3, 8)
            .expect("short routes")
            .into_iter()
            .filter(|r| r.length() >= 200.0)
            .collect();
        assert!(routes.len() >= 10, "only {} long-enough routes", routes.len());
        (net, routes)
    })
}

pub fn tiny_fixture() -> &'static (RoadNetwork, Vec<Route>) {
    static F: OnceLock<(RoadNetwork, Vec<Route>)> = OnceLock::new();
    F.get_or_init(|| {
        let net = town(102);
        let routes = generate_routes(&net, RouteType::Tiny, 20, 5, 8).expect("tiny routes");
        (net, routes)
    })
}

/// Simulation settings without any traffic.
pub fn empty_world() -> SimConfig {
    SimConfig {
        scenario: ScenarioConfig { vehicles: (0, 0), pedestrians: (0, 0), statics: (0, 0), p_jaywalk: 0.0, ..ScenarioConfig::default() },
        junction_furniture: false,
        ..SimConfig::default()
    }
}
