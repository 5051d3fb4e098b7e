mod common;

use drivebench::geom::Vec2;
use drivebench::roadnet::{LaneKind, RoadNetwork};
use proptest::prelude::*;
use serde_json::json;
use std::sync::OnceLock;

fn net() -> &'static RoadNetwork {
    static N: OnceLock<RoadNetwork> = OnceLock::new();
    N.get_or_init(|| common::town(17))
}

fn road_lanes(net: &RoadNetwork) -> Vec<usize> {
    net.lanes.iter().filter(|l| l.kind == LaneKind::Road && l.length() > 20.0).map(|l| l.id).collect()
}

/// Point on a road lane away from its ends, so it snaps back onto that lane.
fn lane_point(net: &RoadNetwork, pick: usize, frac: f64) -> Vec2 {
    let roads = road_lanes(net);
    let lane = net.lane(roads[pick % roads.len()]);
    lane.points.sample(lane.length() * (0.3 + 0.4 * frac)).0
}

/// Grid whose every street carries one lane each way. Each lane bows 1.75 m
/// to its own right at the midpoint and ends exactly on the nodes. There are
/// no junction connectors: successors are all lanes leaving the end node
/// except the one straight back.
struct Grid {
    net: RoadNetwork,
    /// `twin[i]` is the lane covering the same street in the other direction.
    twin: Vec<usize>,
}

fn symmetric_grid(xs: &[f64], ys: &[f64]) -> Grid {
    let node = |i: usize, j: usize| i * ys.len() + j;
    let pos = |n: usize| [xs[n / ys.len()], ys[n % ys.len()]];
    let mut edges = Vec::new();
    for i in 0..xs.len() {
        for j in 0..ys.len() {
            if i + 1 < xs.len() {
                edges.push((node(i, j), node(i + 1, j)));
            }
            if j + 1 < ys.len() {
                edges.push((node(i, j), node(i, j + 1)));
            }
        }
    }
    // lane 2k runs u -> v, lane 2k + 1 runs v -> u
    let mut ends = Vec::new();
    let mut twin = Vec::new();
    for (k, &(u, v)) in edges.iter().enumerate() {
        ends.push((u, v));
        ends.push((v, u));
        twin.push(2 * k + 1);
        twin.push(2 * k);
    }
    let succ: Vec<Vec<usize>> =
        ends.iter().map(|&(a, b)| (0..ends.len()).filter(|&m| ends[m].0 == b && ends[m].1 != a).collect()).collect();
    let lanes: Vec<_> = ends
        .iter()
        .enumerate()
        .map(|(id, &(a, b))| {
            let (pa, pb) = (pos(a), pos(b));
            let (dx, dy) = (pb[0] - pa[0], pb[1] - pa[1]);
            let l = (dx * dx + dy * dy).sqrt();
            // right normal of the driving direction
            let mid = [0.5 * (pa[0] + pb[0]) + 1.75 * dy / l, 0.5 * (pa[1] + pb[1]) - 1.75 * dx / l];
            json!({
                "id": id,
                "kind": "road",
                "points": {"points": [pa, mid, pb]},
                "successors": succ[id],
                "predecessors": (0..ends.len()).filter(|&m| succ[m].contains(&id)).collect::<Vec<_>>(),
                "speed_limit": 10.0,
                "from_intersection": null,
                "to_intersection": null,
            })
        })
        .collect();
    let text = json!({"format": 1, "town_seed": 0, "lanes": lanes, "intersections": []}).to_string();
    Grid { net: RoadNetwork::from_json(&text).expect("grid is valid"), twin }
}

fn spacings() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(20.0..80.0f64, 2..4).prop_map(|gaps| {
        std::iter::once(0.0)
            .chain(gaps.iter().scan(0.0, |acc, g| {
                *acc += g;
                Some(*acc)
            }))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reversed_trip_on_mirrored_lanes_has_equal_length(
        xs in spacings(), ys in spacings(),
        la in 0usize..1000, lb in 0usize..1000,
        fa in 0.3..0.7f64, fb in 0.3..0.7f64,
    ) {
        let g = symmetric_grid(&xs, &ys);
        let n = g.net.lanes.len();
        let (la, lb) = (la % n, lb % n);
        let at = |lane: usize, f: f64| {
            let l = g.net.lane(lane);
            l.points.sample(f * l.length()).0
        };
        let forward = g.net.plan_route(at(la, fa), at(lb, fb)).unwrap();
        let back = g.net.plan_route(at(g.twin[lb], 1.0 - fb), at(g.twin[la], 1.0 - fa)).unwrap();
        prop_assert!((forward.total_length - back.total_length).abs() < 1e-9,
            "{} vs {}", forward.total_length, back.total_length);
    }

    #[test]
    fn plan_invariants_hold(a in 0usize..10_000, b in 0usize..10_000, fa in 0.0..1.0f64, fb in 0.0..1.0f64) {
        let net = net();
        let plan = net.plan_route(lane_point(net, a, fa), lane_point(net, b, fb)).unwrap();
        let spans: f64 = plan.spans.iter().map(|s| s.length()).sum();
        prop_assert!((plan.total_length - spans).abs() < 1e-6);
        prop_assert!((plan.centerline.length() - plan.total_length).abs() < 1e-9);
        for w in plan.lane_trace.windows(2) {
            prop_assert!(net.lane(w[0]).successors.contains(&w[1]), "{} -> {}", w[0], w[1]);
        }
        for w in plan.waypoint_s.windows(2) {
            prop_assert!(w[1] > w[0]);
        }
        prop_assert_eq!(plan.waypoint_s.first().copied(), Some(0.0));
        prop_assert_eq!(plan.waypoint_s.last().copied(), Some(plan.total_length));
    }

    #[test]
    fn projection_is_idempotent(a in 0usize..10_000, b in 0usize..10_000, dx in -8.0..8.0f64, dy in -8.0..8.0f64, f in 0.0..1.0f64) {
        let net = net();
        let plan = net.plan_route(lane_point(net, a, 0.5), lane_point(net, b, 0.5)).unwrap();
        let (p, _) = plan.pose_at(f * plan.total_length);
        let (s, d) = plan.project(p + Vec2::new(dx, dy));
        prop_assert!(d >= 0.0 && d <= (dx * dx + dy * dy).sqrt() + 1e-9);
        let (foot, _) = plan.pose_at(s);
        let (s2, d2) = plan.project(foot);
        prop_assert!(d2 < 1e-9, "foot is {d2} off the line");
        prop_assert!(plan.pose_at(s2).0.dist(foot) < 1e-9);
    }
}

#[test]
fn town_json_round_trips() {
    for seed in [1, 17, 101] {
        let net = common::town(seed);
        let back = RoadNetwork::from_json(&net.to_json()).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_json(), net.to_json());
    }
}

#[test]
fn same_seed_same_town() {
    assert_eq!(common::town(42).to_json(), common::town(42).to_json());
    assert_ne!(common::town(42).to_json(), common::town(43).to_json());
}
