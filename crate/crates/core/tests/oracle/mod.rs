//! Brute-force reference implementations. Nothing here calls into the crate:
//! inputs are plain numbers or the serialized JSON the crate writes.
#![allow(dead_code)]

use serde::Deserialize;
use serde_json::Value;
use std::path::PathBuf;

/// One case from `tests/oracle/<file>.json`.
#[derive(Debug, Deserialize)]
pub struct OracleCase {
    pub name: String,
    pub inputs: Value,
    pub expected: Value,
    pub tolerance: f64,
    pub oracle: String,
}

pub fn cases(file: &str) -> Vec<OracleCase> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/oracle").join(file);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn f64s(v: &Value) -> Vec<f64> {
    v.as_array().expect("array").iter().map(|x| x.as_f64().expect("number")).collect()
}

pub fn pts2(v: &Value) -> Vec<[f64; 2]> {
    v.as_array()
        .expect("array")
        .iter()
        .map(|p| match p {
            Value::Array(a) => [a[0].as_f64().unwrap(), a[1].as_f64().unwrap()],
            Value::Object(o) => [o["x"].as_f64().unwrap(), o["y"].as_f64().unwrap()],
            _ => panic!("bad point {p}"),
        })
        .collect()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

// ---- lane graph shortest path ----

#[derive(Debug, Clone)]
pub struct RawLane {
    pub kind: String,
    pub points: Vec<[f64; 2]>,
    pub successors: Vec<usize>,
}

impl RawLane {
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// Point at arclength `s` by walking the segments.
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let mut left = s;
        for w in self.points.windows(2) {
            let l = dist(w[0], w[1]);
            if left <= l {
                let t = if l > 0.0 { left / l } else { 0.0 };
                return [w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])];
            }
            left -= l;
        }
        *self.points.last().unwrap()
    }
}

/// Lanes from a serialized town (or a hand-written case with the same shape).
pub fn raw_lanes(town: &Value) -> Vec<RawLane> {
    town["lanes"]
        .as_array()
        .expect("lanes")
        .iter()
        .map(|l| {
            let pts = if l["points"].is_object() { &l["points"]["points"] } else { &l["points"] };
            RawLane {
                kind: l.get("kind").and_then(Value::as_str).unwrap_or("road").to_string(),
                points: pts2(pts),
                successors: l["successors"].as_array().unwrap().iter().map(|s| s.as_u64().unwrap() as usize).collect(),
            }
        })
        .collect()
}

/// Shortest driving distance from `(lane, s)` to `(lane, s)`, O(V^2) Dijkstra
/// on lane entry costs.
pub fn dijkstra_length(lanes: &[RawLane], start: (usize, f64), end: (usize, f64)) -> Option<f64> {
    if start.0 == end.0 && end.1 >= start.1 {
        return Some(end.1 - start.1);
    }
    let n = lanes.len();
    let len: Vec<f64> = lanes.iter().map(RawLane::length).collect();
    let mut entry = vec![f64::INFINITY; n];
    let mut fixed = vec![false; n];
    for &s in &lanes[start.0].successors {
        entry[s] = entry[s].min(len[start.0] - start.1);
    }
    loop {
        let mut pick = None;
        for i in 0..n {
            if !fixed[i] && entry[i].is_finite() && pick.is_none_or(|p: usize| entry[i] < entry[p]) {
                pick = Some(i);
            }
        }
        let Some(u) = pick else { break };
        fixed[u] = true;
        for &v in &lanes[u].successors {
            let c = entry[u] + len[u];
            if c < entry[v] {
                entry[v] = c;
            }
        }
    }
    entry[end.0].is_finite().then(|| entry[end.0] + end.1)
}

// ---- polyline nearest point ----

/// Nearest point by scanning the polyline every centimetre, then refining
/// the best sample with a golden-section search over the neighbouring 2 cm.
/// Returns (arclength, distance).
pub fn polyline_scan(points: &[[f64; 2]], q: [f64; 2]) -> (f64, f64) {
    let cum: Vec<f64> = std::iter::once(0.0)
        .chain(points.windows(2).scan(0.0, |acc, w| {
            *acc += dist(w[0], w[1]);
            Some(*acc)
        }))
        .collect();
    let total = *cum.last().unwrap();
    let at = |s: f64| -> [f64; 2] {
        let s = s.clamp(0.0, total);
        let mut i = 0;
        while i + 2 < cum.len() && cum[i + 1] < s {
            i += 1;
        }
        let l = cum[i + 1] - cum[i];
        let t = if l > 0.0 { (s - cum[i]) / l } else { 0.0 };
        [points[i][0] + t * (points[i + 1][0] - points[i][0]), points[i][1] + t * (points[i + 1][1] - points[i][1])]
    };
    let steps = (total / 0.01).ceil() as usize;
    let mut best = (0.0, f64::INFINITY);
    for k in 0..=steps {
        let s = (k as f64 * 0.01).min(total);
        let d = dist(at(s), q);
        if d < best.1 {
            best = (s, d);
        }
    }
    // the distance along one segment is convex, so refine around the sample
    let (mut lo, mut hi) = ((best.0 - 0.01).max(0.0), (best.0 + 0.01).min(total));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if dist(at(a), q) < dist(at(b), q) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let s = 0.5 * (lo + hi);
    let d = dist(at(s), q);
    if d < best.1 {
        (s, d)
    } else {
        best
    }
}

// ---- BEV grid ----

/// Per-cell point counts, channel-last `[row][col][2]`, recomputed by testing
/// every point against every cell's bounds.
pub fn bev_counts(points: &[[f64; 3]], forward: f64, side: f64, cells: usize, z_split: f64) -> Vec<u32> {
    let cs = forward / cells as f64;
    let mut out = vec![0u32; cells * cells * 2];
    for p in points {
        for row in 0..cells {
            let (x0, x1) = (row as f64 * cs, (row + 1) as f64 * cs);
            if !(p[0] >= x0 && p[0] < x1) {
                continue;
            }
            for col in 0..cells {
                let (y0, y1) = (-side + col as f64 * cs, -side + (col + 1) as f64 * cs);
                if p[1] >= y0 && p[1] < y1 {
                    let ch = if p[2] > z_split { 1 } else { 0 };
                    out[(row * cells + col) * 2 + ch] += 1;
                }
            }
        }
    }
    out
}

// ---- finite differences ----

/// Central difference of `f` along coordinate `i`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

pub fn named_function(name: &str) -> fn(&[f64]) -> f64 {
    match name {
        "cube" => |x| x[0] * x[0] * x[0],
        "sin" => |x| x[0].sin(),
        "bilinear" => |x| x[0] * x[1] + 3.0 * x[1],
        "exp_sum" => |x| (x[0] + 2.0 * x[1]).exp(),
        other => panic!("unknown function {other}"),
    }
}

// ---- metrics ----

/// Event kinds in the order penalties are applied.
pub const KIND_ORDER: [&str; 9] = [
    "collision_pedestrian",
    "collision_vehicle",
    "collision_static",
    "red_light",
    "stop_sign",
    "route_deviation",
    "agent_blocked",
    "route_timeout",
    "off_road",
];

/// Penalty table key of a kind, if it is penalised at all.
fn penalty_key(kind: &str) -> Option<&'static str> {
    match kind {
        "collision_pedestrian" => Some("pedestrian"),
        "collision_vehicle" => Some("vehicle"),
        "collision_static" => Some("static"),
        "red_light" => Some("red_light"),
        "stop_sign" => Some("stop_sign"),
        _ => None,
    }
}

/// Product of one coefficient per event, events taken kind by kind.
pub fn infraction_score(kinds: &[String], penalties: &Value) -> f64 {
    let mut sorted: Vec<&String> = kinds.iter().collect();
    sorted.sort_by_key(|k| KIND_ORDER.iter().position(|o| o == k).expect("known kind"));
    sorted.iter().fold(1.0, |acc, k| match penalty_key(k) {
        Some(key) => acc * penalties[key].as_f64().expect("coefficient"),
        None => acc,
    })
}

pub fn route_completion(s_final: f64, offroad: f64, total: f64) -> f64 {
    if total <= 0.0 {
        1.0
    } else {
        ((s_final - offroad) / total).clamp(0.0, 1.0)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    s / xs.len() as f64
}

/// Sample standard deviation with the n - 1 denominator.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let mut ss = 0.0;
    for x in xs {
        ss += (x - m).powi(2);
    }
    (ss / (xs.len() as f64 - 1.0)).sqrt()
}

/// Events per kilometre.
pub fn per_km(count: usize, metres: f64) -> f64 {
    count as f64 / (metres / 1000.0)
}

// ---- correlation ----

/// Average ranks by counting: 1 + #smaller + (#equal - 1) / 2.
pub fn average_ranks(a: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|&x| {
            let smaller = a.iter().filter(|&&y| y < x).count() as f64;
            let equal = a.iter().filter(|&&y| y == x).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

// ---- longitudinal dynamics ----

/// Speed after `k` ticks of constant throttle `u` with linear drag and no
/// clamping: v_k = v_inf + (v0 - v_inf) (1 - drag dt)^k.
pub fn speed_closed_form(v0: f64, u: f64, a_max: f64, drag: f64, dt: f64, k: u32) -> f64 {
    let v_inf = u * a_max / drag;
    v_inf + (v0 - v_inf) * (1.0 - drag * dt).powi(k as i32)
}
