//! Route completion, infraction score, driving score, per-km rates and
//! aggregation over routes and repeated runs.

use crate::simcore::{EpisodeLog, InfractionEvent, InfractionKind, TerminalCause};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("driven distance is zero")]
    ZeroDistance,
    #[error("no values to aggregate")]
    Empty,
}

/// Multiplicative penalty per infraction kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Penalties {
    pub pedestrian: f64,
    pub vehicle: f64,
    #[serde(rename = "static")]
    pub static_obj: f64,
    pub red_light: f64,
    pub stop_sign: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Self { pedestrian: 0.50, vehicle: 0.60, static_obj: 0.65, red_light: 0.70, stop_sign: 0.80 }
    }
}

impl Penalties {
    /// Coefficient for kinds that lower IS; `None` for route-completion errors.
    pub fn coefficient(&self, kind: InfractionKind) -> Option<f64> {
        match kind {
            InfractionKind::CollisionPedestrian => Some(self.pedestrian),
            InfractionKind::CollisionVehicle => Some(self.vehicle),
            InfractionKind::CollisionStatic => Some(self.static_obj),
            InfractionKind::RedLight => Some(self.red_light),
            InfractionKind::StopSign => Some(self.stop_sign),
            _ => None,
        }
    }
}

pub fn infraction_score(events: &[InfractionEvent], penalties: &Penalties) -> f64 {
    // one multiplication per event in a fixed kind order, so the result does
    // not depend on the order events were logged in
    let mut is = 1.0;
    for kind in InfractionKind::ALL {
        if let Some(p) = penalties.coefficient(kind) {
            for _ in events.iter().filter(|e| e.kind == kind) {
                is *= p;
            }
        }
    }
    is
}

/// `(s_final - offroad) / length`, clamped to `[0, 1]`.
pub fn route_completion(s_final: f64, offroad_distance: f64, total_length: f64) -> f64 {
    if total_length <= 0.0 {
        return 1.0;
    }
    ((s_final - offroad_distance) / total_length).clamp(0.0, 1.0)
}

pub fn driving_score(rc: f64, is: f64) -> f64 {
    rc * is
}

pub fn per_km_rates(counts: &BTreeMap<InfractionKind, usize>, driven_distance: f64) -> Result<BTreeMap<InfractionKind, f64>, MetricsError> {
    if !(driven_distance > 0.0) {
        return Err(MetricsError::ZeroDistance);
    }
    let km = driven_distance / 1000.0;
    Ok(InfractionKind::ALL.iter().map(|&k| (k, counts.get(&k).copied().unwrap_or(0) as f64 / km)).collect())
}

pub fn count_events(events: &[InfractionEvent]) -> BTreeMap<InfractionKind, usize> {
    let mut c: BTreeMap<InfractionKind, usize> = InfractionKind::ALL.iter().map(|&k| (k, 0)).collect();
    for e in events {
        *c.entry(e.kind).or_default() += 1;
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResult {
    pub route_id: String,
    pub seed: u64,
    pub rc: f64,
    pub is: f64,
    pub ds: f64,
    pub counts: BTreeMap<InfractionKind, usize>,
    /// Per-km rates; empty when nothing was driven.
    pub rates: BTreeMap<InfractionKind, f64>,
    pub terminal: TerminalCause,
    pub driven_distance: f64,
    pub total_length: f64,
}

pub fn evaluate_log(log: &EpisodeLog, penalties: &Penalties) -> RouteResult {
    let s = &log.summary;
    let rc = route_completion(s.s_final, s.offroad_distance, s.total_length);
    let is = infraction_score(&s.events, penalties);
    let counts = count_events(&s.events);
    RouteResult {
        route_id: s.route_id.clone(),
        seed: s.seed,
        rc,
        is,
        ds: driving_score(rc, is),
        rates: per_km_rates(&counts, s.driven_distance).unwrap_or_default(),
        counts,
        terminal: s.terminal.clone(),
        driven_distance: s.driven_distance,
        total_length: s.total_length,
    }
}

/// Set-level scores of one run over a route set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub ds: f64,
    pub rc: f64,
    pub is: f64,
    pub n_routes: usize,
    pub driven_km: f64,
    /// Events per km over the whole set; empty when nothing was driven.
    pub rates: BTreeMap<InfractionKind, f64>,
}

/// Mean of per-route scores, rates pooled over the set.
pub fn summarize(seed: u64, results: &[RouteResult]) -> Result<RunSummary, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = results.len() as f64;
    let mut counts: BTreeMap<InfractionKind, usize> = BTreeMap::new();
    let mut dist = 0.0;
    for r in results {
        dist += r.driven_distance;
        for (&k, &c) in &r.counts {
            *counts.entry(k).or_default() += c;
        }
    }
    Ok(RunSummary {
        seed,
        ds: results.iter().map(|r| r.ds).sum::<f64>() / n,
        rc: results.iter().map(|r| r.rc).sum::<f64>() / n,
        is: results.iter().map(|r| r.is).sum::<f64>() / n,
        n_routes: results.len(),
        driven_km: dist / 1000.0,
        rates: per_km_rates(&counts, dist).unwrap_or_default(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and standard deviation (n - 1 denominator, 0 for n = 1).
    pub fn of(xs: &[f64]) -> Result<Self, MetricsError> {
        if xs.is_empty() {
            return Err(MetricsError::Empty);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
        Ok(Self { mean, std })
    }

    /// `16.8 ± 4.6` style, values scaled by `scale`.
    pub fn fmt_scaled(&self, scale: f64) -> String {
        format!("{:.1} ± {:.1}", self.mean * scale, self.std * scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_runs: usize,
    pub ds: MeanStd,
    pub rc: MeanStd,
    pub is: MeanStd,
    /// Only over runs that drove a non-zero distance.
    pub rates: BTreeMap<InfractionKind, MeanStd>,
}

impl Aggregate {
    /// One table row: DS, RC, IS in percent followed by the per-km rates.
    pub fn table_row(&self, label: &str) -> String {
        let mut row = format!("{label} | {} | {} | {}", self.ds.fmt_scaled(100.0), self.rc.fmt_scaled(100.0), self.is.fmt_scaled(100.0));
        for k in InfractionKind::ALL {
            match self.rates.get(&k) {
                Some(m) => row.push_str(&format!(" | {}", m.fmt_scaled(1.0))),
                None => row.push_str(" | n/a"),
            }
        }
        row
    }
}

pub fn table_header() -> String {
    let mut h = "model | DS | RC | IS".to_string();
    for k in InfractionKind::ALL {
        h.push_str(" | ");
        h.push_str(k.name());
    }
    h
}

pub fn aggregate_runs(runs: &[RunSummary]) -> Result<Aggregate, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let col = |f: &dyn Fn(&RunSummary) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let mut rates = BTreeMap::new();
    for k in InfractionKind::ALL {
        let xs: Vec<f64> = runs.iter().filter_map(|r| r.rates.get(&k).copied()).collect();
        if let Ok(m) = MeanStd::of(&xs) {
            rates.insert(k, m);
        }
    }
    Ok(Aggregate {
        n_runs: runs.len(),
        ds: MeanStd::of(&col(&|r| r.ds))?,
        rc: MeanStd::of(&col(&|r| r.rc))?,
        is: MeanStd::of(&col(&|r| r.is))?,
        rates,
    })
}

/// Per-route results of several runs plus their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub label: String,
    pub fingerprint: String,
    pub results: Vec<RouteResult>,
    pub runs: Vec<RunSummary>,
    pub aggregate: Aggregate,
}

impl EvaluationReport {
    /// Groups `results` into runs by seed (in first-seen order).
    pub fn build(label: &str, fingerprint: &str, results: Vec<RouteResult>) -> Result<Self, MetricsError> {
        let mut seeds: Vec<u64> = Vec::new();
        for r in &results {
            if !seeds.contains(&r.seed) {
                seeds.push(r.seed);
            }
        }
        let runs = seeds
            .iter()
            .map(|&s| {
                let rs: Vec<RouteResult> = results.iter().filter(|r| r.seed == s).cloned().collect();
                summarize(s, &rs)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let aggregate = aggregate_runs(&runs)?;
        Ok(Self { label: label.to_string(), fingerprint: fingerprint.to_string(), results, runs, aggregate })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("route_id,seed,rc,is,ds,terminal,driven_m,length_m");
        for k in InfractionKind::ALL {
            out.push(',');
            out.push_str(k.name());
        }
        out.push('\n');
        for r in &self.results {
            let terminal = match &r.terminal {
                TerminalCause::PolicyError(_) => "policy_error".to_string(),
                t => serde_json::to_value(t).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            };
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{},{:.3},{:.3}",
                r.route_id, r.seed, r.rc, r.is, r.ds, terminal, r.driven_distance, r.total_length
            ));
            for k in InfractionKind::ALL {
                out.push_str(&format!(",{}", r.counts.get(&k).copied().unwrap_or(0)));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;

    fn ev(kind: InfractionKind) -> InfractionEvent {
        InfractionEvent { kind, tick: 0, position: Vec2::ZERO }
    }

    #[test]
    fn is_examples() {
        let p = Penalties::default();
        assert_eq!(infraction_score(&[], &p), 1.0);
        assert_eq!(infraction_score(&[ev(InfractionKind::RedLight)], &p), 0.7);
        let two = infraction_score(&[ev(InfractionKind::CollisionVehicle), ev(InfractionKind::CollisionVehicle)], &p);
        assert!((two - 0.36).abs() < 1e-15);
        assert_eq!(infraction_score(&[ev(InfractionKind::AgentBlocked), ev(InfractionKind::OffRoad)], &p), 1.0);
    }

    #[test]
    fn rc_examples() {
        assert_eq!(route_completion(100.0, 0.0, 100.0), 1.0);
        assert_eq!(route_completion(50.0, 0.0, 100.0), 0.5);
        assert!((route_completion(100.0, 10.0, 100.0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn rates() {
        let mut c = BTreeMap::new();
        c.insert(InfractionKind::RedLight, 3);
        assert_eq!(per_km_rates(&c, 1500.0).unwrap()[&InfractionKind::RedLight], 2.0);
        c.insert(InfractionKind::RedLight, 1);
        assert_eq!(per_km_rates(&c, 250.0).unwrap()[&InfractionKind::RedLight], 4.0);
        assert_eq!(per_km_rates(&c, 250.0).unwrap()[&InfractionKind::StopSign], 0.0);
        assert_eq!(per_km_rates(&c, 0.0), Err(MetricsError::ZeroDistance));
    }

    #[test]
    fn mean_std_examples() {
        let m = MeanStd::of(&[0.10, 0.20, 0.30]).unwrap();
        assert_eq!(m.fmt_scaled(100.0), "20.0 ± 10.0");
        assert_eq!(MeanStd::of(&[0.3]).unwrap().std, 0.0);
        assert_eq!(MeanStd { mean: 0.168, std: 0.046 }.fmt_scaled(100.0), "16.8 ± 4.6");
    }
}
