//! Acceptance criteria. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. The desk experiment runs once and feeds criteria 5 to 9.

mod common;
mod oracle;

use drivebench::analysis::experiment::all_blocked;
use drivebench::analysis::{pearson, ranks, run_experiment, spearman, ExperimentBundle, ExperimentConfig};
use drivebench::expert::{collect_dataset, CollectConfig, DatasetFrame, ExpertDriver};
use drivebench::metrics::{evaluate_log, summarize, MeanStd, Penalties};
use drivebench::policy::net::{backward, batch_loss, forward, Layout, Workspace};
use drivebench::policy::train::TrainingSample;
use drivebench::policy::{grad_check, load_observation, offline_val_loss, train, PolicyConfig, PolicyParams, TrainConfig};
use drivebench::routegen::{
    classify_route, dedupe_routes, generate_routes, route_id, Route, RouteType, LONG_MIN_LENGTH, TINY_MAX_LENGTH,
};
use drivebench::simcore::{
    run_episode, Driver, EpisodeLog, EpisodeSummary, InfractionEvent, InfractionKind, Mode, SimConfig, TerminalCause,
    ZeroDriver,
};
use drivebench::policy::PolicyDriver;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

// Pinned tolerances and budgets.
const REPLAY_TRIPLES: usize = 20;
const SYNTHETIC_LOGS: usize = 1000;
const CLOSED_FORM_TOL: f64 = 1e-12;
const TIED_SERIES: usize = 1000;
const GRAD_TOL_NETWORK: f64 = 1e-3;
const GRAD_TOL_HEAD: f64 = 1e-6;
const TRAIN_LOSS_RATIO: f64 = 0.5;
const OVERFIT_RATIO: f64 = 0.01;
const DEDUPE_ROUTES: usize = 500;
const MANEUVER_GAP_POINTS: f64 = 5.0;
const MIN_VALSETS: usize = 5;
const BUDGET_DETERMINISM: Duration = Duration::from_secs(5 * 60);
const BUDGET_GRADCHECK: Duration = Duration::from_secs(2 * 60);
const BUDGET_BASELINES: Duration = Duration::from_secs(20 * 60);
const BUDGET_SCALING: Duration = Duration::from_secs(45 * 60);

type Outcome = Result<String, String>;

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// The desk experiment and how long it took.
fn desk() -> &'static (ExperimentBundle, Duration) {
    static D: OnceLock<(ExperimentBundle, Duration)> = OnceLock::new();
    D.get_or_init(|| {
        let t = Instant::now();
        let b = run_experiment(&config("desk.toml"), 1, &mut |s| eprintln!("  desk: {s}")).expect("desk experiment");
        (b, t.elapsed())
    })
}

fn frames(target: usize, seed: u64) -> Vec<DatasetFrame> {
    let (net, routes) = common::tiny_fixture();
    let cfg = CollectConfig { frames_target: target, seed, ..CollectConfig::default() };
    collect_dataset(std::slice::from_ref(net), routes, &cfg, &SimConfig::default()).expect("collect").frames
}

fn check(cond: bool, what: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what)
    }
}

fn within(t: Duration, budget: Duration) -> Result<(), String> {
    check(t < budget, format!("took {:.0} s, budget {:.0} s", t.as_secs_f64(), budget.as_secs_f64()))
}

// 1
fn determinism() -> Outcome {
    let t = Instant::now();
    let (net, routes) = common::short_fixture();
    let cfg = SimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..REPLAY_TRIPLES {
        let route = &routes[rng.random_range(0..routes.len())];
        let seed: u64 = rng.random();
        let kind = rng.random_range(0..3);
        let run = || {
            let mut d: Box<dyn Driver> = match kind {
                0 => Box::new(ExpertDriver::default()),
                1 => Box::new(ZeroDriver),
                _ => Box::new(PolicyDriver::new(PolicyParams::init(PolicyConfig::default(), seed))),
            };
            run_episode(net, route, d.as_mut(), seed, Mode::Evaluate, &cfg).0.to_ndjson()
        };
        check(run() == run(), format!("triple {k} (route {}, seed {seed}, driver {kind}) diverged", route.id))?;
    }
    let smoke = config("smoke.toml");
    let a = run_experiment(&smoke, 1, &mut |_| {}).map_err(|e| e.to_string())?.digest();
    let b = run_experiment(&smoke, 1, &mut |_| {}).map_err(|e| e.to_string())?.digest();
    check(a == b, format!("bundle digests differ: {a} vs {b}"))?;
    within(t.elapsed(), BUDGET_DETERMINISM)?;
    Ok(format!("{REPLAY_TRIPLES} replays identical, bundle digest {}", &a[..12]))
}

// 2
fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let penalties = Penalties::default();
    let table = serde_json::to_value(penalties).unwrap();
    let mut results = Vec::new();
    for id in 0..SYNTHETIC_LOGS {
        let total: f64 = rng.random_range(0.0..1500.0);
        let s_final: f64 = rng.random_range(0.0..=total);
        let driven = if rng.random_bool(0.1) { 0.0 } else { s_final + rng.random_range(0.0..50.0) };
        let offroad = if rng.random_bool(0.3) { rng.random_range(0.0..s_final.max(1e-9)) } else { 0.0 };
        let n = rng.random_range(0..12);
        let events: Vec<InfractionEvent> = (0..n)
            .map(|t| InfractionEvent {
                kind: InfractionKind::ALL[rng.random_range(0..InfractionKind::ALL.len())],
                tick: t,
                position: Default::default(),
            })
            .collect();
        let log = EpisodeLog {
            summary: EpisodeSummary {
                route_id: format!("r{id}"),
                seed: 0,
                total_length: total,
                driven_distance: driven,
                offroad_distance: offroad,
                s_final,
                elapsed: 0.0,
                ticks: 0,
                terminal: TerminalCause::Finished,
                events,
            },
            ticks: Vec::new(),
        };
        let s = &log.summary;
        let r = evaluate_log(&log, &penalties);
        let kinds: Vec<String> = s.events.iter().map(|e| e.kind.name().to_string()).collect();
        let is = oracle::infraction_score(&kinds, &table);
        let rc = oracle::route_completion(s.s_final, s.offroad_distance, s.total_length);
        check(r.is == is && r.rc == rc && r.ds == rc * is, format!("log {id}: ({}, {}) vs ({rc}, {is})", r.rc, r.is))?;
        if driven > 0.0 {
            for k in InfractionKind::ALL {
                let count = kinds.iter().filter(|x| *x == k.name()).count();
                check(r.rates[&k] == oracle::per_km(count, driven), format!("log {id}: {} rate", k.name()))?;
            }
        }
        results.push(r);
    }
    for chunk in results.chunks(10) {
        let ds: Vec<f64> = chunk.iter().map(|r| r.ds).collect();
        let st = MeanStd::of(&ds).unwrap();
        check(summarize(0, chunk).unwrap().ds == oracle::mean(&ds), "set mean".into())?;
        check(st.mean == oracle::mean(&ds) && st.std == oracle::sample_std(&ds), "mean/std".into())?;
    }
    Ok(format!("{SYNTHETIC_LOGS} logs match exactly"))
}

// 3
fn statistics() -> Outcome {
    let mut n = 0;
    for c in oracle::cases("spearman.json") {
        let (a, b) = (oracle::f64s(&c.inputs["a"]), oracle::f64s(&c.inputs["b"]));
        let got = spearman(&a, &b).ok();
        match (got, c.expected.as_f64()) {
            (Some(x), Some(y)) => check((x - y).abs() <= CLOSED_FORM_TOL, format!("{}: {x} vs {y}", c.name))?,
            (None, None) => {}
            (x, y) => return Err(format!("{}: {x:?} vs {y:?}", c.name)),
        }
        n += 1;
    }
    for c in oracle::cases("sample_std.json") {
        let xs = oracle::f64s(&c.inputs);
        let st = MeanStd::of(&xs).unwrap();
        check((st.std - c.expected["std"].as_f64().unwrap()).abs() <= CLOSED_FORM_TOL, c.name.clone())?;
        n += 1;
    }
    let anti = pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap();
    check((anti + 1.0).abs() <= CLOSED_FORM_TOL, format!("anti-linear pearson {anti}"))?;
    let hand = oracle::pearson(&[1.0, 2.0, 4.0], &[1.0, 3.0, 5.0]).unwrap();
    check((pearson(&[1.0, 2.0, 4.0], &[1.0, 3.0, 5.0]).unwrap() - hand).abs() <= CLOSED_FORM_TOL, "covariance case".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..TIED_SERIES {
        let len = rng.random_range(2..15);
        let a: Vec<f64> = (0..len).map(|_| rng.random_range(0..5) as f64).collect();
        let b: Vec<f64> = (0..len).map(|_| rng.random_range(0..5) as f64).collect();
        match (spearman(&a, &b), pearson(&ranks(&a), &ranks(&b))) {
            (Ok(x), Ok(y)) => check(x == y, format!("series {k}: {x} vs {y}"))?,
            (Err(_), Err(_)) => {}
            (x, y) => return Err(format!("series {k}: {x:?} vs {y:?}")),
        }
    }
    Ok(format!("{} closed-form cases, {TIED_SERIES} tied series", n + 2))
}

// 4
fn gradient_check() -> Outcome {
    let t = Instant::now();
    let data = frames(40, 1);
    let batch: Vec<&DatasetFrame> = data.iter().step_by(10).collect();
    let batch: Vec<DatasetFrame> = batch.into_iter().cloned().collect();
    let params = PolicyParams::<f32>::init(PolicyConfig::default(), 7).cast::<f64>();
    let net = grad_check(&params, &batch, GRAD_TOL_NETWORK, 12, &[], 5);
    check(net.passed, format!("network-wide max rel error {:.2e}", net.max_rel_error))?;
    let head = grad_check(&params, &batch, GRAD_TOL_HEAD, 200, &["head."], 6);
    check(head.passed, format!("head max rel error {:.2e}", head.max_rel_error))?;

    // head gradients again, against the oracle's central difference
    let cfg = &params.config;
    let layout = Layout::new(cfg);
    let mut ws = Workspace::<f64>::new(cfg, batch.len());
    let mut targets = vec![0.0; cfg.horizon * batch.len() * 2];
    for (b, s) in batch.iter().enumerate() {
        load_observation(cfg, &mut ws, b, s.bev_counts(), s.goal());
        for (tau, p) in s.target().iter().enumerate() {
            targets[(tau * batch.len() + b) * 2] = p.x;
            targets[(tau * batch.len() + b) * 2 + 1] = p.y;
        }
    }
    forward(cfg, &layout, &params.data, &mut ws);
    let mut grads = vec![0.0; layout.total];
    backward(cfg, &layout, &params.data, &ws, &targets, &mut grads);
    let (_, off, len, _) = layout.groups().into_iter().find(|g| g.0 == "head.weight").unwrap();
    let mut worst: f64 = 0.0;
    for i in off..off + len + 2 {
        let mut f = |theta: &[f64]| {
            forward(cfg, &layout, theta, &mut ws);
            batch_loss(cfg, &ws, &targets)
        };
        let numeric = oracle::central_difference(&mut f, &params.data, i, 1e-4);
        let scale = numeric.abs().max(grads[i].abs());
        if scale > 1e-9 {
            worst = worst.max((numeric - grads[i]).abs() / scale);
        }
    }
    check(worst < GRAD_TOL_HEAD, format!("head vs oracle difference {worst:.2e}"))?;
    within(t.elapsed(), BUDGET_GRADCHECK)?;
    Ok(format!("network {:.1e}, head {:.1e}, head vs oracle {worst:.1e}", net.max_rel_error, head.max_rel_error))
}

// 5
fn training_sanity() -> Outcome {
    let (bundle, _) = desk();
    let run = &bundle.summary.runs[0];
    let l = &run.train_losses;
    // first-epoch mean already includes some learning, so this is stricter
    // than comparing against the untrained loss
    let tail = l[l.len().saturating_sub(5)..].iter().sum::<f64>() / l.len().min(5) as f64;
    check(tail < TRAIN_LOSS_RATIO * l[0], format!("{}: smoothed final {tail:.3} vs first epoch {:.3}", run.name, l[0]))?;

    let one = frames(1, 3)[..1].to_vec();
    let cfg = TrainConfig { epochs: 300, batch_size: 1, learning_rate: 1e-3, seed: 2, ..TrainConfig::default() };
    let initial = offline_val_loss(&PolicyParams::init(cfg.policy.clone(), cfg.seed), &one).unwrap();
    let out = train(&one, &cfg).map_err(|e| e.to_string())?;
    let best = out.losses().into_iter().fold(f64::INFINITY, f64::min);
    check(best < OVERFIT_RATIO * initial, format!("single frame: best {best:.4} vs initial {initial:.4}"))?;
    Ok(format!("{}: {:.3} -> {tail:.3}; single frame {initial:.3} -> {best:.4}", run.name, l[0]))
}

// 6
fn baselines() -> Outcome {
    let (bundle, took) = desk();
    let s = &bundle.summary;
    let expert = s.expert.aggregate.ds.mean;
    let zero = s.zero.aggregate.ds.mean;
    check(s.zero.runs.len() >= 3 && s.expert.runs.len() >= 3, "fewer than 3 test seeds".into())?;
    check(all_blocked(&s.zero), "a zero-action episode did not end AgentBlocked".into())?;
    let mut parts = Vec::new();
    for run in &s.runs {
        let p = run.selection(&s.select_with).ok_or("no selected checkpoint")?.test.ds.mean;
        check(expert >= p && p >= zero, format!("{}: expert {expert:.3}, policy {p:.3}, zero {zero:.3}", run.name))?;
        parts.push(format!("{} {:.1}", run.name, 100.0 * p));
    }
    within(*took, BUDGET_BASELINES)?;
    Ok(format!("expert {:.1} >= [{}] >= zero {:.1}, zero all blocked", 100.0 * expert, parts.join(", "), 100.0 * zero))
}

// 7
fn data_scaling() -> Outcome {
    let (bundle, took) = desk();
    let s = &bundle.summary;
    let ds: Vec<MeanStd> = s
        .runs
        .iter()
        .map(|r| r.selection(&s.select_with).map(|x| x.test.ds).ok_or("no selected checkpoint".to_string()))
        .collect::<Result<_, _>>()?;
    check(ds.len() == 3, format!("{} tiers", ds.len()))?;
    let mut inversions = 0;
    for w in ds.windows(2) {
        if w[1].mean < w[0].mean {
            inversions += 1;
            let allowed = w[0].std.max(w[1].std);
            check(w[0].mean - w[1].mean <= allowed, format!("drop {:.3} exceeds 1 std ({allowed:.3})", w[0].mean - w[1].mean))?;
        }
    }
    check(inversions <= 1, format!("{inversions} inversions"))?;
    within(*took, BUDGET_SCALING)?;
    let row: Vec<String> = s.runs.iter().zip(&ds).map(|(r, d)| format!("{} {:.1}±{:.1}", r.name, 100.0 * d.mean, 100.0 * d.std)).collect();
    Ok(format!("{} ({inversions} inversions)", row.join(" -> ")))
}

// 8
fn checkpoint_selection() -> Outcome {
    let (bundle, _) = desk();
    let s = &bundle.summary;
    let (mut over_naive, mut over_loss) = (0, 0);
    let mut rows = Vec::new();
    for run in &s.runs {
        let get = |m: &str| run.selection(m).map(|x| x.test.ds.mean).ok_or(format!("{}: no {m} row", run.name));
        let (sel, naive, vloss) = (get(&s.select_with)?, get("naive")?, get("validation loss")?);
        over_naive += usize::from(sel >= naive);
        over_loss += usize::from(sel >= vloss);
        rows.push(format!("{} {:.1}/{:.1}/{:.1}", run.name, 100.0 * sel, 100.0 * naive, 100.0 * vloss));
    }
    let detail = format!("selected/naive/val-loss: {}", rows.join(", "));
    check(over_naive >= 2 && over_loss >= 2, format!("beats naive in {over_naive}/3, val loss in {over_loss}/3; {detail}"))?;
    Ok(detail)
}

// 9
fn correlation() -> Outcome {
    let (bundle, _) = desk();
    let s = &bundle.summary;
    let mut parts = Vec::new();
    for run in &s.runs {
        let m = &run.correlation;
        let valsets = m.labels.iter().filter(|l| *l != "test" && *l != "loss").count();
        check(valsets >= MIN_VALSETS, format!("{}: {valsets} validation sets", run.name))?;
        check(m.index("test").is_some() && m.index("loss").is_some(), "missing test or loss row".into())?;
        let excluded = m.excluded();
        for (i, a) in m.labels.iter().enumerate() {
            for (j, b) in m.labels.iter().enumerate() {
                let allowed = excluded.contains(a) || excluded.contains(b);
                check(allowed || (m.pearson[i][j].is_some() && m.spearman[i][j].is_some()), format!("{}: empty cell {a}/{b}", run.name))?;
            }
        }
        let r = m.pearson_of("test", "loss").ok_or(format!("{}: loss/test correlation missing", run.name))?;
        parts.push(format!("{} |r(test, loss)| {:.2}", run.name, r.abs()));
    }
    Ok(parts.join(", "))
}

// 10
fn route_generation() -> Outcome {
    let desk = config("desk.toml");
    let mut routes: Vec<Route> = Vec::new();
    // training and validation towns of the desk config
    for &seed in desk.towns.train.iter().chain(&desk.towns.val) {
        let net = drivebench::roadnet::build_town(&desk.towns.spec(seed)).map_err(|e| e.to_string())?;
        for (ty, n) in [(RouteType::Tiny, 40), (RouteType::Short, 50), (RouteType::Long, 10)] {
            routes.extend(generate_routes(&net, ty, n, seed, 8).map_err(|e| e.to_string())?);
        }
    }
    for r in &routes {
        let ok = r.route_type == classify_route(&r.plan)
            && r.id == route_id(&r.plan.waypoints)
            && match r.route_type {
                RouteType::Tiny => r.length() < TINY_MAX_LENGTH && r.n_intersections <= 1,
                RouteType::Short => r.length() <= LONG_MIN_LENGTH,
                RouteType::Long => r.length() > LONG_MIN_LENGTH,
            };
        check(ok, format!("route {} breaks its {:?} invariants", r.id, r.route_type))?;
    }
    check(routes.len() >= DEDUPE_ROUTES, format!("only {} routes", routes.len()))?;
    let mut sample: Vec<Route> = routes[..DEDUPE_ROUTES].to_vec();
    sample.extend(routes[..DEDUPE_ROUTES].iter().step_by(7).cloned());
    let once = dedupe_routes(&sample);
    // ids hash world waypoints, so towns sharing a corner junction can share a tiny route id
    let mut seen = std::collections::HashSet::new();
    let first: Vec<&str> = sample.iter().map(|r| r.id.as_str()).filter(|id| seen.insert(*id)).collect();
    let kept: Vec<&str> = once.iter().map(|r| r.id.as_str()).collect();
    check(kept == first, format!("dedupe kept {} of {} distinct ids", kept.len(), first.len()))?;
    check(dedupe_routes(&once) == once, "dedupe is not idempotent".into())?;

    let (bundle, _) = self::desk();
    let dists: Vec<_> = bundle.summary.runs.iter().map(|r| r.maneuvers.ok_or("tier without distribution")).collect::<Result<_, _>>()?;
    let mut worst: f64 = 0.0;
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            worst = worst.max(dists[i].max_abs_diff(&dists[j]));
        }
    }
    check(worst <= MANEUVER_GAP_POINTS, format!("tier distributions differ by {worst:.1} points"))?;
    Ok(format!("{} routes valid, dedupe idempotent on {DEDUPE_ROUTES}, tier gap {worst:.1} points", routes.len()))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 determinism", determinism),
        ("2 metric oracles", metric_oracles),
        ("3 statistics", statistics),
        ("4 gradient check", gradient_check),
        ("5 training sanity", training_sanity),
        ("6 expert >= policy >= zero", baselines),
        ("7 data scaling", data_scaling),
        ("8 checkpoint selection", checkpoint_selection),
        ("9 correlation matrix", correlation),
        ("10 route generation", route_generation),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let t = Instant::now();
        let out = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match out {
            Ok(detail) => println!("PASS {name} ({secs:.1} s): {detail}"),
            Err(why) => {
                println!("FAIL {name} ({secs:.1} s): {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
