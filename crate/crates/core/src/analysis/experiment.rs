//! Full experiment: build towns, collect datasets, train, validate and test
//! every few epochs, then correlate and select checkpoints.

use super::svg;
use super::{correlation_matrix, select_checkpoint, select_min, CorrelationMatrix, ScoreSeries, StatsError};
use crate::expert::{collect_dataset, CollectConfig, Dataset, DatasetError, ExpertConfig, ExpertDriver};
use crate::metrics::{evaluate_log, table_header, Aggregate, EvaluationReport, MetricsError, Penalties, RouteResult};
use crate::policy::{self, train::train_with, PolicyConfig, PolicyDriver, PolicyError, TrainConfig};
use crate::roadnet::{build_town, RoadNetError, RoadNetwork, TownSpec};
use crate::routegen::{generate_routes, ManeuverDistribution, Route, RouteGenError, RouteType, DEFAULT_MAX_TRIES};
use crate::simcore::{run_episode, Driver, EpisodeLog, Mode, SimConfig, TerminalCause, ZeroDriver};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    RoadNet(#[from] RoadNetError),
    #[error(transparent)]
    RouteGen(#[from] RouteGenError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn cfg_err(path: &str, msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config { path: path.to_string(), msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TownsConfig {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: u64,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_block_size")]
    pub block_size: [f64; 2],
}

fn default_blocks() -> usize {
    3
}
fn default_block_size() -> [f64; 2] {
    [60.0, 90.0]
}

impl TownsConfig {
    pub fn spec(&self, seed: u64) -> TownSpec {
        TownSpec::new(seed, self.blocks, self.block_size[0], self.block_size[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetsConfig {
    /// Frame targets of the training sets, one training run each.
    pub tiers: Vec<usize>,
    #[serde(default = "default_tiny_per_town")]
    pub tiny_routes_per_town: usize,
    #[serde(default = "default_short_per_town")]
    pub short_routes_per_town: usize,
    /// Expert frames recorded on the validation routes for the offline loss.
    #[serde(default = "default_val_frames")]
    pub val_frames: usize,
}

fn default_tiny_per_town() -> usize {
    40
}
fn default_short_per_town() -> usize {
    20
}
fn default_val_frames() -> usize {
    2000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValSetSpec {
    #[serde(rename = "type")]
    pub route_type: RouteType,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestConfig {
    #[serde(rename = "type", default = "default_test_type")]
    pub route_type: RouteType,
    pub count: usize,
    #[serde(default = "default_min_length")]
    pub min_length: f64,
    #[serde(default = "default_max_length")]
    pub max_length: f64,
}

fn default_test_type() -> RouteType {
    RouteType::Short
}
fn default_min_length() -> f64 {
    200.0
}
fn default_max_length() -> f64 {
    1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsConfig {
    pub routes: u64,
    pub collect: u64,
    /// One training run per tier and seed.
    pub train: Vec<u64>,
    /// Scenario seeds of the repeated test runs.
    pub test: Vec<u64>,
    /// Scenario seed of the validation runs.
    pub val: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub eval_every: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Validation set whose best checkpoint feeds the main results table.
    pub select_with: String,
    pub policy: PolicyConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            eval_every: 5,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            select_with: String::new(),
            policy: PolicyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub towns: TownsConfig,
    pub datasets: DatasetsConfig,
    pub valsets: BTreeMap<String, ValSetSpec>,
    pub test: TestConfig,
    pub seeds: SeedsConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub penalties: Penalties,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub expert: ExpertConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let cfg: Self = serde_json::from_str(&text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
            cfg.validate()?;
            Ok(cfg)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let t = &self.towns;
        if t.train.is_empty() {
            return Err(cfg_err("towns.train", "needs at least one training town"));
        }
        if t.val.is_empty() {
            return Err(cfg_err("towns.val", "needs at least one validation town"));
        }
        if t.train.contains(&t.test) {
            return Err(cfg_err("towns.test", format!("test town {} is also a training town", t.test)));
        }
        if t.val.contains(&t.test) {
            return Err(cfg_err("towns.test", format!("test town {} is also a validation town", t.test)));
        }
        if !(t.block_size[0] > 0.0 && t.block_size[0] <= t.block_size[1]) {
            return Err(cfg_err("towns.block_size", "expects 0 < min <= max"));
        }
        if self.datasets.tiers.is_empty() {
            return Err(cfg_err("datasets.tiers", "needs at least one tier"));
        }
        if let Some(i) = self.datasets.tiers.iter().position(|&n| n == 0) {
            return Err(cfg_err(&format!("datasets.tiers[{i}]"), "frame target must be positive"));
        }
        if self.datasets.tiny_routes_per_town + self.datasets.short_routes_per_town == 0 {
            return Err(cfg_err("datasets.tiny_routes_per_town", "training route pool would be empty"));
        }
        if self.datasets.val_frames == 0 {
            return Err(cfg_err("datasets.val_frames", "must be positive"));
        }
        if self.valsets.is_empty() {
            return Err(cfg_err("valsets", "needs at least one validation route set"));
        }
        for (name, v) in &self.valsets {
            if name == "test" || name == "loss" {
                return Err(cfg_err(&format!("valsets.{name}"), "name is reserved"));
            }
            if v.count == 0 {
                return Err(cfg_err(&format!("valsets.{name}.count"), "must be positive"));
            }
        }
        if self.test.count == 0 {
            return Err(cfg_err("test.count", "must be positive"));
        }
        if !(self.test.min_length <= self.test.max_length) {
            return Err(cfg_err("test.min_length", "must not exceed test.max_length"));
        }
        if self.seeds.train.is_empty() {
            return Err(cfg_err("seeds.train", "needs at least one training seed"));
        }
        if self.seeds.test.is_empty() {
            return Err(cfg_err("seeds.test", "needs at least one test seed"));
        }
        let tr = &self.training;
        if tr.epochs == 0 {
            return Err(cfg_err("training.epochs", "must be positive"));
        }
        if tr.eval_every == 0 {
            return Err(cfg_err("training.eval_every", "must be positive"));
        }
        if !self.valsets.contains_key(&tr.select_with) {
            return Err(cfg_err("training.select_with", format!("`{}` is not a configured validation set", tr.select_with)));
        }
        self.train_config(0).validate().map_err(|e| cfg_err("training", e.to_string()))?;
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let tr = &self.training;
        TrainConfig {
            epochs: tr.epochs,
            learning_rate: tr.learning_rate,
            weight_decay: tr.weight_decay,
            batch_size: tr.batch_size,
            seed,
            policy: tr.policy.clone(),
            ..TrainConfig::default()
        }
    }

    /// Checkpoints that get validated and tested: every `eval_every`-th epoch
    /// and the final one.
    pub fn eval_epochs(&self) -> Vec<usize> {
        let tr = &self.training;
        let mut e: Vec<usize> = (1..=tr.epochs).filter(|e| e % tr.eval_every == 0).collect();
        if e.last() != Some(&tr.epochs) {
            e.push(tr.epochs);
        }
        e
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }

    /// Validation sets ordered tiny, short, long, larger sets first.
    pub fn valset_order(&self) -> Vec<String> {
        let mut names: Vec<(&String, &ValSetSpec)> = self.valsets.iter().collect();
        names.sort_by(|a, b| (a.1.route_type, std::cmp::Reverse(a.1.count), a.0).cmp(&(b.1.route_type, std::cmp::Reverse(b.1.count), b.0)));
        names.into_iter().map(|(n, _)| n.clone()).collect()
    }
}

/// SplitMix64 of the pair, for deriving independent sub-seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn name_tag(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// A route set with the town it lives on.
#[derive(Debug, Clone)]
pub struct RouteSet {
    pub name: String,
    pub routes: Vec<(usize, Route)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSetInfo {
    pub name: String,
    pub route_type: RouteType,
    pub routes: usize,
    pub towns: Vec<u64>,
    pub total_km: f64,
    pub junction_crossings: usize,
}

impl RouteSet {
    fn info(&self, nets: &[RoadNetwork], route_type: RouteType) -> RouteSetInfo {
        let mut towns: Vec<u64> = self.routes.iter().map(|(k, _)| nets[*k].town_seed).collect();
        towns.sort_unstable();
        towns.dedup();
        RouteSetInfo {
            name: self.name.clone(),
            route_type,
            routes: self.routes.len(),
            towns,
            total_km: self.routes.iter().map(|(_, r)| r.length()).sum::<f64>() / 1000.0,
            junction_crossings: self.routes.iter().map(|(_, r)| r.n_intersections).sum(),
        }
    }
}

/// Evaluates every route under every seed. Episode `i` of seed `s` uses the
/// scenario seed `mix(s, i)`; results carry `s` as their seed. With `jobs > 1`
/// episodes run on scoped threads; the output order is fixed regardless.
pub fn evaluate_route_set(
    nets: &[RoadNetwork],
    set: &RouteSet,
    make_driver: &(dyn Fn() -> Box<dyn Driver> + Sync),
    seeds: &[u64],
    sim: &SimConfig,
    penalties: &Penalties,
    jobs: usize,
) -> Vec<RouteResult> {
    evaluate_route_set_logged(nets, set, make_driver, seeds, sim, penalties, jobs, &|_, _, _| {})
}

/// As [`evaluate_route_set`], handing every finished episode to `sink`
/// together with its seed and route index.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_route_set_logged(
    nets: &[RoadNetwork],
    set: &RouteSet,
    make_driver: &(dyn Fn() -> Box<dyn Driver> + Sync),
    seeds: &[u64],
    sim: &SimConfig,
    penalties: &Penalties,
    jobs: usize,
    sink: &(dyn Fn(u64, usize, &EpisodeLog) + Sync),
) -> Vec<RouteResult> {
    let tasks: Vec<(u64, usize)> = seeds.iter().flat_map(|&s| (0..set.routes.len()).map(move |i| (s, i))).collect();
    let run = |&(s, i): &(u64, usize)| {
        let (k, route) = &set.routes[i];
        let mut driver = make_driver();
        let (log, _) = run_episode(&nets[*k], route, driver.as_mut(), mix(s, i as u64), Mode::Evaluate, sim);
        sink(s, i, &log);
        let mut r = evaluate_log(&log, penalties);
        r.seed = s;
        r
    };
    let jobs = jobs.clamp(1, tasks.len().max(1));
    if jobs == 1 {
        return tasks.iter().map(run).collect();
    }
    let mut out: Vec<Option<RouteResult>> = vec![None; tasks.len()];
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let tasks = &tasks;
                let run = &run;
                scope.spawn(move || (j..tasks.len()).step_by(jobs).map(|t| (t, run(&tasks[t]))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (t, r) in h.join().expect("evaluation thread panicked") {
                out[t] = Some(r);
            }
        }
    });
    out.into_iter().map(|r| r.expect("every task evaluated")).collect()
}

fn mean_ds(results: &[RouteResult]) -> f64 {
    results.iter().map(|r| r.ds).sum::<f64>() / results.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub method: String,
    pub epoch: usize,
    pub test: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTest {
    pub epoch: usize,
    pub aggregate: Aggregate,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub frames: usize,
    pub train_seed: u64,
    pub maneuvers: Option<ManeuverDistribution>,
    pub train_losses: Vec<f64>,
    /// Validation sets in catalogue order, then `test` and `loss`.
    pub series: Vec<ScoreSeries>,
    pub tests: Vec<EpochTest>,
    pub correlation: CorrelationMatrix,
    /// `naive`, `validation loss`, then one row per validation set.
    pub selections: Vec<SelectionRow>,
}

impl RunResult {
    pub fn series(&self, label: &str) -> Option<&ScoreSeries> {
        self.series.iter().find(|s| s.label == label)
    }

    pub fn selection(&self, method: &str) -> Option<&SelectionRow> {
        self.selections.iter().find(|s| s.method == method)
    }

    pub fn test_at(&self, epoch: usize) -> Option<&Aggregate> {
        self.tests.iter().find(|t| t.epoch == epoch).map(|t| &t.aggregate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub eval_epochs: Vec<usize>,
    pub valsets: Vec<RouteSetInfo>,
    pub test_set: RouteSetInfo,
    pub val_dataset_frames: usize,
    pub select_with: String,
    pub runs: Vec<RunResult>,
    pub expert: EvaluationReport,
    pub zero: EvaluationReport,
}

impl ExperimentSummary {
    /// Main results: the selected checkpoint of every run, the expert and the
    /// zero-action baseline, each over the test seeds.
    pub fn results_table(&self) -> String {
        let mut out = format!("| {} |\n", table_header());
        let cols = table_header().matches('|').count() + 1;
        out.push_str(&format!("|{}\n", "---|".repeat(cols)));
        for r in &self.runs {
            if let Some(sel) = r.selection(&self.select_with) {
                out.push_str(&format!("| {} |\n", sel.test.table_row(&format!("{} (epoch {})", r.name, sel.epoch))));
            }
        }
        out.push_str(&format!("| {} |\n", self.expert.aggregate.table_row("expert")));
        out.push_str(&format!("| {} |\n", self.zero.aggregate.table_row("zero action")));
        out
    }

    /// Test DS (%) of the checkpoint each method selects, per run.
    pub fn selection_table(&self) -> String {
        let mut out = String::from("| selection | ");
        out.push_str(&self.runs.iter().map(|r| r.name.clone()).collect::<Vec<_>>().join(" | "));
        out.push_str(" |\n|---|");
        out.push_str(&"---|".repeat(self.runs.len()));
        out.push('\n');
        let methods: Vec<String> = self.runs.first().map(|r| r.selections.iter().map(|s| s.method.clone()).collect()).unwrap_or_default();
        for m in methods {
            out.push_str(&format!("| {m} |"));
            for r in &self.runs {
                match r.selection(&m) {
                    Some(s) => out.push_str(&format!(" {} (e{}) |", s.test.ds.fmt_scaled(100.0), s.epoch)),
                    None => out.push_str(" n/a |"),
                }
            }
            out.push('\n');
        }
        out.push_str("| expert perf. |");
        for _ in &self.runs {
            out.push_str(&format!(" {} |", self.expert.aggregate.ds.fmt_scaled(100.0)));
        }
        out.push('\n');
        out
    }

    pub fn maneuver_table(&self) -> String {
        let mut out = String::from("| dataset | frames | follow lane | go straight | turn left | turn right |\n|---|---|---|---|---|---|\n");
        for r in &self.runs {
            match &r.maneuvers {
                Some(m) => {
                    let a = m.as_array();
                    out.push_str(&format!("| {} | {} | {:.1} | {:.1} | {:.1} | {:.1} |\n", r.name, r.frames, a[0], a[1], a[2], a[3]));
                }
                None => out.push_str(&format!("| {} | {} | n/a | n/a | n/a | n/a |\n", r.name, r.frames)),
            }
        }
        out
    }

    pub fn routeset_table(&self) -> String {
        let mut out = String::from("| set | type | routes | towns | km | junction crossings |\n|---|---|---|---|---|---|\n");
        for s in self.valsets.iter().chain(std::iter::once(&self.test_set)) {
            let towns: Vec<String> = s.towns.iter().map(|t| t.to_string()).collect();
            out.push_str(&format!(
                "| {} | {} | {} | {} | {:.2} | {} |\n",
                s.name,
                s.route_type,
                s.routes,
                towns.join(" "),
                s.total_km,
                s.junction_crossings
            ));
        }
        out
    }
}

/// Every artifact of one experiment, keyed by relative path.
#[derive(Debug, Clone)]
pub struct ExperimentBundle {
    pub summary: ExperimentSummary,
    pub files: BTreeMap<String, Vec<u8>>,
}

impl ExperimentBundle {
    /// SHA-256 over all `(path, contents)` pairs in path order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (path, bytes) in &self.files {
            h.update((path.len() as u64).to_le_bytes());
            h.update(path.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        hex::encode(h.finalize())
    }

    pub fn write_to(&self, dir: &Path) -> std::io::Result<Vec<String>> {
        for (path, bytes) in &self.files {
            let p = dir.join(path);
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(p, bytes)?;
        }
        Ok(self.files.keys().cloned().collect())
    }
}

fn build_towns(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<RoadNetwork>, ExperimentError> {
    seeds.iter().map(|&s| build_town(&cfg.towns.spec(s)).map_err(ExperimentError::from)).collect()
}

/// Splits `count` routes of one type as evenly as possible over `nets`.
fn spread_routes(
    nets: &[RoadNetwork],
    name: &str,
    route_type: RouteType,
    count: usize,
    seed: u64,
) -> Result<RouteSet, ExperimentError> {
    let n = nets.len();
    let mut routes = Vec::new();
    for (k, net) in nets.iter().enumerate() {
        let c = count / n + usize::from(k < count % n);
        if c == 0 {
            continue;
        }
        for r in generate_routes(net, route_type, c, mix(seed, net.town_seed), DEFAULT_MAX_TRIES)? {
            routes.push((k, r));
        }
    }
    Ok(RouteSet { name: name.to_string(), routes })
}

fn test_routes(cfg: &ExperimentConfig, net: &RoadNetwork) -> Result<RouteSet, ExperimentError> {
    let t = &cfg.test;
    let mut batch = t.count;
    for _ in 0..6 {
        batch *= 2;
        let pool = generate_routes(net, t.route_type, batch, mix(cfg.seeds.routes, net.town_seed), DEFAULT_MAX_TRIES)?;
        let ok: Vec<(usize, Route)> = pool
            .into_iter()
            .filter(|r| r.length() >= t.min_length && r.length() <= t.max_length)
            .take(t.count)
            .map(|r| (0, r))
            .collect();
        if ok.len() == t.count {
            return Ok(RouteSet { name: "test".into(), routes: ok });
        }
    }
    Err(cfg_err("test", format!("could not find {} routes within the length bounds", t.count)))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn tier_name(frames: usize) -> String {
    if frames % 1000 == 0 {
        format!("{}k", frames / 1000)
    } else {
        frames.to_string()
    }
}

/// Runs the whole experiment. `log` receives one line per stage.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize, log: &mut dyn FnMut(&str)) -> Result<ExperimentBundle, ExperimentError> {
    cfg.validate()?;
    let train_nets = build_towns(cfg, &cfg.towns.train)?;
    let val_nets = build_towns(cfg, &cfg.towns.val)?;
    let test_nets = build_towns(cfg, &[cfg.towns.test])?;
    log(&format!("built {} training, {} validation and 1 test town", train_nets.len(), val_nets.len()));

    // Training route pool.
    let mut pool: Vec<Route> = Vec::new();
    for net in &train_nets {
        let d = &cfg.datasets;
        if d.tiny_routes_per_town > 0 {
            pool.extend(generate_routes(net, RouteType::Tiny, d.tiny_routes_per_town, mix(cfg.seeds.routes, net.town_seed), DEFAULT_MAX_TRIES)?);
        }
        if d.short_routes_per_town > 0 {
            pool.extend(generate_routes(net, RouteType::Short, d.short_routes_per_town, mix(cfg.seeds.routes ^ 1, net.town_seed), DEFAULT_MAX_TRIES)?);
        }
    }

    // Validation route sets and the offline-loss dataset recorded on them.
    let order = cfg.valset_order();
    let mut valsets = Vec::new();
    for name in &order {
        let spec = cfg.valsets[name];
        valsets.push(spread_routes(&val_nets, name, spec.route_type, spec.count, mix(cfg.seeds.routes, name_tag(name)))?);
    }
    let val_pool: Vec<Route> = valsets.iter().flat_map(|s| s.routes.iter().map(|(_, r)| r.clone())).collect();
    let val_data = collect_dataset(
        &val_nets,
        &val_pool,
        &CollectConfig { frames_target: cfg.datasets.val_frames, seed: mix(cfg.seeds.collect, 0xfa1), no_reuse: false, expert: cfg.expert },
        &cfg.sim,
    )?;
    let test_set = test_routes(cfg, &test_nets[0])?;
    log(&format!(
        "{} training routes, {} validation sets, {} validation frames, {} test routes",
        pool.len(),
        valsets.len(),
        val_data.len(),
        test_set.routes.len()
    ));

    let jobs = jobs.max(1);
    let expert_cfg = cfg.expert;
    let expert_results = evaluate_route_set(
        &test_nets,
        &test_set,
        &move || Box::new(ExpertDriver { cfg: expert_cfg }),
        &cfg.seeds.test,
        &cfg.sim,
        &cfg.penalties,
        jobs,
    );
    let expert = EvaluationReport::build("expert", &cfg.hash(), expert_results)?;
    let zero_results =
        evaluate_route_set(&test_nets, &test_set, &|| Box::new(ZeroDriver), &cfg.seeds.test, &cfg.sim, &cfg.penalties, jobs);
    let zero = EvaluationReport::build("zero action", &cfg.hash(), zero_results)?;
    log(&format!("expert test DS {}, zero-action test DS {}", expert.aggregate.ds.fmt_scaled(100.0), zero.aggregate.ds.fmt_scaled(100.0)));

    let eval_epochs = cfg.eval_epochs();
    let mut runs = Vec::new();
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for (ti, &frames) in cfg.datasets.tiers.iter().enumerate() {
        let data = collect_dataset(
            &train_nets,
            &pool,
            &CollectConfig { frames_target: frames, seed: mix(cfg.seeds.collect, ti as u64), no_reuse: false, expert: cfg.expert },
            &cfg.sim,
        )?;
        log(&format!("tier {}: {} frames", tier_name(frames), data.len()));
        for &seed in &cfg.seeds.train {
            let name = if cfg.seeds.train.len() == 1 { tier_name(frames) } else { format!("{}_s{seed}", tier_name(frames)) };
            let run = train_and_evaluate(cfg, &name, &data, seed, &val_nets, &valsets, &val_data, &test_nets, &test_set, jobs, log)?;
            add_run_files(&mut files, &run);
            runs.push(run);
        }
    }

    let summary = ExperimentSummary {
        config_hash: cfg.hash(),
        eval_epochs,
        valsets: valsets.iter().map(|s| s.info(&val_nets, cfg.valsets[&s.name].route_type)).collect(),
        test_set: test_set.info(&test_nets, cfg.test.route_type),
        val_dataset_frames: val_data.len(),
        select_with: cfg.training.select_with.clone(),
        runs,
        expert,
        zero,
    };
    files.insert("config.json".into(), serde_json::to_vec_pretty(cfg).expect("config serialises"));
    files.insert("summary.json".into(), serde_json::to_vec_pretty(&summary).expect("summary serialises"));
    files.insert("tables/results.md".into(), summary.results_table().into_bytes());
    files.insert("tables/selection.md".into(), summary.selection_table().into_bytes());
    files.insert("tables/maneuvers.md".into(), summary.maneuver_table().into_bytes());
    files.insert("tables/routesets.md".into(), summary.routeset_table().into_bytes());
    files.insert("baselines/expert.csv".into(), summary.expert.to_csv().into_bytes());
    files.insert("baselines/zero.csv".into(), summary.zero.to_csv().into_bytes());
    Ok(ExperimentBundle { summary, files })
}

#[allow(clippy::too_many_arguments)]
fn train_and_evaluate(
    cfg: &ExperimentConfig,
    name: &str,
    data: &Dataset,
    seed: u64,
    val_nets: &[RoadNetwork],
    valsets: &[RouteSet],
    val_data: &Dataset,
    test_nets: &[RoadNetwork],
    test_set: &RouteSet,
    jobs: usize,
    log: &mut dyn FnMut(&str),
) -> Result<RunResult, ExperimentError> {
    let eval_epochs = cfg.eval_epochs();
    let mut val_values: Vec<Vec<f64>> = vec![Vec::new(); valsets.len()];
    let mut test_values = Vec::new();
    let mut loss_values = Vec::new();
    let mut tests = Vec::new();
    let mut train_losses = Vec::new();
    let mut failure: Option<ExperimentError> = None;
    let t0 = std::time::Instant::now();
    train_with(&data.frames, &cfg.train_config(seed), None, |ck| {
        train_losses.push(ck.train_loss);
        if failure.is_some() || !eval_epochs.contains(&ck.epoch) {
            return;
        }
        let params = ck.params.clone();
        let make = move || Box::new(PolicyDriver::new(params.clone())) as Box<dyn Driver>;
        for (k, set) in valsets.iter().enumerate() {
            let rs = evaluate_route_set(val_nets, set, &make, &[cfg.seeds.val], &cfg.sim, &cfg.penalties, jobs);
            val_values[k].push(mean_ds(&rs));
        }
        let rs = evaluate_route_set(test_nets, test_set, &make, &cfg.seeds.test, &cfg.sim, &cfg.penalties, jobs);
        match EvaluationReport::build(name, "", rs) {
            Ok(rep) => {
                test_values.push(rep.aggregate.ds.mean);
                tests.push(EpochTest { epoch: ck.epoch, aggregate: rep.aggregate, checkpoint_sha256: sha256_hex(&ck.to_bytes()) });
            }
            Err(e) => failure = Some(e.into()),
        }
        match policy::offline_val_loss(&ck.params, &val_data.frames) {
            Ok(l) => loss_values.push(l),
            Err(e) => failure = Some(e.into()),
        }
        log(&format!(
            "{name} epoch {}: train loss {:.3}, val loss {:.3}, test DS {:.3} ({:.0}s)",
            ck.epoch,
            ck.train_loss,
            loss_values.last().copied().unwrap_or(f64::NAN),
            test_values.last().copied().unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        ));
    })?;
    if let Some(e) = failure {
        return Err(e);
    }

    let mut series = Vec::new();
    for (set, values) in valsets.iter().zip(val_values) {
        series.push(ScoreSeries::new(&set.name, eval_epochs.clone(), values)?);
    }
    let test_series = ScoreSeries::new("test", eval_epochs.clone(), test_values)?;
    let loss_series = ScoreSeries::new("loss", eval_epochs.clone(), loss_values)?;
    series.push(test_series);
    series.push(loss_series.clone());
    let correlation = correlation_matrix(&series)?;

    let row = |method: &str, epoch: usize| -> SelectionRow {
        let agg = tests.iter().find(|t| t.epoch == epoch).expect("epoch was evaluated").aggregate.clone();
        SelectionRow { method: method.to_string(), epoch, test: agg }
    };
    let mut selections = vec![row("naive", *eval_epochs.last().expect("non-empty")), row("validation loss", select_min(&loss_series)?)];
    for s in &series[..valsets.len()] {
        selections.push(row(&s.label, select_checkpoint(s)?));
    }
    Ok(RunResult {
        name: name.to_string(),
        frames: data.len(),
        train_seed: seed,
        maneuvers: data.maneuver_distribution(),
        train_losses,
        series,
        tests,
        correlation,
        selections,
    })
}

fn add_run_files(files: &mut BTreeMap<String, Vec<u8>>, run: &RunResult) {
    let dir = format!("runs/{}", run.name);
    let mut csv = String::from("epoch");
    for s in &run.series {
        csv.push(',');
        csv.push_str(&s.label);
    }
    csv.push('\n');
    for (i, e) in run.series[0].epochs.iter().enumerate() {
        let _ = write!(csv, "{e}");
        for s in &run.series {
            let _ = write!(csv, ",{:.6}", s.values[i]);
        }
        csv.push('\n');
    }
    files.insert(format!("{dir}/series.csv"), csv.into_bytes());
    files.insert(format!("{dir}/correlation.csv"), run.correlation.to_csv().into_bytes());
    let scores: Vec<ScoreSeries> = run.series.iter().filter(|s| s.label != "loss").cloned().collect();
    files.insert(format!("{dir}/scores.svg"), svg::line_chart(&format!("DS per epoch, {}", run.name), &scores).into_bytes());
    files.insert(format!("{dir}/correlation.svg"), svg::heatmap(&format!("correlations, {}", run.name), &run.correlation).into_bytes());
    files.insert(
        format!("{dir}/train_loss.svg"),
        svg::line_chart(
            &format!("training loss, {}", run.name),
            &[ScoreSeries {
                label: "train".into(),
                epochs: (1..=run.train_losses.len()).collect(),
                values: run.train_losses.clone(),
            }],
        )
        .into_bytes(),
    );
}

/// Every test episode of a policy that ends with the zero-action cause.
pub fn all_blocked(report: &EvaluationReport) -> bool {
    report.results.iter().all(|r| r.terminal == TerminalCause::AgentBlocked)
}
