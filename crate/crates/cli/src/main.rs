//! `drivebench` command line: towns, routes, data collection, training,
//! closed-loop evaluation, analysis and the full experiment report.

mod manifest;

use clap::{Args, Parser, Subcommand};
use drivebench::analysis::experiment::{evaluate_route_set_logged, RouteSet};
use drivebench::analysis::{
    correlation_matrix, run_experiment, select_checkpoint, svg, ExperimentConfig, ScoreSeries, StatsError,
};
use drivebench::expert::{collect_dataset, CollectConfig, Dataset, ExpertConfig, ExpertDriver};
use drivebench::metrics::{table_header, EvaluationReport, Penalties};
use drivebench::policy::{train::train_with, Checkpoint, PolicyDriver, TrainConfig};
use drivebench::roadnet::{build_town, RoadNetwork, TownSpec};
use drivebench::routegen::{generate_routes, maneuver_distribution, routes_from_json, routes_to_json, Route, RouteType};
use drivebench::simcore::{Driver, SimConfig, ZeroDriver};
use manifest::RunManifest;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "drivebench", version, about = "Seeded closed-loop driving benchmark")]
struct Cli {
    /// TOML settings ([sim], [expert], [training], [penalties]); the full
    /// experiment config for `report`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output root; every command writes one run directory below it.
    #[arg(long, global = true, env = "DRIVEBENCH_OUT", default_value = "runs")]
    out: PathBuf,
    /// Run directory name (defaults to one derived from the command).
    #[arg(long, global = true)]
    name: Option<String>,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural town.
    GenTown(GenTownArgs),
    /// Generate a deduplicated route set on a town.
    GenRoutes(GenRoutesArgs),
    /// Roll out the expert and record a training dataset.
    Collect(CollectArgs),
    /// Train the policy, saving periodic checkpoints.
    Train(TrainArgs),
    /// Closed-loop evaluation of checkpoints, the expert or the zero-action baseline.
    Evaluate(EvaluateArgs),
    /// Correlate score series and select checkpoints.
    Analyze(AnalyzeArgs),
    /// Run the full experiment described by --config.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenTownArgs {
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    #[arg(long, default_value_t = 60.0)]
    block_min: f64,
    #[arg(long, default_value_t = 90.0)]
    block_max: f64,
}

#[derive(Args)]
struct GenRoutesArgs {
    #[arg(long)]
    town: PathBuf,
    #[arg(long = "type", alias = "route-type")]
    route_type: String,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = drivebench::routegen::DEFAULT_MAX_TRIES)]
    max_tries: usize,
}

#[derive(Args)]
struct CollectArgs {
    /// Town files; repeat for several towns.
    #[arg(long = "town", required = true)]
    towns: Vec<PathBuf>,
    /// Route files on those towns.
    #[arg(long = "routes", required = true)]
    routes: Vec<PathBuf>,
    #[arg(long)]
    frames: usize,
    /// Fail instead of reusing routes with fresh scenario seeds.
    #[arg(long)]
    no_reuse: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 5)]
    save_every: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    town: PathBuf,
    #[arg(long)]
    routes: PathBuf,
    /// Checkpoint files; repeat to evaluate several.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// A `train` run directory: evaluates every saved checkpoint.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    expert: bool,
    #[arg(long)]
    zero: bool,
    /// Number of repeated runs; seeds are --seed, --seed + 1, ...
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Series label (defaults to the route file stem).
    #[arg(long)]
    label: Option<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Evaluation run directories holding `series.json`.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Series used as the test reference in the selection table.
    #[arg(long, default_value = "test")]
    test: String,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

enum CliError {
    /// Bad flags, bad config or missing inputs: exit 2.
    Usage(String),
    /// Failure while running: exit 1.
    Runtime(String),
}

type Res<T> = Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Optional per-command settings; unknown sections are ignored so an
/// experiment config works here too.
#[derive(Debug, Default, Deserialize)]
struct Settings {
    #[serde(default)]
    sim: SimConfig,
    #[serde(default)]
    expert: ExpertConfig,
    #[serde(default)]
    penalties: Penalties,
    #[serde(default)]
    training: Option<TrainingSettings>,
}

#[derive(Debug, Deserialize)]
struct TrainingSettings {
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
    batch_size: Option<usize>,
}

struct Ctx {
    cli_seed: u64,
    config: Option<PathBuf>,
    settings: Settings,
    out: PathBuf,
    name: Option<String>,
    force: bool,
}

impl Ctx {
    fn run_dir(&self, default_name: String) -> Res<PathBuf> {
        let dir = self.out.join(self.name.clone().unwrap_or(default_name));
        if dir.exists() && std::fs::read_dir(&dir).map_err(runtime)?.next().is_some() {
            if !self.force {
                return Err(usage(format!("{} exists; pass --force to replace it", dir.display())));
            }
            std::fs::remove_dir_all(&dir).map_err(runtime)?;
        }
        std::fs::create_dir_all(&dir).map_err(runtime)?;
        Ok(dir)
    }

    fn manifest(&self, command: &str) -> Res<RunManifest> {
        let mut m = RunManifest::start(command);
        m.seeds.insert("seed".into(), self.cli_seed);
        if let Some(c) = &self.config {
            m.config_sha256 = Some(manifest::sha256_file(c).map_err(usage)?);
        }
        Ok(m)
    }
}

fn read_input(path: &Path) -> Res<String> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_town(path: &Path) -> Res<RoadNetwork> {
    RoadNetwork::from_json(&read_input(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_routes(path: &Path, net: &RoadNetwork) -> Res<Vec<Route>> {
    routes_from_json(&read_input(path)?, net).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let settings = match &cli.config {
        Some(p) if !matches!(cli.cmd, Cmd::Report(_)) => {
            match read_input(p).and_then(|t| toml::from_str::<Settings>(&t).map_err(|e| usage(format!("{}: {e}", p.display())))) {
                Ok(s) => s,
                Err(e) => return finish(Err(e)),
            }
        }
        _ => Settings::default(),
    };
    let ctx = Ctx { cli_seed: cli.seed, config: cli.config.clone(), settings, out: cli.out.clone(), name: cli.name.clone(), force: cli.force };
    let res = match cli.cmd {
        Cmd::GenTown(a) => gen_town(&ctx, a),
        Cmd::GenRoutes(a) => gen_routes(&ctx, a),
        Cmd::Collect(a) => collect(&ctx, a),
        Cmd::Train(a) => train(&ctx, a),
        Cmd::Evaluate(a) => evaluate(&ctx, a),
        Cmd::Analyze(a) => analyze(&ctx, a),
        Cmd::Report(a) => report(&ctx, a),
    };
    finish(res)
}

fn finish(res: Res<()>) -> ExitCode {
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn gen_town(ctx: &Ctx, a: GenTownArgs) -> Res<()> {
    let spec = TownSpec::new(ctx.cli_seed, a.blocks, a.block_min, a.block_max);
    let net = build_town(&spec).map_err(usage)?;
    let dir = ctx.run_dir(format!("town-{}", ctx.cli_seed))?;
    std::fs::write(dir.join("town.json"), net.to_json()).map_err(runtime)?;
    ctx.manifest("gen-town")?.finish(&dir).map_err(runtime)?;
    println!(
        "town {}: {} lanes, {} intersections -> {}",
        net.town_seed,
        net.lanes.len(),
        net.intersections.len(),
        dir.join("town.json").display()
    );
    Ok(())
}

fn gen_routes(ctx: &Ctx, a: GenRoutesArgs) -> Res<()> {
    let ty = RouteType::parse(&a.route_type).ok_or_else(|| usage(format!("unknown route type `{}`", a.route_type)))?;
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    if a.max_tries == 0 {
        return Err(usage("--max-tries must be positive"));
    }
    let net = load_town(&a.town)?;
    let routes = generate_routes(&net, ty, a.count, ctx.cli_seed, a.max_tries).map_err(runtime)?;
    let dir = ctx.run_dir(format!("routes-{}-{}-s{}", net.town_seed, ty, ctx.cli_seed))?;
    std::fs::write(dir.join("routes.json"), routes_to_json(&routes)).map_err(runtime)?;
    let mut m = ctx.manifest("gen-routes")?;
    m.input(&a.town).map_err(runtime)?;
    m.finish(&dir).map_err(runtime)?;
    let km: f64 = routes.iter().map(|r| r.length()).sum::<f64>() / 1000.0;
    let crossings: usize = routes.iter().map(|r| r.n_intersections).sum();
    println!("| type | routes | km | crossings | follow lane / go straight / turn left / turn right (%) |");
    println!("|---|---|---|---|---|");
    let dist = maneuver_distribution(&routes).map(|d| d.row()).unwrap_or_else(|_| "n/a".into());
    println!("| {ty} | {} | {km:.2} | {crossings} | {dist} |", routes.len());
    Ok(())
}

fn collect(ctx: &Ctx, a: CollectArgs) -> Res<()> {
    if a.frames == 0 {
        return Err(usage("--frames must be positive"));
    }
    let nets: Vec<RoadNetwork> = a.towns.iter().map(|p| load_town(p)).collect::<Res<_>>()?;
    let mut routes = Vec::new();
    for p in &a.routes {
        let text = read_input(p)?;
        let mut loaded = None;
        for net in &nets {
            if let Ok(r) = routes_from_json(&text, net) {
                loaded = Some(r);
                break;
            }
        }
        routes.extend(loaded.ok_or_else(|| usage(format!("{}: routes do not match any given town", p.display())))?);
    }
    let cfg = CollectConfig { frames_target: a.frames, seed: ctx.cli_seed, no_reuse: a.no_reuse, expert: ctx.settings.expert };
    let ds = collect_dataset(&nets, &routes, &cfg, &ctx.settings.sim).map_err(runtime)?;
    let dir = ctx.run_dir(format!("dataset-{}-s{}", a.frames, ctx.cli_seed))?;
    ds.save(&dir.join("dataset")).map_err(runtime)?;
    let mut m = ctx.manifest("collect")?;
    for p in a.towns.iter().chain(&a.routes) {
        m.input(p).map_err(runtime)?;
    }
    m.finish(&dir).map_err(runtime)?;
    let dist = ds.maneuver_distribution().map(|d| d.row()).unwrap_or_else(|| "n/a".into());
    println!("{} frames from {} episodes; maneuvers {dist}", ds.len(), ds.manifest.episodes.len());
    Ok(())
}

/// A `collect` run directory or the dataset directory itself.
fn load_dataset(path: &Path) -> Res<Dataset> {
    let dir = if path.join("dataset").join("manifest.json").exists() { path.join("dataset") } else { path.to_path_buf() };
    if !dir.join("manifest.json").exists() {
        return Err(usage(format!("{}: no dataset manifest", path.display())));
    }
    Dataset::load(&dir).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn train(ctx: &Ctx, a: TrainArgs) -> Res<()> {
    let data = load_dataset(&a.dataset)?;
    let mut tc = TrainConfig { seed: ctx.cli_seed, ..TrainConfig::default() };
    if let Some(t) = &ctx.settings.training {
        tc.epochs = t.epochs.unwrap_or(tc.epochs);
        tc.learning_rate = t.learning_rate.unwrap_or(tc.learning_rate);
        tc.weight_decay = t.weight_decay.unwrap_or(tc.weight_decay);
        tc.batch_size = t.batch_size.unwrap_or(tc.batch_size);
    }
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    tc.validate().map_err(usage)?;
    if a.save_every == 0 {
        return Err(usage("--save-every must be positive"));
    }
    let stem = a.dataset.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    let dir = ctx.run_dir(format!("train-{stem}-s{}", ctx.cli_seed))?;
    let ck_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(runtime)?;
    let mut losses = Vec::new();
    let mut io_err = None;
    let epochs = tc.epochs;
    train_with(&data.frames, &tc, None, |c| {
        losses.push(c.train_loss);
        println!("epoch {:>3}  loss {:.4}", c.epoch, c.train_loss);
        if c.epoch % a.save_every == 0 || c.epoch == epochs {
            if let Err(e) = c.save(&ck_dir.join(format!("e{:03}.ckpt", c.epoch))) {
                io_err.get_or_insert(e);
            }
        }
    })
    .map_err(runtime)?;
    if let Some(e) = io_err {
        return Err(runtime(e));
    }
    std::fs::write(dir.join("losses.json"), serde_json::to_string_pretty(&losses).expect("losses serialise")).map_err(runtime)?;
    let mut m = ctx.manifest("train")?;
    m.input(&a.dataset).map_err(runtime)?;
    m.finish(&dir).map_err(runtime)?;
    Ok(())
}

fn checkpoint_epoch(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_string_lossy().into_owned();
    stem.strip_prefix('e')?.parse().ok()
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Res<()> {
    let modes = usize::from(a.expert) + usize::from(a.zero) + usize::from(!a.checkpoints.is_empty() || a.run.is_some());
    if modes != 1 {
        return Err(usage("choose exactly one of --checkpoint/--run, --expert, --zero"));
    }
    if a.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let net = load_town(&a.town)?;
    let routes = load_routes(&a.routes, &net)?;
    if routes.is_empty() {
        return Err(usage(format!("{}: no routes", a.routes.display())));
    }
    let mut ckpts: Vec<PathBuf> = a.checkpoints.clone();
    if let Some(run) = &a.run {
        let d = run.join("checkpoints");
        let listing = std::fs::read_dir(&d).map_err(|e| usage(format!("{}: {e}", d.display())))?;
        let mut found: Vec<PathBuf> = listing.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "ckpt")).collect();
        found.sort();
        ckpts.extend(found);
    }
    let loaded: Vec<(PathBuf, Checkpoint)> = ckpts
        .iter()
        .map(|p| Checkpoint::load(p).map(|c| (p.clone(), c)).map_err(|e| usage(format!("{}: {e}", p.display()))))
        .collect::<Res<_>>()?;

    let label = a.label.clone().unwrap_or_else(|| a.routes.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "routes".into()));
    let what = if a.expert { "expert".to_string() } else if a.zero { "zero".to_string() } else { format!("policy{}", loaded.len()) };
    let dir = ctx.run_dir(format!("eval-{label}-{what}-s{}", ctx.cli_seed))?;
    let logs = dir.join("logs");
    std::fs::create_dir_all(&logs).map_err(runtime)?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|k| ctx.cli_seed + k).collect();
    let set = RouteSet { name: label.clone(), routes: routes.into_iter().map(|r| (0, r)).collect() };
    let nets = [net];
    let s = &ctx.settings;
    let write_err = std::sync::Mutex::new(None::<String>);
    let run_set = |tag: &str, make: &(dyn Fn() -> Box<dyn Driver> + Sync)| {
        let sink = |seed: u64, i: usize, log: &drivebench::simcore::EpisodeLog| {
            let p = logs.join(format!("{tag}-s{seed}-r{i:03}.ndjson"));
            if let Err(e) = std::fs::write(&p, log.to_ndjson()) {
                write_err.lock().expect("lock").get_or_insert(e.to_string());
            }
        };
        evaluate_route_set_logged(&nets, &set, make, &seeds, &s.sim, &s.penalties, a.jobs, &sink)
    };

    let header = table_header();
    println!("| {header} |\n|{}", "---|".repeat(header.split(" | ").count()));
    let mut reports = Vec::new();
    if loaded.is_empty() {
        let expert_cfg = s.expert;
        let results = if a.expert {
            run_set("expert", &move || Box::new(ExpertDriver { cfg: expert_cfg }))
        } else {
            run_set("zero", &|| Box::new(ZeroDriver))
        };
        let rep = EvaluationReport::build(&what, "", results).map_err(runtime)?;
        println!("| {} |", rep.aggregate.table_row(&what));
        reports.push((what.clone(), None, rep));
    } else {
        for (path, ck) in &loaded {
            let params = ck.params.clone();
            let tag = format!("e{:03}", ck.epoch);
            let results = run_set(&tag, &move || Box::new(PolicyDriver::new(params.clone())));
            let rep = EvaluationReport::build(&tag, "", results).map_err(runtime)?;
            println!("| {} |", rep.aggregate.table_row(&format!("{} ({})", tag, path.display())));
            reports.push((tag, Some(checkpoint_epoch(path).unwrap_or(ck.epoch)), rep));
        }
    }
    if let Some(e) = write_err.into_inner().expect("lock") {
        return Err(runtime(e));
    }
    for (tag, _, rep) in &reports {
        std::fs::write(dir.join(format!("report-{tag}.json")), rep.to_json()).map_err(runtime)?;
        std::fs::write(dir.join(format!("report-{tag}.csv")), rep.to_csv()).map_err(runtime)?;
    }
    if reports.iter().all(|r| r.1.is_some()) {
        let mut pairs: Vec<(usize, f64)> = reports.iter().map(|r| (r.1.expect("checked"), r.2.aggregate.ds.mean)).collect();
        pairs.sort_by_key(|p| p.0);
        pairs.dedup_by_key(|p| p.0);
        let series = ScoreSeries::new(&label, pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect()).map_err(runtime)?;
        std::fs::write(dir.join("series.json"), serde_json::to_string_pretty(&series).expect("series serialises")).map_err(runtime)?;
    }
    let mut m = ctx.manifest("evaluate")?;
    for (k, sd) in seeds.iter().enumerate() {
        m.seeds.insert(format!("run{k}"), *sd);
    }
    m.input(&a.town).map_err(runtime)?;
    m.input(&a.routes).map_err(runtime)?;
    for p in &ckpts {
        m.input(p).map_err(runtime)?;
    }
    m.finish(&dir).map_err(runtime)?;
    Ok(())
}

fn analyze(ctx: &Ctx, a: AnalyzeArgs) -> Res<()> {
    let mut series: Vec<ScoreSeries> = Vec::new();
    for run in &a.runs {
        let p = run.join("series.json");
        let s: ScoreSeries = serde_json::from_str(&read_input(&p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        series.push(s);
    }
    let matrix = correlation_matrix(&series).map_err(|e| match e {
        StatsError::Misaligned(..) | StatsError::TooFewSeries { .. } => usage(format!("series cannot be aligned: {e}")),
        other => runtime(other),
    })?;
    let dir = ctx.run_dir(format!("analysis-s{}", ctx.cli_seed))?;
    std::fs::write(dir.join("correlation.csv"), matrix.to_csv()).map_err(runtime)?;
    std::fs::write(dir.join("correlation.json"), serde_json::to_string_pretty(&matrix).expect("matrix serialises")).map_err(runtime)?;
    std::fs::write(dir.join("correlation.svg"), svg::heatmap("correlations", &matrix)).map_err(runtime)?;
    std::fs::write(dir.join("scores.svg"), svg::line_chart("DS per epoch", &series)).map_err(runtime)?;
    let mut table = String::from("| selection | epoch | selected DS | test DS |\n|---|---|---|---|\n");
    let test = series.iter().find(|s| s.label == a.test);
    for s in &series {
        let e = select_checkpoint(s).map_err(runtime)?;
        let t = test.and_then(|t| t.value_at(e)).map(|v| format!("{:.1}", v * 100.0)).unwrap_or_else(|| "n/a".into());
        table.push_str(&format!("| {} | {e} | {:.1} | {t} |\n", s.label, s.value_at(e).unwrap_or(f64::NAN) * 100.0));
    }
    std::fs::write(dir.join("selection.md"), &table).map_err(runtime)?;
    print!("{table}");
    let mut m = ctx.manifest("analyze")?;
    for r in &a.runs {
        m.input(&r.join("series.json")).map_err(runtime)?;
    }
    m.finish(&dir).map_err(runtime)?;
    Ok(())
}

fn report(ctx: &Ctx, a: ReportArgs) -> Res<()> {
    let path = ctx.config.as_ref().ok_or_else(|| usage("report needs --config"))?;
    if !path.exists() {
        return Err(usage(format!("{}: not found", path.display())));
    }
    let cfg = ExperimentConfig::load(path).map_err(usage)?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "experiment".into());
    let dir = ctx.run_dir(format!("report-{stem}"))?;
    let t0 = std::time::Instant::now();
    let bundle = run_experiment(&cfg, a.jobs, &mut |line| eprintln!("[{:>6.0}s] {line}", t0.elapsed().as_secs_f64())).map_err(runtime)?;
    bundle.write_to(&dir).map_err(runtime)?;
    std::fs::write(dir.join("bundle.sha256"), format!("{}\n", bundle.digest())).map_err(runtime)?;
    let mut m = ctx.manifest("report")?;
    m.seeds.insert("routes".into(), cfg.seeds.routes);
    m.seeds.insert("collect".into(), cfg.seeds.collect);
    m.seeds.insert("val".into(), cfg.seeds.val);
    for (k, s) in cfg.seeds.train.iter().enumerate() {
        m.seeds.insert(format!("train{k}"), *s);
    }
    for (k, s) in cfg.seeds.test.iter().enumerate() {
        m.seeds.insert(format!("test{k}"), *s);
    }
    m.input(path).map_err(runtime)?;
    m.finish(&dir).map_err(runtime)?;
    print!("{}", bundle.summary.results_table());
    println!();
    print!("{}", bundle.summary.selection_table());
    println!("bundle digest {}", bundle.digest());
    Ok(())
}
