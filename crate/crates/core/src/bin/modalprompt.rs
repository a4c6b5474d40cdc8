use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use modalprompt::backbone::{pretrain_with_progress, BackboneModel, PretrainConfig};
use modalprompt::evaluation::{
    evaluate_task, matrix_to_csv, own_task_rate, selection_histogram, similarity_heatmap,
    AccuracyMatrix, EvalPolicy, EvalPrefix, MetricReport,
};
use modalprompt::experiments::{
    aggregate, bench_table, complexity_benchmark, speedup_at, BenchConfig, GridPlan, Lab,
    PretrainPlan, RunDir, SeedOutcome, SuitePlan, Variant,
};
use modalprompt::fixtures::{self, check_report, fixture_for_path};
use modalprompt::guidance::{GuidanceMode, ScoreRule};
use modalprompt::plot::{matrix_from_csv, save_heatmap, Scale};
use modalprompt::prompt_store::PromptStore;
use modalprompt::tasks::{generic_mixture, load_suite, save_suite, SuiteLayout, TaskDataset};
use modalprompt::training::RunConfig;

/// Overrides the default output root (`runs`).
const OUT_ENV: &str = "MODALPROMPT_OUT";
/// Overrides where pretrained backbones are cached (`<output root>/cache`).
const CACHE_ENV: &str = "MODALPROMPT_CACHE";

#[derive(Parser, Debug)]
#[command(
    name = "modalprompt",
    version,
    about = "Prompt-pool continual instruction tuning on a toy multimodal model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory. Defaults to `$MODALPROMPT_OUT/<command>-s<seed>` or `runs/<command>-s<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic task suite.
    GenSuite(GenSuiteArgs),
    /// Pretrain the backbone on the generic instruction mixture.
    Pretrain(PretrainArgs),
    /// Run one variant over a suite and write its accuracy matrix and reports.
    Train(TrainArgs),
    /// Evaluate a trained prompt store on a suite.
    Eval(EvalArgs),
    /// Compute Last / Avg / B / M from an accuracy matrix CSV.
    Metrics(MetricsArgs),
    /// Check matrices against the shipped reference values.
    Oracle(OracleArgs),
    /// Run every variant of a plan over its seeds.
    Grid(GridArgs),
    /// Time decoding with routed prefixes against concatenating all prompt sets.
    Bench(BenchArgs),
    /// Render the heatmap CSVs of a run directory as PNG files.
    Plot(PlotArgs),
}

#[derive(Args, Debug, Serialize)]
struct SuiteOpts {
    #[arg(long, default_value_t = 4)]
    tasks: usize,
    #[arg(long, default_value_t = 500)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_eval: usize,
    /// `separable` or `jointly-distinguishable`.
    #[arg(long, default_value = "separable", value_parser = parse_layout)]
    #[serde(serialize_with = "ser_layout")]
    layout: SuiteLayout,
}

impl SuiteOpts {
    fn plan(&self) -> SuitePlan {
        SuitePlan {
            tasks: self.tasks,
            n_train: self.n_train,
            n_eval: self.n_eval,
            layout: self.layout,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct GenSuiteArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    suite: SuiteOpts,
}

#[derive(Args, Debug, Serialize)]
struct PretrainOpts {
    #[arg(long, default_value_t = 8000)]
    samples: usize,
    #[arg(long, default_value_t = 6)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    pretrain_lr: f64,
}

impl PretrainOpts {
    fn plan(&self, seed: u64) -> PretrainPlan {
        PretrainPlan {
            samples: self.samples,
            epochs: self.epochs,
            learning_rate: self.pretrain_lr,
            seed,
            ..PretrainPlan::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pretrain: PretrainOpts,
}

#[derive(Args, Debug, Serialize)]
struct ModelSource {
    /// Pretrained backbone file. Without it the default recipe is pretrained once and cached.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "modalprompt", value_parser = parse_variant)]
    variant: Variant,
    /// Suite directory from `gen-suite`. Without it a suite is generated from --seed.
    #[arg(long)]
    suite: Option<PathBuf>,
    #[command(flatten)]
    suite_opts: SuiteOpts,
    #[command(flatten)]
    model: ModelSource,
    /// TOML file of run-config fields; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs_per_task: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Also write image-only and text-only similarity heatmaps.
    #[arg(long)]
    per_modality: bool,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Prompt store written by `train` (stores/<tag>.mps).
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    suite: PathBuf,
    #[command(flatten)]
    model: ModelSource,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// `selected`, `all` or `empty`.
    #[arg(long, default_value = "selected", value_parser = parse_prefix)]
    #[serde(serialize_with = "ser_debug")]
    prefix: EvalPrefix,
    /// `dual`, `image-only` or `text-only`.
    #[arg(long, default_value = "dual", value_parser = parse_mode)]
    #[serde(serialize_with = "ser_debug")]
    guidance: GuidanceMode,
}

#[derive(Args, Debug, Serialize)]
struct MetricsArgs {
    #[command(flatten)]
    common: Common,
    /// Accuracy matrix CSV (header of task names, lower-triangular rows).
    matrix: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    /// Matrix CSVs. A file named after a shipped fixture is checked against its values.
    matrices: Vec<PathBuf>,
    /// Check a shipped fixture by name (modalprompt-reference, moelora-reference, finetune-reference).
    #[arg(long)]
    fixture: Vec<String>,
    /// Check every shipped fixture.
    #[arg(long)]
    all: bool,
}

#[derive(Args, Debug, Serialize)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    /// Plan TOML. Without it the default grid runs.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    tasks: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    prompt_len: usize,
    #[arg(long, default_value_t = 40)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    /// Backbone to time. Without it a randomly initialized one is used.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    /// A run directory written by `train` or `grid`.
    run_dir: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: modalprompt::Error| e.to_string())
}

fn parse_layout(s: &str) -> Result<SuiteLayout, String> {
    match s {
        "separable" => Ok(SuiteLayout::Separable),
        "jointly-distinguishable" | "joint" => Ok(SuiteLayout::JointlyDistinguishable),
        _ => Err("expected `separable` or `jointly-distinguishable`".into()),
    }
}

fn parse_prefix(s: &str) -> Result<EvalPrefix, String> {
    match s {
        "selected" => Ok(EvalPrefix::Selected),
        "all" => Ok(EvalPrefix::All),
        "empty" => Ok(EvalPrefix::Empty),
        _ => Err("expected `selected`, `all` or `empty`".into()),
    }
}

fn parse_mode(s: &str) -> Result<GuidanceMode, String> {
    match s {
        "dual" => Ok(GuidanceMode::Dual),
        "image-only" | "image" => Ok(GuidanceMode::ImageOnly),
        "text-only" | "text" => Ok(GuidanceMode::TextOnly),
        _ => Err("expected `dual`, `image-only` or `text-only`".into()),
    }
}

fn ser_layout<S: serde::Serializer>(l: &SuiteLayout, s: S) -> Result<S::Ok, S::Error> {
    l.serialize(s)
}

fn ser_debug<S: serde::Serializer, T: std::fmt::Debug>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:?}"))
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    /// Bad invocation or missing inputs (exit 2).
    Usage(String),
    /// A check ran and did not pass (exit 1).
    Check(String),
    Run(modalprompt::Error),
}

impl From<modalprompt::Error> for Failure {
    fn from(e: modalprompt::Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{what} `{}` does not exist",
            path.display()
        )))
    }
}

fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| output_root().join("cache"))
}

fn run_dir(common: &Common, command: &str) -> CliResult<RunDir> {
    let root = common
        .out
        .clone()
        .unwrap_or_else(|| output_root().join(format!("{command}-s{}", common.seed)));
    Ok(RunDir::create(&root)?)
}

/// Writes the command, its resolved arguments and any resolved configs.
fn record_config(
    dir: &RunDir,
    command: &Command,
    extra: &BTreeMap<&str, toml::Value>,
) -> CliResult<()> {
    #[derive(Serialize)]
    struct Effective<'a> {
        version: &'a str,
        output_root: String,
        invocation: &'a Command,
        #[serde(flatten)]
        resolved: &'a BTreeMap<&'a str, toml::Value>,
    }
    let text = toml::to_string_pretty(&Effective {
        version: env!("CARGO_PKG_VERSION"),
        output_root: output_root().display().to_string(),
        invocation: command,
        resolved: extra,
    })
    .map_err(|e| Failure::Run(modalprompt::Error::Config(e.to_string())))?;
    dir.write("effective-config.toml", text)?;
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> toml::Value {
    toml::Value::try_from(v).unwrap_or_else(|e| toml::Value::String(format!("unserializable: {e}")))
}

fn load_lab(src: &ModelSource, d_g: usize) -> CliResult<Lab> {
    match &src.backbone {
        Some(p) => {
            require(p, "backbone")?;
            Ok(Lab::new(BackboneModel::load(p)?, d_g))
        }
        None => {
            let plan = PretrainPlan::default();
            info!(
                "using cached default backbone {} under {}",
                plan.key(),
                cache_dir().display()
            );
            Ok(Lab::load_or_pretrain(&plan, d_g, &cache_dir())?)
        }
    }
}

fn gen_suite(a: &GenSuiteArgs, cmd: &Command) -> CliResult<()> {
    let dir = run_dir(&a.common, "gen-suite")?;
    let plan = a.suite.plan();
    let suite = plan.generate(a.common.seed)?;
    save_suite(&suite, a.common.seed, plan.layout, &dir.root.join("suite"))?;
    record_config(&dir, cmd, &BTreeMap::from([("suite", to_value(&plan))]))?;
    for d in &suite {
        println!(
            "{:<28} train {:>5}  eval {:>5}",
            d.spec.name(),
            d.train.len(),
            d.eval.len()
        );
    }
    println!("suite written to {}", dir.root.join("suite").display());
    Ok(())
}

fn pretrain(a: &PretrainArgs, cmd: &Command) -> CliResult<()> {
    let dir = run_dir(&a.common, "pretrain")?;
    let plan = a.pretrain.plan(a.common.seed);
    record_config(&dir, cmd, &BTreeMap::from([("pretrain", to_value(&plan))]))?;
    let mixture = generic_mixture(plan.samples, plan.data_seed, plan.prompt_len);
    let cfg = PretrainConfig {
        backbone: plan.backbone,
        epochs: plan.epochs,
        batch_size: plan.batch_size,
        learning_rate: plan.learning_rate,
        seed: plan.seed,
    };
    let start = Instant::now();
    let mut log = String::new();
    let model = pretrain_with_progress(&mixture, &cfg, |epoch, loss| {
        let line = format!(
            "epoch {epoch} loss {loss:.5} elapsed {:.1}s",
            start.elapsed().as_secs_f64()
        );
        eprintln!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    dir.write("logs/pretrain.log", log)?;
    let path = dir.root.join("backbone.mpk");
    model.save(&path)?;
    println!("backbone written to {}", path.display());
    Ok(())
}

fn train(a: &TrainArgs, cmd: &Command) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            require(p, "config")?;
            let text = fs::read_to_string(p).map_err(|e| modalprompt::Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let suite: Vec<TaskDataset> = match &a.suite {
        Some(p) => {
            require(p, "suite")?;
            let loaded = load_suite(p)?;
            for w in &loaded.warnings {
                log::warn!("{w}");
            }
            loaded.suite
        }
        None => a.suite_opts.plan().generate(a.common.seed)?,
    };
    cfg.n_tasks = suite.len();
    cfg.seed = a.common.seed;
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(e) = a.epochs_per_task {
        cfg.epochs_per_task = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    let cfg = a.variant.configure(&cfg);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let dir = run_dir(&a.common, "train")?;
    record_config(&dir, cmd, &BTreeMap::from([("run", to_value(&cfg))]))?;
    let lab = load_lab(&a.model, cfg.d_g)?;
    let start = Instant::now();
    let outcome = modalprompt::experiments::run_seed(&lab, a.variant, &cfg, &suite)?;
    info!(
        "{} finished in {:.1}s",
        a.variant,
        start.elapsed().as_secs_f64()
    );
    let tag = format!("{}-s{}", a.variant, a.common.seed);
    dir.write_outcome(&tag, &outcome, &lab, &suite, &cfg)?;
    match &outcome {
        SeedOutcome::Continual {
            report,
            traces,
            store,
            ..
        } => {
            println!("{}", report.to_table());
            if !traces.is_empty() {
                let rates = own_task_rate(traces, suite.len());
                println!("own-task selection rate: {}", fmt_list(&rates, 100.0));
            }
            if a.per_modality && store.n_completed() == suite.len() {
                let names: Vec<String> = suite.iter().map(|d| d.spec.name()).collect();
                for (label, mode) in [
                    ("image", GuidanceMode::ImageOnly),
                    ("text", GuidanceMode::TextOnly),
                ] {
                    let sim = similarity_heatmap(
                        store,
                        &lab.encoders,
                        &suite,
                        &ScoreRule::from_mode(mode),
                    )?;
                    dir.write(
                        format!("matrices/{tag}.similarity-{label}.csv"),
                        matrix_to_csv(&sim, &names),
                    )?;
                }
            }
        }
        SeedOutcome::Bound { task_names, row } => {
            for (n, v) in task_names.iter().zip(row) {
                println!("{n:<28} {v:>7.2}");
            }
        }
    }
    render_plots(&dir)?;
    println!("artifacts in {}", dir.root.display());
    Ok(())
}

fn fmt_list(values: &[f64], scale: f64) -> String {
    values
        .iter()
        .map(|v| format!("{:.1}", v * scale))
        .collect::<Vec<_>>()
        .join(" ")
}

fn eval(a: &EvalArgs, cmd: &Command) -> CliResult<()> {
    require(&a.store, "store")?;
    require(&a.suite, "suite")?;
    let store = PromptStore::load(&a.store)?;
    let suite = load_suite(&a.suite)?.suite;
    let lab = load_lab(&a.model, store.head().d_g())?;
    let policy = EvalPolicy {
        prefix: a.prefix,
        k: a.k,
        rule: ScoreRule::from_mode(a.guidance),
    };
    let dir = run_dir(&a.common, "eval")?;
    record_config(&dir, cmd, &BTreeMap::new())?;
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for d in &suite {
        let out = evaluate_task(&lab.model, &store, &lab.encoders, d, &policy)?;
        println!(
            "{:<28} {:>7.2}  ({}/{})",
            d.spec.name(),
            out.accuracy,
            out.correct,
            out.total
        );
        rows.push(serde_json::json!({"task": d.spec.name(), "accuracy": out.accuracy, "correct": out.correct, "total": out.total}));
        traces.extend(out.traces);
    }
    dir.write(
        "reports/eval.json",
        serde_json::to_string_pretty(&rows).map_err(modalprompt::Error::from)?,
    )?;
    if !traces.is_empty() && store.n_tasks() == suite.len() {
        let names: Vec<String> = suite.iter().map(|d| d.spec.name()).collect();
        let hist = selection_histogram(&traces, suite.len())?;
        dir.write("matrices/eval.selection.csv", matrix_to_csv(&hist, &names))?;
    }
    Ok(())
}

fn read_matrix(path: &Path) -> CliResult<AccuracyMatrix> {
    require(path, "matrix")?;
    let text = fs::read_to_string(path).map_err(|e| modalprompt::Error::io(path, e))?;
    Ok(AccuracyMatrix::from_csv(&text)?)
}

fn metrics(a: &MetricsArgs, cmd: &Command) -> CliResult<()> {
    let m = read_matrix(&a.matrix)?;
    let report = MetricReport::from_matrix(&m)?;
    let dir = run_dir(&a.common, "metrics")?;
    record_config(&dir, cmd, &BTreeMap::new())?;
    dir.write(
        "reports/metrics.json",
        serde_json::to_string_pretty(&report).map_err(modalprompt::Error::from)?,
    )?;
    dir.write("reports/metrics.txt", report.to_table())?;
    println!("{}", report.to_table());
    Ok(())
}

fn oracle(a: &OracleArgs, cmd: &Command) -> CliResult<()> {
    let mut targets: Vec<(String, AccuracyMatrix, Option<&'static str>)> = Vec::new();
    for p in &a.matrices {
        targets.push((
            p.display().to_string(),
            read_matrix(p)?,
            fixture_for_path(p),
        ));
    }
    let names: Vec<String> = if a.all {
        fixtures::FIXTURES
            .iter()
            .map(|(n, _)| n.to_string())
            .collect()
    } else {
        a.fixture.clone()
    };
    for n in &names {
        let Some((name, _)) = fixtures::FIXTURES.iter().find(|(f, _)| f == n) else {
            let valid: Vec<&str> = fixtures::FIXTURES.iter().map(|(f, _)| *f).collect();
            return Err(Failure::Usage(format!(
                "unknown fixture `{n}`; valid: {}",
                valid.join(", ")
            )));
        };
        targets.push((
            name.to_string(),
            fixtures::fixture_matrix(name)?,
            Some(name),
        ));
    }
    if targets.is_empty() {
        return Err(Failure::Usage(
            "give a matrix CSV, --fixture NAME or --all".into(),
        ));
    }
    let dir = run_dir(&a.common, "oracle")?;
    record_config(&dir, cmd, &BTreeMap::new())?;
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for (label, m, fixture) in &targets {
        let report = MetricReport::from_matrix(m)?;
        println!("== {label}\n{}", report.to_table());
        let Some(fixture) = fixture else {
            println!("no reference values for this file; metrics only\n");
            continue;
        };
        let checks = check_report(fixture, &report)?;
        let bad: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
        for c in &bad {
            let got = c
                .got
                .map(|g| format!("{g:.4}"))
                .unwrap_or_else(|| "missing".into());
            println!(
                "  MISMATCH {:<10} expected {:>8.2} got {got} (diff {})",
                c.key,
                c.expected,
                c.got
                    .map(|g| format!("{:+.4}", g - c.expected))
                    .unwrap_or_default()
            );
        }
        println!(
            "{fixture}: {} / {} values within ±{}: {}\n",
            checks.len() - bad.len(),
            checks.len(),
            fixtures::TOLERANCE,
            if bad.is_empty() { "PASS" } else { "FAIL" }
        );
        if !bad.is_empty() {
            failures.push(fixture.to_string());
        }
        summary.push(serde_json::json!({"input": label, "fixture": fixture, "checks": checks}));
    }
    dir.write(
        "reports/oracle.json",
        serde_json::to_string_pretty(&summary).map_err(modalprompt::Error::from)?,
    )?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "oracle mismatch for {}",
            failures.join(", ")
        )))
    }
}

fn grid(a: &GridArgs, cmd: &Command) -> CliResult<()> {
    let mut plan = match &a.plan {
        Some(p) => {
            require(p, "plan")?;
            let text = fs::read_to_string(p).map_err(|e| modalprompt::Error::io(p, e))?;
            GridPlan::from_toml(&text).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => GridPlan::default(),
    };
    if plan.seeds.is_empty() {
        plan.seeds = vec![a.common.seed];
    }
    let dir = run_dir(&a.common, "grid")?;
    dir.write("plan.toml", plan.to_toml())?;
    record_config(&dir, cmd, &BTreeMap::from([("grid", to_value(&plan))]))?;
    let lab = Lab::load_or_pretrain(&plan.pretrain, plan.config.d_g, &cache_dir())?;
    info!(
        "backbone ready (pretraining took {:.1}s)",
        lab.pretrain_seconds
    );

    // Suites are written once per seed and read back by every variant.
    let mut suites: BTreeMap<u64, Vec<TaskDataset>> = BTreeMap::new();
    for &seed in &plan.seeds {
        let sdir = dir.root.join("suites").join(format!("s{seed}"));
        save_suite(&plan.suite.generate(seed)?, seed, plan.suite.layout, &sdir)?;
        suites.insert(seed, load_suite(&sdir)?.suite);
    }
    let mut summary = String::new();
    let start = Instant::now();
    for exp in plan.experiments() {
        let results =
            modalprompt::experiments::run_variant(&lab, &exp, |seed| Ok(suites[&seed].clone()))?;
        for r in &results {
            let cfg = RunConfig {
                seed: r.seed,
                ..exp.config.clone()
            };
            dir.write_outcome(
                &format!("{}-s{}", exp.variant, r.seed),
                &r.outcome,
                &lab,
                &suites[&r.seed],
                &cfg,
            )?;
            info!(
                "{} seed {} done in {:.1}s",
                exp.variant, r.seed, r.wall_clock
            );
        }
        let reports: Vec<&MetricReport> = results.iter().filter_map(|r| r.report()).collect();
        let block = if reports.len() == results.len() {
            let agg = aggregate(&reports)?;
            dir.write(
                format!("reports/{}-aggregate.json", exp.variant),
                serde_json::to_string_pretty(&agg).map_err(modalprompt::Error::from)?,
            )?;
            format!("## {}\n{}", exp.variant, agg.to_table())
        } else {
            let rows: Vec<String> = results
                .iter()
                .map(|r| format!("seed {}: {}", r.seed, fmt_list(r.last_row(), 1.0)))
                .collect();
            format!(
                "## {} (single evaluation row)\n{}\n",
                exp.variant,
                rows.join("\n")
            )
        };
        println!("{block}");
        summary.push_str(&block);
        summary.push('\n');
    }
    summary.push_str(&format!("total {:.1}s\n", start.elapsed().as_secs_f64()));
    dir.write("reports/summary.txt", summary)?;
    render_plots(&dir)?;
    println!("artifacts in {}", dir.root.display());
    Ok(())
}

fn bench(a: &BenchArgs, cmd: &Command) -> CliResult<()> {
    if a.tasks.is_empty() || a.k == 0 || a.prompt_len == 0 || a.samples == 0 || a.tokens == 0 {
        return Err(Failure::Usage(
            "tasks, k, prompt-len, samples and tokens must be non-empty / positive".into(),
        ));
    }
    let model = match &a.backbone {
        Some(p) => {
            require(p, "backbone")?;
            BackboneModel::load(p)?
        }
        None => BackboneModel::new(PretrainConfig::default().backbone, a.common.seed)?,
    };
    let cfg = BenchConfig {
        k: a.k,
        prompt_len: a.prompt_len,
        samples: a.samples,
        tokens: a.tokens,
        seed: a.common.seed,
        ..BenchConfig::default()
    };
    let dir = run_dir(&a.common, "bench")?;
    record_config(&dir, cmd, &BTreeMap::from([("bench", to_value(&cfg))]))?;
    let rows = complexity_benchmark(&model, &a.tasks, &cfg)?;
    let table = bench_table(&rows);
    print!("{table}");
    for &t in &a.tasks {
        if let Some(s) = speedup_at(&rows, t) {
            println!("T={t}: concat_all / modalprompt ms per token = {s:.2}x");
        }
    }
    dir.write("reports/bench.txt", table)?;
    dir.write(
        "reports/bench.json",
        serde_json::to_string_pretty(&rows).map_err(modalprompt::Error::from)?,
    )?;
    Ok(())
}

/// Renders every heatmap CSV under `matrices/` into `plots/`.
fn render_plots(dir: &RunDir) -> CliResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir.matrices())
        .map_err(|e| modalprompt::Error::io(dir.matrices(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    entries.sort();
    for p in entries {
        let stem = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let text = fs::read_to_string(&p).map_err(|e| modalprompt::Error::io(&p, e))?;
        let (m, scale) = if stem.contains(".selection") {
            (matrix_from_csv(&text)?, Scale::Fixed(0.0, 1.0))
        } else if stem.contains(".similarity") {
            (matrix_from_csv(&text)?, Scale::Auto)
        } else {
            // accuracy matrix: no name column, blanks above the diagonal
            let Ok(acc) = AccuracyMatrix::from_csv(&text) else {
                continue;
            };
            let t = acc.n_tasks();
            let mut m = ndarray::Array2::from_elem((acc.n_stages(), t), f64::NAN);
            for (r, row) in acc.rows().iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    m[[r, c]] = v;
                }
            }
            (m, Scale::Fixed(0.0, 100.0))
        };
        let out = dir.plots().join(format!("{stem}.png"));
        save_heatmap(&m, scale, &out)?;
        written.push(out);
    }
    Ok(written)
}

fn plot(a: &PlotArgs, cmd: &Command) -> CliResult<()> {
    require(&a.run_dir, "run directory")?;
    require(&a.run_dir.join("matrices"), "matrices directory")?;
    let dir = RunDir::create(&a.run_dir)?;
    let written = render_plots(&dir)?;
    if a.common.out.is_some() {
        // plots always live in the run directory; --out only receives the config record
        let rec = run_dir(&a.common, "plot")?;
        record_config(&rec, cmd, &BTreeMap::new())?;
    } else {
        record_config(&dir, cmd, &BTreeMap::new())?;
    }
    for p in &written {
        println!("{}", p.display());
    }
    if written.is_empty() {
        return Err(Failure::Check("no heatmap CSVs found to plot".into()));
    }
    Ok(())
}

fn dispatch(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::GenSuite(a) => gen_suite(a, cmd),
        Command::Pretrain(a) => pretrain(a, cmd),
        Command::Train(a) => train(a, cmd),
        Command::Eval(a) => eval(a, cmd),
        Command::Metrics(a) => metrics(a, cmd),
        Command::Oracle(a) => oracle(a, cmd),
        Command::Grid(a) => grid(a, cmd),
        Command::Bench(a) => bench(a, cmd),
        Command::Plot(a) => plot(a, cmd),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
