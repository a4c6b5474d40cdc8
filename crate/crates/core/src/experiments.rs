//! Experiment grid: variants, multi-seed runs, aggregation and the
//! prefix-length benchmark.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{pretrain_backbone, BackboneConfig, BackboneModel, PretrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    matrix_to_csv, selection_histogram, similarity_heatmap, AccuracyMatrix, MetricReport, Series,
};
use crate::guidance::{GuidanceEncoders, GuidanceMode};
use crate::nn::gaussian_matrix;
use crate::prompt_store::PromptStore;
use crate::selection::{
    assemble_prefix, prefix_token_count, score_tasks, select_eval, SelectionTrace,
};
use crate::tasks::{
    generate_suite_with_layout, generic_mixture, SuiteLayout, SuiteSizes, TaskDataset, D_IMAGE,
};
use crate::training::{
    run_continual, run_multitask, run_shared_prompt, run_zeroshot, RunConfig, StageReport,
};
use crate::vocab::Token;
use crate::TaskId;

/// Seed of the frozen guidance encoders; shared by every run.
pub const ENCODER_SEED: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Modalprompt,
    Finetune,
    ConcatAll,
    FusionOnly,
    SelectionOnly,
    ImageGuidance,
    TextGuidance,
    Multitask,
    Zeroshot,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Modalprompt,
        Variant::Finetune,
        Variant::ConcatAll,
        Variant::FusionOnly,
        Variant::SelectionOnly,
        Variant::ImageGuidance,
        Variant::TextGuidance,
        Variant::Multitask,
        Variant::Zeroshot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Modalprompt => "modalprompt",
            Variant::Finetune => "finetune",
            Variant::ConcatAll => "concat_all",
            Variant::FusionOnly => "fusion_only",
            Variant::SelectionOnly => "selection_only",
            Variant::ImageGuidance => "image_guidance",
            Variant::TextGuidance => "text_guidance",
            Variant::Multitask => "multitask",
            Variant::Zeroshot => "zeroshot",
        }
    }

    pub fn valid_names() -> String {
        Variant::ALL.map(Variant::name).join(", ")
    }

    /// The variant's switches applied on top of a base config.
    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::ConcatAll => c.concat_all = true,
            Variant::FusionOnly => c.selection_enabled = false,
            Variant::SelectionOnly => c.fusion_enabled = false,
            Variant::ImageGuidance => c.guidance_mode = GuidanceMode::ImageOnly,
            Variant::TextGuidance => c.guidance_mode = GuidanceMode::TextOnly,
            Variant::Finetune => {
                c.fusion_enabled = false;
                c.selection_enabled = false;
                c.loss_weights.proto = 0.0;
            }
            Variant::Modalprompt | Variant::Multitask | Variant::Zeroshot => {}
        }
        c
    }

    /// Whether the variant fills a full accuracy matrix (as opposed to a single bound row).
    pub fn is_continual(self) -> bool {
        !matches!(self, Variant::Multitask | Variant::Zeroshot)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}`; valid variants: {}",
                    Variant::valid_names()
                ))
            })
    }
}

/// One variant under one config, repeated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub variant: Variant,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config(
                "an experiment needs at least one seed".into(),
            ));
        }
        self.config.validate()
    }
}

/// Backbone pretraining recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainPlan {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds the parameter init and the sample order.
    pub seed: u64,
    /// Seeds the generic mixture.
    pub data_seed: u64,
    pub prompt_len: usize,
    pub backbone: BackboneConfig,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            samples: 8000,
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            seed: 0,
            data_seed: 1,
            prompt_len: 10,
            backbone: p.backbone,
        }
    }
}

impl PretrainPlan {
    /// Short content hash used to key cached checkpoints.
    pub fn key(&self) -> String {
        let text = toml::to_string(self).expect("plan serializes");
        let d = Sha256::digest(text.as_bytes());
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn pretrain(&self) -> Result<BackboneModel> {
        let mixture = generic_mixture(self.samples, self.data_seed, self.prompt_len);
        pretrain_backbone(
            &mixture,
            &PretrainConfig {
                backbone: self.backbone,
                epochs: self.epochs,
                batch_size: self.batch_size,
                learning_rate: self.learning_rate,
                seed: self.seed,
            },
        )
    }
}

/// Frozen backbone plus frozen encoders: everything a run reads but never writes.
#[derive(Debug, Clone)]
pub struct Lab {
    pub model: BackboneModel,
    pub encoders: GuidanceEncoders,
    /// Wall clock of the pretraining that produced the backbone.
    pub pretrain_seconds: f64,
}

impl Lab {
    pub fn new(model: BackboneModel, d_g: usize) -> Self {
        let encoders = GuidanceEncoders::new(D_IMAGE, model.vocab_size(), d_g, ENCODER_SEED);
        Self {
            model,
            encoders,
            pretrain_seconds: 0.0,
        }
    }

    /// Loads `backbone-<key>.mpk` from `cache_dir`, pretraining and saving it on a miss.
    pub fn load_or_pretrain(plan: &PretrainPlan, d_g: usize, cache_dir: &Path) -> Result<Self> {
        fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
        let path = cache_dir.join(format!("backbone-{}.mpk", plan.key()));
        let secs_path = path.with_extension("secs");
        if path.exists() {
            let model = BackboneModel::load(&path)?;
            let pretrain_seconds = fs::read_to_string(&secs_path)
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(0.0);
            return Ok(Self {
                pretrain_seconds,
                ..Self::new(model, d_g)
            });
        }
        let start = Instant::now();
        let model = plan.pretrain()?;
        let secs = start.elapsed().as_secs_f64();
        // Write to a temporary name first so a killed run never leaves half a checkpoint.
        let tmp = path.with_extension("partial");
        model.save(&tmp)?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        fs::write(&secs_path, format!("{secs}")).map_err(|e| Error::io(&secs_path, e))?;
        Ok(Self {
            pretrain_seconds: secs,
            ..Self::new(model, d_g)
        })
    }
}

/// Suite recipe shared by every variant of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuitePlan {
    pub tasks: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub layout: SuiteLayout,
}

impl Default for SuitePlan {
    fn default() -> Self {
        let s = SuiteSizes::default();
        Self {
            tasks: 4,
            n_train: s.n_train,
            n_eval: s.n_eval,
            layout: SuiteLayout::Separable,
        }
    }
}

impl SuitePlan {
    /// The suite used for `seed`; identical for every variant.
    pub fn generate(&self, seed: u64) -> Result<Vec<TaskDataset>> {
        generate_suite_with_layout(
            self.tasks,
            seed,
            SuiteSizes {
                n_train: self.n_train,
                n_eval: self.n_eval,
            },
            self.layout,
        )
    }
}

/// A whole grid as written in a plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridPlan {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub suite: SuitePlan,
    pub pretrain: PretrainPlan,
    pub config: RunConfig,
}

impl Default for GridPlan {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            suite: SuitePlan::default(),
            pretrain: PretrainPlan::default(),
            config: RunConfig::default(),
        }
    }
}

impl GridPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: GridPlan = toml::from_str(text).map_err(|e| {
            let msg = e.to_string();
            if msg.contains("unknown variant") {
                Error::Config(format!("{msg}\nvalid variants: {}", Variant::valid_names()))
            } else {
                Error::Config(msg)
            }
        })?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("plan serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("the grid lists no variants".into()));
        }
        if self.config.n_tasks != self.suite.tasks {
            return Err(Error::Config(format!(
                "config.n_tasks={} but suite.tasks={}",
                self.config.n_tasks, self.suite.tasks
            )));
        }
        if self.config.d_model != self.pretrain.backbone.d_model {
            return Err(Error::Config(
                "config.d_model differs from the backbone width".into(),
            ));
        }
        for p in self.experiments() {
            p.validate()?;
        }
        Ok(())
    }

    pub fn experiments(&self) -> Vec<ExperimentPlan> {
        self.variants
            .iter()
            .map(|&variant| ExperimentPlan {
                variant,
                config: variant.configure(&self.config),
                seeds: self.seeds.clone(),
            })
            .collect()
    }
}

/// What one seed of one variant produced.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum SeedOutcome {
    Continual {
        matrix: AccuracyMatrix,
        report: MetricReport,
        stages: Vec<StageReport>,
        traces: Vec<SelectionTrace>,
        store: Box<PromptStore>,
    },
    /// Single evaluation row of a bound harness.
    Bound {
        task_names: Vec<String>,
        row: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub outcome: SeedOutcome,
    pub wall_clock: f64,
}

impl SeedResult {
    pub fn report(&self) -> Option<&MetricReport> {
        match &self.outcome {
            SeedOutcome::Continual { report, .. } => Some(report),
            SeedOutcome::Bound { .. } => None,
        }
    }

    /// Final-row accuracies (the bound row for bound harnesses).
    pub fn last_row(&self) -> &[f64] {
        match &self.outcome {
            SeedOutcome::Continual { report, .. } => &report.last.values,
            SeedOutcome::Bound { row, .. } => row,
        }
    }
}

/// Runs one variant on one suite.
pub fn run_seed(
    lab: &Lab,
    variant: Variant,
    cfg: &RunConfig,
    suite: &[TaskDataset],
) -> Result<SeedOutcome> {
    let names: Vec<String> = suite.iter().map(|d| d.spec.name()).collect();
    let (m, e) = (&lab.model, &lab.encoders);
    let run = match variant {
        Variant::Multitask => {
            let b = run_multitask(m, e, suite, cfg)?;
            return Ok(SeedOutcome::Bound {
                task_names: names,
                row: b.row,
            });
        }
        Variant::Zeroshot => {
            let b = run_zeroshot(m, e, suite, cfg)?;
            return Ok(SeedOutcome::Bound {
                task_names: names,
                row: b.row,
            });
        }
        Variant::Finetune => run_shared_prompt(m, e, suite, cfg)?,
        _ => run_continual(m, e, suite, cfg)?,
    };
    let report = MetricReport::from_matrix(&run.matrix)?;
    Ok(SeedOutcome::Continual {
        matrix: run.matrix,
        report,
        stages: run.reports,
        traces: run.final_traces,
        store: Box::new(run.store),
    })
}

/// Runs every seed of a plan; `suite_for(seed)` supplies the shared suites.
pub fn run_variant(
    lab: &Lab,
    plan: &ExperimentPlan,
    mut suite_for: impl FnMut(u64) -> Result<Vec<TaskDataset>>,
) -> Result<Vec<SeedResult>> {
    plan.validate()?;
    plan.seeds
        .iter()
        .map(|&seed| {
            let suite = suite_for(seed)?;
            let cfg = RunConfig {
                seed,
                ..plan.config.clone()
            };
            let start = Instant::now();
            let outcome = run_seed(lab, plan.variant, &cfg, &suite)?;
            Ok(SeedResult {
                seed,
                outcome,
                wall_clock: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// Element-wise mean and sample standard deviation of a series over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub overall_mean: f64,
    pub overall_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub task_names: Vec<String>,
    pub n_seeds: usize,
    pub last: SeriesStats,
    pub avg: Option<SeriesStats>,
    pub bwt: Option<SeriesStats>,
    pub mean_acc: Option<SeriesStats>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn stats(series: &[&Series], what: &str) -> Result<SeriesStats> {
    let len = series[0].values.len();
    if series.iter().any(|s| s.values.len() != len) {
        return Err(Error::Input(format!(
            "{what} lists differ in length across seeds"
        )));
    }
    let (mean, std) = (0..len)
        .map(|i| mean_std(&series.iter().map(|s| s.values[i]).collect::<Vec<_>>()))
        .unzip();
    let (overall_mean, overall_std) = mean_std(&series.iter().map(|s| s.mean).collect::<Vec<_>>());
    Ok(SeriesStats {
        mean,
        std,
        overall_mean,
        overall_std,
    })
}

fn optional_stats(
    reports: &[&MetricReport],
    pick: impl Fn(&MetricReport) -> Option<&Series>,
    what: &str,
) -> Result<Option<SeriesStats>> {
    let present: Vec<&Series> = reports.iter().filter_map(|r| pick(r)).collect();
    match present.len() {
        0 => Ok(None),
        n if n == reports.len() => stats(&present, what).map(Some),
        _ => Err(Error::Input(format!("{what} is missing for some seeds"))),
    }
}

/// Mean ± sample std over per-seed reports.
pub fn aggregate(reports: &[&MetricReport]) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Input("nothing to aggregate".into()))?;
    if reports
        .iter()
        .any(|r| r.task_names.len() != first.task_names.len())
    {
        return Err(Error::Input("reports cover different task counts".into()));
    }
    let lasts: Vec<&Series> = reports.iter().map(|r| &r.last).collect();
    Ok(AggregateReport {
        task_names: first.task_names.clone(),
        n_seeds: reports.len(),
        last: stats(&lasts, "Last")?,
        avg: optional_stats(reports, |r| r.avg.as_ref(), "Avg")?,
        bwt: optional_stats(reports, |r| r.bwt.as_ref(), "B")?,
        mean_acc: optional_stats(reports, |r| r.mean_acc.as_ref(), "M")?,
    })
}

impl AggregateReport {
    /// Mean of `M_T` over seeds.
    pub fn final_mean_acc(&self) -> f64 {
        self.mean_acc
            .as_ref()
            .and_then(|m| m.mean.last().copied())
            .unwrap_or(self.last.overall_mean)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{} seed(s), mean ± std\n", self.n_seeds);
        let mut line = |label: &str, st: &SeriesStats| {
            let cells: Vec<String> = st
                .mean
                .iter()
                .zip(&st.std)
                .map(|(m, d)| format!("{m:.2}±{d:.2}"))
                .collect();
            s.push_str(&format!(
                "{label:<5} {}  | mean {:.2}±{:.2}\n",
                cells.join(" "),
                st.overall_mean,
                st.overall_std
            ));
        };
        line("Last", &self.last);
        for (label, st) in [("Avg", &self.avg), ("B", &self.bwt), ("M", &self.mean_acc)] {
            if let Some(st) = st {
                line(label, st);
            }
        }
        s
    }
}

/// Prefix routing strategy compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    Modalprompt,
    ConcatAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_tasks: usize,
    pub method: BenchMethod,
    pub prefix_tokens: usize,
    pub ms_per_token: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub k: usize,
    pub prompt_len: usize,
    pub d_g: usize,
    /// Generated tokens per sample.
    pub tokens: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            k: 3,
            prompt_len: 10,
            d_g: 32,
            tokens: 4,
            samples: 40,
            seed: 0,
        }
    }
}

/// Greedy decoding of exactly `n` tokens (no early stop), for timing.
fn decode_fixed(
    model: &BackboneModel,
    prefix: &Array2<f64>,
    ext: &Array2<f64>,
    image: &[f64],
    instruction: &[Token],
    n: usize,
) -> Result<Vec<Token>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let logits = model.forward_logits(prefix.view(), ext.view(), image, instruction, &out)?;
        let last = logits.row(logits.nrows() - 1);
        let best =
            last.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |b, (i, &v)| if v > b.1 { (i, v) } else { b },
            );
        out.push(best.0 as Token);
    }
    Ok(out)
}

/// Wall clock per generated token for ModalPrompt routing (`M·min(k,T)` prefix
/// rows, selection cost included) against concatenating all `T` sets.
/// Stores are randomly initialized; only timing is measured.
pub fn complexity_benchmark(
    model: &BackboneModel,
    task_counts: &[usize],
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    let encoders = GuidanceEncoders::new(D_IMAGE, model.vocab_size(), cfg.d_g, ENCODER_SEED);
    let rule = crate::guidance::ScoreRule::default();
    let mut rows = Vec::new();
    for &t in task_counts {
        let suite = generate_suite_with_layout(
            t,
            cfg.seed,
            SuiteSizes {
                n_train: 0,
                n_eval: cfg.samples.div_ceil(t),
            },
            SuiteLayout::Separable,
        )?;
        let samples: Vec<_> = suite
            .iter()
            .flat_map(|d| d.eval.iter())
            .take(cfg.samples)
            .collect();
        let mut store = PromptStore::new(cfg.prompt_len, model.d_model(), cfg.d_g, cfg.seed)?;
        for id in 1..=t as u32 {
            store.add_task(TaskId(id), cfg.seed + id as u64)?;
            store.finalize_task(TaskId(id))?;
        }
        let ext = model.extended_output_rows(store.n_prompt_tokens());
        let all_ids: Vec<TaskId> = store.task_ids().collect();
        let all_prefix = assemble_prefix(&store, &all_ids)?;
        for method in [BenchMethod::Modalprompt, BenchMethod::ConcatAll] {
            let start = Instant::now();
            let mut tokens = 0usize;
            let mut prefix_rows = 0;
            for s in &samples {
                let prefix = match method {
                    BenchMethod::ConcatAll => all_prefix.clone(),
                    BenchMethod::Modalprompt => {
                        let g = encoders.encode(&s.image, &s.instruction)?;
                        let protos = store.task_ids().zip(store.cached_prototypes());
                        let chosen = select_eval(&score_tasks(protos, &g), cfg.k, &rule)?.chosen;
                        assemble_prefix(&store, &chosen)?
                    }
                };
                prefix_rows = prefix.nrows();
                tokens +=
                    decode_fixed(model, &prefix, &ext, &s.image, &s.instruction, cfg.tokens)?.len();
            }
            let expected = match method {
                BenchMethod::Modalprompt => prefix_token_count(cfg.prompt_len, cfg.k, t),
                BenchMethod::ConcatAll => cfg.prompt_len * t,
            };
            debug_assert_eq!(prefix_rows, expected);
            rows.push(BenchRow {
                n_tasks: t,
                method,
                prefix_tokens: expected,
                ms_per_token: start.elapsed().as_secs_f64() * 1e3 / tokens.max(1) as f64,
            });
        }
    }
    Ok(rows)
}

/// ms/token of concat-all over ModalPrompt at `t` tasks.
pub fn speedup_at(rows: &[BenchRow], t: usize) -> Option<f64> {
    let find = |m| {
        rows.iter()
            .find(|r| r.n_tasks == t && r.method == m)
            .map(|r| r.ms_per_token)
    };
    Some(find(BenchMethod::ConcatAll)? / find(BenchMethod::Modalprompt)?)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:>3}  {:<12} {:>13} {:>12}\n",
        "T", "method", "prefix_tokens", "ms/token"
    );
    for r in rows {
        let m = match r.method {
            BenchMethod::Modalprompt => "modalprompt",
            BenchMethod::ConcatAll => "concat_all",
        };
        s.push_str(&format!(
            "{:>3}  {:<12} {:>13} {:>12.3}\n",
            r.n_tasks, m, r.prefix_tokens, r.ms_per_token
        ));
    }
    s
}

/// `{plan, matrices/, reports/, plots/, logs/}` under one root.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["matrices", "reports", "plots", "logs"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn matrices(&self) -> PathBuf {
        self.root.join("matrices")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn write(&self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Writes every artifact of one seed's outcome, prefixed by `tag`.
    pub fn write_outcome(
        &self,
        tag: &str,
        outcome: &SeedOutcome,
        lab: &Lab,
        suite: &[TaskDataset],
        cfg: &RunConfig,
    ) -> Result<()> {
        match outcome {
            SeedOutcome::Bound { task_names, row } => {
                let text = format!(
                    "{}\n{}\n",
                    task_names.join(","),
                    row.iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                );
                self.write(Path::new("matrices").join(format!("{tag}.csv")), text)?;
            }
            SeedOutcome::Continual {
                matrix,
                report,
                stages,
                traces,
                store,
            } => {
                self.write(
                    Path::new("matrices").join(format!("{tag}.csv")),
                    matrix.to_csv(),
                )?;
                self.write(
                    Path::new("reports").join(format!("{tag}.json")),
                    serde_json::to_string_pretty(report)?,
                )?;
                self.write(
                    Path::new("reports").join(format!("{tag}.txt")),
                    report.to_table(),
                )?;
                crate::training::append_run_log(
                    &self.logs().join(format!("{tag}.stages.jsonl")),
                    stages,
                )?;
                let trace_lines: Vec<String> = traces
                    .iter()
                    .map(serde_json::to_string)
                    .collect::<std::result::Result<_, _>>()?;
                self.write(
                    Path::new("logs").join(format!("{tag}.traces.jsonl")),
                    trace_lines.join("\n"),
                )?;
                store.save(&self.root.join("stores").join(format!("{tag}.mps")))?;
                let names: Vec<String> = suite.iter().map(|d| d.spec.name()).collect();
                if store.n_completed() == suite.len() && store.n_tasks() == suite.len() {
                    let sim = similarity_heatmap(store, &lab.encoders, suite, &cfg.score_rule())?;
                    self.write(
                        Path::new("matrices").join(format!("{tag}.similarity.csv")),
                        matrix_to_csv(&sim, &names),
                    )?;
                }
                if !traces.is_empty() {
                    let hist = selection_histogram(traces, suite.len())?;
                    self.write(
                        Path::new("matrices").join(format!("{tag}.selection.csv")),
                        matrix_to_csv(&hist, &names),
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Random store with finalized sets; used where only shapes or timing matter.
pub fn random_store(
    t: usize,
    prompt_len: usize,
    d_model: usize,
    d_g: usize,
    seed: u64,
) -> Result<PromptStore> {
    let mut store = PromptStore::new(prompt_len, d_model, d_g, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in 1..=t as u32 {
        store.add_task(TaskId(id), seed + id as u64)?;
        let set = store.current_mut().expect("just added");
        set.embeddings = gaussian_matrix(&mut rng, prompt_len, d_model, 0.5);
        store.finalize_task(TaskId(id))?;
    }
    Ok(store)
}
