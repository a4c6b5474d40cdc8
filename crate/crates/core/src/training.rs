//! Continual training: per-task optimization of the current prompt set and the
//! prototype head under the language loss plus the prototype loss, with
//! train-time fusion of earlier (frozen) prompt sets.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneModel;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_task, AccuracyMatrix, EvalPolicy, EvalPrefix};
use crate::guidance::{GuidanceEncoders, GuidanceMode, GuidanceVector, InputGuidance, ScoreRule};
use crate::prompt_store::{HeadGrad, PromptStore};
use crate::selection::{assemble_prefix, score_tasks, select_train, SelectionTrace};
use crate::tasks::{Sample, TaskDataset};
use crate::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lmm: f64,
    pub proto: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lmm: 1.0,
            proto: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Prompt rows per task (M).
    pub prompt_len: usize,
    /// Prompt sets routed into the prefix.
    pub k: usize,
    pub d_model: usize,
    pub d_g: usize,
    pub d_image: usize,
    pub n_tasks: usize,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub guidance_mode: GuidanceMode,
    pub fusion_enabled: bool,
    pub selection_enabled: bool,
    /// Every trained set in the prefix, both in training and at inference.
    pub concat_all: bool,
    pub loss_weights: LossWeights,
    /// Replaces the mode weights with `λ·α + (1−λ)·β` when set.
    pub score_lambda: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            prompt_len: 10,
            k: 3,
            d_model: 64,
            d_g: 32,
            d_image: crate::tasks::D_IMAGE,
            n_tasks: 4,
            epochs_per_task: 4,
            batch_size: 16,
            learning_rate: 0.005,
            seed: 0,
            guidance_mode: GuidanceMode::Dual,
            fusion_enabled: true,
            selection_enabled: true,
            concat_all: false,
            loss_weights: LossWeights::default(),
            score_lambda: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.prompt_len == 0 {
            return bad("M must be at least 1");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.loss_weights.lmm <= 0.0 || !self.loss_weights.lmm.is_finite() {
            return bad("language loss weight must be positive");
        }
        if self.loss_weights.proto < 0.0 || !self.loss_weights.proto.is_finite() {
            return bad("prototype loss weight must be non-negative");
        }
        if self.epochs_per_task == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if let Some(l) = self.score_lambda {
            if !(0.0..=1.0).contains(&l) {
                return bad("score lambda must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn score_rule(&self) -> ScoreRule {
        match self.score_lambda {
            Some(l) => ScoreRule::interpolated(l),
            None => ScoreRule::from_mode(self.guidance_mode),
        }
    }

    pub fn eval_policy(&self) -> EvalPolicy {
        EvalPolicy {
            prefix: if self.concat_all || !self.selection_enabled {
                EvalPrefix::All
            } else {
                EvalPrefix::Selected
            },
            k: self.k,
            rule: self.score_rule(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub task_id: TaskId,
    /// Mean (language, prototype) loss over the final epoch.
    pub final_losses: (f64, f64),
    /// Per-epoch means, same layout.
    pub loss_curve: Vec<(f64, f64)>,
    pub steps: usize,
    pub wall_clock: f64,
}

/// `[1 − cos(p, x_v)] + [1 − cos(p, x_instruct)]`.
pub fn proto_loss(
    prototype: &GuidanceVector,
    x_v: &GuidanceVector,
    x_instruct: &GuidanceVector,
) -> f64 {
    weighted_proto_loss(prototype, x_v, x_instruct, (1.0, 1.0))
}

/// Prototype loss with per-modality weights (a guidance ablation drops one term).
pub fn weighted_proto_loss(
    prototype: &GuidanceVector,
    x_v: &GuidanceVector,
    x_instruct: &GuidanceVector,
    (wi, wt): (f64, f64),
) -> f64 {
    wi * (1.0 - prototype.cosine(x_v)) + wt * (1.0 - prototype.cosine(x_instruct))
}

/// Mean summed negative log-likelihood over a batch, sharing one prefix.
pub fn lmm_loss(
    model: &BackboneModel,
    prefix: &Array2<f64>,
    vocab_ext: &Array2<f64>,
    batch: &[Sample],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        total += model.sample_loss(prefix.view(), vocab_ext.view(), s)?;
    }
    Ok(total / batch.len() as f64)
}

pub fn encode_all(encoders: &GuidanceEncoders, samples: &[Sample]) -> Result<Vec<InputGuidance>> {
    samples
        .iter()
        .map(|s| encoders.encode(&s.image, &s.instruction))
        .collect()
}

/// How the training prefix is formed for the current task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPrefix {
    /// Current set plus the top-(k−1) earlier sets for each sample.
    Fused,
    CurrentOnly,
    /// Every set trained so far.
    AllTasks,
}

impl TrainPrefix {
    pub fn from_config(cfg: &RunConfig) -> Self {
        if cfg.concat_all {
            TrainPrefix::AllTasks
        } else if cfg.fusion_enabled {
            TrainPrefix::Fused
        } else {
            TrainPrefix::CurrentOnly
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub lmm: f64,
    pub proto: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    /// Gradient on the current prompt set (`M × d_m`).
    pub prompts: Array2<f64>,
    /// Absent when the prototype loss is off.
    pub head: Option<HeadGrad>,
}

/// Objective and gradients of one batch for the store's current task.
///
/// Earlier sets contribute to the forward pass but receive no gradient.
pub fn batch_objective(
    model: &BackboneModel,
    store: &PromptStore,
    batch: &[Sample],
    guidance: &[&InputGuidance],
    cfg: &RunConfig,
    policy: TrainPrefix,
) -> Result<(BatchLoss, BatchGrads)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if guidance.len() != batch.len() {
        return Err(Error::Shape(
            "one guidance pair per sample is required".into(),
        ));
    }
    let current = store
        .current()
        .ok_or_else(|| Error::State("no trainable prompt set".into()))?;
    let t = current.task_id;
    let m = store.prompt_len;
    let rule = cfg.score_rule();
    let (live, cache) = store.head().forward(&current.embeddings)?;
    let vocab_ext = model.extended_output_rows(store.n_prompt_tokens());

    let mut d_prompts = Array2::<f64>::zeros(current.embeddings.raw_dim());
    let mut lmm = 0.0;
    let scale = 1.0 / batch.len() as f64;
    let all_ids: Vec<TaskId> = store.task_ids().collect();
    for (sample, g) in batch.iter().zip(guidance) {
        let chosen = match policy {
            TrainPrefix::CurrentOnly => vec![t],
            TrainPrefix::AllTasks => all_ids.clone(),
            TrainPrefix::Fused => {
                let protos = store
                    .sets()
                    .iter()
                    .zip(store.cached_prototypes())
                    .map(|(s, p)| (s.task_id, p))
                    .chain(std::iter::once((t, &live)));
                select_train(&score_tasks(protos, g), t, cfg.k, &rule)?.chosen
            }
        };
        let prefix = assemble_prefix(store, &chosen)?;
        let (loss, grads) =
            model.sample_loss_and_grads(prefix.view(), vocab_ext.view(), sample, false)?;
        lmm += loss * scale;
        let pos = chosen
            .iter()
            .position(|&id| id == t)
            .expect("current task is always chosen");
        d_prompts.scaled_add(scale, &grads.prefix.slice(s![pos * m..(pos + 1) * m, ..]));
    }
    d_prompts *= cfg.loss_weights.lmm;

    let w_proto = cfg.loss_weights.proto;
    let (wi, wt) = cfg.guidance_mode.weights();
    let mut proto = 0.0;
    let mut head = None;
    if w_proto > 0.0 {
        let imgs: Vec<&GuidanceVector> = guidance.iter().map(|g| &g.image).collect();
        let txts: Vec<&GuidanceVector> = guidance.iter().map(|g| &g.text).collect();
        let mean_v = GuidanceVector::mean(&imgs)?;
        let mean_t = GuidanceVector::mean(&txts)?;
        proto = weighted_proto_loss(&live, &mean_v, &mean_t, (wi, wt));
        let d_unit: Array1<f64> = Array1::from_iter(
            mean_v
                .values()
                .iter()
                .zip(mean_t.values())
                .map(|(a, b)| -w_proto * (wi * a + wt * b)),
        );
        let (dp, dh) = store.head().backward(&cache, &d_unit);
        d_prompts += &dp;
        head = Some(dh);
    }
    Ok((
        BatchLoss {
            lmm,
            proto,
            total: cfg.loss_weights.lmm * lmm + w_proto * proto,
        },
        BatchGrads {
            prompts: d_prompts,
            head,
        },
    ))
}

fn apply_step(store: &mut PromptStore, grads: &BatchGrads, lr: f64) {
    if let Some(h) = &grads.head {
        store.head_mut().apply_sgd(h, lr);
    }
    let set = store.current_mut().expect("checked by batch_objective");
    set.embeddings.scaled_add(-lr, &grads.prompts);
}

fn check_frozen_model(model: &BackboneModel) -> Result<()> {
    if !model.frozen {
        return Err(Error::State(
            "backbone must be pretrained and frozen".into(),
        ));
    }
    Ok(())
}

fn stage_rng(cfg: &RunConfig, task: TaskId) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        cfg.seed
            .wrapping_mul(0x9e37_79b9)
            .wrapping_add(task.0 as u64),
    )
}

/// Optimizes the store's open set over `samples` and returns the stage report.
fn optimize_current(
    model: &BackboneModel,
    store: &mut PromptStore,
    samples: &[Sample],
    guidance: &[InputGuidance],
    cfg: &RunConfig,
    policy: TrainPrefix,
    task: TaskId,
) -> Result<StageReport> {
    if samples.is_empty() {
        return Err(Error::Input(format!("task {task} has no training samples")));
    }
    let start = Instant::now();
    let mut rng = stage_rng(cfg, task);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs_per_task);
    let mut steps = 0;
    for _ in 0..cfg.epochs_per_task {
        order.shuffle(&mut rng);
        let (mut sum_lmm, mut sum_proto, mut n_batches) = (0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
            let g: Vec<&InputGuidance> = idx.iter().map(|&i| &guidance[i]).collect();
            let (loss, grads) = batch_objective(model, store, &batch, &g, cfg, policy)?;
            if !loss.total.is_finite() {
                return Err(Error::State(format!("non-finite loss at step {steps}")));
            }
            apply_step(store, &grads, cfg.learning_rate);
            sum_lmm += loss.lmm;
            sum_proto += loss.proto;
            n_batches += 1;
            steps += 1;
        }
        let nb = n_batches as f64;
        curve.push((sum_lmm / nb, sum_proto / nb));
        log::debug!(
            "task {task} epoch {} lmm {:.4} proto {:.4}",
            curve.len(),
            sum_lmm / nb,
            sum_proto / nb
        );
    }
    Ok(StageReport {
        task_id: task,
        final_losses: *curve.last().expect("at least one epoch"),
        loss_curve: curve,
        steps,
        wall_clock: start.elapsed().as_secs_f64(),
    })
}

/// Adds a set for `dataset`'s task, trains it and finalizes it.
pub fn train_task(
    store: &mut PromptStore,
    model: &BackboneModel,
    encoders: &GuidanceEncoders,
    dataset: &TaskDataset,
    cfg: &RunConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    check_frozen_model(model)?;
    if let Some(open) = store.current() {
        return Err(Error::State(format!(
            "task {} was never finalized",
            open.task_id
        )));
    }
    let task = dataset.spec.task_id;
    store.add_task(task, cfg.seed ^ (0x5e7_0000 + task.0 as u64))?;
    let guidance = encode_all(encoders, &dataset.train)?;
    let policy = TrainPrefix::from_config(cfg);
    let report = optimize_current(model, store, &dataset.train, &guidance, cfg, policy, task)?;
    store.finalize_task(task)?;
    Ok(report)
}

/// SHA-256 digests of everything a stage must leave untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeSnapshot {
    pub backbone: [u8; 32],
    pub encoders: [u8; 32],
    pub prior_prompts: [u8; 32],
    pub prototypes: [u8; 32],
}

fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

impl FreezeSnapshot {
    pub fn take(model: &BackboneModel, encoders: &GuidanceEncoders, store: &PromptStore) -> Self {
        Self {
            backbone: digest(&model.fingerprint_bytes()),
            encoders: digest(&encoders.fingerprint_bytes()),
            prior_prompts: digest(&store.frozen_bytes()),
            prototypes: digest(&store.prototype_bytes()),
        }
    }

    /// Checks that the state recorded before a stage survived it. New sets and
    /// prototypes appended by the stage are ignored.
    pub fn verify(
        &self,
        model: &BackboneModel,
        encoders: &GuidanceEncoders,
        store: &PromptStore,
        n_prior: usize,
    ) -> Result<()> {
        let prior_bytes: Vec<u8> = store.sets()[..n_prior]
            .iter()
            .flat_map(|s| s.to_bytes())
            .collect();
        let proto_bytes: Vec<u8> = store.cached_prototypes()[..n_prior]
            .iter()
            .flat_map(|p| p.values().iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        let checks = [
            (
                "backbone",
                self.backbone,
                digest(&model.fingerprint_bytes()),
            ),
            (
                "encoders",
                self.encoders,
                digest(&encoders.fingerprint_bytes()),
            ),
            (
                "prior prompt sets",
                self.prior_prompts,
                digest(&prior_bytes),
            ),
            ("cached prototypes", self.prototypes, digest(&proto_bytes)),
        ];
        for (what, before, after) in checks {
            if before != after {
                return Err(Error::State(format!(
                    "{what} changed during a training stage"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContinualRun {
    pub store: PromptStore,
    pub matrix: AccuracyMatrix,
    pub reports: Vec<StageReport>,
    /// Routing decisions of the final evaluation (empty when nothing is routed).
    pub final_traces: Vec<SelectionTrace>,
}

fn new_store(cfg: &RunConfig) -> Result<PromptStore> {
    PromptStore::new(cfg.prompt_len, cfg.d_model, cfg.d_g, cfg.seed ^ 0x9d0_7e4d)
}

fn check_suite(model: &BackboneModel, suite: &[TaskDataset], cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    check_frozen_model(model)?;
    if suite.is_empty() {
        return Err(Error::Input("empty suite".into()));
    }
    if cfg.d_model != model.d_model() {
        return Err(Error::Config(format!(
            "run uses d_m={} but the backbone has d_m={}",
            cfg.d_model,
            model.d_model()
        )));
    }
    for (i, d) in suite.iter().enumerate() {
        if d.spec.task_id != TaskId(i as u32 + 1) {
            return Err(Error::Ordering {
                expected: TaskId(i as u32 + 1),
                got: d.spec.task_id,
            });
        }
    }
    Ok(())
}

fn evaluate_row(
    model: &BackboneModel,
    store: &PromptStore,
    encoders: &GuidanceEncoders,
    suite: &[TaskDataset],
    policy: &EvalPolicy,
) -> Result<(Vec<f64>, Vec<SelectionTrace>)> {
    let mut row = Vec::with_capacity(suite.len());
    let mut traces = Vec::new();
    for d in suite {
        let out = evaluate_task(model, store, encoders, d, policy)?;
        row.push(out.accuracy);
        traces.extend(out.traces);
    }
    Ok((row, traces))
}

/// Trains tasks in order, evaluating every seen task after each stage.
pub fn run_continual(
    model: &BackboneModel,
    encoders: &GuidanceEncoders,
    suite: &[TaskDataset],
    cfg: &RunConfig,
) -> Result<ContinualRun> {
    run_continual_with(model, encoders, suite, cfg, |_, _| {})
}

pub fn run_continual_with(
    model: &BackboneModel,
    encoders: &GuidanceEncoders,
    suite: &[TaskDataset],
    cfg: &RunConfig,
    mut on_stage: impl FnMut(&StageReport, &[f64]),
) -> Result<ContinualRun> {
    check_suite(model, suite, cfg)?;
    let names = suite.iter().map(|d| d.spec.name()).collect();
    let mut matrix = AccuracyMatrix::new(names);
    let mut store = new_store(cfg)?;
    let mut reports = Vec::with_capacity(suite.len());
    let policy = cfg.eval_policy();
    let mut final_traces = Vec::new();
    for (t, dataset) in suite.iter().enumerate() {
        let snapshot = FreezeSnapshot::take(model, encoders, &store);
        let report = train_task(&mut store, model, encoders, dataset, cfg)?;
        snapshot.verify(model, encoders, &store, t)?;
        let (row, traces) = evaluate_row(model, &store, encoders, &suite[..=t], &policy)?;
        on_stage(&report, &row);
        matrix.push_row(row)?;
        reports.push(report);
        final_traces = traces;
    }
    Ok(ContinualRun {
        store,
        matrix,
        reports,
        final_traces,
    })
}

/// One prompt set tuned on every task in turn without any routing or
/// prototype loss: the sequential fine-tuning baseline at prompt level.
pub fn run_shared_prompt(
    model: &BackboneModel,
    encoders: &GuidanceEncoders,
    suite: &[TaskDataset],
    cfg: &RunConfig,
) -> Result<ContinualRun> {
    check_suite(model, suite, cfg)?;
    let mut cfg = cfg.clone();
    cfg.loss_weights.proto = 0.0;
    let names = suite.iter().map(|d| d.spec.name()).collect();
    let mut matrix = AccuracyMatrix::new(names);
    let mut store = new_store(&cfg)?;
    store.add_task(TaskId(1), cfg.seed ^ 0x5e7_0001)?;
    let policy = EvalPolicy {
        prefix: EvalPrefix::All,
        k: 1,
        rule: cfg.score_rule(),
    };
    let mut reports = Vec::with_capacity(suite.len());
    for (t, dataset) in suite.iter().enumerate() {
        let guidance = encode_all(encoders, &dataset.train)?;
        let report = optimize_current(
            model,
            &mut store,
            &dataset.train,
            &guidance,
            &cfg,
            TrainPrefix::CurrentOnly,
            dataset.spec.task_id,
        )?;
        let (row, _) = evaluate_row(model, &store, encoders, &suite[..=t], &policy)?;
        matrix.push_row(row)?;
        reports.push(report);
    }
    store.finalize_task(TaskId(1))?;
    Ok(ContinualRun {
        store,
        matrix,
        reports,
        final_traces: Vec::new(),
    })
}

/// Result of a single-row harness (joint training or no training at all).
#[derive(Debug, Clone)]
pub struct BoundRun {
    pub row: Vec<f64>,
    pub report: Option<StageReport>,
}

/// One prompt set trained on the shuffled union of all tasks.
pub fn run_multitask(
    model: &BackboneModel,
    encoders: &GuidanceEncoders,
    suite: &[TaskDataset],
    cfg: &RunConfig,
) -> Result<BoundRun> {
    check_suite(model, suite, cfg)?;
    let mixture = crate::tasks::joint_mixture(suite, cfg.seed)?;
    let mut store = new_store(cfg)?;
    store.add_task(TaskId(1), cfg.seed ^ 0x5e7_0001)?;
    let guidance = encode_all(encoders, &mixture)?;
    let report = optimize_current(
        model,
        &mut store,
        &mixture,
        &guidance,
        cfg,
        TrainPrefix::CurrentOnly,
        TaskId(1),
    )?;
    store.finalize_task(TaskId(1))?;
    let policy = EvalPolicy {
        prefix: EvalPrefix::All,
        k: 1,
        rule: cfg.score_rule(),
    };
    let (row, _) = evaluate_row(model, &store, encoders, suite, &policy)?;
    Ok(BoundRun {
        row,
        report: Some(report),
    })
}

/// The pretrained backbone with an empty prefix.
pub fn run_zeroshot(
    model: &BackboneModel,
    encoders: &GuidanceEncoders,
    suite: &[TaskDataset],
    cfg: &RunConfig,
) -> Result<BoundRun> {
    check_suite(model, suite, cfg)?;
    let store = new_store(cfg)?;
    let policy = EvalPolicy {
        prefix: EvalPrefix::Empty,
        k: 1,
        rule: cfg.score_rule(),
    };
    let (row, _) = evaluate_row(model, &store, encoders, suite, &policy)?;
    Ok(BoundRun { row, report: None })
}

/// Appends stage reports as JSON lines.
pub fn append_run_log(path: &Path, reports: &[StageReport]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in reports {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
