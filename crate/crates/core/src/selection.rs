//! Train-time fusion and inference-time selection of whole prompt sets.

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{score, InputGuidance, Score, ScoreRule};
use crate::prompt_store::PromptStore;
use crate::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Ascending by task id.
    pub chosen: Vec<TaskId>,
    pub combined_scores: BTreeMap<TaskId, f64>,
    pub k: usize,
    pub mode: SelectionMode,
}

/// Scores of every task against one input.
pub type TaskScores = BTreeMap<TaskId, Score>;

/// One logged routing decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub sample_id: usize,
    pub task_id_true: TaskId,
    pub chosen_ids: Vec<TaskId>,
    pub scores: BTreeMap<TaskId, f64>,
}

/// Scores an input against a list of prototypes.
pub fn score_tasks<'a>(
    prototypes: impl IntoIterator<Item = (TaskId, &'a crate::guidance::GuidanceVector)>,
    input: &InputGuidance,
) -> TaskScores {
    prototypes
        .into_iter()
        .map(|(id, p)| (id, score(p, &input.image, &input.text)))
        .collect()
}

fn check_coverage(scores: &TaskScores, last: u32) -> Result<()> {
    for id in 1..=last {
        if !scores.contains_key(&TaskId(id)) {
            return Err(Error::Input(format!("no score for task {id}")));
        }
    }
    if let Some((&extra, _)) = scores.iter().find(|(id, _)| id.0 == 0 || id.0 > last) {
        return Err(Error::Input(format!(
            "score for task {extra} outside the expected range 1..={last}"
        )));
    }
    Ok(())
}

fn combined(scores: &TaskScores, rule: &ScoreRule) -> BTreeMap<TaskId, f64> {
    scores
        .iter()
        .map(|(&id, &s)| (id, rule.combine(s)))
        .collect()
}

/// Highest score first, lower id on ties.
fn ranked(candidates: impl Iterator<Item = (TaskId, f64)>) -> Vec<TaskId> {
    let mut v: Vec<(TaskId, f64)> = candidates.collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(id, _)| id).collect()
}

pub fn select_train(
    scores: &TaskScores,
    current: TaskId,
    k: usize,
    rule: &ScoreRule,
) -> Result<SelectionResult> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    check_coverage(scores, current.0)?;
    let combined_scores = combined(scores, rule);
    let mut chosen = vec![current];
    chosen.extend(
        ranked(
            combined_scores
                .iter()
                .filter(|(&id, _)| id != current)
                .map(|(&id, &s)| (id, s)),
        )
        .into_iter()
        .take(k - 1),
    );
    chosen.sort();
    Ok(SelectionResult {
        chosen,
        combined_scores,
        k,
        mode: SelectionMode::Train,
    })
}

pub fn select_eval(scores: &TaskScores, k: usize, rule: &ScoreRule) -> Result<SelectionResult> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if scores.is_empty() {
        return Err(Error::Input("no tasks to select from".into()));
    }
    check_coverage(scores, scores.len() as u32)?;
    let combined_scores = combined(scores, rule);
    let mut chosen: Vec<TaskId> = ranked(combined_scores.iter().map(|(&id, &s)| (id, s)))
        .into_iter()
        .take(k)
        .collect();
    chosen.sort();
    Ok(SelectionResult {
        chosen,
        combined_scores,
        k,
        mode: SelectionMode::Eval,
    })
}

/// Stacks the chosen sets' embeddings in ascending task order.
pub fn assemble_prefix(store: &PromptStore, chosen: &[TaskId]) -> Result<Array2<f64>> {
    let m = store.prompt_len;
    let mut ids = chosen.to_vec();
    ids.sort();
    let mut out = Array2::zeros((m * ids.len(), store.d_model));
    for (i, id) in ids.iter().enumerate() {
        out.slice_mut(s![i * m..(i + 1) * m, ..])
            .assign(&store.get(*id)?.embeddings);
    }
    Ok(out)
}

/// Prefix tokens the backbone sees at inference for a given pool size.
pub fn prefix_token_count(prompt_len: usize, k: usize, n_tasks: usize) -> usize {
    prompt_len * k.min(n_tasks)
}
