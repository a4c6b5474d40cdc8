//! Accuracy matrix, continual metrics, per-sample routed inference and the
//! similarity / selection reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::error::{Error, Result};
use crate::guidance::{score, GuidanceEncoders, GuidanceVector, ScoreRule};
use crate::prompt_store::PromptStore;
use crate::selection::{assemble_prefix, score_tasks, select_eval, SelectionTrace};
use crate::tasks::{Sample, TaskDataset};
use crate::vocab::{Token, Vocab};
use crate::TaskId;

/// Lower-triangular `A[t][i]`: accuracy on task `i` after stage `t` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub task_names: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(task_names: Vec<String>) -> Self {
        Self {
            task_names,
            rows: Vec::new(),
        }
    }

    pub fn from_rows(task_names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(task_names);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn n_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn n_stages(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.task_names.len() && !self.rows.is_empty()
    }

    /// Appends the next stage's row, which must have exactly one more entry than the last.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let want = self.rows.len() + 1;
        if want > self.task_names.len() {
            return Err(Error::Input(format!(
                "matrix already has {} stages for {} tasks",
                self.rows.len(),
                self.task_names.len()
            )));
        }
        if row.len() != want {
            return Err(Error::Input(format!(
                "stage {want} needs {want} accuracies, got {}",
                row.len()
            )));
        }
        if let Some(v) = row
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 100.0)
        {
            return Err(Error::Input(format!("accuracy {v} outside [0, 100]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// `A[t][i]`, both 1-based.
    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        if i == 0 || i > t {
            return None;
        }
        self.rows.get(t.checked_sub(1)?)?.get(i - 1).copied()
    }

    fn require_complete(&self) -> Result<usize> {
        if !self.is_complete() {
            return Err(Error::Input(format!(
                "accuracy matrix has {} of {} stages",
                self.rows.len(),
                self.task_names.len()
            )));
        }
        Ok(self.task_names.len())
    }

    /// Header of task names, then one line per stage with blanks above the diagonal.
    pub fn to_csv(&self) -> String {
        let mut s = self.task_names.join(",");
        s.push('\n');
        let t = self.task_names.len();
        for row in &self.rows {
            let cells: Vec<String> = (0..t)
                .map(|i| row.get(i).map(|v| format!("{v}")).unwrap_or_default())
                .collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Parses [`Self::to_csv`] output. Rows and columns in errors are 1-based
    /// with the header as row 1.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            row: 1,
            col: 1,
            detail: "empty file".into(),
        })?;
        let names: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
        if names.iter().any(|n| n.is_empty()) {
            return Err(Error::Parse {
                row: 1,
                col: names.iter().position(|n| n.is_empty()).unwrap() + 1,
                detail: "empty task name".into(),
            });
        }
        let mut m = Self::new(names);
        for (idx, line) in lines {
            let row_no = idx + 1;
            let stage = m.rows.len() + 1;
            if stage > m.task_names.len() {
                return Err(Error::Parse {
                    row: row_no,
                    col: 1,
                    detail: format!("more stage rows than the {} tasks", m.task_names.len()),
                });
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() > m.task_names.len() {
                return Err(Error::Parse {
                    row: row_no,
                    col: m.task_names.len() + 1,
                    detail: "more cells than tasks".into(),
                });
            }
            let mut row = Vec::with_capacity(stage);
            for col in 0..m.task_names.len() {
                let cell = cells.get(col).copied().unwrap_or("");
                if col < stage {
                    let v: f64 = cell.parse().map_err(|_| Error::Parse {
                        row: row_no,
                        col: col + 1,
                        detail: format!("`{cell}` is not a number"),
                    })?;
                    if !(0.0..=100.0).contains(&v) {
                        return Err(Error::Parse {
                            row: row_no,
                            col: col + 1,
                            detail: format!("{v} outside [0, 100]"),
                        });
                    }
                    row.push(v);
                } else if !cell.is_empty() {
                    return Err(Error::Parse {
                        row: row_no,
                        col: col + 1,
                        detail: "value above the diagonal".into(),
                    });
                }
            }
            m.rows.push(row);
        }
        Ok(m)
    }
}

/// A per-task or per-stage list with its arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub values: Vec<f64>,
    pub mean: f64,
}

impl Series {
    fn of(values: Vec<f64>) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Self { values, mean }
    }
}

pub fn metric_last(a: &AccuracyMatrix) -> Result<Series> {
    let t = a.require_complete()?;
    Ok(Series::of(a.rows[t - 1].clone()))
}

/// `Avg_i` over the stages after task `i` was learned, for `i < T`.
pub fn metric_avg(a: &AccuracyMatrix) -> Result<Series> {
    let t = a.require_complete()?;
    if t < 2 {
        return Err(Error::UndefinedMetric(
            "Avg needs at least two tasks".into(),
        ));
    }
    let values = (1..t)
        .map(|i| {
            let col: f64 = (i + 1..=t).map(|s| a.rows[s - 1][i - 1]).sum();
            col / (t - i) as f64
        })
        .collect();
    Ok(Series::of(values))
}

/// `B_t` for `t = 2..T`: mean drop from each earlier task's just-learned accuracy.
pub fn metric_bwt(a: &AccuracyMatrix) -> Result<Series> {
    let t = a.require_complete()?;
    if t < 2 {
        return Err(Error::UndefinedMetric(
            "BWT needs at least two tasks".into(),
        ));
    }
    let values = (2..=t)
        .map(|s| {
            let drop: f64 = (1..s)
                .map(|i| a.rows[i - 1][i - 1] - a.rows[s - 1][i - 1])
                .sum();
            drop / (s - 1) as f64
        })
        .collect();
    Ok(Series::of(values))
}

/// `M_t` for `t = 2..T`: mean accuracy over tasks seen by stage `t`.
pub fn metric_mean_acc(a: &AccuracyMatrix) -> Result<Series> {
    let t = a.require_complete()?;
    if t < 2 {
        return Err(Error::UndefinedMetric(
            "mean accuracy needs at least two tasks".into(),
        ));
    }
    let values = (2..=t)
        .map(|s| a.rows[s - 1].iter().sum::<f64>() / s as f64)
        .collect();
    Ok(Series::of(values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task_names: Vec<String>,
    pub last: Series,
    /// Absent for a single-task run.
    pub avg: Option<Series>,
    pub bwt: Option<Series>,
    pub mean_acc: Option<Series>,
}

impl MetricReport {
    pub fn from_matrix(a: &AccuracyMatrix) -> Result<Self> {
        let last = metric_last(a)?;
        let multi = a.n_tasks() >= 2;
        Ok(Self {
            task_names: a.task_names.clone(),
            last,
            avg: if multi { Some(metric_avg(a)?) } else { None },
            bwt: if multi { Some(metric_bwt(a)?) } else { None },
            mean_acc: if multi {
                Some(metric_mean_acc(a)?)
            } else {
                None
            },
        })
    }

    /// `M_T`, or the single accuracy of a one-task run.
    pub fn final_mean_acc(&self) -> f64 {
        self.mean_acc
            .as_ref()
            .and_then(|m| m.values.last().copied())
            .unwrap_or(self.last.mean)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let names = &self.task_names;
        let w = names.iter().map(|n| n.len() + 2).max().unwrap_or(0).max(10);
        let _ = writeln!(
            s,
            "{:<10}{}  mean",
            "",
            names.iter().map(|n| format!("{n:>w$}")).collect::<String>()
        );
        let row = |label: &str, vals: &[Option<f64>], mean: f64| {
            let cells: String = vals
                .iter()
                .map(|v| match v {
                    Some(v) => format!("{v:>w$.2}"),
                    None => format!("{:>w$}", "-"),
                })
                .collect();
            format!("{label:<10}{cells}  {mean:.2}\n")
        };
        s.push_str(&row(
            "Last",
            &self
                .last
                .values
                .iter()
                .map(|&v| Some(v))
                .collect::<Vec<_>>(),
            self.last.mean,
        ));
        if let Some(avg) = &self.avg {
            let mut vals: Vec<Option<f64>> = avg.values.iter().map(|&v| Some(v)).collect();
            vals.push(None);
            s.push_str(&row("Avg", &vals, avg.mean));
        }
        for (label, series) in [("B", &self.bwt), ("M", &self.mean_acc)] {
            if let Some(series) = series {
                let mut vals: Vec<Option<f64>> = vec![None];
                vals.extend(series.values.iter().map(|&v| Some(v)));
                s.push_str(&row(label, &vals, series.mean));
            }
        }
        s
    }
}

/// How the evaluation prefix is formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalPrefix {
    /// Per-sample top-k routing over all trained tasks.
    Selected,
    /// Every trained task's prompts.
    All,
    /// No prompts at all.
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPolicy {
    pub prefix: EvalPrefix,
    pub k: usize,
    pub rule: ScoreRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub traces: Vec<SelectionTrace>,
}

fn normalized(tokens: &[Token]) -> String {
    let text = Vocab::toy().decode(tokens);
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Case- and whitespace-insensitive comparison of decoded answers.
pub fn exact_match(predicted: &[Token], target: &[Token]) -> bool {
    normalized(predicted) == normalized(target)
}

/// `100 · correct / total` for given predictions.
pub fn accuracy_of(predictions: &[Vec<Token>], samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("empty evaluation split".into()));
    }
    if predictions.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(samples)
        .filter(|(p, s)| exact_match(p, s.answer()))
        .count();
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

/// Routed greedy inference over a task's eval split.
pub fn evaluate_task(
    model: &BackboneModel,
    store: &PromptStore,
    encoders: &GuidanceEncoders,
    dataset: &TaskDataset,
    policy: &EvalPolicy,
) -> Result<EvalOutcome> {
    evaluate_samples(model, store, encoders, &dataset.eval, policy)
}

pub fn evaluate_samples(
    model: &BackboneModel,
    store: &PromptStore,
    encoders: &GuidanceEncoders,
    samples: &[Sample],
    policy: &EvalPolicy,
) -> Result<EvalOutcome> {
    if samples.is_empty() {
        return Err(Error::Input("empty evaluation split".into()));
    }
    let vocab_ext = model.extended_output_rows(store.n_prompt_tokens());
    let all_ids: Vec<TaskId> = store.task_ids().collect();
    let fixed_prefix = match policy.prefix {
        EvalPrefix::Selected => None,
        EvalPrefix::All => Some(assemble_prefix(store, &all_ids)?),
        EvalPrefix::Empty => Some(Array2::zeros((0, model.d_model()))),
    };
    if policy.prefix == EvalPrefix::Selected && store.n_completed() == 0 {
        return Err(Error::State("no finalized task to select from".into()));
    }
    let prototypes: Vec<(TaskId, &GuidanceVector)> = store
        .sets()
        .iter()
        .zip(store.cached_prototypes())
        .map(|(s, p)| (s.task_id, p))
        .collect();
    // Cache prefixes per chosen set; there are few distinct sets.
    let mut prefixes: BTreeMap<Vec<TaskId>, Array2<f64>> = BTreeMap::new();
    let mut traces = Vec::new();
    let mut correct = 0;
    for (sample_id, sample) in samples.iter().enumerate() {
        let prefix = match &fixed_prefix {
            Some(p) => p,
            None => {
                let input = encoders.encode(&sample.image, &sample.instruction)?;
                let scores = score_tasks(prototypes.iter().copied(), &input);
                let result = select_eval(&scores, policy.k, &policy.rule)?;
                traces.push(SelectionTrace {
                    sample_id,
                    task_id_true: sample.task_id,
                    chosen_ids: result.chosen.clone(),
                    scores: result.combined_scores,
                });
                if !prefixes.contains_key(&result.chosen) {
                    let p = assemble_prefix(store, &result.chosen)?;
                    prefixes.insert(result.chosen.clone(), p);
                }
                &prefixes[&result.chosen]
            }
        };
        let out = model.generate(
            prefix.view(),
            vocab_ext.view(),
            &sample.image,
            &sample.instruction,
            sample.answer().len() + 1,
        )?;
        if exact_match(&out, sample.answer()) {
            correct += 1;
        }
    }
    Ok(EvalOutcome {
        accuracy: 100.0 * correct as f64 / samples.len() as f64,
        correct,
        total: samples.len(),
        traces,
    })
}

/// Mean image and text guidance of a sample list.
pub fn mean_guidance(
    encoders: &GuidanceEncoders,
    samples: &[Sample],
) -> Result<(GuidanceVector, GuidanceVector)> {
    let encoded = samples
        .iter()
        .map(|s| encoders.encode(&s.image, &s.instruction))
        .collect::<Result<Vec<_>>>()?;
    let img: Vec<&GuidanceVector> = encoded.iter().map(|e| &e.image).collect();
    let txt: Vec<&GuidanceVector> = encoded.iter().map(|e| &e.text).collect();
    Ok((GuidanceVector::mean(&img)?, GuidanceVector::mean(&txt)?))
}

/// Entry `(i, j)`: combined score of task `i`'s cached prototype against task
/// `j`'s mean eval guidance.
pub fn similarity_heatmap(
    store: &PromptStore,
    encoders: &GuidanceEncoders,
    suite: &[TaskDataset],
    rule: &ScoreRule,
) -> Result<Array2<f64>> {
    let t = suite.len();
    if store.n_completed() < t {
        return Err(Error::State(format!(
            "{} of {t} tasks finalized",
            store.n_completed()
        )));
    }
    let means = suite
        .iter()
        .map(|d| mean_guidance(encoders, &d.eval))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Array2::zeros((t, t));
    for i in 0..t {
        let proto = &store.cached_prototypes()[i];
        for (j, (mv, mt)) in means.iter().enumerate() {
            out[[i, j]] = rule.combine(score(proto, mv, mt));
        }
    }
    Ok(out)
}

/// Row `i`: how often each task's prompts were chosen for samples of task `i`,
/// normalized by the number of chosen sets in that row. Tasks without traces
/// keep an all-zero row.
pub fn selection_histogram(traces: &[SelectionTrace], n_tasks: usize) -> Result<Array2<f64>> {
    if traces.is_empty() {
        return Err(Error::Input("no selection traces".into()));
    }
    let mut counts = Array2::<f64>::zeros((n_tasks, n_tasks));
    for tr in traces {
        let row = tr.task_id_true.0 as usize;
        if row == 0 || row > n_tasks {
            return Err(Error::Lookup(tr.task_id_true));
        }
        for id in &tr.chosen_ids {
            let col = id.0 as usize;
            if col == 0 || col > n_tasks {
                return Err(Error::Lookup(*id));
            }
            counts[[row - 1, col - 1]] += 1.0;
        }
    }
    for mut row in counts.rows_mut() {
        let total: f64 = row.sum();
        if total > 0.0 {
            row /= total;
        }
    }
    Ok(counts)
}

/// Fraction of each task's samples whose chosen set contains the true task.
pub fn own_task_rate(traces: &[SelectionTrace], n_tasks: usize) -> Vec<f64> {
    let mut hit = vec![0usize; n_tasks];
    let mut seen = vec![0usize; n_tasks];
    for tr in traces {
        let i = tr.task_id_true.0 as usize;
        if i == 0 || i > n_tasks {
            continue;
        }
        seen[i - 1] += 1;
        if tr.chosen_ids.contains(&tr.task_id_true) {
            hit[i - 1] += 1;
        }
    }
    hit.iter()
        .zip(&seen)
        .map(|(&h, &s)| if s == 0 { 0.0 } else { h as f64 / s as f64 })
        .collect()
}

pub fn matrix_to_csv(m: &Array2<f64>, names: &[String]) -> String {
    let mut s = format!("task,{}\n", names.join(","));
    for (i, row) in m.rows().into_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(
            s,
            "{},{}",
            names.get(i).map(String::as_str).unwrap_or("?"),
            cells.join(",")
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(t: usize, c: f64) -> AccuracyMatrix {
        AccuracyMatrix::from_rows(
            (1..=t).map(|i| format!("t{i}")).collect(),
            (1..=t).map(|s| vec![c; s]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_matrix_metrics() {
        let a = constant(4, 50.0);
        assert_eq!(metric_last(&a).unwrap().mean, 50.0);
        assert!(metric_avg(&a).unwrap().values.iter().all(|&v| v == 50.0));
        assert!(metric_bwt(&a).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(metric_mean_acc(&a)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 50.0));
    }

    #[test]
    fn single_task_matrix() {
        let a = constant(1, 42.5);
        assert_eq!(metric_last(&a).unwrap().mean, 42.5);
        assert!(matches!(metric_avg(&a), Err(Error::UndefinedMetric(_))));
        assert!(matches!(metric_bwt(&a), Err(Error::UndefinedMetric(_))));
        assert!(matches!(
            metric_mean_acc(&a),
            Err(Error::UndefinedMetric(_))
        ));
        let r = MetricReport::from_matrix(&a).unwrap();
        assert!(r.avg.is_none());
        assert_eq!(r.final_mean_acc(), 42.5);
    }

    #[test]
    fn incomplete_matrix_is_rejected() {
        let mut a = AccuracyMatrix::new(vec!["a".into(), "b".into()]);
        a.push_row(vec![10.0]).unwrap();
        assert!(matches!(metric_last(&a), Err(Error::Input(_))));
        assert!(a.push_row(vec![1.0]).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let a = AccuracyMatrix::from_rows(
            vec!["x".into(), "y".into(), "z".into()],
            vec![vec![77.05], vec![70.5, 58.5], vec![68.57, 58.18, 42.26]],
        )
        .unwrap();
        let back = AccuracyMatrix::from_csv(&a.to_csv()).unwrap();
        assert_eq!(back, a);

        let err = AccuracyMatrix::from_csv("a,b\n1.0,\n2.0,oops\n").unwrap_err();
        assert!(
            matches!(err, Error::Parse { row: 3, col: 2, .. }),
            "{err:?}"
        );
        let err = AccuracyMatrix::from_csv("a,b\n1.0,5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, col: 2, .. }));
    }

    #[test]
    fn exact_match_ignores_case_and_spacing() {
        let v = Vocab::toy();
        let ka = v.answer(0, 0, 0);
        assert!(exact_match(&[ka], &[ka]));
        assert!(!exact_match(&[ka, ka], &[ka]));
        assert!(!exact_match(&[], &[ka]));
    }

    #[test]
    fn histogram_rows_are_stochastic() {
        let traces = vec![
            SelectionTrace {
                sample_id: 0,
                task_id_true: TaskId(1),
                chosen_ids: vec![TaskId(1), TaskId(2)],
                scores: BTreeMap::new(),
            },
            SelectionTrace {
                sample_id: 1,
                task_id_true: TaskId(1),
                chosen_ids: vec![TaskId(1), TaskId(3)],
                scores: BTreeMap::new(),
            },
            SelectionTrace {
                sample_id: 2,
                task_id_true: TaskId(2),
                chosen_ids: vec![TaskId(2), TaskId(3)],
                scores: BTreeMap::new(),
            },
        ];
        let h = selection_histogram(&traces, 3).unwrap();
        assert!((h[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((h[[0, 1]] - 0.25).abs() < 1e-12);
        assert!((h.row(1).sum() - 1.0).abs() < 1e-9);
        assert_eq!(h.row(2).sum(), 0.0);
        assert_eq!(own_task_rate(&traces, 3), vec![1.0, 1.0, 0.0]);
        assert!(matches!(selection_histogram(&[], 3), Err(Error::Input(_))));
    }

    #[test]
    fn perfect_single_routing_gives_identity() {
        let traces: Vec<SelectionTrace> = (1..=4)
            .flat_map(|t| {
                (0..5).map(move |i| SelectionTrace {
                    sample_id: i,
                    task_id_true: TaskId(t),
                    chosen_ids: vec![TaskId(t)],
                    scores: BTreeMap::new(),
                })
            })
            .collect();
        assert_eq!(
            selection_histogram(&traces, 4).unwrap(),
            Array2::<f64>::eye(4)
        );
    }

    fn lower_triangle(t: usize) -> impl Strategy<Value = AccuracyMatrix> {
        proptest::collection::vec(0.0f64..=100.0, t * (t + 1) / 2).prop_map(move |flat| {
            let mut rows = Vec::new();
            let mut it = flat.into_iter();
            for s in 1..=t {
                rows.push(it.by_ref().take(s).collect());
            }
            AccuracyMatrix::from_rows((1..=t).map(|i| format!("t{i}")).collect(), rows).unwrap()
        })
    }

    proptest! {
        #[test]
        fn metrics_stay_within_bounds(a in (2usize..=8).prop_flat_map(lower_triangle)) {
            let lo = a.rows().iter().flatten().cloned().fold(f64::INFINITY, f64::min);
            let hi = a.rows().iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let r = MetricReport::from_matrix(&a).unwrap();
            let within = |v: f64| v >= lo - 1e-9 && v <= hi + 1e-9;
            prop_assert!(r.last.values.iter().all(|&v| within(v)));
            prop_assert!(r.avg.as_ref().unwrap().values.iter().all(|&v| within(v)));
            prop_assert!(r.mean_acc.as_ref().unwrap().values.iter().all(|&v| within(v)));
            prop_assert!(r.bwt.as_ref().unwrap().values.iter().all(|&v| (-100.0..=100.0).contains(&v)));
        }

        #[test]
        fn csv_round_trips(a in (1usize..=6).prop_flat_map(lower_triangle)) {
            prop_assert_eq!(AccuracyMatrix::from_csv(&a.to_csv()).unwrap(), a);
        }
    }
}
