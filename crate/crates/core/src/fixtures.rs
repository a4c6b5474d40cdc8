//! Reference matrices shipped with the crate and the summary values they must
//! reproduce. See `fixtures/README.md` for where they come from.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{AccuracyMatrix, MetricReport, Series};

pub const TOLERANCE: f64 = 0.01;

pub const FIXTURES: [(&str, &str); 3] = [
    (
        "modalprompt-reference",
        include_str!("../fixtures/modalprompt-reference.csv"),
    ),
    (
        "moelora-reference",
        include_str!("../fixtures/moelora-reference.csv"),
    ),
    (
        "finetune-reference",
        include_str!("../fixtures/finetune-reference.csv"),
    ),
];

const EXPECTED: &str = include_str!("../fixtures/expected.toml");

pub fn fixture_csv(name: &str) -> Option<&'static str> {
    FIXTURES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, csv)| *csv)
}

pub fn fixture_matrix(name: &str) -> Result<AccuracyMatrix> {
    let csv =
        fixture_csv(name).ok_or_else(|| Error::Input(format!("no fixture named `{name}`")))?;
    AccuracyMatrix::from_csv(csv)
}

/// Fixture name a file path refers to, judged by its file stem.
pub fn fixture_for_path(path: &std::path::Path) -> Option<&'static str> {
    let stem = path.file_stem()?.to_str()?;
    FIXTURES.iter().map(|(n, _)| *n).find(|n| *n == stem)
}

/// Expected values of one fixture keyed `metric.index` / `metric.mean`.
pub fn expected(name: &str) -> Result<BTreeMap<String, f64>> {
    let mut all: BTreeMap<String, BTreeMap<String, f64>> = toml::from_str(EXPECTED)
        .map_err(|e| Error::Config(format!("embedded expected values: {e}")))?;
    all.remove(name)
        .ok_or_else(|| Error::Input(format!("no expected values for `{name}`")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub key: String,
    pub expected: f64,
    pub got: Option<f64>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.got
            .is_some_and(|g| (g - self.expected).abs() <= TOLERANCE + 1e-9)
    }
}

/// Looks up `metric.index` / `metric.mean` in a report. Stage-indexed series
/// (`bwt`, `ma`) start at stage 2.
pub fn report_value(report: &MetricReport, key: &str) -> Option<f64> {
    let (metric, idx) = key.split_once('.')?;
    let (series, first): (&Series, usize) = match metric {
        "last" => (&report.last, 1),
        "avg" => (report.avg.as_ref()?, 1),
        "bwt" => (report.bwt.as_ref()?, 2),
        "ma" => (report.mean_acc.as_ref()?, 2),
        _ => return None,
    };
    if idx == "mean" {
        return Some(series.mean);
    }
    let i: usize = idx.parse().ok()?;
    series.values.get(i.checked_sub(first)?).copied()
}

/// Compares a report against a fixture's expected values.
pub fn check_report(name: &str, report: &MetricReport) -> Result<Vec<Check>> {
    Ok(expected(name)?
        .into_iter()
        .map(|(key, expected)| Check {
            got: report_value(report, &key),
            key,
            expected,
        })
        .collect())
}
