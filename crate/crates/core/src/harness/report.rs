use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Variant;

/// Counts indexed `[true class][predicted class]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            total => self.trace() as f64 / total as f64,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::Data("confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Header `0..K`, then one row of counts per true class.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record((0..self.classes()).map(|k| k.to_string()))?;
        for row in &self.counts {
            w.write_record(row.iter().map(u64::to_string))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let classes = r.headers()?.len();
        let mut counts = Vec::with_capacity(classes);
        for record in r.records() {
            let row = record?
                .iter()
                .map(|v| v.parse::<u64>().map_err(|_| Error::Format(format!("bad count {v:?}"))))
                .collect::<Result<Vec<_>>>()?;
            counts.push(row);
        }
        if counts.len() != classes {
            return Err(Error::Format(format!("{} rows for {classes} classes", counts.len())));
        }
        Ok(ConfusionMatrix { counts })
    }
}

/// Mean and sample standard deviation of a list of values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Set when only one value was available, in which case `std` is zero.
    pub single_run: bool,
}

pub fn aggregate(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
            n,
            single_run: false,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Summary {
        mean,
        std,
        n,
        single_run: n == 1,
    }
}

/// Everything recorded about one training run; identical inputs give an
/// identical value (timing lives in [`RunTiming`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: f64,
    pub loss_curve: Vec<f64>,
    pub confusion: ConfusionMatrix,
    pub param_count: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_count: usize,
    pub test_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub wall_seconds: f64,
}

/// Per-variant aggregate over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub summary: Summary,
    pub param_count: usize,
    pub loss_curves: Vec<Vec<f64>>,
    pub confusion: ConfusionMatrix,
    pub wall_seconds: f64,
}

impl RunReport {
    /// Combines runs of one variant; runs are ordered by seed.
    pub fn from_runs(runs: &[(RunMetrics, Option<RunTiming>)]) -> Result<Self> {
        let first = &runs.first().ok_or_else(|| Error::Data("no runs to report".into()))?.0;
        let mut sorted: Vec<&(RunMetrics, Option<RunTiming>)> = runs.iter().collect();
        sorted.sort_by_key(|(m, _)| m.seed);
        let mut confusion = ConfusionMatrix::new(first.confusion.classes());
        for (m, _) in &sorted {
            if m.variant != first.variant {
                return Err(Error::Data("runs of different variants in one report".into()));
            }
            confusion.merge(&m.confusion)?;
        }
        let accuracies: Vec<f64> = sorted.iter().map(|(m, _)| m.accuracy).collect();
        Ok(RunReport {
            variant: first.variant,
            seeds: sorted.iter().map(|(m, _)| m.seed).collect(),
            summary: aggregate(&accuracies),
            accuracies,
            param_count: first.param_count,
            loss_curves: sorted.iter().map(|(m, _)| m.loss_curve.clone()).collect(),
            confusion,
            wall_seconds: sorted.iter().filter_map(|(_, t)| t.as_ref().map(|t| t.wall_seconds)).sum(),
        })
    }
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    pub param_count: usize,
}

impl From<&RunReport> for ComparisonRow {
    fn from(r: &RunReport) -> Self {
        ComparisonRow {
            variant: r.variant,
            mean: r.summary.mean,
            std: r.summary.std,
            runs: r.summary.n,
            param_count: r.param_count,
        }
    }
}

/// Groups runs by variant and aggregates each group.
pub fn build_reports(runs: Vec<(RunMetrics, Option<RunTiming>)>) -> Result<Vec<RunReport>> {
    let mut groups: BTreeMap<Variant, Vec<(RunMetrics, Option<RunTiming>)>> = BTreeMap::new();
    for run in runs {
        groups.entry(run.0.variant).or_default().push(run);
    }
    groups.values().map(|g| RunReport::from_runs(g)).collect()
}

pub fn write_table_csv<W: Write>(writer: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table_csv<R: Read>(reader: R) -> Result<Vec<ComparisonRow>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Accuracy as `mean ± std` in percent, one line per variant.
pub fn format_table(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{:<10} {:>16} {:>6} {:>10}\n", "variant", "accuracy (%)", "runs", "params");
    for r in rows {
        let acc = format!("{:.1} ± {:.1}", 100.0 * r.mean, 100.0 * r.std);
        let _ = writeln!(out, "{:<10} {:>16} {:>6} {:>10}", r.variant.as_str(), acc, r.runs, r.param_count);
    }
    out
}
