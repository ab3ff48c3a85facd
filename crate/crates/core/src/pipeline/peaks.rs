use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub index: usize,
    pub prominence: f64,
}

/// Range-minimum table over a fixed slice.
struct SparseMin {
    levels: Vec<Vec<f64>>,
}

impl SparseMin {
    fn new(values: &[f64]) -> Self {
        let mut levels = vec![values.to_vec()];
        let mut width = 1;
        while 2 * width <= values.len() {
            let prev = levels.last().expect("at least one level");
            let next = (0..=values.len() - 2 * width).map(|i| prev[i].min(prev[i + width])).collect();
            levels.push(next);
            width *= 2;
        }
        SparseMin { levels }
    }

    /// Minimum over `lo..=hi`.
    fn min(&self, lo: usize, hi: usize) -> f64 {
        let level = (usize::BITS - 1 - (hi - lo + 1).leading_zeros()) as usize;
        let row = &self.levels[level];
        row[lo].min(row[hi + 1 - (1 << level)])
    }
}

/// Every strict local maximum with its prominence: the peak height minus
/// the higher of the two lowest points between it and the nearest strictly
/// higher sample on each side (or the series end).
pub fn peak_prominences(series: &[f64]) -> Vec<Peak> {
    let n = series.len();
    if n < 3 {
        return Vec::new();
    }
    let mut prev_higher = vec![None; n];
    let mut stack: Vec<usize> = Vec::new();
    for i in 0..n {
        while stack.last().is_some_and(|&j| series[j] <= series[i]) {
            stack.pop();
        }
        prev_higher[i] = stack.last().copied();
        stack.push(i);
    }
    let mut next_higher = vec![None; n];
    stack.clear();
    for i in (0..n).rev() {
        while stack.last().is_some_and(|&j| series[j] <= series[i]) {
            stack.pop();
        }
        next_higher[i] = stack.last().copied();
        stack.push(i);
    }
    let table = SparseMin::new(series);
    (1..n - 1)
        .filter(|&i| series[i - 1] < series[i] && series[i] > series[i + 1])
        .map(|i| {
            let left = table.min(prev_higher[i].map_or(0, |j| j + 1), i);
            let right = table.min(i, next_higher[i].map_or(n - 1, |j| j - 1));
            Peak {
                index: i,
                prominence: series[i] - left.max(right),
            }
        })
        .collect()
}

/// Candidates in selection order: higher prominence first, earlier index on ties.
pub(crate) fn by_priority(peaks: &mut [Peak]) {
    peaks.sort_by(|a, b| b.prominence.total_cmp(&a.prominence).then(a.index.cmp(&b.index)));
}

/// Peaks with prominence at least `min_prominence`, chosen greedily by
/// prominence so that any two are at least `min_distance` frames apart.
/// Returned in index order.
pub fn detect_peaks(series: &[f64], min_prominence: f64, min_distance: usize) -> Result<Vec<Peak>> {
    if series.is_empty() {
        return Err(Error::Data("peak detection on an empty series".into()));
    }
    if min_distance == 0 {
        return Err(Error::Config("min_distance must be at least 1".into()));
    }
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("angle series at frame {i}")));
    }
    let mut candidates: Vec<Peak> = peak_prominences(series)
        .into_iter()
        .filter(|p| p.prominence >= min_prominence)
        .collect();
    by_priority(&mut candidates);
    let mut kept = BTreeSet::new();
    let mut chosen = Vec::new();
    for p in candidates {
        let below = kept.range(..=p.index).next_back();
        let above = kept.range(p.index..).next();
        let clear = below.map_or(true, |&b| p.index - b >= min_distance) && above.map_or(true, |&a| a - p.index >= min_distance);
        if clear {
            kept.insert(p.index);
            chosen.push(p);
        }
    }
    chosen.sort_by_key(|p| p.index);
    Ok(chosen)
}
