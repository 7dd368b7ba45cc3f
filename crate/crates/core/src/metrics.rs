//! Calibration and discrimination metrics over (confidence, correct) pairs.
//!
//! Bins are equal-width and half-open, `[b/B, (b+1)/B)`, except the last
//! which also contains 1.0.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A predicted confidence and whether the response was actually correct.
pub type Pair = (f64, bool);

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub fraction_of_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ece: f64,
    pub brier: f64,
    pub auroc: f64,
    pub n: usize,
    pub bins: Vec<BinRow>,
}

fn check_pairs(pairs: &[Pair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Domain("metrics need at least one pair".into()));
    }
    if let Some((c, _)) = pairs.iter().find(|(c, _)| !(0.0..=1.0).contains(c)) {
        return Err(Error::Domain(format!("confidence {c} outside [0, 1]")));
    }
    Ok(())
}

pub fn bin_index(confidence: f64, bins: usize) -> usize {
    ((confidence * bins as f64).floor() as usize).min(bins - 1)
}

/// One row per bin, empty bins included.
pub fn reliability_diagram(pairs: &[Pair], bins: usize) -> Result<Vec<BinRow>> {
    check_pairs(pairs)?;
    if bins == 0 {
        return Err(Error::Domain("need at least one bin".into()));
    }
    let mut counts = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for &(c, y) in pairs {
        let b = bin_index(c, bins);
        counts[b] += 1;
        conf_sum[b] += c;
        correct[b] += usize::from(y);
    }
    let total = pairs.len() as f64;
    Ok((0..bins)
        .map(|b| {
            let n = counts[b];
            let (mean_confidence, accuracy) = if n == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / n as f64, correct[b] as f64 / n as f64)
            };
            BinRow {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: n,
                mean_confidence,
                accuracy,
                fraction_of_total: n as f64 / total,
            }
        })
        .collect())
}

/// Expected calibration error recomputed from a bin table.
pub fn ece_from_bins(rows: &[BinRow]) -> f64 {
    let total: usize = rows.iter().map(|r| r.count).sum();
    rows.iter()
        .filter(|r| r.count > 0)
        .map(|r| r.count as f64 / total as f64 * (r.accuracy - r.mean_confidence).abs())
        .sum()
}

/// Expected calibration error and the bin table it was computed from.
pub fn ece(pairs: &[Pair], bins: usize) -> Result<(f64, Vec<BinRow>)> {
    let rows = reliability_diagram(pairs, bins)?;
    Ok((ece_from_bins(&rows), rows))
}

pub fn brier(pairs: &[Pair]) -> Result<f64> {
    check_pairs(pairs)?;
    let sum: f64 = pairs
        .iter()
        .map(|&(c, y)| {
            let d = c - f64::from(u8::from(y));
            d * d
        })
        .sum();
    Ok(sum / pairs.len() as f64)
}

/// Area under the ROC curve via the Mann-Whitney rank-sum with average ranks for ties.
pub fn auroc(pairs: &[Pair]) -> Result<f64> {
    if let Some((c, _)) = pairs.iter().find(|(c, _)| !c.is_finite()) {
        return Err(Error::Domain(format!("non-finite score {c}")));
    }
    let positives = pairs.iter().filter(|p| p.1).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Domain("auroc needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].0.total_cmp(&pairs[b].0));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && pairs[order[end]].0 == pairs[order[start]].0 {
            end += 1;
        }
        // ranks start..end (1-based start+1..=end) share their mean
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| pairs[i].1).count();
        rank_sum_pos += avg_rank * pos_in_group as f64;
        start = end;
    }
    let (np, nn) = (positives as f64, negatives as f64);
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

pub fn evaluate(pairs: &[Pair], bins: usize) -> Result<EvalReport> {
    let (ece, rows) = ece(pairs, bins)?;
    Ok(EvalReport {
        ece,
        brier: brier(pairs)?,
        auroc: auroc(pairs)?,
        n: pairs.len(),
        bins: rows,
    })
}

pub const RELIABILITY_CSV_HEADER: &str = "lower,upper,count,mean_confidence,accuracy,fraction_of_total";

pub fn reliability_csv(rows: &[BinRow]) -> String {
    let mut out = format!("{RELIABILITY_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.lower, r.upper, r.count, r.mean_confidence, r.accuracy, r.fraction_of_total
        );
    }
    out
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("cannot serialize report: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_reliability_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, reliability_csv(&self.bins)).map_err(|e| Error::io(path, e))
    }
}
