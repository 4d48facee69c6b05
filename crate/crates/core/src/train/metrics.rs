//! Confusion counts, threshold metrics and ROC analysis.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Default, PartialEq, Eq, Debug, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

fn region<'a, T: Real>(
    op: &'static str,
    pred: &'a Tensor<T>,
    label: &'a Tensor<T>,
    mask: Option<&'a Tensor<T>>,
) -> Result<impl Iterator<Item = (f64, bool)> + 'a> {
    label.expect_shape(pred.shape(), op)?;
    if let Some(m) = mask {
        m.expect_shape(pred.shape(), op)?;
    }
    Ok(pred
        .data()
        .iter()
        .zip(label.data())
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m.data()[*i] != T::zero()))
        .map(|(_, (p, y))| (p.as_f64(), *y != T::zero())))
}

/// Counts in-mask pixels; a pixel is predicted positive iff `pred > threshold`.
pub fn confusion<T: Real>(
    pred: &Tensor<T>,
    label: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    threshold: f64,
) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for (p, y) in region("confusion", pred, label, mask)? {
        match (p > threshold, y) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// In-mask `(score, is_positive)` pairs for ROC analysis.
pub fn scored_pixels<T: Real>(
    pred: &Tensor<T>,
    label: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Vec<(f64, bool)>> {
    Ok(region("scored_pixels", pred, label, mask)?.collect())
}

/// Threshold metrics; `None` where the denominator is zero.
#[derive(Clone, Copy, Default, PartialEq, Debug, Serialize)]
pub struct ScalarMetrics {
    pub acc: Option<f64>,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn scalar_metrics(c: &ConfusionCounts) -> ScalarMetrics {
    ScalarMetrics {
        acc: ratio(c.tp + c.tn, c.total()),
        se: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.fp + c.tn),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct RocPoint {
    /// Scores `>= threshold` count as positive; `+inf` for the origin.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, PartialEq, Debug)]
pub struct Roc {
    pub auc: f64,
    pub curve: Vec<RocPoint>,
}

/// ROC curve over every distinct score, from `(0, 0)` to `(1, 1)`, and its
/// trapezoidal area. Returns `None` unless both classes are present. NaN
/// scores are rejected.
pub fn roc_auc(scored: &[(f64, bool)]) -> Result<Option<Roc>> {
    if scored.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::numeric("roc_auc", "NaN score"));
    }
    let pos = scored.iter().filter(|(_, y)| *y).count() as u64;
    let neg = scored.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut curve = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    // Twice the area in units of one positive-negative pair, kept exact.
    let mut doubled: u128 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        let (prev_tp, prev_fp) = (tp, fp);
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        doubled += u128::from(fp - prev_fp) * u128::from(tp + prev_tp);
        curve.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    let auc = doubled as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(Some(Roc { auc, curve }))
}

/// Trapezoidal area under `(fpr, tpr)` points taken in order.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

impl Roc {
    /// CSV with header `threshold,fpr,tpr`; values use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.curve {
            let _ = writeln!(out, "{},{},{}", fmt_threshold(p.threshold), p.fpr, p.tpr);
        }
        out
    }
}

fn fmt_threshold(t: f64) -> String {
    if t == f64::INFINITY {
        "inf".into()
    } else {
        t.to_string()
    }
}

/// Parses a `threshold,fpr,tpr` CSV back into points.
pub fn parse_roc_csv(text: &str) -> Result<Vec<RocPoint>> {
    let mut lines = text.lines();
    if lines.next() != Some("threshold,fpr,tpr") {
        return Err(Error::Config(
            "ROC CSV must start with header threshold,fpr,tpr".into(),
        ));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad ROC CSV row: {line}")))
            };
            match f.as_slice() {
                [t, fpr, tpr] => Ok(RocPoint {
                    threshold: num(t)?,
                    fpr: num(fpr)?,
                    tpr: num(tpr)?,
                }),
                _ => Err(Error::Config(format!("bad ROC CSV row: {line}"))),
            }
        })
        .collect()
}

/// Percentage with two decimals, or `undefined`.
pub fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{:.2}", 100.0 * v))
}
