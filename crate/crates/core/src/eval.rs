//! Precision-recall curves, average precision and the micro/macro metrics
//! reported for the coarse and fine levels.
//!
//! Tables are row-major `n × classes` slices. A label counts as positive at
//! `≥ 0.5` and a pair is evaluated when its mask is `≥ 0.5`, so soft labels
//! from mixup or relabeling are binarised here.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{LabelVector, OutputLayout};

/// One operating point of a [`PrCurve`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Points at every distinct score, in descending threshold order.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub positives: usize,
}

fn positive(label: f64) -> bool {
    label >= 0.5
}

fn kept(mask: f64) -> bool {
    mask >= 0.5
}

/// Sweeps the distinct scores from high to low; tied scores enter together.
/// Returns `Ok(None)` when there is no positive label, which makes the class
/// undefined for averaging.
pub fn pr_curve(scores: &[f64], labels: &[f64]) -> Result<Option<PrCurve>> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Eval(format!("non-finite score {s}")));
    }
    let total_pos = labels.iter().filter(|&&y| positive(y)).count();
    if total_pos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positive(labels[order[i]]) {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / total_pos as f64,
        });
    }
    Ok(Some(PrCurve {
        points,
        positives: total_pos,
    }))
}

/// Step-wise area `Σ (Rᵢ − Rᵢ₋₁)·Pᵢ` with `R₀ = 0`.
pub fn auprc(curve: &PrCurve) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for p in &curve.points {
        area += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    area
}

/// Average precision of one score/label column, `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<Option<f64>> {
    Ok(pr_curve(scores, labels)?.map(|c| auprc(&c)))
}

fn check_table(scores: &[f64], labels: &[f64], mask: &[f64], n_classes: usize) -> Result<usize> {
    if n_classes == 0 || scores.len() % n_classes != 0 {
        return Err(Error::Eval(format!("{} scores do not form rows of {n_classes}", scores.len())));
    }
    if labels.len() != scores.len() || mask.len() != scores.len() {
        return Err(Error::Eval(format!(
            "table sizes differ: {} scores, {} labels, {} mask values",
            scores.len(),
            labels.len(),
            mask.len()
        )));
    }
    Ok(scores.len() / n_classes)
}

/// Unmasked `(score, label)` pairs of one class.
fn column(scores: &[f64], labels: &[f64], mask: &[f64], n_classes: usize, class: usize) -> (Vec<f64>, Vec<f64>) {
    let mut s = Vec::new();
    let mut y = Vec::new();
    for i in (class..scores.len()).step_by(n_classes) {
        if kept(mask[i]) {
            s.push(scores[i]);
            y.push(labels[i]);
        }
    }
    (s, y)
}

/// Per-class average precision over unmasked pairs; `None` for classes
/// without a positive.
pub fn class_aps(scores: &[f64], labels: &[f64], mask: &[f64], n_classes: usize) -> Result<Vec<Option<f64>>> {
    check_table(scores, labels, mask, n_classes)?;
    (0..n_classes)
        .map(|c| {
            let (s, y) = column(scores, labels, mask, n_classes, c);
            average_precision(&s, &y)
        })
        .collect()
}

/// Mean AP over the classes that have at least one unmasked positive.
pub fn macro_auprc(scores: &[f64], labels: &[f64], mask: &[f64], n_classes: usize) -> Result<f64> {
    let aps: Vec<f64> = class_aps(scores, labels, mask, n_classes)?.into_iter().flatten().collect();
    if aps.is_empty() {
        return Err(Error::Eval("every class is positive-free".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

fn pooled(scores: &[f64], labels: &[f64], mask: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut s = Vec::new();
    let mut y = Vec::new();
    for i in 0..scores.len() {
        if kept(mask[i]) {
            s.push(scores[i]);
            y.push(labels[i]);
        }
    }
    (s, y)
}

/// AP of all unmasked pairs pooled into one binary problem; `None` when the
/// pool has no positive.
pub fn micro_auprc(scores: &[f64], labels: &[f64], mask: &[f64], n_classes: usize) -> Result<Option<f64>> {
    check_table(scores, labels, mask, n_classes)?;
    let (s, y) = pooled(scores, labels, mask);
    average_precision(&s, &y)
}

/// F1 of pooled pairs with predictions `score ≥ tau`; 0 when P + R = 0.
pub fn micro_f1(scores: &[f64], labels: &[f64], mask: &[f64], n_classes: usize, tau: f64) -> Result<f64> {
    check_table(scores, labels, mask, n_classes)?;
    let (s, y) = pooled(scores, labels, mask);
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&si, &yi) in s.iter().zip(&y) {
        match (si >= tau, positive(yi)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
    Ok(if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub name: String,
    /// `None` when the class has no evaluated positive.
    pub ap: Option<f64>,
}

/// Headline metrics of one level. AUPRC values are `None` when undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub micro_auprc: Option<f64>,
    pub micro_f1: f64,
    pub macro_auprc: Option<f64>,
    pub classes: Vec<ClassAp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: u32,
    pub clips: usize,
    pub f1_threshold: f64,
    pub coarse: LevelMetrics,
    pub fine: LevelMetrics,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// The six headline numbers as `(name, value)`, NaN where undefined.
    pub fn headline(&self) -> [(&'static str, f64); 6] {
        let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
        [
            ("coarse_micro_auprc", v(self.coarse.micro_auprc)),
            ("coarse_micro_f1", self.coarse.micro_f1),
            ("coarse_macro_auprc", v(self.coarse.macro_auprc)),
            ("fine_micro_auprc", v(self.fine.micro_auprc)),
            ("fine_micro_f1", self.fine.micro_f1),
            ("fine_macro_auprc", v(self.fine.macro_auprc)),
        ]
    }
}

fn level(names: &[String], scores: &[f64], labels: &[f64], mask: &[f64], tau: f64) -> Result<LevelMetrics> {
    let n = names.len();
    let aps = class_aps(scores, labels, mask, n)?;
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    Ok(LevelMetrics {
        micro_auprc: micro_auprc(scores, labels, mask, n)?,
        micro_f1: micro_f1(scores, labels, mask, n, tau)?,
        macro_auprc: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        classes: names
            .iter()
            .zip(aps)
            .map(|(name, ap)| ClassAp { name: name.clone(), ap })
            .collect(),
    })
}

/// Scores every clip in `truth` against its row in `predictions`.
///
/// Coarse metrics use the coarse slots; fine metrics use the fine slots with
/// the fine mask applied. Other/unknown slots of System 3 are not scored.
pub fn evaluate(
    layout: &OutputLayout,
    predictions: &[(String, Vec<f64>)],
    truth: &[(String, LabelVector)],
    tau: f64,
) -> Result<EvalReport> {
    let by_id: HashMap<&str, &Vec<f64>> = predictions.iter().map(|(id, p)| (id.as_str(), p)).collect();
    let (cr, fr) = (layout.coarse_range(), layout.fine_range());
    let mut coarse = (Vec::new(), Vec::new(), Vec::new());
    let mut fine = (Vec::new(), Vec::new(), Vec::new());
    for (id, label) in truth {
        let p = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Eval(format!("no prediction for clip {id}")))?;
        if p.len() != layout.dim() {
            return Err(Error::Eval(format!(
                "clip {id}: {} predicted values, layout has {}",
                p.len(),
                layout.dim()
            )));
        }
        coarse.0.extend_from_slice(&p[cr.clone()]);
        coarse.1.extend(label.coarse.iter().map(|&v| v as f64));
        coarse.2.extend(std::iter::repeat(1.0).take(cr.len()));
        fine.0.extend_from_slice(&p[fr.clone()]);
        fine.1.extend(label.fine.iter().map(|&v| v as f64));
        fine.2.extend(label.fine_mask.iter().map(|&v| v as f64));
    }
    let names = layout.names();
    Ok(EvalReport {
        system: layout.system().id(),
        clips: truth.len(),
        f1_threshold: tau,
        coarse: level(&names[cr], &coarse.0, &coarse.1, &coarse.2, tau)?,
        fine: level(&names[fr], &fine.0, &fine.1, &fine.2, tau)?,
    })
}

/// Writes `clip_id` plus one column per layout slot.
pub fn write_predictions(path: impl AsRef<Path>, layout: &OutputLayout, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Eval(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["clip_id".to_string()];
    header.extend(layout.names().iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (id, p) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(p.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a predictions CSV whose columns must match `layout`.
pub fn read_predictions(path: impl AsRef<Path>, layout: &OutputLayout) -> Result<Vec<(String, Vec<f64>)>> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Eval(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let expected: Vec<&str> = std::iter::once("clip_id").chain(layout.names().iter().map(String::as_str)).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Eval(format!(
            "{}: columns do not match the system {} layout ({} slots)",
            path.display(),
            layout.system(),
            layout.dim()
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let id = rec[0].to_string();
        let values = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|_| Error::Eval(format!("clip {id}: bad score {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, values));
    }
    Ok(rows)
}
