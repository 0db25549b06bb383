//! Boundary evaluation: threshold sweeps, ODS / OIS under the thinned (SEval)
//! and raw (CEval) protocols, and Average Crispness.

mod matching;
mod nms;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::EdgeMap;

pub use matching::{match_edges, MatchCounts, MATCHER_VERSION};
pub use nms::{average_crispness, nms, nms_thin, zhang_suen};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    /// Matching radius as a fraction of the image diagonal.
    pub max_dist_frac: f64,
    /// Number of binarization thresholds, `k / (thresholds + 1)`.
    pub thresholds: usize,
    /// Ground-truth pixels at or above this value count as edges.
    pub gt_threshold: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_dist_frac: 0.0075,
            thresholds: 99,
            gt_threshold: 0.5,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_dist_frac > 0.0) {
            return Err(Error::Config("eval.max_dist_frac must be > 0".into()));
        }
        if self.thresholds == 0 {
            return Err(Error::Config("eval.thresholds must be >= 1".into()));
        }
        if !(self.gt_threshold > 0.0 && self.gt_threshold <= 1.0) {
            return Err(Error::Config("eval.gt_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn threshold_values(&self) -> Vec<f64> {
        let n = self.thresholds;
        (1..=n).map(|k| k as f64 / (n + 1) as f64).collect()
    }

    /// Matching radius in pixels for an `h x w` image.
    pub fn max_dist(&self, h: usize, w: usize) -> f64 {
        self.max_dist_frac * ((h * h + w * w) as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Predictions are thinned before matching.
    SEval,
    /// Raw predictions.
    CEval,
}

/// Precision, recall and F from match counts. Empty prediction sets have
/// precision 1 and empty ground truths have recall 1.
pub fn precision_recall_f(c: MatchCounts) -> (f64, f64, f64) {
    let np = c.tp + c.fp;
    let ng = c.tp + c.fn_;
    let p = if np == 0 { 1.0 } else { c.tp as f64 / np as f64 };
    let r = if ng == 0 { 1.0 } else { c.tp as f64 / ng as f64 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl PrPoint {
    fn new(threshold: f64, c: MatchCounts) -> Self {
        let (precision, recall, f) = precision_recall_f(c);
        Self {
            threshold,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision,
            recall,
            f,
        }
    }
}

/// Per-image row of a protocol result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub best_threshold: f64,
    pub best_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub protocol: Protocol,
    pub ods: f64,
    pub ods_threshold: f64,
    /// F of the pooled counts of every image at its own best threshold.
    pub ois: f64,
    /// Dataset-aggregate precision/recall curve.
    pub curve: Vec<PrPoint>,
    pub per_image: Vec<ImageScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ods_seval: f64,
    pub ois_seval: f64,
    pub ods_ceval: f64,
    pub ois_ceval: f64,
    pub mean_ac: f64,
    pub per_image_ac: Vec<f64>,
    pub seval: ProtocolResult,
    pub ceval: ProtocolResult,
    pub matcher: String,
    pub max_dist_frac: f64,
}

fn check_inputs(preds: &[EdgeMap], gts: &[EdgeMap], ids: &[String]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("evaluation needs at least one image"));
    }
    if preds.len() != gts.len() || ids.len() != preds.len() {
        return Err(Error::invalid(format!(
            "{} predictions, {} ground truths, {} ids",
            preds.len(),
            gts.len(),
            ids.len()
        )));
    }
    for ((p, g), id) in preds.iter().zip(gts).zip(ids) {
        if p.dims() != g.dims() {
            return Err(Error::invalid(format!(
                "{id}: prediction {:?} vs ground truth {:?}",
                p.dims(),
                g.dims()
            )));
        }
    }
    Ok(())
}

/// Sweeps thresholds for one protocol.
pub fn evaluate_protocol(
    preds: &[EdgeMap],
    gts: &[EdgeMap],
    ids: &[String],
    cfg: &MatchConfig,
    protocol: Protocol,
) -> Result<ProtocolResult> {
    cfg.validate()?;
    check_inputs(preds, gts, ids)?;
    let thresholds = cfg.threshold_values();
    let mut totals = vec![MatchCounts::default(); thresholds.len()];
    let mut per_image = Vec::with_capacity(preds.len());
    let mut best_counts = MatchCounts::default();
    for ((pred, gt), id) in preds.iter().zip(gts).zip(ids) {
        let (h, w) = gt.dims();
        let pred = match protocol {
            Protocol::SEval => nms_thin(pred),
            Protocol::CEval => pred.clone(),
        };
        let gt_mask = gt.binarize(cfg.gt_threshold as f32);
        let radius = cfg.max_dist(h, w);
        let mut best = (thresholds[0], -1.0);
        let mut at_best = MatchCounts::default();
        for (k, &thr) in thresholds.iter().enumerate() {
            let mask = pred.binarize(thr as f32);
            let c = match_edges(&mask, &gt_mask, h, w, radius);
            totals[k].tp += c.tp;
            totals[k].fp += c.fp;
            totals[k].fn_ += c.fn_;
            let (_, _, f) = precision_recall_f(c);
            if f > best.1 {
                best = (thr, f);
                at_best = c;
            }
        }
        best_counts.tp += at_best.tp;
        best_counts.fp += at_best.fp;
        best_counts.fn_ += at_best.fn_;
        per_image.push(ImageScore {
            id: id.clone(),
            best_threshold: best.0,
            best_f: best.1,
        });
    }
    let curve: Vec<PrPoint> = thresholds
        .iter()
        .zip(&totals)
        .map(|(&t, &c)| PrPoint::new(t, c))
        .collect();
    let (ods_threshold, ods) = curve
        .iter()
        .fold((thresholds[0], -1.0), |acc, p| if p.f > acc.1 { (p.threshold, p.f) } else { acc });
    // counts of every image at its own best threshold, pooled
    let (_, _, ois) = precision_recall_f(best_counts);
    Ok(ProtocolResult {
        protocol,
        ods,
        ods_threshold,
        ois,
        curve,
        per_image,
    })
}

/// Both protocols plus Average Crispness of the raw predictions.
pub fn evaluate(preds: &[EdgeMap], gts: &[EdgeMap], ids: &[String], cfg: &MatchConfig) -> Result<EvalReport> {
    let seval = evaluate_protocol(preds, gts, ids, cfg, Protocol::SEval)?;
    let ceval = evaluate_protocol(preds, gts, ids, cfg, Protocol::CEval)?;
    let per_image_ac: Vec<f64> = preds.iter().map(average_crispness).collect();
    Ok(EvalReport {
        ods_seval: seval.ods,
        ois_seval: seval.ois,
        ods_ceval: ceval.ods,
        ois_ceval: ceval.ois,
        mean_ac: per_image_ac.iter().sum::<f64>() / per_image_ac.len() as f64,
        per_image_ac,
        seval,
        ceval,
        matcher: MATCHER_VERSION.to_string(),
        max_dist_frac: cfg.max_dist_frac,
    })
}

impl EvalReport {
    /// `key = value` summary lines.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "matcher = {}", self.matcher);
        let _ = writeln!(s, "max_dist_frac = {}", self.max_dist_frac);
        let _ = writeln!(s, "images = {}", self.per_image_ac.len());
        let _ = writeln!(s, "ods_seval = {:.6}", self.ods_seval);
        let _ = writeln!(s, "ois_seval = {:.6}", self.ois_seval);
        let _ = writeln!(s, "ods_seval_threshold = {:.4}", self.seval.ods_threshold);
        let _ = writeln!(s, "ods_ceval = {:.6}", self.ods_ceval);
        let _ = writeln!(s, "ois_ceval = {:.6}", self.ois_ceval);
        let _ = writeln!(s, "ods_ceval_threshold = {:.4}", self.ceval.ods_threshold);
        let _ = writeln!(s, "mean_ac = {:.6}", self.mean_ac);
        s
    }

    /// One row per image: id, AC and the best threshold / F of each protocol.
    pub fn per_image_csv(&self) -> String {
        let mut s = String::from("id,ac,seval_threshold,seval_f,ceval_threshold,ceval_f\n");
        for (i, ac) in self.per_image_ac.iter().enumerate() {
            let a = &self.seval.per_image[i];
            let b = &self.ceval.per_image[i];
            let _ = writeln!(
                s,
                "{},{ac:.6},{:.4},{:.6},{:.4},{:.6}",
                a.id, a.best_threshold, a.best_f, b.best_threshold, b.best_f
            );
        }
        s
    }

    /// Writes the summary to `path` and the per-image table next to it as
    /// `<stem>_per_image.csv`. Returns the CSV path.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.summary()).map_err(|e| Error::io(path, e))?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        let csv = path.with_file_name(format!("{stem}_per_image.csv"));
        std::fs::write(&csv, self.per_image_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(csv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("im{i}")).collect()
    }

    fn box_outline(h: usize, w: usize, off: usize) -> EdgeMap {
        EdgeMap::from_fn(h, w, |y, x| {
            let inside = (off..h - off).contains(&y) && (off..w - off).contains(&x);
            let border = y == off || y == h - off - 1 || x == off || x == w - off - 1;
            if inside && border {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts = vec![box_outline(40, 40, 5), box_outline(40, 40, 10)];
        let r = evaluate(&gts, &gts, &ids(2), &MatchConfig::default()).unwrap();
        assert_eq!((r.ods_seval, r.ois_seval, r.ods_ceval, r.ois_ceval), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.mean_ac, 1.0);
    }

    #[test]
    fn single_image_ods_equals_ois() {
        let gt = box_outline(32, 32, 4);
        let pred = EdgeMap::from_fn(32, 32, |y, x| gt.get(y, x) * 0.6 + if x == 2 { 0.3 } else { 0.0 });
        let r = evaluate(&[pred], &[gt], &ids(1), &MatchConfig::default()).unwrap();
        assert_eq!(r.ods_seval, r.ois_seval);
        assert_eq!(r.ods_ceval, r.ois_ceval);
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        let cfg = MatchConfig::default();
        assert!(evaluate(&[], &[], &[], &cfg).is_err());
        assert!(evaluate(&[EdgeMap::zeros(4, 4)], &[EdgeMap::zeros(4, 5)], &ids(1), &cfg).is_err());
    }

    #[test]
    fn f_score_edge_cases() {
        let (p, r, f) = precision_recall_f(MatchCounts { tp: 0, fp: 0, fn_: 5 });
        assert_eq!((p, r, f), (1.0, 0.0, 0.0));
        let (_, _, f) = precision_recall_f(MatchCounts { tp: 3, fp: 1, fn_: 1 });
        assert!((f - 0.75).abs() < 1e-12);
    }
}
