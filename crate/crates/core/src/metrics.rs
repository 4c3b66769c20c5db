//! Evaluation metrics: binary detection (AUC, EER, ACC), multi-label type
//! classification (mAP, CF1, OF1), box grounding (IoU mean and hit rates),
//! and token grounding (precision/recall/F1).
//!
//! Conventions, fixed here so results are platform-stable:
//! * scores are probabilities in [0,1]; a sample counts as predicted-fake
//!   strictly above the threshold,
//! * ranking ties break by ascending index,
//! * zero-division in any precision/recall/F1 yields 0,
//! * box metrics are computed over whatever subset the caller passes
//!   (evaluation passes the face-manipulated subset) and an empty subset
//!   yields 0 for all three values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full evaluation summary of one checkpoint on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub auc: f64,
    pub eer: f64,
    pub acc: f64,
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
    pub iou_m: f64,
    pub iou50: f64,
    pub iou75: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub samples: usize,
    pub genuine_samples: usize,
    pub face_manipulated_samples: usize,
    pub text_manipulated_samples: usize,
    pub valid_tokens: usize,
}

impl EvalReport {
    /// Every metric must land in [0,1]; catches sign and scaling bugs before
    /// a report is written anywhere.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("auc", self.auc),
            ("eer", self.eer),
            ("acc", self.acc),
            ("map", self.map),
            ("cf1", self.cf1),
            ("of1", self.of1),
            ("iou_m", self.iou_m),
            ("iou50", self.iou50),
            ("iou75", self.iou75),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Numeric(format!("metric {name} = {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

fn check_binary_input(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Validation("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Validation(
            "ranking metrics need at least one sample of each class".into(),
        ));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the Wilcoxon-Mann-Whitney statistic: the
/// probability that a random positive outscores a random negative, ties
/// counting one half. Computed via average ranks so tied groups are exact.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_binary_input(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        // Tied block [i, j): every member gets the average 1-based rank.
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = ((i + 1 + j) as f64) / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let pos_f = pos as f64;
    Ok((rank_sum_pos - pos_f * (pos_f + 1.0) / 2.0) / (pos_f * neg as f64))
}

/// Equal error rate: the common value of false-positive and false-negative
/// rates at their crossing. The sweep classifies fake at score ≥ τ for every
/// distinct score descending (plus the all-genuine endpoint); the crossing is
/// linearly interpolated between the adjacent sweep points.
pub fn eer(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_binary_input(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    // (fpr, fnr) when everything is called genuine, then after each distinct
    // threshold admits its tied block.
    let mut pts = vec![(0.0f64, 1.0f64)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        pts.push((fp as f64 / neg as f64, 1.0 - tp as f64 / pos as f64));
        i = j;
    }
    // fpr − fnr is non-decreasing along the sweep, from −1 to +1.
    for w in pts.windows(2) {
        let (f0, m0) = w[0];
        let (f1, m1) = w[1];
        let d0 = f0 - m0;
        let d1 = f1 - m1;
        if d1 >= 0.0 {
            if d1 == d0 {
                return Ok(f1);
            }
            let alpha = -d0 / (d1 - d0);
            return Ok(f0 + alpha * (f1 - f0));
        }
    }
    unreachable!("sweep always ends at fpr 1, fnr 0");
}

/// Fraction of samples whose thresholded score agrees with the label.
/// Predicted fake strictly above `tau`.
pub fn acc(scores: &[f64], labels: &[u8], tau: f64) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Validation("accuracy needs matched, non-empty inputs".into()));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| (**s > tau) == (l == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

fn f1_from(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn prf1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    (p, r, f1_from(p, r))
}

/// Average precision of one class: precision accumulated at each positive in
/// score-descending order (ties by ascending index), averaged over positives.
fn average_precision(scores: &[f64], gt: &[u8]) -> Option<f64> {
    let positives = gt.iter().filter(|&&g| g == 1).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if gt[idx] == 1 {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Some(ap / positives as f64)
}

/// Multi-label classification metrics over the four manipulation types.
///
/// mAP averages per-class average precision over classes that have at least
/// one positive; CF1 averages per-class F1 at threshold 0.5 over all classes;
/// OF1 pools every (sample, class) decision into one micro F1.
pub fn multilabel_suite(type_scores: &[[f64; 4]], type_gt: &[[f64; 4]]) -> Result<(f64, f64, f64)> {
    if type_scores.len() != type_gt.len() || type_scores.is_empty() {
        return Err(Error::Validation("multilabel inputs must match and be non-empty".into()));
    }
    let n = type_scores.len();
    let mut aps = Vec::new();
    let mut cf1_sum = 0.0;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for c in 0..4 {
        let scores: Vec<f64> = (0..n).map(|i| type_scores[i][c]).collect();
        let gt: Vec<u8> = (0..n)
            .map(|i| {
                let g = type_gt[i][c];
                if g == 1.0 {
                    1
                } else {
                    0
                }
            })
            .collect();
        if let Some(ap) = average_precision(&scores, &gt) {
            aps.push(ap);
        }
        let (mut ctp, mut cfp, mut cfn) = (0usize, 0usize, 0usize);
        for i in 0..n {
            match (scores[i] > 0.5, gt[i] == 1) {
                (true, true) => ctp += 1,
                (true, false) => cfp += 1,
                (false, true) => cfn += 1,
                (false, false) => {}
            }
        }
        let (_, _, class_f1) = prf1(ctp, cfp, cfn);
        cf1_sum += class_f1;
        tp += ctp;
        fp += cfp;
        fn_ += cfn;
    }
    if aps.is_empty() {
        return Err(Error::Validation("no class has a positive sample".into()));
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    let cf1 = cf1_sum / 4.0;
    let (_, _, of1) = prf1(tp, fp, fn_);
    Ok((map, cf1, of1))
}

/// Converts a normalized (cx, cy, w, h) box to corner form (x1, y1, x2, y2).
pub fn cxcywh_to_corner(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

/// Intersection over union of two corner-form boxes. Degenerate union → 0.
pub fn iou_corner(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Mean IoU plus hit rates at 0.5 and 0.75 over paired (cx, cy, w, h) boxes.
/// The caller passes only the samples that carry a ground-truth box; an empty
/// subset reports zeros.
pub fn iou_suite(pred: &[[f64; 4]], gt: &[[f64; 4]]) -> Result<(f64, f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::Validation("box lists must pair up".into()));
    }
    if pred.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let n = pred.len() as f64;
    let (mut sum, mut hit50, mut hit75) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let v = iou_corner(cxcywh_to_corner(*p), cxcywh_to_corner(*g));
        sum += v;
        if v >= 0.5 {
            hit50 += 1.0;
        }
        if v >= 0.75 {
            hit75 += 1.0;
        }
    }
    Ok((sum / n, hit50 / n, hit75 / n))
}

/// Micro precision/recall/F1 over per-sample token flags; only the first
/// `valid[i]` positions of sample i count, padding never enters.
pub fn token_prf1(
    pred: &[Vec<bool>],
    gt: &[Vec<u8>],
    valid: &[usize],
) -> Result<(f64, f64, f64)> {
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(Error::Validation("token metric inputs must pair up".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for ((p, g), &v) in pred.iter().zip(gt).zip(valid) {
        if p.len() < v || g.len() < v {
            return Err(Error::Validation("valid length exceeds token vectors".into()));
        }
        for t in 0..v {
            match (p[t], g[t] == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(prf1(tp, fp, fn_))
}

/// Per-sample (macro) averaging variant, kept as a sensitivity check against
/// the micro aggregation used in reports.
pub fn token_prf1_macro(
    pred: &[Vec<bool>],
    gt: &[Vec<u8>],
    valid: &[usize],
) -> Result<(f64, f64, f64)> {
    if pred.len() != gt.len() || pred.len() != valid.len() || pred.is_empty() {
        return Err(Error::Validation("token metric inputs must pair up".into()));
    }
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for ((p, g), &v) in pred.iter().zip(gt).zip(valid) {
        if p.len() < v || g.len() < v {
            return Err(Error::Validation("valid length exceeds token vectors".into()));
        }
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for t in 0..v {
            match (p[t], g[t] == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let (p_, r_, f_) = prf1(tp, fp, fn_);
        ps += p_;
        rs += r_;
        fs += f_;
    }
    let n = pred.len() as f64;
    Ok((ps / n, rs / n, fs / n))
}
