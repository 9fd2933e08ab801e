//! Precision/recall over thresholds and the ODS / OIS / AP summary.
//!
//! Empty-set conventions: precision is 1 when there are no predictions,
//! recall is 1 when there is no ground truth, and F is 0 when P + R = 0.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::matching::{match_edges, positives_at, positives_u8, MatchCounts};

/// Evenly spaced thresholds k/(n+1), k = 1..=n (n = 99 gives 0.01..0.99).
pub fn default_thresholds(n: usize) -> Vec<f64> {
    (1..=n).map(|k| k as f64 / (n as f64 + 1.0)).collect()
}

pub fn precision_recall_f(c: &MatchCounts) -> (f64, f64, f64) {
    let p = if c.n_pred == 0 {
        1.0
    } else {
        c.tp_pred as f64 / c.n_pred as f64
    };
    let r = if c.n_gt == 0 {
        1.0
    } else {
        c.tp_gt as f64 / c.n_gt as f64
    };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Per-image counts at every threshold: binarize the thinned prediction at
/// each threshold and match against the ground-truth positives.
pub fn evaluate_image(
    thinned: &Array2<f32>,
    gt: &Array2<u8>,
    thresholds: &[f64],
    max_dist: f64,
) -> Vec<MatchCounts> {
    let gt_pos = positives_u8(gt);
    thresholds
        .iter()
        .map(|&t| {
            let pred_pos = positives_at(thinned, t);
            match_edges(&pred_pos, &gt_pos, max_dist)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImageRecord {
    pub id: String,
    pub best_threshold: f64,
    pub best_f: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypeSummary {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f: Vec<f64>,
    pub ods_threshold: f64,
    pub ods_precision: f64,
    pub ods_recall: f64,
    pub ods: f64,
    pub ois: f64,
    pub ap: f64,
    pub per_image: Vec<PerImageRecord>,
}

/// Aggregate per-image counts into dataset PR curves and the three scalars:
/// ODS (best dataset-wide threshold), OIS (per-image best thresholds, counts
/// re-aggregated) and AP (precision interpolated at 100 recall points,
/// unreachable points counting 0).
pub fn summarize(
    ids: &[String],
    per_image_counts: &[Vec<MatchCounts>],
    thresholds: &[f64],
) -> TypeSummary {
    assert_eq!(ids.len(), per_image_counts.len());
    let nt = thresholds.len();
    let mut agg = vec![MatchCounts::default(); nt];
    for counts in per_image_counts {
        assert_eq!(counts.len(), nt);
        for (a, c) in agg.iter_mut().zip(counts) {
            a.add(c);
        }
    }
    let mut precision = Vec::with_capacity(nt);
    let mut recall = Vec::with_capacity(nt);
    let mut fscore = Vec::with_capacity(nt);
    for c in &agg {
        let (p, r, f) = precision_recall_f(c);
        precision.push(p);
        recall.push(r);
        fscore.push(f);
    }

    // ODS: first threshold attaining the maximum dataset F
    let mut ods_idx = 0;
    for (i, &f) in fscore.iter().enumerate() {
        if f > fscore[ods_idx] {
            ods_idx = i;
        }
    }

    // OIS: each image contributes the counts of its own best-F threshold
    let mut ois_counts = MatchCounts::default();
    let mut per_image = Vec::with_capacity(ids.len());
    for (id, counts) in ids.iter().zip(per_image_counts) {
        let mut best = 0usize;
        let mut best_f = -1.0;
        for (i, c) in counts.iter().enumerate() {
            let (_, _, f) = precision_recall_f(c);
            if f > best_f {
                best_f = f;
                best = i;
            }
        }
        ois_counts.add(&counts[best]);
        per_image.push(PerImageRecord {
            id: id.clone(),
            best_threshold: thresholds[best],
            best_f,
        });
    }
    let (_, _, ois) = precision_recall_f(&ois_counts);

    // AP: interpolated precision at recall samples 0.01..=1.00
    let mut ap = 0.0;
    let n_samples = 100;
    for k in 1..=n_samples {
        let rho = k as f64 / n_samples as f64;
        let mut best_p = 0.0;
        for i in 0..nt {
            if recall[i] + 1e-12 >= rho && precision[i] > best_p {
                best_p = precision[i];
            }
        }
        ap += best_p;
    }
    ap /= n_samples as f64;

    TypeSummary {
        thresholds: thresholds.to_vec(),
        ods_threshold: thresholds.get(ods_idx).copied().unwrap_or(0.0),
        ods_precision: precision.get(ods_idx).copied().unwrap_or(0.0),
        ods_recall: recall.get(ods_idx).copied().unwrap_or(0.0),
        ods: fscore.get(ods_idx).copied().unwrap_or(0.0),
        precision,
        recall,
        f: fscore,
        ois,
        ap,
        per_image,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn thresholds_are_the_percent_grid() {
        let t = default_thresholds(99);
        assert_eq!(t.len(), 99);
        assert!((t[0] - 0.01).abs() < 1e-12);
        assert!((t[98] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let mut gt = Array2::<u8>::zeros((8, 8));
        let mut pred = Array2::<f32>::zeros((8, 8));
        for x in 1..7 {
            gt[[3, x]] = 1;
            pred[[3, x]] = 1.0;
        }
        let thresholds = default_thresholds(9);
        let counts = evaluate_image(&pred, &gt, &thresholds, 1.5);
        for c in &counts {
            let (p, r, f) = precision_recall_f(c);
            assert_eq!((p, r, f), (1.0, 1.0, 1.0));
        }
        let s = summarize(&["a".into()], &[counts], &thresholds);
        assert_eq!((s.ods, s.ois, s.ap), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_predictions_follow_conventions() {
        let mut gt = Array2::<u8>::zeros((4, 4));
        gt[[1, 1]] = 1;
        let pred = Array2::<f32>::zeros((4, 4));
        let thresholds = default_thresholds(5);
        let counts = evaluate_image(&pred, &gt, &thresholds, 1.0);
        for c in &counts {
            let (p, r, f) = precision_recall_f(c);
            assert_eq!(p, 1.0, "precision defaults to 1 with no predictions");
            assert_eq!(r, 0.0);
            assert!((f - 0.0).abs() < 1e-12);
        }
    }

    #[test]
    fn recall_is_non_increasing_in_threshold() {
        let mut state = 7u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u32 << 24) as f32
        };
        for _ in 0..20 {
            let pred = Array2::<f32>::from_shape_fn((10, 10), |_| next());
            let gt = Array2::<u8>::from_shape_fn((10, 10), |_| u8::from(next() > 0.8));
            let thresholds = default_thresholds(19);
            let counts = evaluate_image(&pred, &gt, &thresholds, 1.5);
            let mut prev_r = f64::INFINITY;
            let mut prev_npred = usize::MAX;
            for c in &counts {
                let (_, r, _) = precision_recall_f(c);
                assert!(r <= prev_r + 1e-12);
                assert!(c.n_pred <= prev_npred);
                prev_r = r;
                prev_npred = c.n_pred;
            }
        }
    }

    #[test]
    fn single_image_dataset_has_ods_equal_ois() {
        let mut pred = Array2::<f32>::zeros((6, 6));
        let mut gt = Array2::<u8>::zeros((6, 6));
        for x in 0..6 {
            gt[[2, x]] = 1;
            pred[[2, x]] = 0.7;
            pred[[4, x]] = 0.3; // spurious weaker line
        }
        let thresholds = default_thresholds(9);
        let counts = evaluate_image(&pred, &gt, &thresholds, 1.0);
        let s = summarize(&["only".into()], &[counts], &thresholds);
        assert!((s.ods - s.ois).abs() < 1e-12, "{} vs {}", s.ods, s.ois);
    }
}
