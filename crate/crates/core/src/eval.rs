//! Synapse-level precision/recall, threshold sweeps and density estimates.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::match_synapses;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("volume must be positive, got {0} um^3")]
    NonPositiveVolume(f64),
    #[error("recall must lie in (0, 1], got {0}")]
    BadRecall(f64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(precision, recall, F1)`; any empty denominator yields 0.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let (p, r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    (p, r, f1(p, r))
}

/// Harmonic mean of precision and recall (0 when both are 0).
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PRPoint {
    pub fn new(threshold: f64, tp: usize, fp: usize, fn_: usize) -> Self {
        let (precision, recall, f1) = prf(tp, fp, fn_);
        Self { threshold, tp, fp, fn_, precision, recall, f1 }
    }
}

/// A predicted synapse with its voxels and sweep score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSynapse {
    pub id: u32,
    pub voxels: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PRPoint>,
    /// Index of the highest-F1 point (first on ties).
    pub best: usize,
}

impl PrCurve {
    pub fn best_point(&self) -> Option<&PRPoint> {
        self.points.get(self.best)
    }
}

/// Re-filter predictions at each score threshold (`score >= t`), re-match
/// against `gt`, and score. Points come back in threshold order.
pub fn pr_curve(pred: &[ScoredSynapse], gt: &[(u32, Vec<usize>)], thresholds: &[f64], min_overlap: usize) -> PrCurve {
    let points: Vec<PRPoint> = thresholds
        .par_iter()
        .map(|&t| {
            let kept: Vec<(u32, Vec<usize>)> =
                pred.iter().filter(|s| s.score >= t).map(|s| (s.id, s.voxels.clone())).collect();
            let m = match_synapses(&kept, gt, min_overlap);
            PRPoint::new(t, m.pairs.len(), m.unmatched_pred.len(), m.unmatched_gt.len())
        })
        .collect();
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if p.f1 > points[best].f1 {
            best = i;
        }
    }
    PrCurve { points, best }
}

/// Synapses per cubic micrometre, raw and divided by detector recall.
pub fn density(count: usize, volume_um3: f64, recall: f64) -> Result<(f64, f64)> {
    if !(volume_um3 > 0.0) {
        return Err(EvalError::NonPositiveVolume(volume_um3));
    }
    if !(recall > 0.0 && recall <= 1.0) {
        return Err(EvalError::BadRecall(recall));
    }
    let raw = count as f64 / volume_um3;
    Ok((raw, raw / recall))
}

/// Voxel counts of each (predicted, ground-truth) label pair. Zero labels
/// are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overlap(HashMap<(u32, u32), usize>);

impl Overlap {
    pub fn new(pred: &[u32], gt: &[u32]) -> Self {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (&p, &g) in pred.iter().zip(gt) {
            if p != 0 && g != 0 {
                *counts.entry((p, g)).or_default() += 1;
            }
        }
        Self(counts)
    }

    pub fn count(&self, pred: u32, gt: u32) -> usize {
        self.0.get(&(pred, gt)).copied().unwrap_or(0)
    }

    /// Whether predicted `(pre, post)` point the same way as ground-truth
    /// `(gt_pre, gt_post)`: each predicted side covers its own true cell
    /// strictly more than the opposite one.
    pub fn oriented(&self, (pre, post): (u32, u32), (gt_pre, gt_post): (u32, u32)) -> bool {
        self.count(pre, gt_pre) > self.count(pre, gt_post) && self.count(post, gt_post) > self.count(post, gt_pre)
    }
}

/// Area under the ROC curve of 0..=255 scores against a binary mask, ties
/// counted half. `None` when either class is empty.
pub fn auc(scores: &[u8], positive: &[bool]) -> Option<f64> {
    let mut hist = [[0u64; 256]; 2];
    for (&s, &p) in scores.iter().zip(positive) {
        hist[p as usize][s as usize] += 1;
    }
    let (n_neg, n_pos) = (hist[0].iter().sum::<u64>(), hist[1].iter().sum::<u64>());
    if n_neg == 0 || n_pos == 0 {
        return None;
    }
    let (mut below, mut wins) = (0u64, 0.0f64);
    for s in 0..256 {
        wins += hist[1][s] as f64 * (below as f64 + 0.5 * hist[0][s] as f64);
        below += hist[0][s];
    }
    Some(wins / (n_neg as f64 * n_pos as f64))
}

pub fn write_pr_csv(path: impl AsRef<Path>, curve: &PrCurve) -> Result<()> {
    let path = path.as_ref();
    let io = |source| EvalError::Io { path: path.into(), source };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "threshold,tp,fp,fn,precision,recall,f1").map_err(io)?;
    for p in &curve.points {
        writeln!(f, "{},{},{},{},{:.6},{:.6},{:.6}", p.threshold, p.tp, p.fp, p.fn_, p.precision, p.recall, p.f1)
            .map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Best operating point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrSummary {
    pub best_f1: f64,
    pub best_threshold: f64,
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
}

impl PrSummary {
    pub fn from_curve(c: &PrCurve) -> Option<Self> {
        c.best_point().map(|p| Self { best_f1: p.f1, best_threshold: p.threshold, precision: p.precision, recall: p.recall })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prf_examples() {
        assert_eq!(prf(10, 0, 0), (1.0, 1.0, 1.0));
        assert_eq!(prf(0, 0, 0), (0.0, 0.0, 0.0));
        assert!((f1(0.924, 0.782) - 0.847).abs() <= 1e-3);
    }

    #[test]
    fn density_examples() {
        let (raw, corrected) = density(66_162, 95_102.0, 0.782).unwrap();
        assert!((raw - 0.695).abs() <= 1e-3, "{raw}");
        assert!((corrected - 0.889).abs() <= 2e-3, "{corrected}");
        assert_eq!(density(0, 10.0, 0.5).unwrap(), (0.0, 0.0));
        assert!(density(1, 0.0, 1.0).is_err());
        assert!(density(1, 1.0, 0.0).is_err());
    }

    fn syn(id: u32, r: std::ops::Range<usize>, score: f64) -> ScoredSynapse {
        ScoredSynapse { id, voxels: r.collect(), score }
    }

    #[test]
    fn sweep_examples() {
        let gt = vec![(1, (0..10).collect()), (2, (20..30).collect()), (3, (40..50).collect())];
        let pred = vec![syn(1, 0..10, 250.0), syn(2, 20..30, 210.0), syn(3, 60..70, 205.0), syn(4, 40..45, 180.0)];
        let ts: Vec<f64> = (0..=256).step_by(8).map(f64::from).collect();
        let c = pr_curve(&pred, &gt, &ts, 1);
        assert_eq!((c.points[0].tp, c.points[0].fp, c.points[0].fn_), (3, 1, 0));
        assert!(c.points.windows(2).all(|w| w[1].recall <= w[0].recall));
        let best = c.best_point().unwrap();
        assert!(c.points.iter().all(|p| p.f1 <= best.f1));
        assert_eq!(best.f1, prf(3, 1, 0).2);
        assert_eq!(pr_curve(&pred, &[], &ts, 1).points[0].recall, 0.0);
    }

    #[test]
    fn orientation() {
        // predicted 1 covers gt 5, predicted 2 covers gt 7 and part of 5
        let o = Overlap::new(&[1, 1, 1, 2, 2, 2, 0], &[5, 5, 6, 7, 7, 5, 9]);
        assert_eq!((o.count(1, 5), o.count(2, 5), o.count(0, 9)), (2, 1, 0));
        assert!(o.oriented((1, 2), (5, 7)));
        assert!(!o.oriented((2, 1), (5, 7)));
        assert!(!o.oriented((1, 1), (5, 7)));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0, 1, 2, 3], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc(&[3, 2, 1, 0], &[false, false, true, true]), Some(0.0));
        assert_eq!(auc(&[7, 7], &[false, true]), Some(0.5));
        assert_eq!(auc(&[1, 2], &[true, true]), None);
    }

    proptest! {
        #[test]
        fn f1_between_precision_and_recall(tp in 0usize..100, fp in 0usize..100, fn_ in 0usize..100) {
            let (p, r, f) = prf(tp, fp, fn_);
            for v in [p, r, f] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
        }

        #[test]
        fn auc_matches_pairwise_count(v in prop::collection::vec((any::<u8>(), any::<bool>()), 2..80)) {
            let (s, m): (Vec<u8>, Vec<bool>) = v.iter().copied().unzip();
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for &(a, pa) in &v {
                for &(b, pb) in &v {
                    if pa && !pb {
                        pairs += 1.0;
                        wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                    }
                }
            }
            match auc(&s, &m) {
                None => prop_assert_eq!(pairs, 0.0),
                Some(x) => prop_assert!((x - wins / pairs).abs() < 1e-12),
            }
        }

        #[test]
        fn overlap_counts_match_brute_force(pairs in prop::collection::vec((0u32..4, 0u32..4), 0..60)) {
            let (pred, gt): (Vec<u32>, Vec<u32>) = pairs.iter().copied().unzip();
            let o = Overlap::new(&pred, &gt);
            for a in 0..4 {
                for b in 0..4 {
                    let n = if a == 0 || b == 0 { 0 } else { pairs.iter().filter(|&&q| q == (a, b)).count() };
                    prop_assert_eq!(o.count(a, b), n);
                }
            }
            for a in 1..4 {
                for b in 1..4 {
                    prop_assert!(!(o.oriented((a, b), (1, 2)) && o.oriented((a, b), (2, 1))));
                }
            }
        }

        #[test]
        fn density_is_linear(n in 0usize..10_000, v in 1.0f64..1e6) {
            let (a, _) = density(n, v, 1.0).unwrap();
            let (b, _) = density(2 * n, v, 1.0).unwrap();
            prop_assert!((b - 2.0 * a).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}
