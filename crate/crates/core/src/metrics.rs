//! Segmentation quality metrics: confusion counts, precision/recall,
//! F-measure, intersection-over-union, pixel accuracy, and
//! permutation-matched scoring for multi-phase labelings.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LabelMask;

/// Pixel counts of a binary prediction against a binary truth
/// (label 1 is positive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn empty_prediction(&self) -> bool {
        self.tp + self.fp == 0
    }

    pub fn empty_truth(&self) -> bool {
        self.tp + self.fn_ == 0
    }
}

/// Counts agreements and disagreements between two binary masks.
pub fn confusion(pred: &LabelMask, truth: &LabelMask) -> Result<ConfusionCounts> {
    if pred.labels().dim() != truth.labels().dim() {
        return Err(Error::validation(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.labels().dim(),
            truth.labels().dim()
        )));
    }
    if !pred.is_binary() || !truth.is_binary() {
        return Err(Error::validation("confusion counts need binary masks"));
    }
    let mut c = ConfusionCounts { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&p, &t) in pred.labels().iter().zip(truth.labels().iter()) {
        match (p == 1, t == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    if c.tp + c.fp == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    }
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    }
}

/// `2RP / (R + P)`; an empty prediction or empty truth yields 0 by
/// convention (flagged via [`ConfusionCounts::empty_prediction`] /
/// [`ConfusionCounts::empty_truth`]).
pub fn f_measure(c: &ConfusionCounts) -> f64 {
    let (r, p) = (recall(c), precision(c));
    if r + p == 0.0 {
        0.0
    } else {
        2.0 * r * p / (r + p)
    }
}

/// Foreground intersection over union `TP / (FN + FP + TP)`. When both
/// masks are empty the ratio is 1 by convention.
pub fn miou(c: &ConfusionCounts) -> f64 {
    let denom = c.fn_ + c.fp + c.tp;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    (c.tp + c.tn) as f64 / c.total() as f64
}

/// IoU of one label pair, with the doubly-empty convention of 1.
fn class_iou(pred: &Array2<u8>, truth: &Array2<u8>, p_label: u8, t_label: u8) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let in_p = p == p_label;
        let in_t = t == t_label;
        if in_p && in_t {
            inter += 1;
        }
        if in_p || in_t {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn iou_matrix(pred: &LabelMask, truth: &LabelMask, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| class_iou(pred.labels(), truth.labels(), i as u8, j as u8))
                .collect()
        })
        .collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    heap_permute(&mut cur, n, &mut out);
    out
}

fn heap_permute(arr: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == 1 {
        out.push(arr.clone());
        return;
    }
    for i in 0..k {
        heap_permute(arr, k - 1, out);
        if k % 2 == 0 {
            arr.swap(i, k - 1);
        } else {
            arr.swap(0, k - 1);
        }
    }
}

/// Unsupervised labels are only defined up to permutation: the score is the
/// best mean per-class IoU over all assignments of predicted labels to
/// truth labels. Exhaustive search, so `n <= 8`; use
/// [`matched_multiphase_miou_hungarian`] beyond that.
pub fn matched_multiphase_miou(pred: &LabelMask, truth: &LabelMask, n: usize) -> Result<f64> {
    if n > 8 {
        return Err(Error::validation(
            "exhaustive matching is limited to 8 labels; use the Hungarian variant",
        ));
    }
    check_matched_inputs(pred, truth, n)?;
    let m = iou_matrix(pred, truth, n);
    let mut best = f64::NEG_INFINITY;
    for perm in permutations(n) {
        let score: f64 = (0..n).map(|i| m[i][perm[i]]).sum::<f64>() / n as f64;
        best = best.max(score);
    }
    Ok(best)
}

/// Same objective as [`matched_multiphase_miou`] solved as a linear
/// assignment problem; handles any label count.
pub fn matched_multiphase_miou_hungarian(
    pred: &LabelMask,
    truth: &LabelMask,
    n: usize,
) -> Result<f64> {
    check_matched_inputs(pred, truth, n)?;
    let m = iou_matrix(pred, truth, n);
    // maximize the IoU sum = minimize (1 - IoU)
    let cost: Vec<Vec<f64>> = m
        .iter()
        .map(|row| row.iter().map(|v| 1.0 - v).collect())
        .collect();
    let assignment = hungarian_min(&cost);
    let score: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| m[i][j])
        .sum::<f64>()
        / n as f64;
    Ok(score)
}

fn check_matched_inputs(pred: &LabelMask, truth: &LabelMask, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::validation("need at least 2 labels"));
    }
    if pred.labels().dim() != truth.labels().dim() {
        return Err(Error::validation("mask shapes differ"));
    }
    if pred.labels().iter().any(|&l| l as usize >= n)
        || truth.labels().iter().any(|&l| l as usize >= n)
    {
        return Err(Error::validation("labels exceed the declared count"));
    }
    Ok(())
}

/// Minimum-cost assignment (rows to columns) of a square matrix, O(n^3).
fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // potentials and matching, 1-indexed internally
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// One image's scores, as emitted by batch evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub image: String,
    pub acc: f64,
    pub f: f64,
    pub miou: f64,
}

/// Unweighted means over the rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub count: usize,
    pub mean_acc: f64,
    pub mean_f: f64,
    pub mean_miou: f64,
}

pub fn summarize(rows: &[MetricsRow]) -> MetricsSummary {
    let n = rows.len();
    let inv = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    MetricsSummary {
        count: n,
        mean_acc: rows.iter().map(|r| r.acc).sum::<f64>() * inv,
        mean_f: rows.iter().map(|r| r.f).sum::<f64>() * inv,
        mean_miou: rows.iter().map(|r| r.miou).sum::<f64>() * inv,
    }
}

/// Writes per-image rows as `image,acc,f,miou`.
pub fn write_eval_csv(path: impl AsRef<std::path::Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from("image,acc,f,miou\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.image, r.acc, r.f, r.miou));
    }
    std::fs::write(path.as_ref(), out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(rows: &[&[u8]], n: usize) -> LabelMask {
        let h = rows.len();
        let w = rows[0].len();
        let mut arr = Array2::zeros((h, w));
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                arr[[i, j]] = v;
            }
        }
        LabelMask::new(arr, n).unwrap()
    }

    #[test]
    fn confusion_hand_fixture() {
        // 2x3 masks: pred fg {(0,0),(0,1),(1,0),(1,1)},
        // truth fg {(0,0),(0,1),(1,0),(0,2)}
        let pred = mask_from(&[&[1, 1, 0], &[1, 1, 0]], 2);
        let truth = mask_from(&[&[1, 1, 1], &[1, 0, 0]], 2);
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (3, 1, 1, 1));
        assert!((f_measure(&c) - 0.75).abs() < 1e-15);
        assert!((miou(&c) - 0.6).abs() < 1e-15);
        assert!((accuracy(&c) - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(c.total(), 6);
    }

    #[test]
    fn perfect_and_inverted() {
        let truth = mask_from(&[&[1, 0], &[0, 1]], 2);
        let c = confusion(&truth, &truth).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(f_measure(&c), 1.0);
        assert_eq!(miou(&c), 1.0);
        assert_eq!(accuracy(&c), 1.0);

        let inverted = mask_from(&[&[0, 1], &[1, 0]], 2);
        let c = confusion(&inverted, &truth).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(accuracy(&c), 0.0);
        assert_eq!(miou(&c), 0.0);
        assert_eq!(f_measure(&c), 0.0);
    }

    #[test]
    fn degenerate_conventions() {
        // empty prediction, non-empty truth
        let pred = mask_from(&[&[0, 0]], 2);
        let truth = mask_from(&[&[1, 0]], 2);
        let c = confusion(&pred, &truth).unwrap();
        assert!(c.empty_prediction());
        assert_eq!(f_measure(&c), 0.0);
        assert_eq!(miou(&c), 0.0);
        // both empty
        let both = confusion(&pred, &pred).unwrap();
        assert!(both.empty_truth());
        assert_eq!(miou(&both), 1.0);
        // disjoint non-empty masks
        let a = mask_from(&[&[1, 0]], 2);
        let b = mask_from(&[&[0, 1]], 2);
        assert_eq!(miou(&confusion(&a, &b).unwrap()), 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = mask_from(&[&[1, 0]], 2);
        let b = mask_from(&[&[1], &[0]], 2);
        assert!(confusion(&a, &b).is_err());
    }

    #[test]
    fn f_and_iou_identity() {
        // IoU == F / (2 - F) for any counts with tp+fp+fn > 0
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let c = ConfusionCounts {
                tp: rng.gen_range(0..50),
                fp: rng.gen_range(0..50),
                tn: rng.gen_range(0..50),
                fn_: rng.gen_range(0..50),
            };
            if c.tp + c.fp + c.fn_ == 0 {
                continue;
            }
            let f = f_measure(&c);
            assert!((miou(&c) - f / (2.0 - f)).abs() < 1e-12);
        }
    }

    #[test]
    fn matched_identity_and_cyclic_shift() {
        let truth = mask_from(&[&[0, 0, 1, 1, 2, 2], &[0, 0, 1, 1, 2, 2]], 3);
        assert_eq!(matched_multiphase_miou(&truth, &truth, 3).unwrap(), 1.0);
        let shifted = LabelMask::new(truth.labels().map(|&l| (l + 1) % 3), 3).unwrap();
        assert_eq!(matched_multiphase_miou(&shifted, &truth, 3).unwrap(), 1.0);
    }

    #[test]
    fn matched_half_mislabeled_stripe() {
        // truth: three 2-row bands on a 6x6 grid; the prediction relabels
        // half of the middle band as label 2
        let mut truth = Array2::zeros((6, 6));
        for i in 0..6 {
            for j in 0..6 {
                truth[[i, j]] = (i / 2) as u8;
            }
        }
        let mut pred = truth.clone();
        for j in 0..3 {
            pred[[2, j]] = 2;
            pred[[3, j]] = 2;
        }
        let truth = LabelMask::new(truth, 3).unwrap();
        let pred = LabelMask::new(pred, 3).unwrap();
        // independent brute force over all label bijections
        let mut best: f64 = 0.0;
        for p0 in 0..3u8 {
            for p1 in 0..3u8 {
                for p2 in 0..3u8 {
                    if p0 == p1 || p1 == p2 || p0 == p2 {
                        continue;
                    }
                    let perm = [p0, p1, p2];
                    let mut score = 0.0;
                    for (i, &t) in perm.iter().enumerate() {
                        let mut inter = 0.0;
                        let mut union = 0.0;
                        for (pv, tv) in pred.labels().iter().zip(truth.labels().iter()) {
                            let a = *pv == i as u8;
                            let b = *tv == t;
                            if a && b {
                                inter += 1.0;
                            }
                            if a || b {
                                union += 1.0;
                            }
                        }
                        score += if union == 0.0 { 1.0 } else { inter / union };
                    }
                    best = best.max(score / 3.0);
                }
            }
        }
        let got = matched_multiphase_miou(&pred, &truth, 3).unwrap();
        assert!((got - best).abs() < 1e-12, "{got} vs brute-force {best}");
        assert!(got < 1.0);
    }

    #[test]
    fn matched_rejects_large_label_counts() {
        let m = mask_from(&[&[0, 1]], 2);
        assert!(matched_multiphase_miou(&m, &m, 9).is_err());
    }

    #[test]
    fn hungarian_agrees_with_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 2..=5usize {
            for _ in 0..20 {
                let a = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0..n) as u8);
                let b = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0..n) as u8);
                let pred = LabelMask::new(a, n).unwrap();
                let truth = LabelMask::new(b, n).unwrap();
                let ex = matched_multiphase_miou(&pred, &truth, n).unwrap();
                let hu = matched_multiphase_miou_hungarian(&pred, &truth, n).unwrap();
                assert!((ex - hu).abs() < 1e-12, "n={n}: {ex} vs {hu}");
            }
        }
    }

    #[test]
    fn summary_means() {
        let rows = vec![
            MetricsRow { image: "a".into(), acc: 1.0, f: 0.5, miou: 0.25 },
            MetricsRow { image: "b".into(), acc: 0.0, f: 1.0, miou: 0.75 },
        ];
        let s = summarize(&rows);
        assert_eq!(s.count, 2);
        assert!((s.mean_acc - 0.5).abs() < 1e-15);
        assert!((s.mean_f - 0.75).abs() < 1e-15);
        assert!((s.mean_miou - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(tp in 0u64..40, fp in 0u64..40, tn in 0u64..40, fn_ in 0u64..40) {
            prop_assume!(tp + fp + tn + fn_ > 0);
            let c = ConfusionCounts { tp, fp, tn, fn_ };
            for v in [f_measure(&c), miou(&c), accuracy(&c), precision(&c), recall(&c)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            // F == 1 exactly when fp == fn == 0 (given a non-empty truth)
            if tp > 0 {
                prop_assert_eq!(f_measure(&c) == 1.0, fp == 0 && fn_ == 0);
            }
        }

        #[test]
        fn matched_invariant_under_permutation(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 3usize;
            let a = Array2::from_shape_fn((5, 5), |_| rng.gen_range(0..n) as u8);
            let b = Array2::from_shape_fn((5, 5), |_| rng.gen_range(0..n) as u8);
            let pred = LabelMask::new(a.clone(), n).unwrap();
            let truth = LabelMask::new(b, n).unwrap();
            let base = matched_multiphase_miou(&pred, &truth, n).unwrap();
            let relabeled = LabelMask::new(a.map(|&l| (l + 2) % 3), n).unwrap();
            let shifted = matched_multiphase_miou(&relabeled, &truth, n).unwrap();
            prop_assert!((base - shifted).abs() < 1e-12);
        }
    }
}
