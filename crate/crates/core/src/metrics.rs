//! Segmentation and detection metrics: pixel IoU/F1, object-level Dice,
//! Aggregated Jaccard Index, point-matched precision/recall/F1 and the mean
//! absolute counting error.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::raster::{InstanceMap, PointSet};
use crate::{check_shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelScores {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou: f64,
    pub f1: f64,
}

impl PixelScores {
    /// Both scores are 1 when there is nothing to get wrong (`tp + fp + fn == 0`).
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let (t, p, n) = (tp as f64, fp as f64, fn_ as f64);
        let (f1, iou) = if tp + fp + fn_ == 0 {
            (1.0, 1.0)
        } else {
            (2.0 * t / (2.0 * t + p + n), t / (t + p + n))
        };
        Self {
            tp,
            fp,
            fn_,
            iou,
            f1,
        }
    }
}

pub fn pixel_scores(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<PixelScores> {
    check_shape(gt.dim(), pred.dim())?;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(PixelScores::from_counts(tp, fp, fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectScores {
    pub dice_obj: f64,
    pub aji: f64,
}

/// Pairwise overlap counts between ground-truth and predicted instances.
struct Overlaps {
    gt_area: Vec<u64>,
    pred_area: Vec<u64>,
    /// `[gt][pred]`, zero-based ids
    table: Vec<Vec<u64>>,
}

impl Overlaps {
    fn new(pred: &InstanceMap, gt: &InstanceMap) -> Result<Self> {
        check_shape(gt.dims(), pred.dims())?;
        let (ng, np) = (gt.count(), pred.count());
        let mut table = vec![vec![0u64; np]; ng];
        let mut gt_area = vec![0u64; ng];
        let mut pred_area = vec![0u64; np];
        for (&g, &p) in gt.labels().iter().zip(pred.labels().iter()) {
            if g > 0 {
                gt_area[g as usize - 1] += 1;
            }
            if p > 0 {
                pred_area[p as usize - 1] += 1;
            }
            if g > 0 && p > 0 {
                table[g as usize - 1][p as usize - 1] += 1;
            }
        }
        Ok(Self {
            gt_area,
            pred_area,
            table,
        })
    }

    /// Partner with the largest positive overlap; ties prefer the larger
    /// partner, then the lower id.
    fn best(overlaps: impl Iterator<Item = (usize, u64)>, areas: &[u64]) -> Option<usize> {
        let mut best: Option<(usize, u64)> = None;
        for (j, ov) in overlaps {
            if ov == 0 {
                continue;
            }
            best = match best {
                Some((bj, bov)) if bov > ov || (bov == ov && areas[bj] >= areas[j]) => {
                    Some((bj, bov))
                }
                _ => Some((j, ov)),
            };
        }
        best.map(|(j, _)| j)
    }
}

fn dice(overlap: u64, a: u64, b: u64) -> f64 {
    2.0 * overlap as f64 / (a + b) as f64
}

/// Object-level Dice: each ground-truth object is scored against the
/// prediction overlapping it most and vice versa; each side is weighted by
/// object area share and the two sides are averaged. Unmatched objects score
/// 0. Two empty maps agree perfectly (1.0).
pub fn object_dice(pred: &InstanceMap, gt: &InstanceMap) -> Result<f64> {
    let ov = Overlaps::new(pred, gt)?;
    if ov.gt_area.is_empty() && ov.pred_area.is_empty() {
        return Ok(1.0);
    }
    let total_gt: u64 = ov.gt_area.iter().sum();
    let total_pred: u64 = ov.pred_area.iter().sum();

    let mut gt_side = 0.0;
    for (i, &area) in ov.gt_area.iter().enumerate() {
        if let Some(j) = Overlaps::best(ov.table[i].iter().copied().enumerate(), &ov.pred_area) {
            gt_side += area as f64 * dice(ov.table[i][j], area, ov.pred_area[j]);
        }
    }
    let mut pred_side = 0.0;
    for (j, &area) in ov.pred_area.iter().enumerate() {
        let column = ov.table.iter().map(|row| row[j]).enumerate();
        if let Some(i) = Overlaps::best(column, &ov.gt_area) {
            pred_side += area as f64 * dice(ov.table[i][j], ov.gt_area[i], area);
        }
    }
    let side = |sum: f64, total: u64| if total == 0 { 0.0 } else { sum / total as f64 };
    Ok(0.5 * (side(gt_side, total_gt) + side(pred_side, total_pred)))
}

/// Aggregated Jaccard Index.
///
/// Ground-truth objects are visited in ascending id order; each takes the
/// still-unused prediction with the largest intersection (ties: larger
/// prediction, then lower id). A ground-truth object without an overlapping
/// unused prediction contributes its own area to the denominator. Unused
/// predictions are added to the denominator at the end.
pub fn aji(pred: &InstanceMap, gt: &InstanceMap) -> Result<f64> {
    let ov = Overlaps::new(pred, gt)?;
    if ov.gt_area.is_empty() {
        return Err(Error::InvalidInput(
            "AJI is undefined for a ground truth without instances".into(),
        ));
    }
    let mut used = vec![false; ov.pred_area.len()];
    let (mut inter, mut union) = (0u64, 0u64);
    for (i, &area) in ov.gt_area.iter().enumerate() {
        let candidates = ov.table[i]
            .iter()
            .copied()
            .enumerate()
            .filter(|&(j, _)| !used[j]);
        match Overlaps::best(candidates, &ov.pred_area) {
            Some(j) => {
                used[j] = true;
                let o = ov.table[i][j];
                inter += o;
                union += area + ov.pred_area[j] - o;
            }
            None => union += area,
        }
    }
    union += ov
        .pred_area
        .iter()
        .zip(&used)
        .filter(|(_, &u)| !u)
        .map(|(a, _)| a)
        .sum::<u64>();
    Ok(inter as f64 / union as f64)
}

pub fn object_scores(pred: &InstanceMap, gt: &InstanceMap) -> Result<ObjectScores> {
    Ok(ObjectScores {
        dice_obj: object_dice(pred, gt)?,
        aji: aji(pred, gt)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointMatch {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(pred index, gt index)` pairs
    pub pairs: Vec<(usize, usize)>,
}

/// One-to-one matching maximizing the number of prediction/ground-truth pairs
/// within `radius` (inclusive, Euclidean). Augmenting paths try closer
/// candidates first, so the result is deterministic.
pub fn match_points(pred: &PointSet, gt: &PointSet, radius: f64) -> Result<PointMatch> {
    if !(radius > 0.0) {
        return Err(Error::InvalidInput(format!(
            "match radius must be > 0, got {radius}"
        )));
    }
    let r2 = radius * radius;
    let adjacency: Vec<Vec<usize>> = pred
        .points()
        .iter()
        .map(|p| {
            let mut cand: Vec<(i64, usize)> = gt
                .points()
                .iter()
                .enumerate()
                .map(|(j, g)| (p.dist2(g), j))
                .filter(|&(d, _)| d as f64 <= r2)
                .collect();
            cand.sort_unstable();
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();

    fn augment(
        u: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }

    let mut owner: Vec<Option<usize>> = vec![None; gt.len()];
    for u in 0..pred.len() {
        let mut seen = vec![false; gt.len()];
        augment(u, &adjacency, &mut seen, &mut owner);
    }
    let mut pairs: Vec<(usize, usize)> = owner
        .iter()
        .enumerate()
        .filter_map(|(j, o)| o.map(|i| (i, j)))
        .collect();
    pairs.sort_unstable();
    let tp = pairs.len();
    Ok(PointMatch {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean absolute per-image count error.
    pub mp: f64,
    pub match_radius: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged detection scores over aligned per-image point sets.
pub fn detection_scores(
    pred_sets: &[PointSet],
    gt_sets: &[PointSet],
    radius: f64,
) -> Result<DetectionScores> {
    if pred_sets.len() != gt_sets.len() {
        return Err(Error::InvalidInput(format!(
            "{} prediction sets for {} ground-truth sets",
            pred_sets.len(),
            gt_sets.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut abs_err = 0.0;
    for (p, g) in pred_sets.iter().zip(gt_sets) {
        let m = match_points(p, g, radius)?;
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
        abs_err += (p.len() as f64 - g.len() as f64).abs();
    }
    let mp = if pred_sets.is_empty() {
        0.0
    } else {
        abs_err / pred_sets.len() as f64
    };
    Ok(DetectionScores {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        mp,
        match_radius: radius,
        tp,
        fp,
        fn_,
    })
}
