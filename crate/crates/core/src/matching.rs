//! Bipartite matching between query predictions and target segments, and
//! the compound recognition + localization loss computed over the matched
//! pairs. The localization-only variant drives the class-agnostic decoder
//! warm-up.

use crate::decoder::MaskPrediction;
use crate::error::{Error, Result};
use crate::panoptic::{ClassAgnosticMap, PanopticMap, VOID_ID};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    /// Smoothing constant of the dice loss.
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_cls: 2.0, w_bce: 5.0, w_dice: 5.0, dice_eps: 1.0 }
    }
}

/// Matching between queries and target segments. Every target is assigned
/// to exactly one query; unassigned queries map to the no-object class.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Query index of each target segment.
    pub query_for_segment: Vec<usize>,
    /// Target index of each query, `None` for no-object.
    pub segment_for_query: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl MatchResult {
    /// Trivial matching for an empty target set: all queries no-object.
    pub fn empty(num_queries: usize) -> Self {
        MatchResult {
            query_for_segment: Vec::new(),
            segment_for_query: vec![None; num_queries],
            total_cost: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn new(cls: f64, bce: f64, dice: f64, weights: LossWeights) -> Self {
        LossBreakdown {
            cls,
            bce,
            dice,
            total: weights.w_cls * cls + weights.w_bce * bce + weights.w_dice * dice,
            weights,
        }
    }

    pub fn zero(weights: LossWeights) -> Self {
        LossBreakdown::new(0.0, 0.0, 0.0, weights)
    }
}

/// Target segments flattened for loss computation: binary masks at label
/// resolution with void pixels excluded, plus per-segment classes (dummy
/// zeros for class-agnostic regions).
#[derive(Debug, Clone)]
pub struct SegmentTargets {
    pub classes: Vec<usize>,
    /// `K x (H*W)`, entries in {0, 1}.
    pub masks: Array2<f64>,
    pub mask_areas: Vec<f64>,
    /// `1 x (H*W)` non-void indicator.
    pub valid: Array2<f64>,
    pub num_valid: f64,
    pub height: usize,
    pub width: usize,
}

impl SegmentTargets {
    pub fn from_panoptic(map: &PanopticMap) -> Self {
        let (h, w) = map.ids.dim();
        let ids: Vec<u32> = map.segments.keys().copied().collect();
        let index_of: std::collections::BTreeMap<u32, usize> =
            ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let classes: Vec<usize> = ids.iter().map(|id| map.segments[id].class).collect();
        let k = ids.len();
        let mut masks = Array2::zeros((k, h * w));
        let mut valid = Array2::zeros((1, h * w));
        for (p, &id) in map.ids.iter().enumerate() {
            if id != VOID_ID {
                valid[[0, p]] = 1.0;
                if let Some(&row) = index_of.get(&id) {
                    masks[[row, p]] = 1.0;
                }
            }
        }
        let mask_areas = masks.rows().into_iter().map(|r| r.sum()).collect();
        let num_valid = valid.sum();
        SegmentTargets { classes, masks, mask_areas, valid, num_valid, height: h, width: w }
    }

    pub fn from_regions(map: &ClassAgnosticMap) -> Self {
        let (h, w) = map.ids.dim();
        let ids = map.region_ids();
        let index_of: std::collections::BTreeMap<u32, usize> =
            ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let k = ids.len();
        let mut masks = Array2::zeros((k, h * w));
        let mut valid = Array2::zeros((1, h * w));
        for (p, &id) in map.ids.iter().enumerate() {
            if id != VOID_ID {
                valid[[0, p]] = 1.0;
                masks[[index_of[&id], p]] = 1.0;
            }
        }
        let mask_areas = masks.rows().into_iter().map(|r| r.sum()).collect();
        let num_valid = valid.sum();
        SegmentTargets {
            classes: vec![0; k],
            masks,
            mask_areas,
            valid,
            num_valid,
            height: h,
            width: w,
        }
    }

    pub fn num_segments(&self) -> usize {
        self.classes.len()
    }
}

fn softplus_neg_abs(z: f64) -> f64 {
    (-z.abs()).exp().ln_1p()
}

/// Per-query BCE statistics reused by cost and loss: for query `i`,
/// `pos[i] = sum over valid pixels of (max(z,0) + ln(1+e^-|z|))` and
/// `cross[i][k] = sum over pixels of z * mask_k` so that the mean BCE
/// against mask `k` is `(pos[i] - cross[i][k]) / V`.
fn bce_parts(pred: &MaskPrediction, targets: &SegmentTargets) -> (Vec<f64>, Array2<f64>) {
    let z = &pred.mask_logits;
    let n = z.dim().0;
    let mut pos = vec![0.0; n];
    for (i, row) in z.rows().into_iter().enumerate() {
        let mut acc = 0.0;
        for (j, &zj) in row.iter().enumerate() {
            if targets.valid[[0, j]] != 0.0 {
                acc += zj.max(0.0) + softplus_neg_abs(zj);
            }
        }
        pos[i] = acc;
    }
    let cross = z.dot(&targets.masks.t());
    (pos, cross)
}

fn dice_parts(pred: &MaskPrediction, targets: &SegmentTargets) -> (Vec<f64>, Array2<f64>) {
    let sig_v = &pred.sigma * &targets.valid;
    let inter = sig_v.dot(&targets.masks.t());
    let sums = sig_v.rows().into_iter().map(|r| r.sum()).collect();
    (sums, inter)
}

/// `N x K` matching cost: `-w_cls * P[i][class_k] + w_bce * BCE(sigma_i,
/// M_k) + w_dice * Dice(sigma_i, M_k)`, with BCE averaged over valid pixels
/// and the smooth dice form.
pub fn matching_cost(
    pred: &MaskPrediction,
    gt: &PanopticMap,
    weights: &LossWeights,
) -> Result<Array2<f64>> {
    let targets = SegmentTargets::from_panoptic(gt);
    matching_cost_on_targets(pred, &targets, weights, true)
}

pub fn matching_cost_on_targets(
    pred: &MaskPrediction,
    targets: &SegmentTargets,
    weights: &LossWeights,
    with_class: bool,
) -> Result<Array2<f64>> {
    let n = pred.num_queries();
    let k = targets.num_segments();
    if k > n {
        return Err(Error::InsufficientQueries { targets: k, queries: n });
    }
    if pred.mask_logits.dim().1 != targets.height * targets.width {
        return Err(Error::shape("prediction and target resolutions differ"));
    }
    let (bce_pos, bce_cross) = bce_parts(pred, targets);
    let (sig_sums, inter) = dice_parts(pred, targets);
    let v = targets.num_valid.max(1.0);
    let eps = weights.dice_eps;

    let mut cost = Array2::zeros((n, k));
    for i in 0..n {
        for t in 0..k {
            let bce = (bce_pos[i] - bce_cross[[i, t]]) / v;
            let dice = 1.0 - (2.0 * inter[[i, t]] + eps) / (sig_sums[i] + targets.mask_areas[t] + eps);
            let cls = if with_class { -pred.p[[i, targets.classes[t]]] } else { 0.0 };
            cost[[i, t]] = weights.w_cls * cls + weights.w_bce * bce + weights.w_dice * dice;
        }
    }
    Ok(cost)
}

/// Minimum-cost assignment of targets (columns) to queries (rows) for an
/// `N x K` cost matrix with `K <= N`. Shortest-augmenting-path algorithm
/// with potentials; ties resolve to the lowest query index through the
/// ascending strict-improvement scans.
pub fn hungarian(cost: &Array2<f64>) -> Result<MatchResult> {
    let (n, k) = cost.dim();
    if k > n {
        return Err(Error::InsufficientQueries { targets: k, queries: n });
    }
    for ((r, c), &v) in cost.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteCost { row: r, col: c });
        }
    }
    if k == 0 {
        return Ok(MatchResult::empty(n));
    }

    // rows = targets (1..=k), cols = queries (1..=n), virtual index 0
    let at = |row: usize, col: usize| cost[[col - 1, row - 1]];
    let mut u = vec![0.0f64; k + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // target matched to query col
    let mut way = vec![0usize; n + 1];

    for row in 1..=k {
        matched_row[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0, j) - u[i0] - v[j];
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
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut query_for_segment = vec![usize::MAX; k];
    let mut segment_for_query = vec![None; n];
    for j in 1..=n {
        let row = matched_row[j];
        if row != 0 {
            query_for_segment[row - 1] = j - 1;
            segment_for_query[j - 1] = Some(row - 1);
        }
    }
    let total_cost = query_for_segment
        .iter()
        .enumerate()
        .map(|(t, &q)| cost[[q, t]])
        .sum();
    Ok(MatchResult { query_for_segment, segment_for_query, total_cost })
}

/// Compound loss over a fixed matching: mean cross-entropy over all
/// queries (no-object target for unmatched ones) plus BCE and dice over the
/// matched pairs only. Void pixels never contribute.
pub fn compound_loss(
    pred: &MaskPrediction,
    gt: &PanopticMap,
    match_result: &MatchResult,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let targets = SegmentTargets::from_panoptic(gt);
    compound_loss_on_targets(pred, &targets, match_result, weights, true)
}

pub fn compound_loss_on_targets(
    pred: &MaskPrediction,
    targets: &SegmentTargets,
    match_result: &MatchResult,
    weights: &LossWeights,
    with_class: bool,
) -> Result<LossBreakdown> {
    let n = pred.num_queries();
    let k = targets.num_segments();
    if match_result.segment_for_query.len() != n || match_result.query_for_segment.len() != k {
        return Err(Error::shape("matching does not fit prediction/targets"));
    }
    let no_object = pred.no_object_index();
    let v = targets.num_valid.max(1.0);
    let eps = weights.dice_eps;

    let cls = if with_class {
        let mut acc = 0.0;
        for (i, seg) in match_result.segment_for_query.iter().enumerate() {
            let target = seg.map_or(no_object, |t| targets.classes[t]);
            acc -= pred.p[[i, target]].max(1e-300).ln();
        }
        acc / n as f64
    } else {
        0.0
    };

    let mut bce = 0.0;
    let mut dice = 0.0;
    if k > 0 {
        let (bce_pos, bce_cross) = bce_parts(pred, targets);
        let (sig_sums, inter) = dice_parts(pred, targets);
        for (t, &q) in match_result.query_for_segment.iter().enumerate() {
            bce += (bce_pos[q] - bce_cross[[q, t]]) / v;
            dice += 1.0 - (2.0 * inter[[q, t]] + eps) / (sig_sums[q] + targets.mask_areas[t] + eps);
        }
        bce /= k as f64;
        dice /= k as f64;
    }

    Ok(LossBreakdown::new(cls, bce, dice, *weights))
}

/// Localization-only loss against class-agnostic regions: matching and loss
/// use BCE + dice only, the classification component is exactly zero.
pub fn loc_only_loss(
    pred: &MaskPrediction,
    regions: &ClassAgnosticMap,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let (_, breakdown) = loc_only_match_and_loss(pred, regions, weights)?;
    Ok(breakdown)
}

pub fn loc_only_match_and_loss(
    pred: &MaskPrediction,
    regions: &ClassAgnosticMap,
    weights: &LossWeights,
) -> Result<(MatchResult, LossBreakdown)> {
    let targets = SegmentTargets::from_regions(regions);
    let cost = matching_cost_on_targets(pred, &targets, weights, false)?;
    let match_result = hungarian(&cost)?;
    let breakdown = compound_loss_on_targets(pred, &targets, &match_result, weights, false)?;
    Ok((match_result, breakdown))
}
