//! Panoptic and semantic inference from mask predictions, following the
//! standard mask-transformer decoding: per-pixel argmax of query scores,
//! overlap filtering, and same-class stuff merging.

use crate::decoder::MaskPrediction;
use crate::panoptic::{PanopticMap, SegmentInfo, VOID_ID};
use crate::taxonomy::Taxonomy;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceOpts {
    /// A segment is kept only if the pixels it wins cover at least this
    /// fraction of its thresholded mask.
    pub overlap_threshold: f64,
    /// Minimum query score when `reject_low_confidence` is set.
    pub object_score_threshold: f64,
    /// Drop queries with low max-softmax score before decoding.
    pub reject_low_confidence: bool,
}

impl Default for InferenceOpts {
    fn default() -> Self {
        InferenceOpts {
            overlap_threshold: 0.8,
            object_score_threshold: 0.0,
            reject_low_confidence: false,
        }
    }
}

/// Dense per-pixel class map produced by semantic inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    pub classes: Array2<usize>,
}

/// Panoptic decoding of raw predictions: queries whose argmax over the
/// `C+1` classes is no-object are discarded, the rest compete per pixel
/// with score `max_c P[i][c] * sigma_i`.
pub fn panoptic_inference(
    pred: &MaskPrediction,
    taxonomy: &Taxonomy,
    opts: &InferenceOpts,
) -> PanopticMap {
    let no_object = pred.no_object_index();
    let mut kept_rows = Vec::new();
    for i in 0..pred.num_queries() {
        let row = pred.p.row(i);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(j, _)| j)
            .unwrap();
        if argmax != no_object {
            kept_rows.push(i);
        }
    }
    if kept_rows.is_empty() {
        return PanopticMap::empty(pred.height, pred.width);
    }
    let c = pred.num_classes();
    let mut posteriors = Array2::zeros((kept_rows.len(), c));
    let mut sigma = Array2::zeros((kept_rows.len(), pred.sigma.dim().1));
    for (dst, &src) in kept_rows.iter().enumerate() {
        for j in 0..c {
            posteriors[[dst, j]] = pred.p[[src, j]];
        }
        sigma.row_mut(dst).assign(&pred.sigma.row(src));
    }
    panoptic_inference_from_posteriors(
        &posteriors,
        &sigma,
        (pred.height, pred.width),
        taxonomy,
        opts,
    )
}

/// Panoptic decoding from per-query posteriors over the `C` real classes;
/// all rows participate. This is the shared engine behind raw inference
/// and ensembled pseudo-label decoding.
pub fn panoptic_inference_from_posteriors(
    posteriors: &Array2<f64>,
    sigma: &Array2<f64>,
    size: (usize, usize),
    taxonomy: &Taxonomy,
    opts: &InferenceOpts,
) -> PanopticMap {
    let (height, width) = size;
    let hw = height * width;
    let n = posteriors.dim().0;
    debug_assert_eq!(sigma.dim(), (n, hw));
    let mut map = PanopticMap::empty(height, width);
    if n == 0 {
        return map;
    }

    // per-query best class and score; lowest class index wins ties
    let mut best_class = vec![0usize; n];
    let mut best_score = vec![0.0f64; n];
    for i in 0..n {
        let row = posteriors.row(i);
        let (mut cls, mut score) = (0usize, f64::NEG_INFINITY);
        for (j, &v) in row.iter().enumerate() {
            if v > score {
                score = v;
                cls = j;
            }
        }
        best_class[i] = cls;
        best_score[i] = score;
    }

    let active: Vec<usize> = (0..n)
        .filter(|&i| !opts.reject_low_confidence || best_score[i] >= opts.object_score_threshold)
        .collect();
    if active.is_empty() {
        return map;
    }

    // per-pixel winner among active queries; lowest query index wins ties
    let mut winner: Vec<usize> = vec![usize::MAX; hw];
    let mut winner_score = vec![f64::NEG_INFINITY; hw];
    for &i in &active {
        let s = best_score[i];
        let row = sigma.row(i);
        for p in 0..hw {
            let v = s * row[p];
            if v > winner_score[p] {
                winner_score[p] = v;
                winner[p] = i;
            }
        }
    }

    let mut ids = Array2::<u32>::zeros((height, width));
    let mut segments: BTreeMap<u32, SegmentInfo> = BTreeMap::new();
    let mut stuff_segment: BTreeMap<usize, u32> = BTreeMap::new();
    let mut next_id: u32 = 1;

    for &i in &active {
        let row = sigma.row(i);
        let mut won_area = 0usize;
        let mut original_area = 0usize;
        for p in 0..hw {
            if row[p] >= 0.5 {
                original_area += 1;
                if winner[p] == i {
                    won_area += 1;
                }
            }
        }
        if won_area == 0 || original_area == 0 {
            continue;
        }
        if (won_area as f64) / (original_area as f64) < opts.overlap_threshold {
            continue;
        }
        let class = best_class[i];
        let is_thing = taxonomy.is_thing(class);
        let id = if is_thing {
            let id = next_id;
            next_id += 1;
            segments.insert(id, SegmentInfo { class, is_thing });
            id
        } else {
            *stuff_segment.entry(class).or_insert_with(|| {
                let id = next_id;
                next_id += 1;
                segments.insert(id, SegmentInfo { class, is_thing });
                id
            })
        };
        for p in 0..hw {
            if row[p] >= 0.5 && winner[p] == i {
                ids[[p / width, p % width]] = id;
            }
        }
    }

    // drop table entries whose pixels were entirely taken over
    let mut areas: BTreeMap<u32, usize> = BTreeMap::new();
    for &id in ids.iter() {
        if id != VOID_ID {
            *areas.entry(id).or_insert(0) += 1;
        }
    }
    segments.retain(|id, _| areas.contains_key(id));

    map.ids = ids;
    map.segments = segments;
    debug_assert!(map.validate().is_ok());
    map
}

/// Semantic inference: per-pixel argmax over classes of the query-
/// marginalized score `sum_i P[i][c] * sigma_i`, no-object excluded;
/// lowest class index wins ties.
pub fn semantic_inference(pred: &MaskPrediction) -> SemanticMap {
    let c = pred.num_classes();
    let hw = pred.sigma.dim().1;
    // scores = P[:, 0..C]^T . sigma, shape C x HW
    let p_real = pred.p.slice(ndarray::s![.., ..c]);
    let scores = p_real.t().dot(&pred.sigma);
    let mut classes = Array2::zeros((pred.height, pred.width));
    for p in 0..hw {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..c {
            let v = scores[[j, p]];
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        classes[[p / pred.width, p % pred.width]] = best;
    }
    SemanticMap { classes }
}
