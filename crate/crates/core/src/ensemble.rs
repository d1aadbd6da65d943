//! Zero-shot recognition enhancement: pooling frozen features over a mask,
//! classifying the pooled embedding against the text embeddings, and
//! fusing the result with the decoder posterior by a weighted geometric
//! mean.

use crate::embedder::{FeatureMap, TextEmbeddings};
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Mask-aggregated visual embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding {
    pub values: Vec<f64>,
    /// Number of feature cells that contributed.
    pub support: usize,
}

/// How full-resolution masks are reduced to the feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMode {
    /// Cell is on when strictly more than half of its pixels are masked.
    /// The strict majority guarantees that features pooled over the kept
    /// cells carry more own-segment mass than any single contaminant.
    AreaThreshold,
    /// Cell takes the mask value of its top-left pixel.
    Nearest,
}

impl Default for DownsampleMode {
    fn default() -> Self {
        DownsampleMode::AreaThreshold
    }
}

/// Reduces a full-resolution binary mask to the feature grid.
pub fn downsample_mask(
    mask: &[bool],
    height: usize,
    width: usize,
    stride: usize,
    mode: DownsampleMode,
) -> Array2<bool> {
    let gh = height.div_ceil(stride);
    let gw = width.div_ceil(stride);
    let mut out = Array2::from_elem((gh, gw), false);
    for gr in 0..gh {
        for gc in 0..gw {
            let r1 = ((gr + 1) * stride).min(height);
            let c1 = ((gc + 1) * stride).min(width);
            match mode {
                DownsampleMode::AreaThreshold => {
                    let mut on = 0usize;
                    let mut total = 0usize;
                    for r in gr * stride..r1 {
                        for c in gc * stride..c1 {
                            total += 1;
                            if mask[r * width + c] {
                                on += 1;
                            }
                        }
                    }
                    out[[gr, gc]] = 2 * on > total;
                }
                DownsampleMode::Nearest => {
                    out[[gr, gc]] = mask[(gr * stride) * width + (gc * stride)];
                }
            }
        }
    }
    out
}

/// Cells the mask touches at all; fallback reduction for thin structures
/// that vanish under the area threshold.
pub fn touched_cells(mask: &[bool], height: usize, width: usize, stride: usize) -> Array2<bool> {
    let gh = height.div_ceil(stride);
    let gw = width.div_ceil(stride);
    let mut out = Array2::from_elem((gh, gw), false);
    for r in 0..height {
        for c in 0..width {
            if mask[r * width + c] {
                out[[r / stride, c / stride]] = true;
            }
        }
    }
    out
}

/// Averages feature vectors over the active cells of a grid-resolution mask.
pub fn pool_cells(features: &FeatureMap, cells: &Array2<bool>) -> Result<PooledEmbedding> {
    let (gh, gw, d) = features.values.dim();
    if cells.dim() != (gh, gw) {
        return Err(Error::shape(format!(
            "mask grid {:?} does not match feature grid {:?}",
            cells.dim(),
            (gh, gw)
        )));
    }
    let mut acc = vec![0.0; d];
    let mut support = 0usize;
    for gr in 0..gh {
        for gc in 0..gw {
            if cells[[gr, gc]] {
                support += 1;
                for k in 0..d {
                    acc[k] += features.values[[gr, gc, k]];
                }
            }
        }
    }
    if support == 0 {
        return Err(Error::EmptyMask);
    }
    for v in acc.iter_mut() {
        *v /= support as f64;
    }
    Ok(PooledEmbedding { values: acc, support })
}

/// Mask pooling: downsample the full-resolution mask to the feature grid
/// and average the features over it. Fails with [`Error::EmptyMask`] when
/// nothing survives the downsampling; callers choose their fallback.
pub fn mask_pool(
    features: &FeatureMap,
    mask: &[bool],
    height: usize,
    width: usize,
    mode: DownsampleMode,
) -> Result<PooledEmbedding> {
    if mask.len() != height * width {
        return Err(Error::shape("mask length does not match image size"));
    }
    let cells = downsample_mask(mask, height, width, features.stride, mode);
    pool_cells(features, &cells)
}

/// Zero-shot class posterior: softmax over cosine similarities between the
/// pooled embedding and every class text embedding, at temperature `tau`.
pub fn zero_shot_posterior(
    embedding: &PooledEmbedding,
    text: &TextEmbeddings,
    tau: f64,
) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    if embedding.values.len() != text.dim() {
        return Err(Error::shape("embedding dim does not match text embeddings"));
    }
    let norm: f64 = embedding.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 0.0 {
        return Err(Error::ZeroNormEmbedding);
    }
    let c = text.num_classes();
    let mut logits = Vec::with_capacity(c);
    for j in 0..c {
        let dot: f64 = (0..text.dim())
            .map(|k| embedding.values[k] * text.values()[[j, k]])
            .sum();
        logits.push(dot / norm / tau);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
    Ok(logits)
}

const PROB_FLOOR: f64 = 1e-12;

/// Row-wise weighted geometric mean `p_mt^alpha * p_clip^(1-alpha)`,
/// renormalized to the simplex. Computed in log space with a probability
/// floor; the endpoints `alpha = 1` and `alpha = 0` short-circuit to exact
/// copies so downstream consumers reduce bitwise to the unensembled paths.
pub fn geometric_ensemble(
    p_mt: &Array2<f64>,
    p_clip: &Array2<f64>,
    alpha: f64,
) -> Result<Array2<f64>> {
    if p_mt.dim() != p_clip.dim() {
        return Err(Error::shape(format!(
            "posterior shapes differ: {:?} vs {:?}",
            p_mt.dim(),
            p_clip.dim()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("ensembling factor alpha must lie in [0, 1]"));
    }
    if alpha == 1.0 {
        return Ok(p_mt.clone());
    }
    if alpha == 0.0 {
        return Ok(p_clip.clone());
    }
    let mut out = Array2::zeros(p_mt.raw_dim());
    for (i, (mt_row, clip_row)) in p_mt.rows().into_iter().zip(p_clip.rows()).enumerate() {
        let mut sum = 0.0;
        for (j, (&m, &c)) in mt_row.iter().zip(clip_row.iter()).enumerate() {
            let log_m = m.max(PROB_FLOOR).ln();
            let log_c = c.max(PROB_FLOOR).ln();
            let v = (alpha * log_m + (1.0 - alpha) * log_c).exp();
            out[[i, j]] = v;
            sum += v;
        }
        for j in 0..mt_row.len() {
            out[[i, j]] /= sum;
        }
    }
    Ok(out)
}

/// The three aligned posterior sets of one pseudo-label pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSet {
    pub p_mt: Array2<f64>,
    pub p_clip: Array2<f64>,
    pub p_ens: Array2<f64>,
    pub alpha: f64,
}

impl PosteriorSet {
    pub fn validate(&self) -> Result<()> {
        let n = self.p_mt.dim();
        if self.p_clip.dim() != n || self.p_ens.dim() != n {
            return Err(Error::shape("posterior sets must share one shape"));
        }
        for m in [&self.p_mt, &self.p_clip, &self.p_ens] {
            for row in m.rows() {
                if (row.sum() - 1.0).abs() > 1e-9 {
                    return Err(Error::config("posterior row does not sum to 1"));
                }
            }
        }
        Ok(())
    }
}
