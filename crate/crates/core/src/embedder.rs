//! Frozen stand-in for a vision-language backbone. Produces dense features
//! living in the same space as the class text embeddings: average pooling to
//! a fixed stride followed by a frozen linear map that sends class prototype
//! colors exactly onto their text embeddings. Also provides the synthetic
//! text-embedding generator (orthonormal or correlated class embeddings).

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mathutil;
use crate::rng::{self, salt};
use crate::scene::ClassPrototypes;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Dense embedder output on a strided grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `H' x W' x D` feature values.
    pub values: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn grid_height(&self) -> usize {
        self.values.dim().0
    }

    pub fn grid_width(&self) -> usize {
        self.values.dim().1
    }

    pub fn dim(&self) -> usize {
        self.values.dim().2
    }
}

/// Unit-norm class embeddings from the frozen text side, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    values: Array2<f64>,
}

impl TextEmbeddings {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        for (i, row) in values.rows().into_iter().enumerate() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::config(format!(
                    "text embedding row {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(TextEmbeddings { values })
    }

    pub fn num_classes(&self) -> usize {
        self.values.dim().0
    }

    pub fn dim(&self) -> usize {
        self.values.dim().1
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn gram(&self) -> Array2<f64> {
        self.values.dot(&self.values.t())
    }
}

/// Synthetic class text embeddings.
///
/// Without `rho`, rows form a seeded random orthonormal frame (requires
/// `num_classes <= dim`). With `rho`, all pairs of rows have cosine
/// similarity exactly `rho`, modeling confusable classes (requires
/// `num_classes + 1 <= dim`).
pub fn class_text_embeddings(
    num_classes: usize,
    dim: usize,
    seed: u64,
    rho: Option<f64>,
) -> Result<TextEmbeddings> {
    if num_classes < 1 {
        return Err(Error::config("need at least one class embedding"));
    }
    let mut r = rng::stream(&[seed, salt::TEXT]);
    match rho {
        None => {
            if num_classes > dim {
                return Err(Error::config(format!(
                    "orthonormal embeddings need dim >= classes ({num_classes} > {dim})"
                )));
            }
            let m = mathutil::orthonormal_rows(&mut r, num_classes, dim)?;
            TextEmbeddings::new(m)
        }
        Some(rho) => {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::config("pairwise cosine rho must lie in [0, 1)"));
            }
            if num_classes + 1 > dim {
                return Err(Error::config(format!(
                    "correlated embeddings need dim >= classes + 1 ({num_classes} + 1 > {dim})"
                )));
            }
            let frame = mathutil::orthonormal_rows(&mut r, num_classes + 1, dim)?;
            let shared = frame.row(0).to_owned();
            let mut m = Array2::zeros((num_classes, dim));
            let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
            for c in 0..num_classes {
                for k in 0..dim {
                    m[[c, k]] = a * shared[k] + b * frame[[c + 1, k]];
                }
            }
            TextEmbeddings::new(m)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    /// Joint vision-language dimensionality.
    pub dim: usize,
    /// Spatial stride of the feature grid.
    pub stride: usize,
    /// Seed for the text embeddings (and the scrambled mode).
    pub seed: u64,
    /// Optional pairwise cosine between class embeddings.
    pub rho: Option<f64>,
    /// Replace features with class-agnostic noise; ablation baseline.
    pub scrambled: bool,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig { dim: 16, stride: 4, seed: 0, rho: None, scrambled: false }
    }
}

/// Anything that can embed an image into the joint space. The synthetic
/// embedder below is the bundled implementation; a pretrained model can be
/// plugged in behind the same interface.
pub trait ImageEmbedder {
    fn embed_image(&self, image: &Image) -> FeatureMap;
    fn dim(&self) -> usize;
    fn stride(&self) -> usize;
}

/// Frozen synthetic embedder: average-pool to stride, subtract mid-gray,
/// apply a fixed linear map built so each class prototype lands exactly on
/// its text embedding.
#[derive(Debug, Clone)]
pub struct SyntheticEmbedder {
    projection: Array2<f64>, // D x channels
    inv_amplitude: f64,
    stride: usize,
    dim: usize,
    scrambled: Option<u64>,
}

impl SyntheticEmbedder {
    pub fn new(
        config: &EmbedderConfig,
        prototypes: &ClassPrototypes,
        text: &TextEmbeddings,
    ) -> Result<Self> {
        if text.num_classes() != prototypes.num_classes() {
            return Err(Error::shape(format!(
                "text embeddings cover {} classes but palette has {}",
                text.num_classes(),
                prototypes.num_classes()
            )));
        }
        if text.dim() != config.dim {
            return Err(Error::shape("text embedding dim differs from embedder dim"));
        }
        if config.stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        if config.dim < 4 {
            return Err(Error::config("embedder dim must be at least 4"));
        }
        // projection = E^T F sends prototype offsets beta*f_c onto beta*e_c
        let projection = text.values().t().dot(prototypes.frame());
        Ok(SyntheticEmbedder {
            projection,
            inv_amplitude: 1.0 / prototypes.amplitude(),
            stride: config.stride,
            dim: config.dim,
            scrambled: config.scrambled.then_some(config.seed),
        })
    }
}

impl ImageEmbedder for SyntheticEmbedder {
    fn embed_image(&self, image: &Image) -> FeatureMap {
        let (h, w, channels) = image.pixels.dim();
        let s = self.stride;
        let gh = h.div_ceil(s);
        let gw = w.div_ceil(s);

        if let Some(seed) = self.scrambled {
            // class-agnostic noise field; depends on the grid only
            let mut values = Array3::zeros((gh, gw, self.dim));
            for gr in 0..gh {
                for gc in 0..gw {
                    let mut r = rng::stream(&[seed, salt::EMBED, gr as u64, gc as u64]);
                    let mut v: Vec<f64> =
                        (0..self.dim).map(|_| mathutil::standard_normal(&mut r)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    for x in v.iter_mut() {
                        *x /= n;
                    }
                    for (k, x) in v.iter().enumerate() {
                        values[[gr, gc, k]] = *x;
                    }
                }
            }
            return FeatureMap { values, stride: s };
        }

        let mut values = Array3::zeros((gh, gw, self.dim));
        let mut pooled = vec![0.0; channels];
        for gr in 0..gh {
            for gc in 0..gw {
                let r1 = ((gr + 1) * s).min(h);
                let c1 = ((gc + 1) * s).min(w);
                let count = ((r1 - gr * s) * (c1 - gc * s)) as f64;
                pooled.iter_mut().for_each(|v| *v = 0.0);
                for r in gr * s..r1 {
                    for c in gc * s..c1 {
                        for k in 0..channels {
                            pooled[k] += image.pixels[[r, c, k]];
                        }
                    }
                }
                for k in 0..channels {
                    pooled[k] = (pooled[k] / count - 0.5) * self.inv_amplitude;
                }
                for d in 0..self.dim {
                    let mut acc = 0.0;
                    for k in 0..channels {
                        acc += self.projection[[d, k]] * pooled[k];
                    }
                    values[[gr, gc, d]] = acc;
                }
            }
        }
        FeatureMap { values, stride: s }
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn stride(&self) -> usize {
        self.stride
    }
}

/// Index of the text embedding most cosine-similar to `feature`.
pub fn nearest_class(feature: &[f64], text: &TextEmbeddings) -> usize {
    let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for c in 0..text.num_classes() {
        let sim: f64 = (0..text.dim()).map(|k| feature[k] * text.values()[[c, k]]).sum::<f64>() / norm;
        if sim > best_sim {
            best_sim = sim;
            best = c;
        }
    }
    best
}
