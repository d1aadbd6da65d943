//! Procedural panoptic scene synthesis: stuff background bands overlaid with
//! randomly placed thing shapes, painted in class-prototype colors plus
//! optional appearance noise. Deterministic in `(config, seed)`.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mathutil;
use crate::panoptic::{PanopticMap, SegmentInfo, VOID_ID};
use crate::rng::{self, salt};
use crate::taxonomy::Taxonomy;
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Class sampling distribution over class indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ClassWeights {
    /// Every class equally likely.
    Uniform,
    /// Weight of class `c` proportional to `ratio^c`; small ratios give a
    /// pronounced long tail over high class indices.
    Geometric { ratio: f64 },
    /// Explicit per-class weights.
    Explicit(Vec<f64>),
}

impl ClassWeights {
    pub fn resolve(&self, num_classes: usize) -> Result<Vec<f64>> {
        let weights = match self {
            ClassWeights::Uniform => vec![1.0; num_classes],
            ClassWeights::Geometric { ratio } => {
                if !(*ratio > 0.0 && *ratio <= 1.0) {
                    return Err(Error::config("geometric class-weight ratio must be in (0, 1]"));
                }
                (0..num_classes).map(|c| ratio.powi(c as i32)).collect()
            }
            ClassWeights::Explicit(w) => {
                if w.len() != num_classes {
                    return Err(Error::config("explicit class weights length mismatch"));
                }
                w.clone()
            }
        };
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::config("every class needs a positive sampling weight"));
        }
        Ok(weights)
    }
}

/// Which thing silhouettes the generator may draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeSet {
    /// Rectangles, ellipses and triangles.
    All,
    /// Rectangles only; areas vary much less, which tightens statistical
    /// checks on class frequencies.
    Rectangles,
}

/// Geometry and appearance parameters of the synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_things: usize,
    pub num_stuff: usize,
    /// Image channel count; defaults to the class count so prototypes can be
    /// mutually orthogonal.
    pub channels: Option<usize>,
    pub class_weights: ClassWeights,
    /// Std-dev of iid Gaussian appearance noise added per pixel channel.
    pub appearance_noise: f64,
    /// Amplitude of the prototype offsets around mid-gray.
    pub prototype_scale: f64,
    /// Seed of the frozen class palette (shared with the embedder).
    pub palette_seed: u64,
    pub min_things: usize,
    pub max_things: usize,
    pub min_thing_size: usize,
    pub max_thing_size: usize,
    pub max_stuff_layers: usize,
    pub min_segment_area: usize,
    pub shapes: ShapeSet,
    /// When false, thing bounding boxes are rejection-sampled to be
    /// disjoint, so no segment is reduced to a sliver by occlusion.
    pub allow_overlap: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            num_things: 7,
            num_stuff: 5,
            channels: None,
            class_weights: ClassWeights::Uniform,
            appearance_noise: 0.0,
            prototype_scale: 0.35,
            palette_seed: 0,
            min_things: 2,
            max_things: 5,
            min_thing_size: 10,
            max_thing_size: 26,
            max_stuff_layers: 2,
            min_segment_area: 8,
            shapes: ShapeSet::All,
            allow_overlap: true,
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.num_things + self.num_stuff
    }

    pub fn channel_count(&self) -> usize {
        self.channels.unwrap_or_else(|| self.num_classes())
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        Taxonomy::synthetic(self.num_things, self.num_stuff)
    }

    pub fn prototypes(&self) -> Result<ClassPrototypes> {
        ClassPrototypes::new(
            self.num_classes(),
            self.channel_count(),
            self.prototype_scale,
            self.palette_seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::config("scene dimensions must be at least 16x16"));
        }
        if self.num_classes() < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.num_stuff == 0 {
            return Err(Error::config("need at least one stuff class for the background"));
        }
        if self.min_segment_area == 0 || self.min_segment_area > self.height * self.width {
            return Err(Error::config(format!(
                "min segment area {} infeasible for {}x{} scene",
                self.min_segment_area, self.height, self.width
            )));
        }
        if self.min_things > self.max_things {
            return Err(Error::config("min_things exceeds max_things"));
        }
        if self.min_thing_size < 2 || self.min_thing_size > self.max_thing_size {
            return Err(Error::config("invalid thing size range"));
        }
        if self.max_thing_size >= self.height.min(self.width) {
            return Err(Error::config("max thing size must be smaller than the scene"));
        }
        if self.appearance_noise < 0.0 {
            return Err(Error::config("appearance noise must be nonnegative"));
        }
        if self.max_stuff_layers == 0 {
            return Err(Error::config("need at least one stuff layer"));
        }
        self.class_weights.resolve(self.num_classes())?;
        self.prototypes()?;
        Ok(())
    }
}

/// Frozen class palette: each class gets a prototype color
/// `0.5 + amplitude * q_c` where the `q_c` are orthonormal, so distinct
/// classes are maximally separated and a linear map can send them onto
/// arbitrary targets.
#[derive(Debug, Clone)]
pub struct ClassPrototypes {
    frame: Array2<f64>, // C x channels, orthonormal rows
    amplitude: f64,
}

impl ClassPrototypes {
    pub fn new(num_classes: usize, channels: usize, scale: f64, seed: u64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::config("prototype scale must be positive"));
        }
        let mut r = rng::stream(&[seed, salt::SCENE, 0x50_41_4c]);
        let frame = mathutil::orthonormal_rows(&mut r, num_classes, channels).map_err(|_| {
            Error::config(format!(
                "channel count {channels} too small for {num_classes} orthogonal prototypes"
            ))
        })?;
        let max_entry = frame.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale * max_entry > 0.5 {
            return Err(Error::config(format!(
                "prototype scale {scale} pushes colors outside [0,1] (max frame entry {max_entry:.3})"
            )));
        }
        Ok(ClassPrototypes { frame, amplitude: scale })
    }

    pub fn num_classes(&self) -> usize {
        self.frame.dim().0
    }

    pub fn channels(&self) -> usize {
        self.frame.dim().1
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Orthonormal offset directions, one row per class.
    pub fn frame(&self) -> &Array2<f64> {
        &self.frame
    }

    /// Prototype color of a class.
    pub fn color(&self, class: usize) -> Vec<f64> {
        (0..self.channels())
            .map(|k| 0.5 + self.amplitude * self.frame[[class, k]])
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    Triangle,
}

/// Generates one scene. Deterministic in `(config, seed)`; layout draws and
/// appearance-noise draws come from separate streams so the same seed yields
/// the same geometry at every noise level.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<(Image, PanopticMap)> {
    config.validate()?;
    let taxonomy = config.taxonomy()?;
    let prototypes = config.prototypes()?;
    let weights = config.class_weights.resolve(config.num_classes())?;

    let mut layout = rng::stream(&[config.palette_seed, salt::SCENE, seed, 0]);
    let mut noise = rng::stream(&[config.palette_seed, salt::SCENE, seed, 1]);

    let (h, w) = (config.height, config.width);
    let mut ids: Array2<u32> = Array2::zeros((h, w));
    let mut segments: BTreeMap<u32, SegmentInfo> = BTreeMap::new();

    // Stuff background: 1..=max_stuff_layers horizontal bands with distinct
    // stuff classes. Bands cover the whole canvas, so any leftover pixel has
    // a stuff owner.
    let stuff_classes = taxonomy.stuff_classes();
    let stuff_weights: Vec<f64> = stuff_classes.iter().map(|&c| weights[c]).collect();
    let n_bands = layout
        .gen_range(1..=config.max_stuff_layers)
        .min(stuff_classes.len());
    let chosen = mathutil::weighted_sample_without_replacement(&stuff_weights, n_bands, &mut layout);

    // band cuts keep at least 4 rows per band so no band degenerates into
    // a sliver thinner than the feature stride
    let mut cuts: Vec<usize> = vec![0];
    for _ in 1..n_bands {
        for _attempt in 0..16 {
            let cut = layout.gen_range(4..h.saturating_sub(4).max(5));
            if cuts.iter().all(|&c| cut.abs_diff(c) >= 4) {
                cuts.push(cut);
                break;
            }
        }
    }
    cuts.sort_unstable();
    cuts.dedup();
    cuts.push(h);

    let mut band_of_row = vec![0u32; h];
    let mut next_id: u32 = 1;
    for (b, pair) in cuts.windows(2).enumerate() {
        let class = stuff_classes[chosen[b.min(chosen.len() - 1)]];
        let id = next_id;
        next_id += 1;
        segments.insert(id, SegmentInfo { class, is_thing: false });
        for r in pair[0]..pair[1] {
            band_of_row[r] = id;
            for c in 0..w {
                ids[[r, c]] = id;
            }
        }
    }

    // Thing shapes, painted back to front. Classes are drawn with a
    // stratified scheme so realized frequencies track the configured
    // weights tightly, then shuffled so paint order is class-independent.
    let thing_classes = taxonomy.thing_classes();
    if !thing_classes.is_empty() && config.max_things > 0 {
        let thing_weights: Vec<f64> = thing_classes.iter().map(|&c| weights[c]).collect();
        let count = layout.gen_range(config.min_things..=config.max_things);
        let mut classes: Vec<usize> = mathutil::stratified_sample(&thing_weights, count, &mut layout)
            .into_iter()
            .map(|i| thing_classes[i])
            .collect();
        mathutil::shuffle(&mut classes, &mut layout);

        let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
        for class in classes {
            let sw = layout.gen_range(config.min_thing_size..=config.max_thing_size);
            let sh = layout.gen_range(config.min_thing_size..=config.max_thing_size);
            let mut origin = None;
            for _attempt in 0..32 {
                let r0 = layout.gen_range(0..h.saturating_sub(sh).max(1));
                let c0 = layout.gen_range(0..w.saturating_sub(sw).max(1));
                let clash = !config.allow_overlap
                    && placed.iter().any(|&(pr, pc, ph, pw)| {
                        r0 < pr + ph && pr < r0 + sh && c0 < pc + pw && pc < c0 + sw
                    });
                if !clash {
                    origin = Some((r0, c0));
                    break;
                }
            }
            let Some((r0, c0)) = origin else { continue };
            placed.push((r0, c0, sh, sw));
            let shape = match (config.shapes, layout.gen_range(0..3u32)) {
                (ShapeSet::Rectangles, _) | (ShapeSet::All, 0) => Shape::Rect,
                (ShapeSet::All, 1) => Shape::Ellipse,
                (ShapeSet::All, _) => Shape::Triangle,
            };
            let id = next_id;
            next_id += 1;
            segments.insert(id, SegmentInfo { class, is_thing: true });
            paint(&mut ids, shape, r0, c0, sh, sw, id);
        }
    }

    // Cleanup pass: drop occluded segments, dissolve segments under the
    // minimum area into the stuff band beneath them (or void if that band
    // itself vanished).
    let areas = area_table(&ids);
    let mut dissolved: Vec<u32> = Vec::new();
    for (&id, _) in &segments {
        let area = areas.get(&id).copied().unwrap_or(0);
        if area < config.min_segment_area {
            dissolved.push(id);
        }
    }
    if !dissolved.is_empty() {
        let surviving_bands: Vec<u32> = band_of_row
            .iter()
            .copied()
            .filter(|id| {
                areas.get(id).copied().unwrap_or(0) >= config.min_segment_area
                    && !dissolved.contains(id)
            })
            .collect();
        for r in 0..h {
            for c in 0..w {
                let id = ids[[r, c]];
                if dissolved.contains(&id) {
                    let band = band_of_row[r];
                    ids[[r, c]] = if surviving_bands.contains(&band) { band } else { VOID_ID };
                }
            }
        }
        for id in &dissolved {
            segments.remove(id);
        }
    }
    let areas = area_table(&ids);
    segments.retain(|id, _| areas.get(id).copied().unwrap_or(0) > 0);

    // Appearance: prototype color per class plus optional Gaussian noise,
    // clamped to [0,1]. Void pixels are zero.
    let channels = config.channel_count();
    let mut pixels = Array3::<f64>::zeros((h, w, channels));
    let colors: BTreeMap<u32, Vec<f64>> = segments
        .iter()
        .map(|(&id, info)| (id, prototypes.color(info.class)))
        .collect();
    for r in 0..h {
        for c in 0..w {
            let id = ids[[r, c]];
            if id == VOID_ID {
                // keep noise stream aligned across layouts
                for _ in 0..channels {
                    let _ = mathutil::standard_normal(&mut noise);
                }
                continue;
            }
            let color = &colors[&id];
            for k in 0..channels {
                let eps = mathutil::standard_normal(&mut noise);
                pixels[[r, c, k]] =
                    (color[k] + config.appearance_noise * eps).clamp(0.0, 1.0);
            }
        }
    }

    let map = PanopticMap { ids, segments };
    debug_assert!(map.validate().is_ok());
    Ok((Image::new(pixels)?, map))
}

fn area_table(ids: &Array2<u32>) -> BTreeMap<u32, usize> {
    let mut areas = BTreeMap::new();
    for &id in ids.iter() {
        if id != VOID_ID {
            *areas.entry(id).or_insert(0) += 1;
        }
    }
    areas
}

fn paint(ids: &mut Array2<u32>, shape: Shape, r0: usize, c0: usize, sh: usize, sw: usize, id: u32) {
    let (h, w) = ids.dim();
    let r1 = (r0 + sh).min(h);
    let c1 = (c0 + sw).min(w);
    for r in r0..r1 {
        for c in c0..c1 {
            let inside = match shape {
                Shape::Rect => true,
                Shape::Ellipse => {
                    let cy = (r0 + r1 - 1) as f64 / 2.0;
                    let cx = (c0 + c1 - 1) as f64 / 2.0;
                    let ry = (r1 - r0) as f64 / 2.0;
                    let rx = (c1 - c0) as f64 / 2.0;
                    let dy = (r as f64 - cy) / ry;
                    let dx = (c as f64 - cx) / rx;
                    dy * dy + dx * dx <= 1.0
                }
                Shape::Triangle => {
                    // upright triangle: row r spans a symmetric interval
                    let frac = (r - r0 + 1) as f64 / (r1 - r0) as f64;
                    let half = frac * (c1 - c0) as f64 / 2.0;
                    let mid = (c0 + c1 - 1) as f64 / 2.0;
                    (c as f64 - mid).abs() <= half
                }
            };
            if inside {
                ids[[r, c]] = id;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_config_and_seed() {
        let config = SceneConfig::default();
        let (img_a, map_a) = generate_scene(&config, 3).unwrap();
        let (img_b, map_b) = generate_scene(&config, 3).unwrap();
        assert_eq!(img_a.pixels, img_b.pixels);
        assert_eq!(map_a, map_b);

        let (img_c, _) = generate_scene(&config, 4).unwrap();
        assert_ne!(img_a.pixels, img_c.pixels);
    }

    #[test]
    fn zero_noise_pixels_equal_prototype_exactly() {
        let config = SceneConfig { appearance_noise: 0.0, ..SceneConfig::default() };
        let prototypes = config.prototypes().unwrap();
        let (img, map) = generate_scene(&config, 0).unwrap();
        for (&id, info) in &map.segments {
            let color = prototypes.color(info.class);
            let mut count = 0usize;
            for r in 0..map.height() {
                for c in 0..map.width() {
                    if map.ids[[r, c]] == id {
                        count += 1;
                        for k in 0..img.channels() {
                            assert_eq!(img.pixels[[r, c, k]], color[k]);
                        }
                    }
                }
            }
            assert!(count > 0);
        }
    }

    #[test]
    fn noise_does_not_change_layout() {
        let base = SceneConfig::default();
        let noisy = SceneConfig { appearance_noise: 0.2, ..base.clone() };
        let (_, map_a) = generate_scene(&base, 11).unwrap();
        let (_, map_b) = generate_scene(&noisy, 11).unwrap();
        assert_eq!(map_a, map_b);
    }

    #[test]
    fn maps_are_valid_and_respect_min_area() {
        let config = SceneConfig::default();
        for seed in 0..25 {
            let (_, map) = generate_scene(&config, seed).unwrap();
            map.validate().unwrap();
            for (_, &area) in &map.areas() {
                assert!(area >= config.min_segment_area);
            }
        }
    }

    #[test]
    fn infeasible_min_area_is_config_error() {
        let config = SceneConfig { min_segment_area: 64 * 64 + 1, ..SceneConfig::default() };
        assert!(matches!(generate_scene(&config, 0), Err(Error::Config(_))));
    }

    #[test]
    fn thing_pixel_frequencies_track_weights() {
        // Monte-Carlo over 100 seeds: relative pixel frequency of each thing
        // class stays within 10% of the configured weights. Narrow size
        // range plus stratified class draws keep the estimator tight.
        let weights = vec![0.3, 0.25, 0.2, 0.15, 0.1, 1.0];
        let config = SceneConfig {
            num_things: 5,
            num_stuff: 1,
            class_weights: ClassWeights::Explicit(weights.clone()),
            min_things: 6,
            max_things: 6,
            min_thing_size: 12,
            max_thing_size: 14,
            max_stuff_layers: 1,
            shapes: ShapeSet::Rectangles,
            ..SceneConfig::default()
        };
        let mut pixel_counts = vec![0usize; 5];
        for seed in 0..100 {
            let (_, map) = generate_scene(&config, seed).unwrap();
            let areas = map.areas();
            for (id, info) in &map.segments {
                if info.is_thing {
                    pixel_counts[info.class] += areas[id];
                }
            }
        }
        let total: usize = pixel_counts.iter().sum();
        let weight_sum: f64 = weights[..5].iter().sum();
        for c in 0..5 {
            let observed = pixel_counts[c] as f64 / total as f64;
            let expected = weights[c] / weight_sum;
            let rel = (observed - expected).abs() / expected;
            assert!(
                rel < 0.10,
                "class {c}: observed {observed:.4}, expected {expected:.4}, rel {rel:.3}"
            );
        }
    }
}
