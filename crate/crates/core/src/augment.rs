//! Weak and strong input perturbations for consistency training.
//!
//! The weak pipeline is geometric (scale, crop, horizontal flip) and is
//! applied identically to the image and its panoptic label. The strong
//! pipeline is photometric only (channel jitter, blur, grayscale), so a
//! label aligned with the weak view stays aligned with the strong view.
//! CutMix operates on (image, label) pairs at the batch level.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mathutil::standard_normal;
use crate::panoptic::{PanopticMap, SegmentInfo, VOID_ID};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Sampled geometry of one weak view; reapplying the record reproduces the
/// exact same transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricRecord {
    pub scale: f64,
    pub flip: bool,
    /// Offset of the crop window inside the scaled image; negative values
    /// mean the scaled image is padded (void label, zero pixels).
    pub crop_origin: (i64, i64),
    pub crop_size: (usize, usize),
}

impl GeometricRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        GeometricRecord { scale: 1.0, flip: false, crop_origin: (0, 0), crop_size: (height, width) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakParams {
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
}

impl Default for WeakParams {
    fn default() -> Self {
        WeakParams { scale_min: 0.1, scale_max: 2.0, flip_prob: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongParams {
    pub brightness: (f64, f64),
    pub saturation: (f64, f64),
    pub contrast: (f64, f64),
    pub hue: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub blur_prob: f64,
    pub grayscale_prob: f64,
    pub cutmix_prob: f64,
}

impl Default for StrongParams {
    fn default() -> Self {
        StrongParams {
            brightness: (0.2, 1.8),
            saturation: (0.2, 1.8),
            contrast: (0.2, 1.8),
            hue: (-0.2, 0.2),
            blur_sigma: (0.1, 2.0),
            blur_prob: 0.5,
            grayscale_prob: 0.2,
            cutmix_prob: 0.5,
        }
    }
}

impl StrongParams {
    /// Degenerate parameters under which every draw is the identity.
    pub fn identity() -> Self {
        StrongParams {
            brightness: (1.0, 1.0),
            saturation: (1.0, 1.0),
            contrast: (1.0, 1.0),
            hue: (0.0, 0.0),
            blur_sigma: (0.1, 0.1),
            blur_prob: 0.0,
            grayscale_prob: 0.0,
            cutmix_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (p, name) in [
            (self.blur_prob, "blur"),
            (self.grayscale_prob, "grayscale"),
            (self.cutmix_prob, "cutmix"),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} probability out of [0,1]")));
            }
        }
        Ok(())
    }
}

/// Samples a geometric record for an image of the given size.
pub fn sample_geometry(
    height: usize,
    width: usize,
    params: &WeakParams,
    rng: &mut ChaCha12Rng,
) -> GeometricRecord {
    let scale = rng.gen_range(params.scale_min..=params.scale_max);
    let flip = rng.gen::<f64>() < params.flip_prob;
    let sh = ((height as f64 * scale).round() as i64).max(1);
    let sw = ((width as f64 * scale).round() as i64).max(1);
    let origin_range = |scaled: i64, crop: i64| {
        let lo = (scaled - crop).min(0);
        let hi = (scaled - crop).max(0);
        (lo, hi)
    };
    let (rlo, rhi) = origin_range(sh, height as i64);
    let (clo, chi) = origin_range(sw, width as i64);
    GeometricRecord {
        scale,
        flip,
        crop_origin: (rng.gen_range(rlo..=rhi), rng.gen_range(clo..=chi)),
        crop_size: (height, width),
    }
}

/// Continuous source coordinates (original image frame, flip applied);
/// `None` outside the scaled image.
fn source_coords(
    record: &GeometricRecord,
    src_h: usize,
    src_w: usize,
    r: usize,
    c: usize,
) -> Option<(f64, f64)> {
    let sh = ((src_h as f64 * record.scale).round()).max(1.0);
    let sw = ((src_w as f64 * record.scale).round()).max(1.0);
    let rr = r as i64 + record.crop_origin.0;
    let cc = c as i64 + record.crop_origin.1;
    if rr < 0 || cc < 0 || (rr as f64) >= sh || (cc as f64) >= sw {
        return None;
    }
    // effective per-axis scale after rounding the canvas size
    let fy = sh / src_h as f64;
    let fx = sw / src_w as f64;
    let sy = (rr as f64 + 0.5) / fy - 0.5;
    let sx_raw = (cc as f64 + 0.5) / fx - 0.5;
    let sx = if record.flip { (src_w - 1) as f64 - sx_raw } else { sx_raw };
    Some((sy, sx))
}

/// Nearest source pixel of output location `(r, c)` under `record`, or
/// `None` when the location falls into padding.
pub fn preimage_nearest(
    record: &GeometricRecord,
    src_h: usize,
    src_w: usize,
    r: usize,
    c: usize,
) -> Option<(usize, usize)> {
    let (sy, sx) = source_coords(record, src_h, src_w, r, c)?;
    let ry = (sy + 0.5).floor().clamp(0.0, (src_h - 1) as f64) as usize;
    let rx = (sx + 0.5).floor().clamp(0.0, (src_w - 1) as f64) as usize;
    Some((ry, rx))
}

/// Applies a geometric record: bilinear resampling for the image, nearest
/// neighbor for the label, void/zero in padded areas.
pub fn apply_geometry(
    image: &Image,
    label: Option<&PanopticMap>,
    record: &GeometricRecord,
) -> (Image, Option<PanopticMap>) {
    let (src_h, src_w, channels) = image.pixels.dim();
    let (out_h, out_w) = record.crop_size;
    let mut pixels = Array3::<f64>::zeros((out_h, out_w, channels));
    let mut ids: Option<Array2<u32>> = label.map(|_| Array2::zeros((out_h, out_w)));

    for r in 0..out_h {
        for c in 0..out_w {
            let Some((sy, sx)) = source_coords(record, src_h, src_w, r, c) else {
                continue;
            };
            let syc = sy.clamp(0.0, (src_h - 1) as f64);
            let sxc = sx.clamp(0.0, (src_w - 1) as f64);
            let y0 = syc.floor() as usize;
            let x0 = sxc.floor() as usize;
            let y1 = (y0 + 1).min(src_h - 1);
            let x1 = (x0 + 1).min(src_w - 1);
            let dy = syc - y0 as f64;
            let dx = sxc - x0 as f64;
            for k in 0..channels {
                let top = image.pixels[[y0, x0, k]] * (1.0 - dx) + image.pixels[[y0, x1, k]] * dx;
                let bottom = image.pixels[[y1, x0, k]] * (1.0 - dx) + image.pixels[[y1, x1, k]] * dx;
                pixels[[r, c, k]] = top * (1.0 - dy) + bottom * dy;
            }
            if let (Some(ids), Some(label)) = (ids.as_mut(), label) {
                let (ny, nx) = preimage_nearest(record, src_h, src_w, r, c).unwrap();
                ids[[r, c]] = label.ids[[ny, nx]];
            }
        }
    }

    let out_label = match (ids, label) {
        (Some(ids), Some(label)) => {
            let mut present: Vec<u32> = ids.iter().copied().filter(|&v| v != VOID_ID).collect();
            present.sort_unstable();
            present.dedup();
            let segments: BTreeMap<u32, SegmentInfo> = label
                .segments
                .iter()
                .filter(|(id, _)| present.binary_search(id).is_ok())
                .map(|(&id, &info)| (id, info))
                .collect();
            Some(PanopticMap { ids, segments })
        }
        _ => None,
    };

    (Image { pixels }, out_label)
}

/// Weak view: samples geometry and applies it to image and label.
pub fn weak(
    image: &Image,
    label: Option<&PanopticMap>,
    params: &WeakParams,
    rng: &mut ChaCha12Rng,
) -> (Image, Option<PanopticMap>, GeometricRecord) {
    let record = sample_geometry(image.height(), image.width(), params, rng);
    let (out_image, out_label) = apply_geometry(image, label, &record);
    (out_image, out_label, record)
}

/// Strong view: photometric perturbations on top of an already weakly
/// transformed image. Spatial content is untouched, so any label aligned
/// with the input stays aligned with the output.
pub fn strong(image: &Image, params: &StrongParams, rng: &mut ChaCha12Rng) -> Image {
    let mut out = image.clone();

    let brightness = rng.gen_range(params.brightness.0..=params.brightness.1);
    let contrast = rng.gen_range(params.contrast.0..=params.contrast.1);
    let saturation = rng.gen_range(params.saturation.0..=params.saturation.1);
    let hue = rng.gen_range(params.hue.0..=params.hue.1);

    if brightness != 1.0 {
        out.pixels.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));
    }
    if contrast != 1.0 {
        let mean = out.pixels.mean().unwrap_or(0.5);
        out.pixels.mapv_inplace(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));
    }
    if saturation != 1.0 {
        let (h, w, ch) = out.pixels.dim();
        for r in 0..h {
            for c in 0..w {
                let mut m = 0.0;
                for k in 0..ch {
                    m += out.pixels[[r, c, k]];
                }
                m /= ch as f64;
                for k in 0..ch {
                    let v = out.pixels[[r, c, k]];
                    out.pixels[[r, c, k]] = ((v - m) * saturation + m).clamp(0.0, 1.0);
                }
            }
        }
    }
    if hue != 0.0 {
        rotate_channels(&mut out.pixels, hue * std::f64::consts::PI, rng);
    } else {
        // keep the stream aligned whether or not the rotation applies
        let _ = (standard_normal(rng), standard_normal(rng));
    }
    if rng.gen::<f64>() < params.blur_prob {
        let sigma = rng.gen_range(params.blur_sigma.0..=params.blur_sigma.1);
        gaussian_blur(&mut out.pixels, sigma);
    }
    if rng.gen::<f64>() < params.grayscale_prob {
        let (h, w, ch) = out.pixels.dim();
        for r in 0..h {
            for c in 0..w {
                let mut m = 0.0;
                for k in 0..ch {
                    m += out.pixels[[r, c, k]];
                }
                m /= ch as f64;
                for k in 0..ch {
                    out.pixels[[r, c, k]] = m;
                }
            }
        }
    }
    out
}

/// Channel-mixing stand-in for hue: rotate by `angle` in a random 2-plane
/// orthogonal to the gray axis, so per-pixel channel means are preserved.
fn rotate_channels(pixels: &mut Array3<f64>, angle: f64, rng: &mut ChaCha12Rng) {
    let (h, w, ch) = pixels.dim();
    if ch < 3 {
        let _ = (standard_normal(rng), standard_normal(rng));
        return;
    }
    let gray = 1.0 / (ch as f64).sqrt();
    let mut u: Vec<f64> = (0..ch).map(|_| standard_normal(rng)).collect();
    let du: f64 = u.iter().sum::<f64>() * gray;
    for v in u.iter_mut() {
        *v -= du * gray;
    }
    let un = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in u.iter_mut() {
        *v /= un;
    }
    let mut v: Vec<f64> = (0..ch).map(|_| standard_normal(rng)).collect();
    let dv_gray: f64 = v.iter().sum::<f64>() * gray;
    let dv_u: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
    for (k, val) in v.iter_mut().enumerate() {
        *val -= dv_gray * gray + dv_u * u[k];
    }
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v.iter_mut() {
        *x /= vn;
    }

    let (sin, cos) = angle.sin_cos();
    for r in 0..h {
        for c in 0..w {
            let mut pu = 0.0;
            let mut pv = 0.0;
            for k in 0..ch {
                pu += pixels[[r, c, k]] * u[k];
                pv += pixels[[r, c, k]] * v[k];
            }
            let nu = pu * cos - pv * sin;
            let nv = pu * sin + pv * cos;
            for k in 0..ch {
                let val = pixels[[r, c, k]] + (nu - pu) * u[k] + (nv - pv) * v[k];
                pixels[[r, c, k]] = val.clamp(0.0, 1.0);
            }
        }
    }
}

fn gaussian_blur(pixels: &mut Array3<f64>, sigma: f64) {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64) * (i as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }

    let (h, w, ch) = pixels.dim();
    let reflect = |i: i64, n: i64| -> usize {
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i.clamp(0, n - 1) as usize
    };

    let mut tmp = pixels.clone();
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let cc = reflect(c as i64 + j as i64 - radius, w as i64);
                    acc += pixels[[r, cc, k]] * kv;
                }
                tmp[[r, c, k]] = acc;
            }
        }
    }
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let rr = reflect(r as i64 + j as i64 - radius, h as i64);
                    acc += tmp[[rr, c, k]] * kv;
                }
                pixels[[r, c, k]] = acc;
            }
        }
    }
}

/// A rectangular CutMix window, `[r0, r1) x [c0, c1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.r0 && r < self.r1 && c >= self.c0 && c < self.c1
    }
}

/// Samples a CutMix box with uniform mix ratio and uniform center, clipped
/// to the canvas.
pub fn sample_cut_box(height: usize, width: usize, rng: &mut ChaCha12Rng) -> CutBox {
    let lambda: f64 = rng.gen();
    let ratio = (1.0 - lambda).sqrt();
    let bh = (height as f64 * ratio).round() as i64;
    let bw = (width as f64 * ratio).round() as i64;
    let cy = rng.gen_range(0..height) as i64;
    let cx = rng.gen_range(0..width) as i64;
    CutBox {
        r0: (cy - bh / 2).clamp(0, height as i64) as usize,
        r1: (cy - bh / 2 + bh).clamp(0, height as i64) as usize,
        c0: (cx - bw / 2).clamp(0, width as i64) as usize,
        c1: (cx - bw / 2 + bw).clamp(0, width as i64) as usize,
    }
}

/// Pastes the `donor` window into `base` for both image and label. Donor
/// segment ids are shifted past the base id range; stuff segments that end
/// up sharing a class are merged to keep the label well-formed.
pub fn cutmix_with_box(
    base: (&Image, &PanopticMap),
    donor: (&Image, &PanopticMap),
    cut: CutBox,
) -> Result<(Image, PanopticMap)> {
    let (base_img, base_map) = base;
    let (donor_img, donor_map) = donor;
    if base_img.pixels.dim() != donor_img.pixels.dim() {
        return Err(Error::shape(format!(
            "cutmix inputs differ: {:?} vs {:?}",
            base_img.pixels.dim(),
            donor_img.pixels.dim()
        )));
    }
    if base_map.ids.dim() != donor_map.ids.dim()
        || base_map.ids.dim() != (base_img.height(), base_img.width())
    {
        return Err(Error::shape("cutmix labels must match image dimensions".to_string()));
    }

    if cut.area() == 0 {
        return Ok((base_img.clone(), base_map.clone()));
    }

    let offset = base_map.next_free_id();
    let mut pixels = base_img.pixels.clone();
    let mut ids = base_map.ids.clone();
    let channels = base_img.channels();
    for r in cut.r0..cut.r1 {
        for c in cut.c0..cut.c1 {
            for k in 0..channels {
                pixels[[r, c, k]] = donor_img.pixels[[r, c, k]];
            }
            let src = donor_map.ids[[r, c]];
            ids[[r, c]] = if src == VOID_ID { VOID_ID } else { src + offset };
        }
    }

    let mut segments: BTreeMap<u32, SegmentInfo> = base_map.segments.clone();
    for (&id, &info) in &donor_map.segments {
        segments.insert(id + offset, info);
    }

    // merge donor stuff into base stuff of the same class
    let stuff_by_class: BTreeMap<usize, u32> = base_map
        .segments
        .iter()
        .filter(|(_, info)| !info.is_thing)
        .map(|(&id, info)| (info.class, id))
        .collect();
    let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
    for (&id, &info) in &donor_map.segments {
        if !info.is_thing {
            if let Some(&base_id) = stuff_by_class.get(&info.class) {
                remap.insert(id + offset, base_id);
            }
        }
    }
    if !remap.is_empty() {
        for v in ids.iter_mut() {
            if let Some(&target) = remap.get(v) {
                *v = target;
            }
        }
        for (from, _) in remap {
            segments.remove(&from);
        }
    }

    let areas = {
        let mut areas = BTreeMap::new();
        for &id in ids.iter() {
            if id != VOID_ID {
                *areas.entry(id).or_insert(0usize) += 1;
            }
        }
        areas
    };
    segments.retain(|id, _| areas.contains_key(id));

    let map = PanopticMap { ids, segments };
    debug_assert!(map.validate().is_ok());
    Ok((Image { pixels }, map))
}

/// CutMix with a sampled box.
pub fn cutmix(
    base: (&Image, &PanopticMap),
    donor: (&Image, &PanopticMap),
    rng: &mut ChaCha12Rng,
) -> Result<(Image, PanopticMap)> {
    let cut = sample_cut_box(base.0.height(), base.0.width(), rng);
    cutmix_with_box(base, donor, cut)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::scene::{generate_scene, SceneConfig};

    fn scene(seed: u64) -> (Image, PanopticMap) {
        generate_scene(&SceneConfig::default(), seed).unwrap()
    }

    #[test]
    fn identity_record_is_identity() {
        let (img, map) = scene(0);
        let record = GeometricRecord::identity(img.height(), img.width());
        let (out_img, out_map) = apply_geometry(&img, Some(&map), &record);
        assert_eq!(out_img.pixels, img.pixels);
        assert_eq!(out_map.unwrap(), map);
    }

    #[test]
    fn double_flip_restores_image() {
        let (img, map) = scene(1);
        let record = GeometricRecord {
            flip: true,
            ..GeometricRecord::identity(img.height(), img.width())
        };
        let (once_img, once_map) = apply_geometry(&img, Some(&map), &record);
        let (twice_img, twice_map) = apply_geometry(&once_img, once_map.as_ref(), &record);
        assert_eq!(twice_img.pixels, img.pixels);
        assert_eq!(twice_map.unwrap().ids, map.ids);
    }

    #[test]
    fn label_alignment_matches_coordinate_oracle() {
        let (img, map) = scene(2);
        let params = WeakParams::default();
        for seed in 0..30u64 {
            let mut r = rng::stream(&[seed, 77]);
            let (_, out_map, record) = weak(&img, Some(&map), &params, &mut r);
            let out_map = out_map.unwrap();
            // independent recomputation of the nearest-neighbor source index
            let sh = ((img.height() as f64 * record.scale).round()).max(1.0);
            let sw = ((img.width() as f64 * record.scale).round()).max(1.0);
            for rr in 0..out_map.height() {
                for cc in 0..out_map.width() {
                    let gr = rr as i64 + record.crop_origin.0;
                    let gc = cc as i64 + record.crop_origin.1;
                    let expected = if gr < 0 || gc < 0 || (gr as f64) >= sh || (gc as f64) >= sw {
                        VOID_ID
                    } else {
                        let sy = (gr as f64 + 0.5) / (sh / img.height() as f64) - 0.5;
                        let mut sx = (gc as f64 + 0.5) / (sw / img.width() as f64) - 0.5;
                        if record.flip {
                            sx = (img.width() - 1) as f64 - sx;
                        }
                        let ny = (sy + 0.5).floor().clamp(0.0, (img.height() - 1) as f64) as usize;
                        let nx = (sx + 0.5).floor().clamp(0.0, (img.width() - 1) as f64) as usize;
                        map.ids[[ny, nx]]
                    };
                    assert_eq!(out_map.ids[[rr, cc]], expected, "at ({rr},{cc}) seed {seed}");
                }
            }
        }
    }

    #[test]
    fn weak_introduces_no_new_classes() {
        let (img, map) = scene(3);
        let params = WeakParams::default();
        let input_classes: std::collections::BTreeSet<usize> =
            map.segments.values().map(|s| s.class).collect();
        for seed in 0..20u64 {
            let mut r = rng::stream(&[seed, 78]);
            let (_, out_map, _) = weak(&img, Some(&map), &params, &mut r);
            for info in out_map.unwrap().segments.values() {
                assert!(input_classes.contains(&info.class));
            }
        }
    }

    #[test]
    fn strong_identity_draw_is_identity() {
        let (img, _) = scene(4);
        let mut r = rng::stream(&[0, 79]);
        let out = strong(&img, &StrongParams::identity(), &mut r);
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn grayscale_makes_channels_equal() {
        let (img, _) = scene(5);
        let params = StrongParams { grayscale_prob: 1.0, ..StrongParams::identity() };
        let mut r = rng::stream(&[1, 79]);
        let out = strong(&img, &params, &mut r);
        let (h, w, ch) = out.pixels.dim();
        for r_ in 0..h {
            for c in 0..w {
                let first = out.pixels[[r_, c, 0]];
                for k in 1..ch {
                    assert!((out.pixels[[r_, c, k]] - first).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn brightness_scales_mean() {
        let (img, _) = scene(6);
        let params = StrongParams { brightness: (0.5, 0.5), ..StrongParams::identity() };
        let mut r = rng::stream(&[2, 79]);
        let out = strong(&img, &params, &mut r);
        let before = img.pixels.mean().unwrap();
        let after = out.pixels.mean().unwrap();
        assert!((after - before * 0.5).abs() < 1e-12, "{after} vs {}", before * 0.5);
    }

    #[test]
    fn cutmix_zero_box_returns_base() {
        let a = scene(7);
        let b = scene(8);
        let cut = CutBox { r0: 5, r1: 5, c0: 3, c1: 9 };
        let (img, map) = cutmix_with_box((&a.0, &a.1), (&b.0, &b.1), cut).unwrap();
        assert_eq!(img.pixels, a.0.pixels);
        assert_eq!(map, a.1);
    }

    #[test]
    fn cutmix_full_box_returns_donor_relabeled() {
        let a = scene(9);
        let b = scene(10);
        let cut = CutBox { r0: 0, r1: 64, c0: 0, c1: 64 };
        let (img, map) = cutmix_with_box((&a.0, &a.1), (&b.0, &b.1), cut).unwrap();
        assert_eq!(img.pixels, b.0.pixels);
        assert_eq!(map.num_segments(), b.1.num_segments());
        // classes agree pixelwise even though ids were relabeled
        assert_eq!(map.semantic(), b.1.semantic());
    }

    #[test]
    fn cutmix_provenance_and_id_hygiene() {
        let a = scene(11);
        let b = scene(12);
        for seed in 0..20u64 {
            let mut r = rng::stream(&[seed, 80]);
            let cut = sample_cut_box(64, 64, &mut r);
            let (img, map) = cutmix_with_box((&a.0, &a.1), (&b.0, &b.1), cut).unwrap();
            map.validate().unwrap();
            let sem = map.semantic();
            let sem_a = a.1.semantic();
            let sem_b = b.1.semantic();
            for rr in 0..64 {
                for cc in 0..64 {
                    if cut.contains(rr, cc) {
                        assert_eq!(img.pixels[[rr, cc, 0]], b.0.pixels[[rr, cc, 0]]);
                        assert_eq!(sem[[rr, cc]], sem_b[[rr, cc]]);
                    } else {
                        assert_eq!(img.pixels[[rr, cc, 0]], a.0.pixels[[rr, cc, 0]]);
                        assert_eq!(sem[[rr, cc]], sem_a[[rr, cc]]);
                    }
                }
            }
        }
    }

    #[test]
    fn cutmix_shape_mismatch_is_error() {
        let a = scene(13);
        let small = generate_scene(
            &SceneConfig { height: 32, width: 32, max_thing_size: 20, ..SceneConfig::default() },
            0,
        )
        .unwrap();
        let cut = CutBox { r0: 0, r1: 8, c0: 0, c1: 8 };
        assert!(cutmix_with_box((&a.0, &a.1), (&small.0, &small.1), cut).is_err());
    }
}
