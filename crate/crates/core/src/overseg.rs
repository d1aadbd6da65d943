//! Class-agnostic over-segmentation oracle. Splits each ground-truth segment
//! into a seeded Voronoi partition of its pixels, so the output always
//! refines the ground-truth partition while emulating the granularity
//! mismatch of an external region proposer.

use crate::error::{Error, Result};
use crate::panoptic::{ClassAgnosticMap, PanopticMap, VOID_ID};
use crate::rng::{self, salt};
use ndarray::Array2;
use rand::Rng;

/// Splits `label` into class-agnostic regions. `granularity` in `(0, 1]` is
/// the approximate inverse split factor: each ground-truth segment becomes
/// about `1/granularity` regions (capped by its pixel count). Void pixels
/// stay void.
pub fn oversegment(
    label: &PanopticMap,
    granularity: f64,
    seed: u64,
) -> Result<ClassAgnosticMap> {
    if !(granularity > 0.0 && granularity <= 1.0) {
        return Err(Error::config("granularity must lie in (0, 1]"));
    }
    label.validate()?;

    let splits = (1.0 / granularity).round().max(1.0) as usize;
    let (h, w) = label.ids.dim();
    let mut out: Array2<u32> = Array2::zeros((h, w));
    let mut next_region: u32 = 1;

    for (&seg_id, _) in &label.segments {
        let mut pixels: Vec<(usize, usize)> = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if label.ids[[r, c]] == seg_id {
                    pixels.push((r, c));
                }
            }
        }
        if pixels.is_empty() {
            continue;
        }

        let k = splits.min(pixels.len());
        let mut r = rng::stream(&[seed, salt::OVERSEG, seg_id as u64]);
        // distinct seed pixels via partial Fisher-Yates
        let mut order: Vec<usize> = (0..pixels.len()).collect();
        for i in 0..k {
            let j = r.gen_range(i..order.len());
            order.swap(i, j);
        }
        let sites: Vec<(usize, usize)> = order[..k].iter().map(|&i| pixels[i]).collect();

        for &(pr, pc) in &pixels {
            let mut best = 0usize;
            let mut best_d = u64::MAX;
            for (s, &(sr, sc)) in sites.iter().enumerate() {
                let dr = pr as i64 - sr as i64;
                let dc = pc as i64 - sc as i64;
                let d = (dr * dr + dc * dc) as u64;
                if d < best_d {
                    best_d = d;
                    best = s;
                }
            }
            out[[pr, pc]] = next_region + best as u32;
        }
        next_region += k as u32;
    }

    Ok(ClassAgnosticMap { ids: out })
}

/// True when every region of `regions` lies inside exactly one segment of
/// `label` (void pixels excluded on both sides).
pub fn refines(regions: &ClassAgnosticMap, label: &PanopticMap) -> bool {
    if regions.ids.dim() != label.ids.dim() {
        return false;
    }
    let mut owner: std::collections::BTreeMap<u32, u32> = std::collections::BTreeMap::new();
    for (region, seg) in regions.ids.iter().zip(label.ids.iter()) {
        if *region == VOID_ID {
            if *seg != VOID_ID {
                return false;
            }
            continue;
        }
        match owner.get(region) {
            None => {
                owner.insert(*region, *seg);
            }
            Some(&prev) => {
                if prev != *seg {
                    return false;
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    #[test]
    fn granularity_one_reproduces_partition() {
        let (_, label) = generate_scene(&SceneConfig::default(), 5).unwrap();
        let regions = oversegment(&label, 1.0, 0).unwrap();
        // same partition up to relabeling: regions and segments have equal
        // pixel sets
        assert!(refines(&regions, &label));
        assert_eq!(regions.region_ids().len(), label.num_segments());
    }

    #[test]
    fn always_refines_ground_truth() {
        for seed in 0..20 {
            let (_, label) = generate_scene(&SceneConfig::default(), seed).unwrap();
            let regions = oversegment(&label, 0.5, seed).unwrap();
            assert!(refines(&regions, &label));
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let (_, label) = generate_scene(&SceneConfig::default(), 2).unwrap();
        assert_eq!(oversegment(&label, 0.5, 9).unwrap(), oversegment(&label, 0.5, 9).unwrap());
        assert_ne!(oversegment(&label, 0.5, 9).unwrap(), oversegment(&label, 0.5, 10).unwrap());
    }

    #[test]
    fn quarter_granularity_splits_about_four_ways() {
        let config = SceneConfig::default();
        let mut region_total = 0usize;
        let mut segment_total = 0usize;
        for seed in 0..100 {
            let (_, label) = generate_scene(&config, seed).unwrap();
            let regions = oversegment(&label, 0.25, seed).unwrap();
            region_total += regions.region_ids().len();
            segment_total += label.num_segments();
        }
        let ratio = region_total as f64 / segment_total as f64;
        assert!((3.0..=5.0).contains(&ratio), "split ratio {ratio:.2}");
    }

    #[test]
    fn rejects_bad_granularity() {
        let (_, label) = generate_scene(&SceneConfig::default(), 0).unwrap();
        assert!(oversegment(&label, 0.0, 0).is_err());
        assert!(oversegment(&label, 1.5, 0).is_err());
    }
}
