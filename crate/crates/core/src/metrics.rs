//! Panoptic quality, mean IoU, class-agnostic mask recall, and the
//! zero-shot oracle evaluation (ground-truth masks classified by pooled
//! frozen features).

use crate::embedder::{ImageEmbedder, TextEmbeddings};
use crate::ensemble::{downsample_mask, mask_pool, pool_cells, touched_cells, zero_shot_posterior, DownsampleMode};
use crate::error::Result;
use crate::image::Image;
use crate::inference::SemanticMap;
use crate::panoptic::{PanopticMap, SegmentInfo, VOID_ID};
use crate::taxonomy::Taxonomy;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassPqStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

impl ClassPqStats {
    pub fn present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    pub fn pq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.iou_sum / denom
        }
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.tp as f64 / denom
        }
    }

    pub fn merge(&mut self, other: &ClassPqStats) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }
}

/// Panoptic quality report with per-class statistics; scene reports merge
/// by summing counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PQReport {
    pub per_class: Vec<ClassPqStats>,
    pub is_thing: Vec<bool>,
}

impl PQReport {
    pub fn new(taxonomy: &Taxonomy) -> Self {
        let c = taxonomy.num_classes();
        PQReport {
            per_class: vec![ClassPqStats::default(); c],
            is_thing: (0..c).map(|i| taxonomy.is_thing(i)).collect(),
        }
    }

    pub fn merge(&mut self, other: &PQReport) {
        assert_eq!(self.per_class.len(), other.per_class.len());
        for (a, b) in self.per_class.iter_mut().zip(other.per_class.iter()) {
            a.merge(b);
        }
    }

    fn mean_over(&self, filter: impl Fn(usize) -> bool, f: impl Fn(&ClassPqStats) -> f64) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (c, stats) in self.per_class.iter().enumerate() {
            if stats.present() && filter(c) {
                sum += f(stats);
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    pub fn mean_pq(&self) -> f64 {
        self.mean_over(|_| true, ClassPqStats::pq)
    }

    pub fn mean_sq(&self) -> f64 {
        self.mean_over(|_| true, ClassPqStats::sq)
    }

    pub fn mean_rq(&self) -> f64 {
        self.mean_over(|_| true, ClassPqStats::rq)
    }

    pub fn thing_pq(&self) -> f64 {
        self.mean_over(|c| self.is_thing[c], ClassPqStats::pq)
    }

    pub fn stuff_pq(&self) -> f64 {
        self.mean_over(|c| !self.is_thing[c], ClassPqStats::pq)
    }

    pub fn classes_present(&self) -> usize {
        self.per_class.iter().filter(|s| s.present()).count()
    }
}

/// Panoptic quality of a prediction against ground truth, following the
/// published protocol: segments match if same-class IoU exceeds 0.5, where
/// the union discounts the prediction's overlap with void; unmatched
/// predictions that are mostly void are ignored rather than counted as
/// false positives.
pub fn pq_metric(pred: &PanopticMap, gt: &PanopticMap, taxonomy: &Taxonomy) -> PQReport {
    assert_eq!(pred.ids.dim(), gt.ids.dim(), "prediction and GT sizes differ");
    let mut report = PQReport::new(taxonomy);

    let mut intersections: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&g, &p) in gt.ids.iter().zip(pred.ids.iter()) {
        *intersections.entry((g, p)).or_insert(0) += 1;
    }
    let gt_areas = gt.areas();
    let pred_areas = pred.areas();

    let mut gt_matched: BTreeMap<u32, u32> = BTreeMap::new();
    let mut pred_matched: BTreeMap<u32, u32> = BTreeMap::new();

    for (&(g, p), &inter) in &intersections {
        if g == VOID_ID || p == VOID_ID {
            continue;
        }
        let g_class = gt.segments[&g].class;
        let p_class = pred.segments[&p].class;
        if g_class != p_class {
            continue;
        }
        let pred_void = intersections.get(&(VOID_ID, p)).copied().unwrap_or(0);
        let union = gt_areas[&g] + pred_areas[&p] - inter - pred_void;
        let iou = inter as f64 / union as f64;
        if iou > 0.5 {
            // IoU > 0.5 matches are unique on both sides
            let prev_g = gt_matched.insert(g, p);
            let prev_p = pred_matched.insert(p, g);
            debug_assert!(prev_g.is_none() && prev_p.is_none());
            report.per_class[g_class].tp += 1;
            report.per_class[g_class].iou_sum += iou;
        }
    }

    for (&g, info) in &gt.segments {
        if gt_areas.contains_key(&g) && !gt_matched.contains_key(&g) {
            report.per_class[info.class].fn_ += 1;
        }
    }
    for (&p, info) in &pred.segments {
        let Some(&area) = pred_areas.get(&p) else { continue };
        if pred_matched.contains_key(&p) {
            continue;
        }
        // mostly-void predictions are ignored
        let void_overlap = intersections.get(&(VOID_ID, p)).copied().unwrap_or(0);
        if (void_overlap as f64) / (area as f64) > 0.5 {
            continue;
        }
        report.per_class[info.class].fp += 1;
    }

    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// Per-class IoU; `None` for classes absent from GT and prediction.
    pub per_class: Vec<Option<f64>>,
}

impl MiouReport {
    pub fn mean(&self) -> f64 {
        let present: Vec<f64> = self.per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Confusion-matrix IoU of a semantic prediction against the semantic view
/// of a panoptic ground truth; GT void pixels are excluded.
pub fn miou(pred: &SemanticMap, gt: &PanopticMap, taxonomy: &Taxonomy) -> MiouReport {
    assert_eq!(pred.classes.dim(), gt.ids.dim());
    let c = taxonomy.num_classes();
    let mut confusion = vec![vec![0usize; c]; c];
    let gt_sem = gt.semantic();
    for (&p, g) in pred.classes.iter().zip(gt_sem.iter()) {
        if let Some(g) = g {
            confusion[*g][p] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(c);
    for j in 0..c {
        let tp = confusion[j][j];
        let gt_total: usize = confusion[j].iter().sum();
        let pred_total: usize = (0..c).map(|g| confusion[g][j]).sum();
        let union = gt_total + pred_total - tp;
        if union == 0 {
            per_class.push(None);
        } else {
            per_class.push(Some(tp as f64 / union as f64));
        }
    }
    MiouReport { per_class }
}

/// Fraction of target regions recovered by any predicted mask at the given
/// IoU threshold; class-agnostic.
pub fn mask_recall(
    sigma: &ndarray::Array2<f64>,
    regions: &crate::panoptic::ClassAgnosticMap,
    iou_threshold: f64,
) -> f64 {
    let region_ids = regions.region_ids();
    if region_ids.is_empty() {
        return 0.0;
    }
    let hw = sigma.dim().1;
    assert_eq!(hw, regions.ids.len());
    let binarized: Vec<Vec<bool>> = sigma
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v >= 0.5).collect())
        .collect();
    let mut hit = 0usize;
    for id in &region_ids {
        let mask = regions.region_mask(*id);
        let area: usize = mask.iter().filter(|&&b| b).count();
        let mut matched = false;
        for pred in &binarized {
            let mut inter = 0usize;
            let mut pred_area = 0usize;
            for (a, b) in pred.iter().zip(mask.iter()) {
                if *a {
                    pred_area += 1;
                    if *b {
                        inter += 1;
                    }
                }
            }
            let union = pred_area + area - inter;
            if union > 0 && (inter as f64 / union as f64) > iou_threshold {
                matched = true;
                break;
            }
        }
        if matched {
            hit += 1;
        }
    }
    hit as f64 / region_ids.len() as f64
}

/// Zero-shot oracle evaluation: every ground-truth segment keeps its exact
/// mask and is re-classified by pooled frozen features; the resulting map
/// (same-class stuff merged) scores against the ground truth.
pub fn zero_shot_oracle_eval(
    scenes: &[(Image, PanopticMap)],
    embedder: &dyn ImageEmbedder,
    text: &TextEmbeddings,
    tau: f64,
    taxonomy: &Taxonomy,
    mode: DownsampleMode,
) -> Result<PQReport> {
    let mut report = PQReport::new(taxonomy);
    for (image, gt) in scenes {
        let features = embedder.embed_image(image);
        let (h, w) = (gt.height(), gt.width());
        let mut predicted_class: BTreeMap<u32, usize> = BTreeMap::new();
        for (&id, _) in &gt.segments {
            let mask = gt.segment_mask(id);
            let pooled = match mask_pool(&features, &mask, h, w, mode) {
                Ok(p) => p,
                // thin segments can vanish under the area threshold; pool
                // the touched cells instead (never empty for a nonempty
                // mask)
                Err(crate::error::Error::EmptyMask) => {
                    let cells = touched_cells(&mask, h, w, features.stride);
                    pool_cells(&features, &cells)?
                }
                Err(e) => return Err(e),
            };
            let posterior = zero_shot_posterior(&pooled, text, tau)?;
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in posterior.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            predicted_class.insert(id, best);
        }

        // rebuild map with predicted classes; merge stuff of equal class
        let mut ids = gt.ids.clone();
        let mut segments: BTreeMap<u32, SegmentInfo> = BTreeMap::new();
        let mut stuff_target: BTreeMap<usize, u32> = BTreeMap::new();
        let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
        for (&id, _) in &gt.segments {
            let class = predicted_class[&id];
            let is_thing = taxonomy.is_thing(class);
            if is_thing {
                segments.insert(id, SegmentInfo { class, is_thing });
            } else {
                match stuff_target.get(&class) {
                    Some(&target) => {
                        remap.insert(id, target);
                    }
                    None => {
                        stuff_target.insert(class, id);
                        segments.insert(id, SegmentInfo { class, is_thing });
                    }
                }
            }
        }
        if !remap.is_empty() {
            for v in ids.iter_mut() {
                if let Some(&target) = remap.get(v) {
                    *v = target;
                }
            }
        }
        let pred = PanopticMap { ids, segments };
        debug_assert!(pred.validate().is_ok());
        report.merge(&pq_metric(&pred, gt, taxonomy));
    }
    Ok(report)
}

/// A convenience wrapper asserting the structural invariant `PQ = SQ x RQ`.
pub fn assert_pq_identity(report: &PQReport, tol: f64) {
    for stats in &report.per_class {
        if stats.present() {
            assert!(
                (stats.pq() - stats.sq() * stats.rq()).abs() <= tol,
                "PQ identity violated: pq={} sq={} rq={}",
                stats.pq(),
                stats.sq(),
                stats.rq()
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::{class_text_embeddings, EmbedderConfig, SyntheticEmbedder};
    use crate::scene::{generate_scene, SceneConfig};
    use ndarray::{array, Array2};

    fn map_from(ids: Array2<u32>, entries: &[(u32, usize, bool)]) -> PanopticMap {
        let mut segments = BTreeMap::new();
        for &(id, class, is_thing) in entries {
            segments.insert(id, SegmentInfo { class, is_thing });
        }
        PanopticMap { ids, segments }
    }

    #[test]
    fn identical_maps_have_pq_one() {
        let (_, gt) = generate_scene(&SceneConfig::default(), 3).unwrap();
        let tax = SceneConfig::default().taxonomy().unwrap();
        let report = pq_metric(&gt, &gt, &tax);
        assert_eq!(report.mean_pq(), 1.0);
        assert_eq!(report.mean_sq(), 1.0);
        assert_eq!(report.mean_rq(), 1.0);
        assert_pq_identity(&report, 1e-9);
    }

    #[test]
    fn hand_case_pq_is_exactly_0_3() {
        // fully labeled canvas (no void effects); class 0 has exactly one
        // TP at IoU 0.6, one FP and one FN
        let mut gt_ids = Array2::<u32>::from_elem((10, 10), 9); // background stuff
        let mut pr_ids = Array2::<u32>::from_elem((10, 10), 9);
        // GT A: row 0, cols 0..8 (8 px)
        for c in 0..8 {
            gt_ids[[0, c]] = 1;
        }
        // GT B: row 4 (8 px, will be missed -> FN)
        for c in 0..8 {
            gt_ids[[4, c]] = 2;
        }
        // P1: 6 px shared with A + 2 px on background => IoU 6/(8+8-6) = 0.6
        for c in 2..8 {
            pr_ids[[0, c]] = 1;
        }
        pr_ids[[1, 0]] = 1;
        pr_ids[[1, 1]] = 1;
        // P2: row 6 on background (FP)
        for c in 0..8 {
            pr_ids[[6, c]] = 2;
        }
        let tax = Taxonomy::synthetic(2, 1).unwrap();
        let gt = map_from(gt_ids, &[(1, 0, true), (2, 0, true), (9, 2, false)]);
        let pred = map_from(pr_ids, &[(1, 0, true), (2, 0, true), (9, 2, false)]);
        gt.validate().unwrap();
        pred.validate().unwrap();
        let report = pq_metric(&pred, &gt, &tax);
        let stats = &report.per_class[0];
        assert_eq!(stats.tp, 1);
        assert_eq!(stats.fp, 1);
        assert_eq!(stats.fn_, 1);
        assert_eq!(stats.iou_sum, 0.6);
        assert_eq!(stats.pq(), 0.3);
        assert_eq!(stats.sq(), 0.6);
        assert_eq!(stats.rq(), 0.5);
    }

    #[test]
    fn iou_exactly_half_is_not_a_match() {
        // GT: 4 px; pred: 2 px fully inside => IoU = 2/4 = 0.5 exactly
        let mut gt_ids = Array2::<u32>::zeros((8, 8));
        let mut pr_ids = Array2::<u32>::zeros((8, 8));
        for c in 0..4 {
            gt_ids[[0, c]] = 1;
        }
        pr_ids[[0, 0]] = 1;
        pr_ids[[0, 1]] = 1;
        let tax = Taxonomy::synthetic(2, 1).unwrap();
        let gt = map_from(gt_ids, &[(1, 0, true)]);
        let pred = map_from(pr_ids, &[(1, 0, true)]);
        let report = pq_metric(&pred, &gt, &tax);
        assert_eq!(report.per_class[0].tp, 0);
        assert_eq!(report.per_class[0].fn_, 1);
        assert_eq!(report.per_class[0].fp, 1);
    }

    #[test]
    fn void_discounts_union_and_hides_void_predictions() {
        // GT void on the right half; prediction covers everything with one
        // segment: IoU vs the left GT segment = 32/(32+64-32-32) = 1.0
        let mut gt_ids = Array2::<u32>::zeros((8, 8));
        for r in 0..8 {
            for c in 0..4 {
                gt_ids[[r, c]] = 1;
            }
        }
        let pr_ids = Array2::<u32>::ones((8, 8));
        let tax = Taxonomy::synthetic(2, 1).unwrap();
        let gt = map_from(gt_ids, &[(1, 0, true)]);
        let pred = map_from(pr_ids, &[(1, 0, true)]);
        let report = pq_metric(&pred, &gt, &tax);
        assert_eq!(report.per_class[0].tp, 1);
        assert!((report.per_class[0].iou_sum - 1.0).abs() < 1e-12);

        // a prediction that lies mostly in void is not an FP
        let mut pr_ids = Array2::<u32>::zeros((8, 8));
        for r in 0..8 {
            for c in 5..8 {
                pr_ids[[r, c]] = 7;
            }
        }
        let pred = map_from(pr_ids, &[(7, 1, true)]);
        let report = pq_metric(&pred, &gt, &tax);
        assert_eq!(report.per_class[1].fp, 0);
        assert_eq!(report.per_class[0].fn_, 1);
    }

    #[test]
    fn absent_classes_do_not_enter_means() {
        let mut gt_ids = Array2::<u32>::zeros((8, 8));
        gt_ids[[0, 0]] = 1;
        gt_ids[[0, 1]] = 1;
        let tax = Taxonomy::synthetic(3, 1).unwrap();
        let gt = map_from(gt_ids.clone(), &[(1, 0, true)]);
        let report = pq_metric(&gt, &gt, &tax);
        assert_eq!(report.classes_present(), 1);
        assert_eq!(report.mean_pq(), 1.0);
    }

    #[test]
    fn report_merge_sums_counts() {
        let (_, gt) = generate_scene(&SceneConfig::default(), 1).unwrap();
        let tax = SceneConfig::default().taxonomy().unwrap();
        let single = pq_metric(&gt, &gt, &tax);
        let mut merged = single.clone();
        merged.merge(&single);
        for (a, b) in merged.per_class.iter().zip(single.per_class.iter()) {
            assert_eq!(a.tp, 2 * b.tp);
        }
        assert_eq!(merged.mean_pq(), 1.0);
    }

    #[test]
    fn miou_identity_and_disjoint() {
        let (_, gt) = generate_scene(&SceneConfig::default(), 5).unwrap();
        let tax = SceneConfig::default().taxonomy().unwrap();
        let sem_gt = gt.semantic();
        let classes = sem_gt.map(|c| c.unwrap_or(0));
        let report = miou(&SemanticMap { classes }, &gt, &tax);
        assert_eq!(report.mean(), 1.0);

        // disjoint single-class masks have IoU 0
        let mut gt_ids = Array2::<u32>::zeros((8, 8));
        gt_ids[[0, 0]] = 1;
        let gt2 = map_from(gt_ids, &[(1, 0, true)]);
        let mut pred_classes = Array2::<usize>::from_elem((8, 8), 1);
        pred_classes[[5, 5]] = 0; // class 0 predicted, but not at (0,0)
        let report = miou(&SemanticMap { classes: pred_classes }, &gt2, &Taxonomy::synthetic(2, 1).unwrap());
        assert_eq!(report.per_class[0], Some(0.0));
    }

    #[test]
    fn miou_matches_confusion_oracle() {
        let mut r = crate::rng::stream(&[97]);
        use rand::Rng;
        let tax = Taxonomy::synthetic(2, 1).unwrap();
        for _ in 0..20 {
            let gt_classes = Array2::from_shape_fn((8, 8), |_| r.gen_range(0..4u32));
            // class 3 plays void
            let mut ids = Array2::<u32>::zeros((8, 8));
            let mut segments = BTreeMap::new();
            for class in 0..3u32 {
                let id = class + 1;
                let mut any = false;
                for ((rr, cc), &g) in gt_classes.indexed_iter() {
                    if g == class {
                        ids[[rr, cc]] = id;
                        any = true;
                    }
                }
                if any {
                    segments.insert(id, SegmentInfo { class: class as usize, is_thing: class < 2 });
                }
            }
            let gt = PanopticMap { ids, segments };
            let pred_classes = Array2::from_shape_fn((8, 8), |_| r.gen_range(0..3usize));
            let report = miou(&SemanticMap { classes: pred_classes.clone() }, &gt, &tax);

            // oracle
            for j in 0..3usize {
                let mut tp = 0usize;
                let mut gt_n = 0usize;
                let mut pr_n = 0usize;
                for ((rr, cc), &g) in gt_classes.indexed_iter() {
                    let void = g == 3;
                    let p = pred_classes[[rr, cc]];
                    if !void && g as usize == j {
                        gt_n += 1;
                        if p == j {
                            tp += 1;
                        }
                    }
                    if !void && p == j {
                        pr_n += 1;
                    }
                }
                let union = gt_n + pr_n - tp;
                let expect = if union == 0 { None } else { Some(tp as f64 / union as f64) };
                assert_eq!(report.per_class[j], expect);
            }
        }
    }

    /// Scene family used for oracle evaluations: disjoint things large
    /// enough that every segment keeps a strict-majority feature cell.
    pub(crate) fn oracle_scene_config() -> SceneConfig {
        SceneConfig {
            appearance_noise: 0.0,
            min_thing_size: 12,
            max_thing_size: 22,
            allow_overlap: false,
            min_segment_area: 16,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn noiseless_oracle_reaches_pq_one() {
        let config = oracle_scene_config();
        let tax = config.taxonomy().unwrap();
        let text = class_text_embeddings(config.num_classes(), 16, 0, None).unwrap();
        let embedder = SyntheticEmbedder::new(
            &EmbedderConfig::default(),
            &config.prototypes().unwrap(),
            &text,
        )
        .unwrap();
        let scenes: Vec<_> = (0..10).map(|s| generate_scene(&config, s).unwrap()).collect();
        let report = zero_shot_oracle_eval(
            &scenes,
            &embedder,
            &text,
            0.07,
            &tax,
            DownsampleMode::AreaThreshold,
        )
        .unwrap();
        assert_eq!(report.mean_pq(), 1.0, "noiseless oracle must be perfect");
    }

    #[test]
    fn scrambled_features_score_near_chance() {
        let config = SceneConfig::default();
        let tax = config.taxonomy().unwrap();
        let text = class_text_embeddings(config.num_classes(), 16, 0, None).unwrap();
        let scrambled = SyntheticEmbedder::new(
            &EmbedderConfig { scrambled: true, ..EmbedderConfig::default() },
            &config.prototypes().unwrap(),
            &text,
        )
        .unwrap();
        let scenes: Vec<_> = (0..20).map(|s| generate_scene(&config, s).unwrap()).collect();
        let report = zero_shot_oracle_eval(
            &scenes,
            &scrambled,
            &text,
            0.07,
            &tax,
            DownsampleMode::AreaThreshold,
        )
        .unwrap();
        // 12 classes: chance-level classification leaves PQ far below the
        // informative-feature regime
        assert!(report.mean_pq() < 0.35, "scrambled PQ {}", report.mean_pq());

        // and chance level decreases with more classes
        let small = SceneConfig { num_things: 2, num_stuff: 2, ..SceneConfig::default() };
        let small_tax = small.taxonomy().unwrap();
        let small_text = class_text_embeddings(4, 16, 0, None).unwrap();
        let small_scrambled = SyntheticEmbedder::new(
            &EmbedderConfig { scrambled: true, ..EmbedderConfig::default() },
            &small.prototypes().unwrap(),
            &small_text,
        )
        .unwrap();
        let small_scenes: Vec<_> = (0..20).map(|s| generate_scene(&small, s).unwrap()).collect();
        let small_report = zero_shot_oracle_eval(
            &small_scenes,
            &small_scrambled,
            &small_text,
            0.07,
            &small_tax,
            DownsampleMode::AreaThreshold,
        )
        .unwrap();
        assert!(
            small_report.mean_pq() > report.mean_pq(),
            "chance PQ should fall with class count: {} vs {}",
            small_report.mean_pq(),
            report.mean_pq()
        );
    }

    #[test]
    fn oracle_pq_degrades_with_noise() {
        let text = class_text_embeddings(12, 16, 0, None).unwrap();
        let mut last = f64::INFINITY;
        for noise in [0.0, 0.2, 0.4, 0.6] {
            let config = SceneConfig {
                appearance_noise: noise,
                prototype_scale: 0.05,
                ..oracle_scene_config()
            };
            let tax = config.taxonomy().unwrap();
            let embedder = SyntheticEmbedder::new(
                &EmbedderConfig::default(),
                &config.prototypes().unwrap(),
                &text,
            )
            .unwrap();
            let scenes: Vec<_> = (0..10).map(|s| generate_scene(&config, s).unwrap()).collect();
            let report = zero_shot_oracle_eval(
                &scenes,
                &embedder,
                &text,
                0.07,
                &tax,
                DownsampleMode::AreaThreshold,
            )
            .unwrap();
            let pq = report.mean_pq();
            assert!(pq <= last + 0.01, "PQ increased under more noise: {last} -> {pq}");
            last = pq;
        }
        assert!(last < 0.9, "strongest noise should clearly hurt (PQ {last})");
    }

    #[test]
    fn mask_recall_finds_exact_masks() {
        let (_, gt) = generate_scene(&SceneConfig::default(), 2).unwrap();
        let regions = crate::overseg::oversegment(&gt, 1.0, 0).unwrap();
        let ids = regions.region_ids();
        let hw = 64 * 64;
        let mut sigma = Array2::zeros((ids.len(), hw));
        for (i, id) in ids.iter().enumerate() {
            for (j, on) in regions.region_mask(*id).iter().enumerate() {
                sigma[[i, j]] = if *on { 0.9 } else { 0.1 };
            }
        }
        assert_eq!(mask_recall(&sigma, &regions, 0.5), 1.0);
        let blank = Array2::from_elem((3, hw), 0.1);
        assert_eq!(mask_recall(&blank, &regions, 0.5), 0.0);
    }
}
