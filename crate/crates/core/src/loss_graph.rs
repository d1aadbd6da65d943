//! Differentiable loss construction on the forward tape. Mirrors the pure
//! formulas in [`crate::matching`] exactly; a dual-route test pins the two
//! implementations to each other and finite differences pin the gradients.

use crate::decoder::ForwardGraph;
use crate::matching::{LossBreakdown, LossWeights, MatchResult, SegmentTargets};
use crate::tape::Var;
use ndarray::Array2;

/// Variable handles of one loss evaluation.
pub struct LossVars {
    pub total: Var,
    pub cls: Option<Var>,
    pub bce: Var,
    pub dice: Var,
}

impl LossVars {
    pub fn breakdown(&self, graph: &ForwardGraph, weights: &LossWeights) -> LossBreakdown {
        LossBreakdown::new(
            self.cls.map_or(0.0, |v| graph.tape.value(v)[[0, 0]]),
            graph.tape.value(self.bce)[[0, 0]],
            graph.tape.value(self.dice)[[0, 0]],
            *weights,
        )
    }
}

/// Appends the compound loss for one output head `(logp, mask_logits,
/// sigma)` of the forward graph under a fixed matching.
pub fn compound_loss_graph(
    graph: &mut ForwardGraph,
    head: (Var, Var, Var),
    targets: &SegmentTargets,
    match_result: &MatchResult,
    weights: &LossWeights,
    with_class: bool,
) -> LossVars {
    let (logp, mask_logits, sigma) = head;
    let tape = &mut graph.tape;
    let n = tape.value(logp).dim().0;
    let c_plus_1 = tape.value(logp).dim().1;
    let hw = tape.value(mask_logits).dim().1;
    let k = targets.num_segments();
    let no_object = c_plus_1 - 1;
    let v = targets.num_valid.max(1.0);
    let eps = weights.dice_eps;

    // classification: mean cross-entropy over all queries
    let cls = with_class.then(|| {
        let mut onehot = Array2::zeros((n, c_plus_1));
        for (q, seg) in match_result.segment_for_query.iter().enumerate() {
            let target = seg.map_or(no_object, |t| targets.classes[t]);
            onehot[[q, target]] = 1.0;
        }
        let onehot = tape.leaf(onehot);
        let picked = tape.mul(logp, onehot);
        let summed = tape.sum_all(picked);
        tape.scale(summed, -1.0 / n as f64)
    });

    // per-query constants: matched mask rows, valid-pixel rows, areas
    let mut mask_rows = Array2::zeros((n, hw));
    let mut bce_weights = Array2::zeros((n, hw));
    let mut valid_rows = Array2::zeros((n, hw));
    let mut area_eps = Array2::from_elem((n, 1), eps);
    let k_norm = if k > 0 { 1.0 / k as f64 } else { 0.0 };
    for (t, &q) in match_result.query_for_segment.iter().enumerate() {
        for j in 0..hw {
            mask_rows[[q, j]] = targets.masks[[t, j]];
            if targets.valid[[0, j]] != 0.0 {
                bce_weights[[q, j]] = k_norm / v;
                valid_rows[[q, j]] = 1.0;
            }
        }
        area_eps[[q, 0]] += targets.mask_areas[t];
    }

    let bce = tape.bce_with_logits(mask_logits, mask_rows.clone(), bce_weights);

    // dice: rows of unmatched queries reduce to eps/eps = 1, so their
    // (1 - ratio) term is exactly zero with no gradient
    let mask_leaf = tape.leaf(mask_rows);
    let valid_leaf = tape.leaf(valid_rows);
    let inter = tape.mul(sigma, mask_leaf);
    let inter_sums = tape.sum_rows(inter);
    let inter2 = tape.scale(inter_sums, 2.0);
    let eps_col = tape.leaf(Array2::from_elem((n, 1), eps));
    let numer = tape.add(inter2, eps_col);
    let sig_valid = tape.mul(sigma, valid_leaf);
    let sig_sums = tape.sum_rows(sig_valid);
    let denom_base = tape.leaf(area_eps);
    let denom = tape.add(sig_sums, denom_base);
    let ratio = tape.div(numer, denom);
    let ones = tape.leaf(Array2::ones((n, 1)));
    let dvec = tape.sub(ones, ratio);
    let dsum = tape.sum_all(dvec);
    let dice = tape.scale(dsum, k_norm);

    // weighted total
    let bce_w = tape.scale(bce, weights.w_bce);
    let dice_w = tape.scale(dice, weights.w_dice);
    let mut total = tape.add(bce_w, dice_w);
    if let Some(cls) = cls {
        let cls_w = tape.scale(cls, weights.w_cls);
        total = tape.add(total, cls_w);
    }

    LossVars { total, cls, bce, dice }
}

/// Compound loss on the final head of the graph (plus intermediate heads
/// when deep supervision is active; each aux head is matched and weighted
/// identically and the terms are averaged).
pub fn attach_compound_loss(
    graph: &mut ForwardGraph,
    targets: &SegmentTargets,
    match_result: &MatchResult,
    weights: &LossWeights,
) -> LossVars {
    let final_head = (graph.logp, graph.mask_logits, graph.sigma);
    let main = compound_loss_graph(graph, final_head, targets, match_result, weights, true);
    if graph.aux.is_empty() {
        return main;
    }
    let aux_heads: Vec<(Var, Var, Var)> = graph.aux.clone();
    let mut total = main.total;
    for head in aux_heads {
        let aux = compound_loss_graph(graph, head, targets, match_result, weights, true);
        total = graph.tape.add(total, aux.total);
    }
    let scaled = graph.tape.scale(total, 1.0 / (graph.aux.len() + 1) as f64);
    LossVars { total: scaled, cls: main.cls, bce: main.bce, dice: main.dice }
}

/// Localization-only loss (class head untouched, exactly zero gradient).
pub fn attach_loc_only_loss(
    graph: &mut ForwardGraph,
    targets: &SegmentTargets,
    match_result: &MatchResult,
    weights: &LossWeights,
) -> LossVars {
    let final_head = (graph.logp, graph.mask_logits, graph.sigma);
    compound_loss_graph(graph, final_head, targets, match_result, weights, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{forward_graph, init_params, DecoderConfig, ParamGroup};
    use crate::embedder::{class_text_embeddings, FeatureMap};
    use crate::matching::{compound_loss, hungarian, matching_cost, LossWeights};
    use crate::mathutil::gaussian_matrix;
    use crate::overseg::oversegment;
    use crate::panoptic::{PanopticMap, SegmentInfo};
    use crate::rng;
    use ndarray::Array3;

    struct Setup {
        config: DecoderConfig,
        params: crate::decoder::DecoderParams,
        features: FeatureMap,
        text: crate::embedder::TextEmbeddings,
        gt: PanopticMap,
        size: (usize, usize),
    }

    /// Hand-built 8x8 instance with three segments over three classes and a
    /// random 2x2 feature grid (stride 4), sized to the gradient-check
    /// criterion.
    fn setup(num_blocks: usize) -> Setup {
        let config = DecoderConfig {
            num_queries: 4,
            query_dim: 8,
            num_blocks,
            embed_dim: 4,
            ffn_hidden: 16,
            ..DecoderConfig::default()
        };
        let text = class_text_embeddings(3, 4, 0, None).unwrap();

        let mut ids = ndarray::Array2::<u32>::from_elem((8, 8), 1);
        for r in 0..4 {
            for c in 0..4 {
                ids[[r, c]] = 2;
            }
        }
        for r in 5..8 {
            for c in 4..7 {
                ids[[r, c]] = 3;
            }
        }
        ids[[0, 7]] = crate::panoptic::VOID_ID;
        let mut segments = std::collections::BTreeMap::new();
        segments.insert(1, SegmentInfo { class: 0, is_thing: false });
        segments.insert(2, SegmentInfo { class: 1, is_thing: true });
        segments.insert(3, SegmentInfo { class: 2, is_thing: true });
        let gt = PanopticMap { ids, segments };
        gt.validate().unwrap();

        let mut r = rng::stream(&[21]);
        let flat = gaussian_matrix(&mut r, 4, 4);
        let values = Array3::from_shape_fn((2, 2, 4), |(gr, gc, k)| flat[[gr * 2 + gc, k]]);
        let features = FeatureMap { values, stride: 4 };

        let params = init_params(&config, 5).unwrap();
        Setup { config, params, features, text, gt, size: (8, 8) }
    }

    #[test]
    fn tape_loss_equals_pure_loss() {
        let s = setup(2);
        let weights = LossWeights::default();
        let mut graph =
            forward_graph(&s.params, &s.config, &s.features, &s.text, s.size, false).unwrap();
        let pred = graph.prediction();
        let cost = matching_cost(&pred, &s.gt, &weights).unwrap();
        let m = hungarian(&cost).unwrap();
        let pure = compound_loss(&pred, &s.gt, &m, &weights).unwrap();

        let targets = SegmentTargets::from_panoptic(&s.gt);
        let vars = attach_compound_loss(&mut graph, &targets, &m, &weights);
        let tape_loss = vars.breakdown(&graph, &weights);

        assert!((pure.cls - tape_loss.cls).abs() < 1e-9);
        assert!((pure.bce - tape_loss.bce).abs() < 1e-9);
        assert!((pure.dice - tape_loss.dice).abs() < 1e-9);
        assert!((pure.total - graph.tape.value(vars.total)[[0, 0]]).abs() < 1e-9);
    }

    /// Full-model gradient check: analytic tape gradients against central
    /// finite differences for every parameter, with a fixed matching.
    fn gradient_check(config: &DecoderConfig, masked: bool) -> f64 {
        let s = setup(config.num_blocks);
        let config = config.clone();
        let weights = LossWeights::default();
        let targets = SegmentTargets::from_panoptic(&s.gt);

        let mut graph =
            forward_graph(&s.params, &config, &s.features, &s.text, s.size, masked).unwrap();
        let pred = graph.prediction();
        let cost = matching_cost(&pred, &s.gt, &weights).unwrap();
        let m = hungarian(&cost).unwrap();
        let vars = attach_compound_loss(&mut graph, &targets, &m, &weights);
        graph.tape.backward(vars.total);

        let analytic: Vec<(String, Array2<f64>)> = graph
            .param_vars
            .iter()
            .map(|(name, _, v)| (name.clone(), graph.tape.grad(*v).clone()))
            .collect();

        let eval = |params: &crate::decoder::DecoderParams| -> f64 {
            let mut graph =
                forward_graph(params, &config, &s.features, &s.text, s.size, masked).unwrap();
            let vars = attach_compound_loss(&mut graph, &targets, &m, &weights);
            graph.tape.value(vars.total)[[0, 0]]
        };

        let mut worst: f64 = 0.0;
        let mut param_idx = 0;
        let mut names = Vec::new();
        s.params.for_each(|name, _, _| names.push(name.to_string()));
        for name in names {
            let base = analytic[param_idx].1.clone();
            assert_eq!(analytic[param_idx].0, name);
            let dims = base.dim();
            for r in 0..dims.0 {
                for c in 0..dims.1 {
                    let mut plus = s.params.clone();
                    let mut minus = s.params.clone();
                    let mut h = 0.0;
                    plus.for_each_mut(|n, _, a| {
                        if n == name {
                            h = 1e-5 * (1.0 + a[[r, c]].abs());
                            a[[r, c]] += h;
                        }
                    });
                    minus.for_each_mut(|n, _, a| {
                        if n == name {
                            a[[r, c]] -= h;
                        }
                    });
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let an = base[[r, c]];
                    let scale = an.abs().max(fd.abs());
                    if scale > 1e-7 {
                        worst = worst.max((an - fd).abs() / scale.max(1e-6));
                    } else {
                        assert!(
                            (an - fd).abs() < 1e-7,
                            "{name}[{r},{c}]: near-zero grads differ: {an} vs {fd}"
                        );
                    }
                }
            }
            param_idx += 1;
        }
        worst
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let config = DecoderConfig {
            num_queries: 4,
            query_dim: 8,
            num_blocks: 1,
            embed_dim: 4,
            ffn_hidden: 16,
            ..DecoderConfig::default()
        };
        let worst = gradient_check(&config, false);
        assert!(worst <= 1e-5, "max relative gradient error {worst:e}");
    }

    #[test]
    fn deep_supervision_gradients_flow() {
        let config = DecoderConfig {
            num_queries: 4,
            query_dim: 8,
            num_blocks: 2,
            embed_dim: 4,
            ffn_hidden: 16,
            deep_supervision: true,
            ..DecoderConfig::default()
        };
        let s = setup(2);
        let weights = LossWeights::default();
        let targets = SegmentTargets::from_panoptic(&s.gt);
        let mut graph =
            forward_graph(&s.params, &config, &s.features, &s.text, s.size, false).unwrap();
        assert_eq!(graph.aux.len(), 1);
        let pred = graph.prediction();
        let cost = matching_cost(&pred, &s.gt, &weights).unwrap();
        let m = hungarian(&cost).unwrap();
        let vars = attach_compound_loss(&mut graph, &targets, &m, &weights);
        graph.tape.backward(vars.total);
        let g = graph.grad_of("query_embed").unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
        assert!(graph.tape.value(vars.total)[[0, 0]].is_finite());
    }

    #[test]
    fn loc_only_leaves_class_head_without_gradient() {
        let s = setup(2);
        let weights = LossWeights::default();
        let regions = oversegment(&s.gt, 1.0, 3).unwrap();
        let targets = SegmentTargets::from_regions(&regions);

        let mut graph =
            forward_graph(&s.params, &s.config, &s.features, &s.text, s.size, false).unwrap();
        let pred = graph.prediction();
        let cost = crate::matching::matching_cost_on_targets(&pred, &targets, &weights, false).unwrap();
        let m = hungarian(&cost).unwrap();
        let vars = attach_loc_only_loss(&mut graph, &targets, &m, &weights);
        graph.tape.backward(vars.total);

        for (name, group, v) in &graph.param_vars {
            let grad = graph.tape.grad(*v);
            if *group == ParamGroup::ClassHead {
                assert!(
                    grad.iter().all(|&g| g == 0.0),
                    "{name} received gradient under loc-only loss"
                );
            }
        }
        // localization path does receive gradient
        let g = graph.grad_of("mask_head.w2").unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn supervised_loss_reaches_no_object_embedding() {
        let s = setup(2);
        let weights = LossWeights::default();
        let targets = SegmentTargets::from_panoptic(&s.gt);
        let mut graph =
            forward_graph(&s.params, &s.config, &s.features, &s.text, s.size, false).unwrap();
        let pred = graph.prediction();
        let cost = matching_cost(&pred, &s.gt, &weights).unwrap();
        let m = hungarian(&cost).unwrap();
        let vars = attach_compound_loss(&mut graph, &targets, &m, &weights);
        graph.tape.backward(vars.total);
        let g = graph.grad_of("class_head.no_object").unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn one_small_gradient_step_decreases_loss() {
        let s = setup(2);
        let weights = LossWeights::default();
        let targets = SegmentTargets::from_panoptic(&s.gt);
        let mut graph =
            forward_graph(&s.params, &s.config, &s.features, &s.text, s.size, false).unwrap();
        let pred = graph.prediction();
        let cost = matching_cost(&pred, &s.gt, &weights).unwrap();
        let m = hungarian(&cost).unwrap();
        let vars = attach_compound_loss(&mut graph, &targets, &m, &weights);
        graph.tape.backward(vars.total);
        let before = graph.tape.value(vars.total)[[0, 0]];

        let grads: Vec<Array2<f64>> =
            graph.param_vars.iter().map(|(_, _, v)| graph.tape.grad(*v).clone()).collect();
        let mut stepped = s.params.clone();
        let mut i = 0;
        stepped.for_each_mut(|_, _, a| {
            *a -= &(grads[i].mapv(|g| g * 1e-3));
            i += 1;
        });

        let mut graph2 =
            forward_graph(&stepped, &s.config, &s.features, &s.text, s.size, false).unwrap();
        let vars2 = attach_compound_loss(&mut graph2, &targets, &m, &weights);
        let after = graph2.tape.value(vars2.total)[[0, 0]];
        assert!(after < before, "loss did not decrease: {before} -> {after}");
    }
}
