//! Trainable mask-transformer decoder.
//!
//! N learnable queries attend to the frozen embedder features through a
//! stack of cross-attention / self-attention / feed-forward blocks and are
//! decoded into per-query class posteriors and sigmoid localization maps.
//! Classification logits are scaled cosine similarities between projected
//! query embeddings and the frozen class text embeddings, with one trainable
//! no-object embedding appended; the text matrix itself is never a
//! parameter, so the language head stays frozen by construction.

use crate::embedder::{FeatureMap, TextEmbeddings};
use crate::error::{Error, Result};
use crate::mathutil;
use crate::rng::{self, salt};
use crate::tape::{Tape, UpsamplePlan, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Number of learnable queries.
    pub num_queries: usize,
    /// Width of the query/pixel embedding space.
    pub query_dim: usize,
    /// Number of decoder blocks.
    pub num_blocks: usize,
    /// Dimensionality of the joint vision-language space.
    pub embed_dim: usize,
    /// Hidden width of the feed-forward sublayers.
    pub ffn_hidden: usize,
    /// Restrict cross-attention of block l to cells inside the mask
    /// predicted after block l-1.
    pub masked_attention: bool,
    /// Add matching losses on intermediate block outputs.
    pub deep_supervision: bool,
    /// Initial value of the cosine logit scale.
    pub logit_scale_init: f64,
    pub init_seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_queries: 16,
            query_dim: 32,
            num_blocks: 2,
            embed_dim: 16,
            ffn_hidden: 64,
            masked_attention: false,
            deep_supervision: false,
            logit_scale_init: 10.0,
            init_seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.num_blocks == 0 {
            return Err(Error::config("decoder needs at least one query and one block"));
        }
        if self.query_dim < 4 || self.query_dim % 4 != 0 {
            return Err(Error::config("query_dim must be a positive multiple of 4"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::config("ffn_hidden must be positive"));
        }
        if !(self.logit_scale_init > 0.0) {
            return Err(Error::config("logit scale must be positive"));
        }
        Ok(())
    }
}

/// Which training stage may update a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Class-embedding projection, no-object embedding, logit scale.
    ClassHead,
    /// Everything else (queries, attention, FFN, mask heads).
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
struct AttnParams {
    wq: Array2<f64>,
    bq: Array2<f64>,
    wk: Array2<f64>,
    bk: Array2<f64>,
    wv: Array2<f64>,
    bv: Array2<f64>,
    wo: Array2<f64>,
    bo: Array2<f64>,
    ln_g: Array2<f64>,
    ln_b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockParams {
    cross: AttnParams,
    self_attn: AttnParams,
    ffn_w1: Array2<f64>,
    ffn_b1: Array2<f64>,
    ffn_w2: Array2<f64>,
    ffn_b2: Array2<f64>,
    ffn_ln_g: Array2<f64>,
    ffn_ln_b: Array2<f64>,
}

/// All trainable state of the decoder. Every parameter is a dense 2-D
/// array; `for_each` enumerates them in a fixed order shared by the
/// optimizer, the EMA update, checkpoints and the finite-difference tests.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    query_embed: Array2<f64>,
    input_w: Array2<f64>,
    input_b: Array2<f64>,
    mask_feat_w: Array2<f64>,
    mask_feat_b: Array2<f64>,
    blocks: Vec<BlockParams>,
    final_ln_g: Array2<f64>,
    final_ln_b: Array2<f64>,
    mask_w1: Array2<f64>,
    mask_b1: Array2<f64>,
    mask_w2: Array2<f64>,
    mask_b2: Array2<f64>,
    class_w: Array2<f64>,
    class_b: Array2<f64>,
    no_object: Array2<f64>,
    log_scale: Array2<f64>,
}

fn linear_init(rng: &mut rand_chacha::ChaCha12Rng, rows: usize, cols: usize) -> Array2<f64> {
    let scale = (2.0 / (rows + cols) as f64).sqrt();
    mathutil::gaussian_matrix(rng, rows, cols).mapv(|v| v * scale)
}

fn attn_init(rng: &mut rand_chacha::ChaCha12Rng, d: usize) -> AttnParams {
    AttnParams {
        wq: linear_init(rng, d, d),
        bq: Array2::zeros((1, d)),
        wk: linear_init(rng, d, d),
        bk: Array2::zeros((1, d)),
        wv: linear_init(rng, d, d),
        bv: Array2::zeros((1, d)),
        wo: linear_init(rng, d, d),
        bo: Array2::zeros((1, d)),
        ln_g: Array2::ones((1, d)),
        ln_b: Array2::zeros((1, d)),
    }
}

/// Deterministic parameter initialization.
pub fn init_params(config: &DecoderConfig, seed: u64) -> Result<DecoderParams> {
    config.validate()?;
    let d = config.query_dim;
    let dim = config.embed_dim;
    let mut r = rng::stream(&[seed, salt::DECODER, config.init_seed]);
    let blocks = (0..config.num_blocks)
        .map(|_| BlockParams {
            cross: attn_init(&mut r, d),
            self_attn: attn_init(&mut r, d),
            ffn_w1: linear_init(&mut r, d, config.ffn_hidden),
            ffn_b1: Array2::zeros((1, config.ffn_hidden)),
            ffn_w2: linear_init(&mut r, config.ffn_hidden, d),
            ffn_b2: Array2::zeros((1, d)),
            ffn_ln_g: Array2::ones((1, d)),
            ffn_ln_b: Array2::zeros((1, d)),
        })
        .collect();
    Ok(DecoderParams {
        query_embed: mathutil::gaussian_matrix(&mut r, config.num_queries, d).mapv(|v| v * 0.5),
        input_w: linear_init(&mut r, dim, d),
        input_b: Array2::zeros((1, d)),
        mask_feat_w: linear_init(&mut r, d, d),
        mask_feat_b: Array2::zeros((1, d)),
        blocks,
        final_ln_g: Array2::ones((1, d)),
        final_ln_b: Array2::zeros((1, d)),
        mask_w1: linear_init(&mut r, d, d),
        mask_b1: Array2::zeros((1, d)),
        mask_w2: linear_init(&mut r, d, d),
        mask_b2: Array2::zeros((1, d)),
        class_w: linear_init(&mut r, d, dim),
        class_b: Array2::zeros((1, dim)),
        no_object: mathutil::gaussian_matrix(&mut r, 1, dim).mapv(|v| v / (dim as f64).sqrt()),
        log_scale: Array2::from_elem((1, 1), config.logit_scale_init.ln()),
    })
}

impl DecoderParams {
    pub fn num_queries(&self) -> usize {
        self.query_embed.dim().0
    }

    pub fn query_dim(&self) -> usize {
        self.query_embed.dim().1
    }

    pub fn embed_dim(&self) -> usize {
        self.class_w.dim().1
    }

    /// Current (positive) cosine logit scale.
    pub fn logit_scale(&self) -> f64 {
        self.log_scale[[0, 0]].exp()
    }

    /// Zeroes the mask-embedding head; useful as a diagnostic baseline
    /// (every localization map becomes exactly 0.5).
    pub fn zero_mask_head(&mut self) {
        self.mask_w1.fill(0.0);
        self.mask_b1.fill(0.0);
        self.mask_w2.fill(0.0);
        self.mask_b2.fill(0.0);
    }

    /// Replaces the query initialization with a row permutation of itself.
    pub fn permute_queries(&mut self, order: &[usize]) {
        assert_eq!(order.len(), self.num_queries());
        let old = self.query_embed.clone();
        for (dst, &src) in order.iter().enumerate() {
            self.query_embed.row_mut(dst).assign(&old.row(src));
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, ParamGroup, &Array2<f64>)) {
        self.visit(|name, group, array| f(name, group, array));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, ParamGroup, &mut Array2<f64>)) {
        use ParamGroup::*;
        f("query_embed", Decoder, &mut self.query_embed);
        f("input.w", Decoder, &mut self.input_w);
        f("input.b", Decoder, &mut self.input_b);
        f("mask_feat.w", Decoder, &mut self.mask_feat_w);
        f("mask_feat.b", Decoder, &mut self.mask_feat_b);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("block{l}.{s}");
            f(&p("cross.wq"), Decoder, &mut b.cross.wq);
            f(&p("cross.bq"), Decoder, &mut b.cross.bq);
            f(&p("cross.wk"), Decoder, &mut b.cross.wk);
            f(&p("cross.bk"), Decoder, &mut b.cross.bk);
            f(&p("cross.wv"), Decoder, &mut b.cross.wv);
            f(&p("cross.bv"), Decoder, &mut b.cross.bv);
            f(&p("cross.wo"), Decoder, &mut b.cross.wo);
            f(&p("cross.bo"), Decoder, &mut b.cross.bo);
            f(&p("cross.ln_g"), Decoder, &mut b.cross.ln_g);
            f(&p("cross.ln_b"), Decoder, &mut b.cross.ln_b);
            f(&p("self.wq"), Decoder, &mut b.self_attn.wq);
            f(&p("self.bq"), Decoder, &mut b.self_attn.bq);
            f(&p("self.wk"), Decoder, &mut b.self_attn.wk);
            f(&p("self.bk"), Decoder, &mut b.self_attn.bk);
            f(&p("self.wv"), Decoder, &mut b.self_attn.wv);
            f(&p("self.bv"), Decoder, &mut b.self_attn.bv);
            f(&p("self.wo"), Decoder, &mut b.self_attn.wo);
            f(&p("self.bo"), Decoder, &mut b.self_attn.bo);
            f(&p("self.ln_g"), Decoder, &mut b.self_attn.ln_g);
            f(&p("self.ln_b"), Decoder, &mut b.self_attn.ln_b);
            f(&p("ffn.w1"), Decoder, &mut b.ffn_w1);
            f(&p("ffn.b1"), Decoder, &mut b.ffn_b1);
            f(&p("ffn.w2"), Decoder, &mut b.ffn_w2);
            f(&p("ffn.b2"), Decoder, &mut b.ffn_b2);
            f(&p("ffn.ln_g"), Decoder, &mut b.ffn_ln_g);
            f(&p("ffn.ln_b"), Decoder, &mut b.ffn_ln_b);
        }
        f("final_ln.g", Decoder, &mut self.final_ln_g);
        f("final_ln.b", Decoder, &mut self.final_ln_b);
        f("mask_head.w1", Decoder, &mut self.mask_w1);
        f("mask_head.b1", Decoder, &mut self.mask_b1);
        f("mask_head.w2", Decoder, &mut self.mask_w2);
        f("mask_head.b2", Decoder, &mut self.mask_b2);
        f("class_head.w", ClassHead, &mut self.class_w);
        f("class_head.b", ClassHead, &mut self.class_b);
        f("class_head.no_object", ClassHead, &mut self.no_object);
        f("class_head.log_scale", ClassHead, &mut self.log_scale);
    }

    fn visit(&self, mut f: impl FnMut(&str, ParamGroup, &Array2<f64>)) {
        // mirror of for_each_mut; keep the two in sync
        use ParamGroup::*;
        f("query_embed", Decoder, &self.query_embed);
        f("input.w", Decoder, &self.input_w);
        f("input.b", Decoder, &self.input_b);
        f("mask_feat.w", Decoder, &self.mask_feat_w);
        f("mask_feat.b", Decoder, &self.mask_feat_b);
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block{l}.{s}");
            f(&p("cross.wq"), Decoder, &b.cross.wq);
            f(&p("cross.bq"), Decoder, &b.cross.bq);
            f(&p("cross.wk"), Decoder, &b.cross.wk);
            f(&p("cross.bk"), Decoder, &b.cross.bk);
            f(&p("cross.wv"), Decoder, &b.cross.wv);
            f(&p("cross.bv"), Decoder, &b.cross.bv);
            f(&p("cross.wo"), Decoder, &b.cross.wo);
            f(&p("cross.bo"), Decoder, &b.cross.bo);
            f(&p("cross.ln_g"), Decoder, &b.cross.ln_g);
            f(&p("cross.ln_b"), Decoder, &b.cross.ln_b);
            f(&p("self.wq"), Decoder, &b.self_attn.wq);
            f(&p("self.bq"), Decoder, &b.self_attn.bq);
            f(&p("self.wk"), Decoder, &b.self_attn.wk);
            f(&p("self.bk"), Decoder, &b.self_attn.bk);
            f(&p("self.wv"), Decoder, &b.self_attn.wv);
            f(&p("self.bv"), Decoder, &b.self_attn.bv);
            f(&p("self.wo"), Decoder, &b.self_attn.wo);
            f(&p("self.bo"), Decoder, &b.self_attn.bo);
            f(&p("self.ln_g"), Decoder, &b.self_attn.ln_g);
            f(&p("self.ln_b"), Decoder, &b.self_attn.ln_b);
            f(&p("ffn.w1"), Decoder, &b.ffn_w1);
            f(&p("ffn.b1"), Decoder, &b.ffn_b1);
            f(&p("ffn.w2"), Decoder, &b.ffn_w2);
            f(&p("ffn.b2"), Decoder, &b.ffn_b2);
            f(&p("ffn.ln_g"), Decoder, &b.ffn_ln_g);
            f(&p("ffn.ln_b"), Decoder, &b.ffn_ln_b);
        }
        f("final_ln.g", Decoder, &self.final_ln_g);
        f("final_ln.b", Decoder, &self.final_ln_b);
        f("mask_head.w1", Decoder, &self.mask_w1);
        f("mask_head.b1", Decoder, &self.mask_b1);
        f("mask_head.w2", Decoder, &self.mask_w2);
        f("mask_head.b2", Decoder, &self.mask_b2);
        f("class_head.w", ClassHead, &self.class_w);
        f("class_head.b", ClassHead, &self.class_b);
        f("class_head.no_object", ClassHead, &self.no_object);
        f("class_head.log_scale", ClassHead, &self.log_scale);
    }

    pub fn named(&self) -> Vec<(String, ParamGroup, Array2<f64>)> {
        let mut out = Vec::new();
        self.visit(|name, group, array| out.push((name.to_string(), group, array.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, a| n += a.len());
        n
    }

    /// Elementwise check that all parameters are finite.
    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, _, a| ok &= a.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Per-query class posteriors and localization maps at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction {
    /// `N x (C+1)` rows on the probability simplex.
    pub p: Array2<f64>,
    /// `N x (H*W)` pre-sigmoid mask logits, row-major pixels.
    pub mask_logits: Array2<f64>,
    /// `N x (H*W)` sigmoid localization maps.
    pub sigma: Array2<f64>,
    pub height: usize,
    pub width: usize,
}

impl MaskPrediction {
    pub fn num_queries(&self) -> usize {
        self.p.dim().0
    }

    pub fn num_classes(&self) -> usize {
        self.p.dim().1 - 1
    }

    pub fn no_object_index(&self) -> usize {
        self.p.dim().1 - 1
    }
}

/// Handles into the forward graph used by the training loss.
pub struct ForwardGraph {
    pub tape: Tape,
    /// Leaf vars aligned with the `for_each` parameter order.
    pub param_vars: Vec<(String, ParamGroup, Var)>,
    pub logp: Var,
    pub p: Var,
    pub mask_logits: Var,
    pub sigma: Var,
    /// Intermediate `(logp, mask_logits, sigma)` per block when deep
    /// supervision is enabled (final block excluded).
    pub aux: Vec<(Var, Var, Var)>,
    /// Cross-attention weights per block, recorded for audits.
    pub attention: Vec<Array2<f64>>,
    pub grid: (usize, usize),
    pub image_size: (usize, usize),
}

impl ForwardGraph {
    pub fn prediction(&self) -> MaskPrediction {
        let (h, w) = self.image_size;
        MaskPrediction {
            p: self.tape.value(self.p).clone(),
            mask_logits: self.tape.value(self.mask_logits).clone(),
            sigma: self.tape.value(self.sigma).clone(),
            height: h,
            width: w,
        }
    }

    pub fn grad_of(&self, name: &str) -> Option<&Array2<f64>> {
        self.param_vars
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, v)| self.tape.grad(*v))
    }
}

/// Fixed sinusoidal 2-D position encoding on the feature grid, `H'W' x d`.
fn position_encoding(gh: usize, gw: usize, d: usize) -> Array2<f64> {
    let quarter = d / 4;
    let mut out = Array2::zeros((gh * gw, d));
    for gr in 0..gh {
        for gc in 0..gw {
            let idx = gr * gw + gc;
            for k in 0..quarter {
                let freq = 10_000f64.powf(-(k as f64) / quarter as f64);
                out[[idx, 2 * k]] = (gr as f64 * freq).sin();
                out[[idx, 2 * k + 1]] = (gr as f64 * freq).cos();
                out[[idx, 2 * quarter + 2 * k]] = (gc as f64 * freq).sin();
                out[[idx, 2 * quarter + 2 * k + 1]] = (gc as f64 * freq).cos();
            }
        }
    }
    out
}

struct BlockVars {
    cross: [Var; 10],
    self_attn: [Var; 10],
    ffn: [Var; 6],
}

/// Builds the forward computation on a fresh tape.
pub fn forward_graph(
    params: &DecoderParams,
    config: &DecoderConfig,
    features: &FeatureMap,
    text: &TextEmbeddings,
    image_size: (usize, usize),
    masked_attention: bool,
) -> Result<ForwardGraph> {
    config.validate()?;
    let (h, w) = image_size;
    let (gh, gw, fdim) = features.values.dim();
    if fdim != params.input_w.dim().0 {
        return Err(Error::shape(format!(
            "feature dim {fdim} does not match decoder input dim {}",
            params.input_w.dim().0
        )));
    }
    if gh != h.div_ceil(features.stride) || gw != w.div_ceil(features.stride) {
        return Err(Error::shape(format!(
            "feature grid {gh}x{gw} inconsistent with image {h}x{w} at stride {}",
            features.stride
        )));
    }
    if text.dim() != params.embed_dim() {
        return Err(Error::shape("text embedding dim does not match class head"));
    }
    let d = params.query_dim();
    let n = params.num_queries();
    let cells = gh * gw;

    let mut tape = Tape::new();

    // parameter leaves, in canonical order
    let mut param_vars: Vec<(String, ParamGroup, Var)> = Vec::new();
    params.for_each(|name, group, array| {
        let var = tape.leaf(array.clone());
        param_vars.push((name.to_string(), group, var));
    });
    let lookup = |name: &str, vars: &[(String, ParamGroup, Var)]| -> Var {
        vars.iter().find(|(n, _, _)| n == name).map(|(_, _, v)| *v).unwrap()
    };
    let v_query = lookup("query_embed", &param_vars);
    let v_input_w = lookup("input.w", &param_vars);
    let v_input_b = lookup("input.b", &param_vars);
    let v_mask_feat_w = lookup("mask_feat.w", &param_vars);
    let v_mask_feat_b = lookup("mask_feat.b", &param_vars);
    let v_final_g = lookup("final_ln.g", &param_vars);
    let v_final_b = lookup("final_ln.b", &param_vars);
    let v_mask_w1 = lookup("mask_head.w1", &param_vars);
    let v_mask_b1 = lookup("mask_head.b1", &param_vars);
    let v_mask_w2 = lookup("mask_head.w2", &param_vars);
    let v_mask_b2 = lookup("mask_head.b2", &param_vars);
    let v_class_w = lookup("class_head.w", &param_vars);
    let v_class_b = lookup("class_head.b", &param_vars);
    let v_no_object = lookup("class_head.no_object", &param_vars);
    let v_log_scale = lookup("class_head.log_scale", &param_vars);
    let blocks: Vec<BlockVars> = (0..config.num_blocks)
        .map(|l| {
            let g = |s: &str| lookup(&format!("block{l}.{s}"), &param_vars);
            BlockVars {
                cross: [
                    g("cross.wq"), g("cross.bq"), g("cross.wk"), g("cross.bk"), g("cross.wv"),
                    g("cross.bv"), g("cross.wo"), g("cross.bo"), g("cross.ln_g"), g("cross.ln_b"),
                ],
                self_attn: [
                    g("self.wq"), g("self.bq"), g("self.wk"), g("self.bk"), g("self.wv"),
                    g("self.bv"), g("self.wo"), g("self.bo"), g("self.ln_g"), g("self.ln_b"),
                ],
                ffn: [
                    g("ffn.w1"), g("ffn.b1"), g("ffn.w2"), g("ffn.b2"), g("ffn.ln_g"),
                    g("ffn.ln_b"),
                ],
            }
        })
        .collect();

    // frozen inputs
    let flat = features
        .values
        .view()
        .into_shape_with_order((cells, fdim))
        .expect("contiguous feature map")
        .to_owned();
    let v_feat = tape.leaf(flat);
    let v_pos = tape.leaf(position_encoding(gh, gw, d));
    let v_text = tape.leaf(text.values().clone());

    // pixel pathway
    let proj = tape.matmul(v_feat, v_input_w);
    let proj = tape.add_row(proj, v_input_b);
    let pix = tape.add(proj, v_pos);
    let mf = tape.matmul(pix, v_mask_feat_w);
    let mask_feats = tape.add_row(mf, v_mask_feat_b);
    let mask_feats_t = tape.transpose(mask_feats);

    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    // mask/class heads, shared across blocks
    let heads = |tape: &mut Tape, q: Var| -> (Var, Var, Var) {
        // (normed queries, low-res mask logits, class logits)
        let qn = tape.layer_norm_rows(q, v_final_g, v_final_b);
        let m1 = tape.matmul(qn, v_mask_w1);
        let m1 = tape.add_row(m1, v_mask_b1);
        let m1 = tape.gelu(m1);
        let m2 = tape.matmul(m1, v_mask_w2);
        let mask_emb = tape.add_row(m2, v_mask_b2);
        let low_logits = tape.matmul(mask_emb, mask_feats_t);

        let ce = tape.matmul(qn, v_class_w);
        let ce = tape.add_row(ce, v_class_b);
        let qhat = tape.l2_normalize_rows(ce);
        let text_t = tape.transpose(v_text);
        let sims_txt = tape.matmul(qhat, text_t);
        let nob_hat = tape.l2_normalize_rows(v_no_object);
        let nob_t = tape.transpose(nob_hat);
        let sims_nob = tape.matmul(qhat, nob_t);
        let sims = tape.concat_cols(sims_txt, sims_nob);
        let lambda = tape.exp(v_log_scale);
        let cls_logits = tape.mul_scalar(sims, lambda);
        (qn, low_logits, cls_logits)
    };

    let upsample =
        |tape: &mut Tape, low: Var| tape.upsample_bilinear(low, UpsamplePlan::new((gh, gw), (h, w)));

    let mut q = v_query;
    let mut attention = Vec::new();
    let mut aux = Vec::new();

    for (l, bv) in blocks.iter().enumerate() {
        // cross-attention, optionally restricted to the mask predicted so far
        let attn_mask: Option<Array2<bool>> = if masked_attention && l > 0 {
            let (_, low_logits, _) = heads(&mut tape, q);
            Some(tape.value(low_logits).mapv(|v| v > 0.0))
        } else {
            None
        };
        let [wq, bq, wk, bk, wv, bv_, wo, bo, ln_g, ln_b] = bv.cross;
        let qq = tape.matmul(q, wq);
        let qq = tape.add_row(qq, bq);
        let kk = tape.matmul(pix, wk);
        let kk = tape.add_row(kk, bk);
        let vv = tape.matmul(pix, wv);
        let vv = tape.add_row(vv, bv_);
        let kk_t = tape.transpose(kk);
        let scores = tape.matmul(qq, kk_t);
        let scores = tape.scale(scores, inv_sqrt_d);
        let attn = match attn_mask {
            Some(mask) => tape.masked_softmax_rows(scores, mask),
            None => tape.softmax_rows(scores),
        };
        attention.push(tape.value(attn).clone());
        let ctx = tape.matmul(attn, vv);
        let out = tape.matmul(ctx, wo);
        let out = tape.add_row(out, bo);
        let residual = tape.add(q, out);
        q = tape.layer_norm_rows(residual, ln_g, ln_b);

        // self-attention among queries
        let [wq, bq, wk, bk, wv, bv_, wo, bo, ln_g, ln_b] = bv.self_attn;
        let qq = tape.matmul(q, wq);
        let qq = tape.add_row(qq, bq);
        let kk = tape.matmul(q, wk);
        let kk = tape.add_row(kk, bk);
        let vv = tape.matmul(q, wv);
        let vv = tape.add_row(vv, bv_);
        let kk_t = tape.transpose(kk);
        let scores = tape.matmul(qq, kk_t);
        let scores = tape.scale(scores, inv_sqrt_d);
        let attn = tape.softmax_rows(scores);
        let ctx = tape.matmul(attn, vv);
        let out = tape.matmul(ctx, wo);
        let out = tape.add_row(out, bo);
        let residual = tape.add(q, out);
        q = tape.layer_norm_rows(residual, ln_g, ln_b);

        // feed-forward
        let [w1, b1, w2, b2, ln_g, ln_b] = bv.ffn;
        let hdn = tape.matmul(q, w1);
        let hdn = tape.add_row(hdn, b1);
        let hdn = tape.gelu(hdn);
        let out = tape.matmul(hdn, w2);
        let out = tape.add_row(out, b2);
        let residual = tape.add(q, out);
        q = tape.layer_norm_rows(residual, ln_g, ln_b);

        if config.deep_supervision && l + 1 < config.num_blocks {
            let (_, low_logits, cls_logits) = heads(&mut tape, q);
            let logits_hi = upsample(&mut tape, low_logits);
            let sig = tape.sigmoid(logits_hi);
            let logp = tape.log_softmax_rows(cls_logits);
            aux.push((logp, logits_hi, sig));
        }
    }

    let (_, low_logits, cls_logits) = heads(&mut tape, q);
    let mask_logits = upsample(&mut tape, low_logits);
    let sigma = tape.sigmoid(mask_logits);
    let logp = tape.log_softmax_rows(cls_logits);
    let p = tape.exp(logp);

    debug_assert_eq!(tape.value(p).dim(), (n, text.num_classes() + 1));

    Ok(ForwardGraph {
        tape,
        param_vars,
        logp,
        p,
        mask_logits,
        sigma,
        aux,
        attention,
        grid: (gh, gw),
        image_size,
    })
}

/// Inference forward pass with full cross-attention.
pub fn forward(
    params: &DecoderParams,
    config: &DecoderConfig,
    features: &FeatureMap,
    text: &TextEmbeddings,
    image_size: (usize, usize),
) -> Result<MaskPrediction> {
    Ok(forward_graph(params, config, features, text, image_size, false)?.prediction())
}

/// Inference forward pass with mask-restricted cross-attention: block `l`
/// attends only to feature cells where the mask predicted after block `l-1`
/// exceeds 0.5, falling back to full attention for queries whose prior mask
/// is empty. Block 0 always uses full attention.
pub fn forward_masked_attention(
    params: &DecoderParams,
    config: &DecoderConfig,
    features: &FeatureMap,
    text: &TextEmbeddings,
    image_size: (usize, usize),
) -> Result<MaskPrediction> {
    Ok(forward_graph(params, config, features, text, image_size, true)?.prediction())
}
