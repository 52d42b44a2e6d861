//! Training objective on the reverse-mode tape, and the same objective
//! evaluated through the plain forward pass.
//!
//! Per scene both views go through the fusion transformer on one tape with
//! shared parameter leaves. Geometric-supervision scenes contribute `L_geo`
//! on `F_g`; semantic-supervision scenes contribute `w_sem · L_sem` on `F_s`
//! in stage 2 and nothing in stage 1. Scene terms are summed over the batch.

use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{Supervision, SyntheticScene};
use crate::autodiff::{RowMix, Tape, Var};
use crate::error::{domain, MatchaError, Result};
use crate::fusion::{
    align_inputs, fusion_forward, patchify, positional_encoding, unpatchify_index, AttentionIds, Branch, BranchIds,
    FusionParams, LinearIds, LAYER_NORM_EPS,
};
use crate::supervision::{
    dual_softmax_loss, flow_noise, semantic_loss, CorrespondenceSet, DescriptorSet, LossConfig, Reduction, TauMode,
    NORMALIZE_EPS,
};
use crate::tensor::{pixel_sampling_taps, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Stage> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => domain(format!("stage must be 1 or 2, got {n}")),
        }
    }
}

/// Unweighted loss terms and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub geo: f64,
    pub cl: f64,
    pub flow: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.geo += other.geo;
        self.cl += other.cl;
        self.flow += other.flow;
        self.total += other.total;
    }
}

fn check_finite(value: f64, term: &str, scene: &SyntheticScene) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(MatchaError::Numerical(format!("non-finite {term} loss ({value}) in scene {}", scene.seed)))
    }
}

fn scene_terms(scene: &SyntheticScene, stage: Stage) -> (bool, bool) {
    match (scene.supervision, stage) {
        (Supervision::Geometric, _) => (true, false),
        (Supervision::Semantic, Stage::One) => (false, false),
        (Supervision::Semantic, Stage::Two) => (false, true),
    }
}

fn combine(geo: f64, cl: f64, flow: f64, cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown { geo, cl, flow, total: geo + cfg.w_sem * (cfg.w_cl * cl + cfg.w_flow * flow) }
}

struct Leaves {
    vars: Vec<Var>,
}

impl Leaves {
    fn new(tape: &mut Tape, params: &FusionParams) -> Leaves {
        let vars = (0..params.layout().blocks.len()).map(|id| tape.leaf(params.matrix(id).to_owned())).collect();
        Leaves { vars }
    }

    fn linear(&self, tape: &mut Tape, x: Var, ids: LinearIds) -> Var {
        let y = tape.matmul(x, self.vars[ids.weight]);
        match ids.bias {
            Some(b) => tape.add_row(y, self.vars[b]),
            None => y,
        }
    }

    fn attention(&self, tape: &mut Tape, params: &FusionParams, queries: Var, keys_values: Var, ids: &AttentionIds) -> Var {
        let cfg = params.config();
        let (q_in, kv_in) = if cfg.pre_norm {
            (tape.layer_norm_rows(queries, LAYER_NORM_EPS), tape.layer_norm_rows(keys_values, LAYER_NORM_EPS))
        } else {
            (queries, keys_values)
        };
        let q = self.linear(tape, q_in, ids.q);
        let k = self.linear(tape, kv_in, ids.k);
        let v = self.linear(tape, kv_in, ids.v);
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let heads: Vec<Var> = (0..cfg.num_heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * hd, hd);
                let kh = tape.slice_cols(k, h * hd, hd);
                let vh = tape.slice_cols(v, h * hd, hd);
                let scores = tape.matmul_t(qh, kh);
                let scores = tape.scale(scores, scale);
                let w = tape.softmax_rows(scores);
                tape.matmul(w, vh)
            })
            .collect();
        let joined = tape.concat_cols(&heads);
        self.linear(tape, joined, ids.o)
    }

    fn head(&self, tape: &mut Tape, first: Var, last: Var, ids: &BranchIds) -> Var {
        let x = tape.concat_cols(&[first, last]);
        let hidden = self.linear(tape, x, ids.fc1);
        let hidden = tape.gelu(hidden);
        self.linear(tape, hidden, ids.fc2)
    }
}

/// Fused maps of one view as `cells × channels` tape values; only the
/// requested heads are built.
struct ViewOutputs {
    semantic: Option<Var>,
    geometric: Option<Var>,
}

fn view_forward(
    tape: &mut Tape,
    leaves: &Leaves,
    params: &FusionParams,
    semantic_raw: &FeatureMap,
    geometric_raw: &FeatureMap,
    need_semantic: bool,
    need_geometric: bool,
) -> Result<ViewOutputs> {
    let cfg = *params.config();
    let layout = params.layout();
    let p = cfg.patch_size;
    let aligned = align_inputs(semantic_raw, geometric_raw, &cfg)?;
    let tok_h = patchify(&aligned, p)?;
    let tok_l = patchify(geometric_raw, p)?;
    let (gr, gc) = (tok_l.grid_rows, tok_l.grid_cols);
    let th = tape.leaf(tok_h.values);
    let tl = tape.leaf(tok_l.values);
    let mut h0 = leaves.linear(tape, th, layout.semantic.input);
    let mut l0 = leaves.linear(tape, tl, layout.geometric.input);
    if cfg.positional_encoding {
        let pe = tape.leaf(positional_encoding(gr, gc, cfg.hidden_dim));
        h0 = tape.add(h0, pe);
        l0 = tape.add(l0, pe);
    }
    let (mut h, mut l) = (h0, l0);
    for block in 0..cfg.num_blocks {
        let (sem, geo) = (&layout.semantic, &layout.geometric);
        let d = leaves.attention(tape, params, h, h, &sem.self_attn[block]);
        let h_s = tape.add(h, d);
        let d = leaves.attention(tape, params, l, l, &geo.self_attn[block]);
        let l_s = tape.add(l, d);
        let d = leaves.attention(tape, params, h_s, l_s, &sem.cross_attn[block]);
        let h_next = tape.add(h, d);
        let d = leaves.attention(tape, params, l_s, h_s, &geo.cross_attn[block]);
        let l_next = tape.add(l, d);
        (h, l) = (h_next, l_next);
    }
    let cells = geometric_raw.num_cells();
    let unpatch = |tape: &mut Tape, tokens: Var, channels: usize| {
        let idx = Arc::new(unpatchify_index(gr, gc, channels, p));
        tape.gather(tokens, idx, cells, channels)
    };
    let semantic = need_semantic.then(|| {
        let t = leaves.head(tape, h0, h, &layout.semantic);
        unpatch(tape, t, cfg.out_dim_semantic)
    });
    let geometric = need_geometric.then(|| {
        let t = leaves.head(tape, l0, l, &layout.geometric);
        unpatch(tape, t, cfg.out_dim_geometric)
    });
    Ok(ViewOutputs { semantic, geometric })
}

fn sampler(map: &FeatureMap, pixels: &[[f64; 2]]) -> Result<Arc<RowMix>> {
    let taps = pixel_sampling_taps(map.height(), map.width(), map.stride(), pixels)?;
    let rows = taps.iter().map(|t| t.iter().copied().filter(|(_, w)| *w != 0.0).collect()).collect();
    Ok(Arc::new(RowMix { rows }))
}

/// `−Σ_i log softmax_row(L)_ii` over both directions, reduced over rows.
fn tape_dual_nll(tape: &mut Tape, logits: Var, rows: usize, reduction: Reduction) -> Var {
    let forward = tape.log_softmax_rows(logits);
    let forward = tape.diag_sum(forward);
    let lt = tape.transpose(logits);
    let backward = tape.log_softmax_rows(lt);
    let backward = tape.diag_sum(backward);
    let both = tape.add(forward, backward);
    let k = match reduction {
        Reduction::Sum => -1.0,
        Reduction::Mean => -1.0 / rows as f64,
    };
    tape.scale(both, k)
}

fn tape_similarity(tape: &mut Tape, xa: Var, xb: Var, normalize: bool) -> Var {
    let (xa, xb) = if normalize {
        (tape.normalize_rows(xa, NORMALIZE_EPS), tape.normalize_rows(xb, NORMALIZE_EPS))
    } else {
        (xa, xb)
    };
    tape.matmul_t(xa, xb)
}

/// `Σ_i ‖softmax(⟨q_i, F⟩/β) · P − target_i‖` for queries against one target map.
fn tape_flow(tape: &mut Tape, queries: Var, target: Var, positions: &FeatureMap, targets: Array2<f64>, beta: f64) -> Var {
    let sims = tape.matmul_t(queries, target);
    let sims = tape.scale(sims, 1.0 / beta);
    let m = tape.softmax_rows(sims);
    let pos = tape.leaf(positions.cell_pixel_positions());
    let pred = tape.matmul(m, pos);
    let t = tape.leaf(targets);
    let diff = tape.sub(pred, t);
    let norms = tape.row_norm(diff);
    tape.sum(norms)
}

fn flow_targets(points: &[[f64; 2]], noise: &[[f64; 2]]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 2), |(i, c)| points[i][c] + noise[i][c])
}

/// Loss and full (unfrozen) gradient of one scene.
fn scene_objective(params: &FusionParams, scene: &SyntheticScene, stage: Stage, cfg: &LossConfig) -> Result<(LossBreakdown, Vec<f64>)> {
    let (use_geo, use_sem) = scene_terms(scene, stage);
    let mut grad = vec![0.0; params.len()];
    if !use_geo && !use_sem {
        return Ok((LossBreakdown::default(), grad));
    }
    let gt: &CorrespondenceSet = &scene.correspondences;
    if gt.is_empty() {
        return domain(format!("scene {} has no correspondences", scene.seed));
    }
    let m = gt.len();
    let mut tape = Tape::new();
    let leaves = Leaves::new(&mut tape, params);
    let va = view_forward(&mut tape, &leaves, params, &scene.semantic[0], &scene.geometric[0], use_sem, use_geo)?;
    let vb = view_forward(&mut tape, &leaves, params, &scene.semantic[1], &scene.geometric[1], use_sem, use_geo)?;
    let grid = &scene.geometric[0];
    let sample_a = sampler(grid, &gt.a)?;
    let sample_b = sampler(&scene.geometric[1], &gt.b)?;

    let mut terms: Vec<Var> = Vec::new();
    let (mut geo, mut cl, mut flow) = (0.0, 0.0, 0.0);
    if let (Some(fa), Some(fb)) = (va.geometric, vb.geometric) {
        let xa = tape.mix_rows(fa, sample_a.clone());
        let xb = tape.mix_rows(fb, sample_b.clone());
        let s = tape_similarity(&mut tape, xa, xb, cfg.normalize_descriptors);
        let l = tape_dual_nll(&mut tape, s, m, cfg.geometric_reduction);
        geo = check_finite(tape.scalar(l), "geometric", scene)?;
        terms.push(l);
    }
    if let (Some(fa), Some(fb)) = (va.semantic, vb.semantic) {
        let xa = tape.mix_rows(fa, sample_a);
        let xb = tape.mix_rows(fb, sample_b);
        let s = tape_similarity(&mut tape, xa, xb, cfg.normalize_descriptors);
        let logit_scale = match cfg.tau_mode {
            TauMode::Multiply => cfg.tau,
            TauMode::Divide => 1.0 / cfg.tau,
        };
        let logits = tape.scale(s, logit_scale);
        let l_cl = tape_dual_nll(&mut tape, logits, m, cfg.contrastive_reduction);
        cl = check_finite(tape.scalar(l_cl), "contrastive", scene)?;

        let noise = flow_noise(m, cfg, scene.seed)?;
        let fwd = tape_flow(&mut tape, xa, fb, &scene.geometric[1], flow_targets(&gt.b, &noise[..m]), cfg.beta);
        let bwd = tape_flow(&mut tape, xb, fa, grid, flow_targets(&gt.a, &noise[m..]), cfg.beta);
        let l_flow = tape.add(fwd, bwd);
        flow = check_finite(tape.scalar(l_flow), "flow", scene)?;

        let l_cl = tape.scale(l_cl, cfg.w_sem * cfg.w_cl);
        let l_flow = tape.scale(l_flow, cfg.w_sem * cfg.w_flow);
        terms.push(l_cl);
        terms.push(l_flow);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t);
    }
    let breakdown = combine(geo, cl, flow, cfg);
    check_finite(tape.scalar(total), "total", scene)?;

    let grads = tape.backward(total);
    for (block, var) in params.layout().blocks.iter().zip(&leaves.vars) {
        if let Some(g) = grads.get(*var) {
            let g = g.as_standard_layout();
            grad[block.range()].copy_from_slice(g.as_slice().expect("standard layout"));
        }
    }
    Ok((breakdown, grad))
}

/// Summed loss and its gradient over `scenes`, flat in parameter order.
///
/// In stage 1 every semantic-branch coordinate of the gradient is zero.
/// Per-scene results are combined by [`tree_sum`] in batch order, so the
/// result is bitwise the same with or without `parallel`.
pub fn loss_and_gradient(
    params: &FusionParams,
    scenes: &[SyntheticScene],
    stage: Stage,
    cfg: &LossConfig,
    parallel: bool,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (loss, mut grad) = unfrozen_loss_and_gradient(params, scenes, stage, cfg, parallel)?;
    if stage == Stage::One {
        for (g, frozen) in grad.iter_mut().zip(params.layout().branch_mask(Branch::Semantic)) {
            if frozen {
                *g = 0.0;
            }
        }
    }
    Ok((loss, grad))
}

/// [`loss_and_gradient`] without the stage-1 freeze: the exact gradient of
/// the stage objective with respect to every parameter.
pub fn unfrozen_loss_and_gradient(
    params: &FusionParams,
    scenes: &[SyntheticScene],
    stage: Stage,
    cfg: &LossConfig,
    parallel: bool,
) -> Result<(LossBreakdown, Vec<f64>)> {
    cfg.validate()?;
    let per_scene: Vec<Result<(LossBreakdown, Vec<f64>)>> = if parallel {
        scenes.par_iter().map(|s| scene_objective(params, s, stage, cfg)).collect()
    } else {
        scenes.iter().map(|s| scene_objective(params, s, stage, cfg)).collect()
    };
    let per_scene = per_scene.into_iter().collect::<Result<Vec<_>>>()?;
    if per_scene.is_empty() {
        return Ok((LossBreakdown::default(), vec![0.0; params.len()]));
    }
    Ok(tree_sum(per_scene))
}

/// Pairwise sum: the first `n/2` items, then the rest, then their sum.
/// Repeating a batch therefore doubles the result exactly.
fn tree_sum(mut items: Vec<(LossBreakdown, Vec<f64>)>) -> (LossBreakdown, Vec<f64>) {
    if items.len() == 1 {
        return items.pop().expect("one item");
    }
    let right = items.split_off(items.len() / 2);
    let (mut loss, mut grad) = tree_sum(items);
    let (rl, rg) = tree_sum(right);
    loss.accumulate(&rl);
    for (acc, v) in grad.iter_mut().zip(&rg) {
        *acc += v;
    }
    (loss, grad)
}

fn descriptors(map: &FeatureMap, points: &[[f64; 2]]) -> Result<DescriptorSet> {
    DescriptorSet::new(map.sample_at_pixels(points)?, points.to_vec())
}

/// The stage objective through [`fusion_forward`] and the supervision
/// losses, without the tape.
pub fn batch_loss(params: &FusionParams, scenes: &[SyntheticScene], stage: Stage, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let mut loss = LossBreakdown::default();
    for scene in scenes {
        let (use_geo, use_sem) = scene_terms(scene, stage);
        if !use_geo && !use_sem {
            continue;
        }
        let gt = &scene.correspondences;
        let fa = fusion_forward(&scene.semantic[0], &scene.geometric[0], params)?;
        let fb = fusion_forward(&scene.semantic[1], &scene.geometric[1], params)?;
        let (mut geo, mut cl, mut flow) = (0.0, 0.0, 0.0);
        if use_geo {
            let xa = descriptors(&fa.geometric, &gt.a)?;
            let xb = descriptors(&fb.geometric, &gt.b)?;
            geo = check_finite(dual_softmax_loss(&xa, &xb, cfg)?, "geometric", scene)?;
        }
        if use_sem {
            let s = semantic_loss(&fa.semantic, &fb.semantic, gt, cfg, scene.seed)?;
            cl = check_finite(s.contrastive, "contrastive", scene)?;
            flow = check_finite(s.flow, "flow", scene)?;
        }
        loss.accumulate(&combine(geo, cl, flow, cfg));
    }
    Ok(loss)
}
