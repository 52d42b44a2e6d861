//! Supervision losses: dual-softmax for geometric descriptors, CLIP-style
//! contrastive plus soft-argmax flow for semantic descriptors, and their
//! weighted combinations.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, softmax_rows};
use crate::error::{config, domain, Result};
use crate::io::{csv_bytes, read_csv, write_atomic};
use crate::tensor::{l2_normalize_rows, FeatureMap};

/// Epsilon used when descriptors are L2-normalized inside the losses.
pub const NORMALIZE_EPS: f64 = 1e-8;

/// How the contrastive scale enters the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    /// logits = τ · S
    Multiply,
    /// logits = S / τ
    Divide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub beta: f64,
    pub w_cl: f64,
    pub w_flow: f64,
    pub w_sem: f64,
    /// Standard deviation of the flow-target noise, in image pixels.
    pub flow_noise_std: f64,
    pub noise_enabled: bool,
    pub tau_mode: TauMode,
    /// Reduction over rows of each direction of the dual-softmax loss.
    pub geometric_reduction: Reduction,
    /// Reduction over rows of each cross-entropy term of the contrastive loss.
    pub contrastive_reduction: Reduction,
    /// L2-normalize descriptors before the dual-softmax and contrastive losses.
    pub normalize_descriptors: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.02,
            beta: 14.3,
            w_cl: 1.0,
            w_flow: 1.0,
            w_sem: 0.1,
            flow_noise_std: 25.0,
            noise_enabled: true,
            tau_mode: TauMode::Multiply,
            geometric_reduction: Reduction::Sum,
            contrastive_reduction: Reduction::Mean,
            normalize_descriptors: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return config(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return config(format!("beta must be positive, got {}", self.beta));
        }
        for (name, w) in [("w_cl", self.w_cl), ("w_flow", self.w_flow), ("w_sem", self.w_sem)] {
            if !(w >= 0.0 && w.is_finite()) {
                return config(format!("{name} must be non-negative, got {w}"));
            }
        }
        if !(self.flow_noise_std >= 0.0 && self.flow_noise_std.is_finite()) {
            return config(format!("flow_noise_std must be non-negative, got {}", self.flow_noise_std));
        }
        Ok(())
    }
}

/// `M` descriptors of dimension `D` with the image-pixel keypoints they were read at.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub vectors: Array2<f64>,
    pub keypoints: Vec<[f64; 2]>,
}

impl DescriptorSet {
    pub fn new(vectors: Array2<f64>, keypoints: Vec<[f64; 2]>) -> Result<DescriptorSet> {
        if vectors.nrows() != keypoints.len() {
            return domain(format!("{} descriptors but {} keypoints", vectors.nrows(), keypoints.len()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return domain("descriptor set contains non-finite values");
        }
        Ok(DescriptorSet { vectors, keypoints })
    }

    /// Descriptors without keypoint provenance.
    pub fn from_vectors(vectors: Array2<f64>) -> Result<DescriptorSet> {
        let n = vectors.nrows();
        DescriptorSet::new(vectors, vec![[0.0, 0.0]; n])
    }

    pub fn count(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn normalized(&self) -> DescriptorSet {
        let mut vectors = self.vectors.clone();
        l2_normalize_rows(&mut vectors, NORMALIZE_EPS);
        DescriptorSet { vectors, keypoints: self.keypoints.clone() }
    }
}

/// `S[i][j] = ⟨Xa_i, Xb_j⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(pub Array2<f64>);

impl SimilarityMatrix {
    pub fn between(xa: &DescriptorSet, xb: &DescriptorSet) -> Result<SimilarityMatrix> {
        if xa.dim() != xb.dim() {
            return domain(format!("descriptor dims differ: {} vs {}", xa.dim(), xb.dim()));
        }
        Ok(SimilarityMatrix(xa.vectors.dot(&xb.vectors.t())))
    }
}

/// Paired image-pixel points with optional per-pair weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub a: Vec<[f64; 2]>,
    pub b: Vec<[f64; 2]>,
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct CorrespondenceRow {
    xa: f64,
    ya: f64,
    xb: f64,
    yb: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<f64>,
}

impl CorrespondenceSet {
    pub fn new(a: Vec<[f64; 2]>, b: Vec<[f64; 2]>) -> Result<CorrespondenceSet> {
        if a.len() != b.len() {
            return domain(format!("correspondence sides differ in length: {} vs {}", a.len(), b.len()));
        }
        if a.iter().chain(&b).any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return domain("correspondence coordinates must be finite");
        }
        Ok(CorrespondenceSet { a, b, weights: None })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Reads `xa,ya,xb,yb[,w]`.
    pub fn read_csv(path: &Path) -> Result<CorrespondenceSet> {
        let rows: Vec<CorrespondenceRow> = read_csv(path)?;
        let mut set = CorrespondenceSet::new(
            rows.iter().map(|r| [r.xa, r.ya]).collect(),
            rows.iter().map(|r| [r.xb, r.yb]).collect(),
        )?;
        if rows.iter().any(|r| r.w.is_some()) {
            set.weights = Some(rows.iter().map(|r| r.w.unwrap_or(1.0)).collect());
        }
        Ok(set)
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let rows: Vec<CorrespondenceRow> = (0..self.len())
            .map(|i| CorrespondenceRow {
                xa: self.a[i][0],
                ya: self.a[i][1],
                xb: self.b[i][0],
                yb: self.b[i][1],
                w: self.weights.as_ref().map(|w| w[i]),
            })
            .collect();
        csv_bytes(&rows, &["xa", "ya", "xb", "yb"])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv_bytes()?)
    }
}

fn check_pairing(xa: &DescriptorSet, xb: &DescriptorSet) -> Result<()> {
    if xa.count() != xb.count() {
        return domain(format!("descriptor counts differ: {} vs {}", xa.count(), xb.count()));
    }
    if xa.count() == 0 {
        return domain("descriptor sets are empty");
    }
    Ok(())
}

fn reduce(total: f64, rows: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / rows as f64,
    }
}

/// `−Σ log softmax_row(L)_ii`, reduced over rows.
fn diagonal_nll(logits: &Array2<f64>, reduction: Reduction) -> f64 {
    let total = -log_softmax_rows(logits).diag().sum();
    reduce(total, logits.nrows(), reduction)
}

/// Dual-softmax loss on a precomputed similarity matrix, both directions summed.
pub fn dual_softmax_from_similarity(s: &SimilarityMatrix, reduction: Reduction) -> f64 {
    diagonal_nll(&s.0, reduction) + diagonal_nll(&s.0.t().to_owned(), reduction)
}

fn prepared(xa: &DescriptorSet, xb: &DescriptorSet, cfg: &LossConfig) -> Result<SimilarityMatrix> {
    check_pairing(xa, xb)?;
    if cfg.normalize_descriptors {
        SimilarityMatrix::between(&xa.normalized(), &xb.normalized())
    } else {
        SimilarityMatrix::between(xa, xb)
    }
}

/// Geometric dual-softmax loss: negative log-likelihood of the true match
/// under row-softmax of `S` plus the same under row-softmax of `Sᵀ`.
pub fn dual_softmax_loss(xa: &DescriptorSet, xb: &DescriptorSet, cfg: &LossConfig) -> Result<f64> {
    let s = prepared(xa, xb, cfg)?;
    Ok(dual_softmax_from_similarity(&s, cfg.geometric_reduction))
}

pub fn contrastive_logits(s: &SimilarityMatrix, tau: f64, mode: TauMode) -> Array2<f64> {
    match mode {
        TauMode::Multiply => &s.0 * tau,
        TauMode::Divide => &s.0 / tau,
    }
}

/// Symmetric cross-entropy with targets `0..M` on `τ·S` and `τ·Sᵀ`.
pub fn clip_from_similarity(s: &SimilarityMatrix, tau: f64, mode: TauMode, reduction: Reduction) -> f64 {
    let logits = contrastive_logits(s, tau, mode);
    diagonal_nll(&logits, reduction) + diagonal_nll(&logits.t().to_owned(), reduction)
}

pub fn clip_contrastive_loss(xa: &DescriptorSet, xb: &DescriptorSet, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let s = prepared(xa, xb, cfg)?;
    Ok(clip_from_similarity(&s, cfg.tau, cfg.tau_mode, cfg.contrastive_reduction))
}

/// Matching probabilities `m(q) = softmax_q(⟨query, F_q⟩ / β)` over every cell of `target`.
pub fn matching_probabilities(query: ArrayView1<f64>, target: &FeatureMap, beta: f64) -> Result<Array2<f64>> {
    if !(beta > 0.0) {
        return config(format!("beta must be positive, got {beta}"));
    }
    if query.len() != target.channels() {
        return domain(format!("query dim {} does not match {} target channels", query.len(), target.channels()));
    }
    let sims = target.matrix().dot(&query) / beta;
    Ok(softmax_rows(&sims.insert_axis(ndarray::Axis(0))))
}

/// Soft-argmax correspondence: probability-weighted mean of cell centers, in image pixels.
pub fn soft_correspondence(query: ArrayView1<f64>, target: &FeatureMap, beta: f64) -> Result<[f64; 2]> {
    let m = matching_probabilities(query, target, beta)?;
    let p = m.dot(&target.cell_pixel_positions());
    Ok([p[[0, 0]], p[[0, 1]]])
}

/// Flow-target noise for `pairs` correspondences: the first `pairs` entries
/// perturb the a→b targets, the next `pairs` the b→a targets. All zeros when
/// noise is disabled.
pub fn flow_noise(pairs: usize, cfg: &LossConfig, seed: u64) -> Result<Vec<[f64; 2]>> {
    if !cfg.noise_enabled || cfg.flow_noise_std == 0.0 {
        return Ok(vec![[0.0, 0.0]; 2 * pairs]);
    }
    let normal = Normal::new(0.0, cfg.flow_noise_std).map_err(|e| crate::MatchaError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..2 * pairs).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect())
}

/// Dense soft-argmax flow loss, summed over pairs and both directions.
pub fn semantic_flow_loss(
    fa: &FeatureMap,
    fb: &FeatureMap,
    gt: &CorrespondenceSet,
    cfg: &LossConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    if gt.is_empty() {
        return domain("flow loss needs at least one correspondence");
    }
    if fa.channels() != fb.channels() {
        return domain(format!("flow loss maps differ in channels: {} vs {}", fa.channels(), fb.channels()));
    }
    let noise = flow_noise(gt.len(), cfg, seed)?;
    let qa = fa.sample_at_pixels(&gt.a)?;
    let qb = fb.sample_at_pixels(&gt.b)?;
    let n = gt.len();
    let mut total = 0.0;
    for i in 0..n {
        let pred_b = soft_correspondence(qa.row(i), fb, cfg.beta)?;
        let pred_a = soft_correspondence(qb.row(i), fa, cfg.beta)?;
        let tb = [gt.b[i][0] + noise[i][0], gt.b[i][1] + noise[i][1]];
        let ta = [gt.a[i][0] + noise[n + i][0], gt.a[i][1] + noise[n + i][1]];
        total += (pred_b[0] - tb[0]).hypot(pred_b[1] - tb[1]);
        total += (pred_a[0] - ta[0]).hypot(pred_a[1] - ta[1]);
    }
    Ok(total)
}

/// Components of the semantic loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticLoss {
    pub contrastive: f64,
    pub flow: f64,
    pub total: f64,
}

/// `w_cl · L_cl + w_flow · L_flow`, with descriptors read from `fa`/`fb` at the GT keypoints.
pub fn semantic_loss(
    fa: &FeatureMap,
    fb: &FeatureMap,
    gt: &CorrespondenceSet,
    cfg: &LossConfig,
    seed: u64,
) -> Result<SemanticLoss> {
    cfg.validate()?;
    let xa = DescriptorSet::new(fa.sample_at_pixels(&gt.a)?, gt.a.clone())?;
    let xb = DescriptorSet::new(fb.sample_at_pixels(&gt.b)?, gt.b.clone())?;
    let contrastive = clip_contrastive_loss(&xa, &xb, cfg)?;
    let flow = semantic_flow_loss(fa, fb, gt, cfg, seed)?;
    Ok(SemanticLoss { contrastive, flow, total: combine_semantic(contrastive, flow, cfg) })
}

pub fn combine_semantic(contrastive: f64, flow: f64, cfg: &LossConfig) -> f64 {
    cfg.w_cl * contrastive + cfg.w_flow * flow
}

/// `L_geo + w_sem · L_sem`.
pub fn total_loss(geometric: f64, semantic: f64, w_sem: f64) -> f64 {
    geometric + w_sem * semantic
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Role, Stride};
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn identity_sets() -> (DescriptorSet, DescriptorSet) {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        (DescriptorSet::from_vectors(e.clone()).unwrap(), DescriptorSet::from_vectors(e).unwrap())
    }

    // Closed form for M = 2 with unit diagonal and zero off-diagonal.
    fn aligned_row() -> f64 {
        let e = 1f64.exp();
        -(e / (e + 1.0)).ln()
    }

    #[test]
    fn dual_softmax_singleton_is_zero() {
        let x = DescriptorSet::from_vectors(array![[0.3, -2.0]]).unwrap();
        assert_eq!(dual_softmax_loss(&x, &x, &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn dual_softmax_identity_and_permuted() {
        let (a, b) = identity_sets();
        let cfg = LossConfig::default();
        let aligned = dual_softmax_loss(&a, &b, &cfg).unwrap();
        assert!((aligned - 4.0 * aligned_row()).abs() < 1e-12);
        assert!((aligned - 1.25306).abs() < 1e-4);
        let swapped = DescriptorSet::from_vectors(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let crossed = dual_softmax_loss(&a, &swapped, &cfg).unwrap();
        let e = 1f64.exp();
        assert!((crossed - 4.0 * -(1.0 / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((crossed - 5.25306).abs() < 1e-4);
        assert!(crossed > aligned);
    }

    #[test]
    fn dual_softmax_count_mismatch() {
        let a = DescriptorSet::from_vectors(array![[1.0, 0.0]]).unwrap();
        let (b, _) = identity_sets();
        assert!(matches!(dual_softmax_loss(&a, &b, &LossConfig::default()), Err(crate::MatchaError::Domain(_))));
    }

    #[test]
    fn clip_closed_forms() {
        let (a, b) = identity_sets();
        let single = DescriptorSet::from_vectors(array![[1.0, 2.0]]).unwrap();
        for tau in [1e-3, 0.02, 1.0, 50.0] {
            let cfg = LossConfig { tau, ..Default::default() };
            assert_eq!(clip_contrastive_loss(&single, &single, &cfg).unwrap(), 0.0);
        }
        let cfg = LossConfig { tau: 1.0, ..Default::default() };
        let l = clip_contrastive_loss(&a, &b, &cfg).unwrap();
        assert!((l - 2.0 * aligned_row()).abs() < 1e-12);
        assert!((l - 0.62652).abs() < 1e-4);
        let cfg = LossConfig { tau: 1e-6, ..Default::default() };
        assert!((clip_contrastive_loss(&a, &b, &cfg).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-3);
        let cfg = LossConfig { tau: 1.0, tau_mode: TauMode::Divide, ..Default::default() };
        assert!((clip_contrastive_loss(&a, &b, &cfg).unwrap() - 2.0 * aligned_row()).abs() < 1e-12);
    }

    fn map_from(h: usize, w: usize, c: usize, f: impl FnMut(usize, usize, usize) -> f64) -> FeatureMap {
        FeatureMap::from_fn(h, w, c, Stride::integer(8), Role::SemanticFused, f).unwrap()
    }

    #[test]
    fn soft_correspondence_uniform_is_centroid() {
        let m = map_from(3, 4, 2, |_, _, _| 0.7);
        let q = Array1::from(vec![1.0, -1.0]);
        let p = soft_correspondence(q.view(), &m, 14.3).unwrap();
        let c = m.grid_to_pixel([1.5, 1.0]);
        assert!((p[0] - c[0]).abs() < 1e-12 && (p[1] - c[1]).abs() < 1e-12);
    }

    #[test]
    fn soft_correspondence_two_cells() {
        let m = map_from(1, 2, 1, |_, x, _| if x == 0 { 1.0 } else { 0.0 });
        let q = Array1::from(vec![1.0]);
        let p = soft_correspondence(q.view(), &m, 14.3).unwrap();
        let grid_x = m.pixel_to_grid(p)[0];
        let expected = 1.0 / (1.0 + (1.0f64 / 14.3).exp());
        assert!((grid_x - expected).abs() < 1e-12);
        assert!((grid_x - 0.48252).abs() < 1e-5);
    }

    #[test]
    fn soft_correspondence_hard_limit() {
        let m = map_from(3, 3, 2, |y, x, c| if (y, x) == (2, 1) { [1.0, 0.0][c] } else { [0.2, 0.5][c] });
        let q = Array1::from(vec![1.0, 0.0]);
        let p = soft_correspondence(q.view(), &m, 1e-4).unwrap();
        let expect = m.grid_to_pixel([1.0, 2.0]);
        assert!((p[0] - expect[0]).abs() < 1e-9 && (p[1] - expect[1]).abs() < 1e-9);
    }

    fn no_noise() -> LossConfig {
        LossConfig { noise_enabled: false, ..Default::default() }
    }

    #[test]
    fn flow_loss_constant_maps_match_brute_force() {
        let fa = map_from(4, 4, 3, |_, _, c| c as f64);
        let fb = fa.clone();
        let gt = CorrespondenceSet::new(vec![[5.0, 9.0], [20.0, 3.0]], vec![[12.0, 30.0], [1.0, 1.0]]).unwrap();
        // every prediction is the mean of all cell centers
        let mut cx = 0.0;
        let mut cy = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let p = fa.grid_to_pixel([x as f64, y as f64]);
                cx += p[0] / 16.0;
                cy += p[1] / 16.0;
            }
        }
        let expected: f64 = gt.a.iter().chain(&gt.b).map(|p| (p[0] - cx).hypot(p[1] - cy)).sum();
        let l = semantic_flow_loss(&fa, &fb, &gt, &no_noise(), 0).unwrap();
        assert!((l - expected).abs() < 1e-9);
    }

    #[test]
    fn flow_loss_hard_limit_vanishes() {
        // one-hot cells: each cell matches itself far better than any other
        let fa = map_from(2, 2, 4, |y, x, c| if c == y * 2 + x { 1.0 } else { 0.0 });
        let gt = CorrespondenceSet::new(vec![fa.grid_to_pixel([1.0, 0.0])], vec![fa.grid_to_pixel([1.0, 0.0])]).unwrap();
        let cfg = LossConfig { beta: 1e-4, ..no_noise() };
        assert!(semantic_flow_loss(&fa, &fa, &gt, &cfg, 0).unwrap() < 1e-9);
    }

    #[test]
    fn flow_loss_seeded_noise_is_deterministic() {
        let fa = map_from(3, 3, 2, |y, x, c| (y + 2 * x + c) as f64 * 0.1);
        let gt = CorrespondenceSet::new(vec![[4.0, 4.0], [10.0, 12.0]], vec![[6.0, 3.0], [15.0, 8.0]]).unwrap();
        let cfg = LossConfig::default();
        let a = semantic_flow_loss(&fa, &fa, &gt, &cfg, 42).unwrap();
        assert_eq!(a, semantic_flow_loss(&fa, &fa, &gt, &cfg, 42).unwrap());
        assert_ne!(a, semantic_flow_loss(&fa, &fa, &gt, &cfg, 43).unwrap());
        assert!(semantic_flow_loss(&fa, &fa, &CorrespondenceSet::new(vec![], vec![]).unwrap(), &cfg, 0).is_err());
    }

    #[test]
    fn semantic_and_total_weights() {
        let fa = map_from(3, 3, 2, |y, x, c| ((y * 3 + x) as f64 * 0.37 + c as f64).sin());
        let fb = map_from(3, 3, 2, |y, x, c| ((y * 3 + x) as f64 * 0.41 - c as f64).cos());
        let gt = CorrespondenceSet::new(vec![[4.0, 4.0], [10.0, 12.0], [3.0, 18.0]], vec![[6.0, 3.0], [15.0, 8.0], [20.0, 20.0]]).unwrap();
        let base = no_noise();
        let both = semantic_loss(&fa, &fb, &gt, &base, 0).unwrap();
        let xa = DescriptorSet::new(fa.sample_at_pixels(&gt.a).unwrap(), gt.a.clone()).unwrap();
        let xb = DescriptorSet::new(fb.sample_at_pixels(&gt.b).unwrap(), gt.b.clone()).unwrap();
        let cl = clip_contrastive_loss(&xa, &xb, &base).unwrap();
        let flow = semantic_flow_loss(&fa, &fb, &gt, &base, 0).unwrap();
        assert!((both.total - (cl + flow)).abs() < 1e-12);
        let only_flow = semantic_loss(&fa, &fb, &gt, &LossConfig { w_cl: 0.0, ..base }, 0).unwrap();
        assert_eq!(only_flow.total, flow);
        let only_cl = semantic_loss(&fa, &fb, &gt, &LossConfig { w_flow: 0.0, ..base }, 0).unwrap();
        assert_eq!(only_cl.total, cl);
        assert_eq!(total_loss(3.0, 7.0, 0.0), 3.0);
        assert!((total_loss(0.0, 5.0, 0.1) - 0.5).abs() < 1e-15);
        let geo = dual_softmax_loss(&xa, &xb, &base).unwrap();
        assert_eq!(total_loss(geo, both.total, 0.1), geo + 0.1 * (cl + flow));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { beta: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { w_sem: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossConfig { flow_noise_std: -1.0, ..Default::default() }.validate().is_err());
        let d = LossConfig::default();
        assert_eq!((d.tau, d.beta, d.w_cl, d.w_flow, d.w_sem), (0.02, 14.3, 1.0, 1.0, 0.1));
    }

    #[test]
    fn correspondence_csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("matcha-sup-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("c.csv");
        let mut c = CorrespondenceSet::new(vec![[1.0, 2.0]], vec![[3.5, 4.0]]).unwrap();
        c.write_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "xa,ya,xb,yb\n1.0,2.0,3.5,4.0\n");
        assert_eq!(CorrespondenceSet::read_csv(&p).unwrap(), c);
        c.weights = Some(vec![0.5]);
        c.write_csv(&p).unwrap();
        assert_eq!(CorrespondenceSet::read_csv(&p).unwrap(), c);
    }

    fn random_set(m: usize, d: usize, seed: u64) -> DescriptorSet {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DescriptorSet::from_vectors(Array2::from_shape_fn((m, d), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    proptest! {
        #[test]
        fn dual_softmax_non_negative_and_diag_monotone(m in 1usize..6, seed in 0u64..500, i in 0usize..6, bump in 0.01f64..0.5) {
            let s = SimilarityMatrix(random_set(m, m, seed).vectors);
            let l = dual_softmax_from_similarity(&s, Reduction::Sum);
            prop_assert!(l >= 0.0);
            if m > 1 {
                let i = i % m;
                let mut bumped = s.clone();
                bumped.0[[i, i]] += bump;
                prop_assert!(dual_softmax_from_similarity(&bumped, Reduction::Sum) < l);
            }
        }

        #[test]
        fn clip_invariant_under_shared_rotation(seed in 0u64..500, angle in -3.0f64..3.0) {
            let a = random_set(4, 2, seed);
            let b = random_set(4, 2, seed + 1);
            let r = array![[angle.cos(), -angle.sin()], [angle.sin(), angle.cos()]];
            let ra = DescriptorSet::from_vectors(a.vectors.dot(&r)).unwrap();
            let rb = DescriptorSet::from_vectors(b.vectors.dot(&r)).unwrap();
            let cfg = LossConfig { tau: 0.7, ..Default::default() };
            let l0 = clip_contrastive_loss(&a, &b, &cfg).unwrap();
            let l1 = clip_contrastive_loss(&ra, &rb, &cfg).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-10);
        }

        #[test]
        fn soft_correspondence_in_hull(seed in 0u64..500, beta in 0.01f64..20.0) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = map_from(3, 5, 3, |_, _, _| rng.random_range(-2.0..2.0));
            let q = Array1::from(vec![rng.random_range(-1.0..1.0), 0.5, -0.2]);
            let p = soft_correspondence(q.view(), &m, beta).unwrap();
            let lo = m.grid_to_pixel([0.0, 0.0]);
            let hi = m.grid_to_pixel([4.0, 2.0]);
            prop_assert!(p[0] >= lo[0] - 1e-9 && p[0] <= hi[0] + 1e-9 && p[1] >= lo[1] - 1e-9 && p[1] <= hi[1] + 1e-9);
        }

        #[test]
        fn flow_beta_scaling_equals_similarity_scaling(seed in 0u64..200, c in 0.2f64..5.0) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..2 * 9 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fa = map_from(3, 3, 2, |y, x, ch| vals[(y * 3 + x) * 2 + ch]);
            let fb = map_from(3, 3, 2, |y, x, ch| vals[18 + (y * 3 + x) * 2 + ch]);
            let gt = CorrespondenceSet::new(vec![[5.0, 6.0], [12.0, 3.0]], vec![[9.0, 14.0], [3.0, 3.0]]).unwrap();
            let cfg = LossConfig { beta: 2.0 * c, ..no_noise() };
            let scaled_a = map_from(3, 3, 2, |y, x, ch| vals[(y * 3 + x) * 2 + ch] / c.sqrt());
            let scaled_b = map_from(3, 3, 2, |y, x, ch| vals[18 + (y * 3 + x) * 2 + ch] / c.sqrt());
            let l_beta = semantic_flow_loss(&fa, &fb, &gt, &cfg, 0).unwrap();
            let l_sim = semantic_flow_loss(&scaled_a, &scaled_b, &gt, &LossConfig { beta: 2.0, ..no_noise() }, 0).unwrap();
            prop_assert!(l_beta >= 0.0);
            prop_assert!((l_beta - l_sim).abs() < 1e-9 * (1.0 + l_beta));
        }
    }
}
