//! Geometric, semantic and temporal evaluation protocols with JSON and
//! aligned-text reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::geometry::{pose_error, CameraIntrinsics, Homography, RelativePose};
use super::matching::{dense_argmax, mutual_nn_match, sample_descriptors, MatchSet};
use super::metrics::{mma, pck, pose_auc, AUC_THRESHOLDS, MMA_THRESHOLDS, PCK_ALPHAS};
use super::ransac::{estimate_essential_ransac, RansacConfig};
use crate::error::{config, domain, Result};
use crate::io::TrackRow;
use crate::tensor::FeatureMap;

/// Ground truth relating the two images of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruth {
    Homography {
        h: [[f64; 3]; 3],
    },
    Pose {
        k_a: CameraIntrinsics,
        k_b: CameraIntrinsics,
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
    },
}

impl GroundTruth {
    pub fn from_homography(h: &Homography) -> GroundTruth {
        GroundTruth::Homography { h: h.rows() }
    }

    pub fn from_pose(k_a: CameraIntrinsics, k_b: CameraIntrinsics, pose: &RelativePose) -> GroundTruth {
        let r = &pose.rotation;
        GroundTruth::Pose {
            k_a,
            k_b,
            rotation: [[r[(0, 0)], r[(0, 1)], r[(0, 2)]], [r[(1, 0)], r[(1, 1)], r[(1, 2)]], [r[(2, 0)], r[(2, 1)], r[(2, 2)]]],
            translation: [pose.translation.x, pose.translation.y, pose.translation.z],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            GroundTruth::Homography { .. } => "homography",
            GroundTruth::Pose { .. } => "pose",
        }
    }

    pub fn homography(&self) -> Result<Option<Homography>> {
        match self {
            GroundTruth::Homography { h } => Homography::from_rows(*h).map(Some),
            GroundTruth::Pose { .. } => Ok(None),
        }
    }

    pub fn pose(&self) -> Result<Option<(CameraIntrinsics, CameraIntrinsics, RelativePose)>> {
        match self {
            GroundTruth::Pose { k_a, k_b, rotation, translation } => {
                let k_a = CameraIntrinsics::new(k_a.fx, k_a.fy, k_a.cx, k_a.cy)?;
                let k_b = CameraIntrinsics::new(k_b.fx, k_b.fy, k_b.cx, k_b.cy)?;
                let r = Matrix3::from_fn(|i, j| rotation[i][j]);
                let pose = RelativePose::new(r, Vector3::from_column_slice(translation))?;
                Ok(Some((k_a, k_b, pose)))
            }
            GroundTruth::Homography { .. } => Ok(None),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenePair {
    pub name: String,
    pub map_a: FeatureMap,
    pub map_b: FeatureMap,
    pub keypoints_a: Vec<[f64; 2]>,
    pub keypoints_b: Vec<[f64; 2]>,
    pub ground_truth: GroundTruth,
}

fn map_items<T: Sync, R: Send>(items: &[T], parallel: bool, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    if parallel {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

fn alpha_key(alpha: f64) -> String {
    format!("pck@{alpha}")
}

fn validate_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return config("at least one PCK alpha is required");
    }
    if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return config(format!("PCK alphas must be finite and non-negative, got {alphas:?}"));
    }
    if alphas.windows(2).any(|w| w[1] <= w[0]) {
        return config(format!("PCK alphas must be strictly increasing, got {alphas:?}"));
    }
    Ok(())
}

fn validate_thresholds(name: &str, t: &[f64]) -> Result<()> {
    if t.is_empty() || t.iter().any(|v| !(v.is_finite() && *v > 0.0)) || t.windows(2).any(|w| w[1] <= w[0]) {
        return config(format!("{name} must be positive and strictly increasing, got {t:?}"));
    }
    Ok(())
}

pub trait Report: Serialize {
    fn to_text(&self) -> String;

    fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports contain only finite numbers");
        s.push('\n');
        s
    }

    /// True when the report covers no data at all.
    fn is_empty(&self) -> bool;
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.4}"))
}

// ---------------------------------------------------------------- geometric

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometricEvalConfig {
    pub normalize: bool,
    pub ransac: RansacConfig,
    pub mma_thresholds: Vec<f64>,
    pub auc_thresholds: Vec<f64>,
    #[serde(skip)]
    pub parallel: bool,
}

impl Default for GeometricEvalConfig {
    fn default() -> Self {
        GeometricEvalConfig {
            normalize: true,
            ransac: RansacConfig::default(),
            mma_thresholds: MMA_THRESHOLDS.to_vec(),
            auc_thresholds: AUC_THRESHOLDS.to_vec(),
            parallel: false,
        }
    }
}

impl GeometricEvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.ransac.validate()?;
        validate_thresholds("mma_thresholds", &self.mma_thresholds)?;
        validate_thresholds("auc_thresholds", &self.auc_thresholds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricPairResult {
    pub name: String,
    pub kind: String,
    pub num_matches: usize,
    pub mma: Option<Vec<f64>>,
    pub rotation_error_deg: Option<f64>,
    pub translation_error_deg: Option<f64>,
    pub num_inliers: Option<usize>,
    pub failure: Option<String>,
}

impl GeometricPairResult {
    /// `max(rotation, translation)` error, `+∞` for a failed estimate.
    pub fn pose_error(&self) -> f64 {
        match (self.rotation_error_deg, self.translation_error_deg) {
            (Some(r), Some(t)) => r.max(t),
            _ => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricReport {
    pub num_pairs: usize,
    pub num_homography_pairs: usize,
    pub num_pose_pairs: usize,
    pub num_failures: usize,
    pub mma_thresholds: Vec<f64>,
    /// Mean over homography pairs; a pair without matches contributes zeros.
    pub mma: Option<Vec<f64>>,
    pub auc_thresholds: Vec<f64>,
    /// Failed pose estimates enter with infinite error.
    pub pose_auc: Option<Vec<f64>>,
    pub pairs: Vec<GeometricPairResult>,
}

/// Scores one pair from an explicit match set.
pub fn evaluate_matches(name: &str, matches: &MatchSet, gt: &GroundTruth, cfg: &GeometricEvalConfig) -> GeometricPairResult {
    let mut out = GeometricPairResult {
        name: name.to_string(),
        kind: gt.kind().to_string(),
        num_matches: matches.len(),
        mma: None,
        rotation_error_deg: None,
        translation_error_deg: None,
        num_inliers: None,
        failure: None,
    };
    let outcome: Result<()> = (|| {
        if let Some(h) = gt.homography()? {
            out.mma = Some(mma(matches, &h, &cfg.mma_thresholds)?);
        } else if let Some((ka, kb, gt_pose)) = gt.pose()? {
            let est = estimate_essential_ransac(matches, &ka, &kb, &cfg.ransac)?;
            let (r, t) = pose_error(&est.pose, &gt_pose);
            out.rotation_error_deg = Some(r);
            out.translation_error_deg = Some(t);
            out.num_inliers = Some(est.num_inliers());
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        out.failure = Some(e.to_string());
    }
    out
}

/// Mutual-NN matches between the unified maps of a pair.
pub fn match_pair(pair: &ScenePair, normalize: bool) -> Result<MatchSet> {
    let da = sample_descriptors(&pair.map_a, &pair.keypoints_a, normalize)?;
    let db = sample_descriptors(&pair.map_b, &pair.keypoints_b, normalize)?;
    let mut m = mutual_nn_match(&da, &db)?;
    m.size_a = Some(pair.map_a.image_size());
    m.size_b = Some(pair.map_b.image_size());
    Ok(m)
}

pub fn evaluate_geometric_pair(pair: &ScenePair, cfg: &GeometricEvalConfig) -> GeometricPairResult {
    match match_pair(pair, cfg.normalize) {
        Ok(m) => evaluate_matches(&pair.name, &m, &pair.ground_truth, cfg),
        Err(e) => GeometricPairResult {
            name: pair.name.clone(),
            kind: pair.ground_truth.kind().to_string(),
            num_matches: 0,
            mma: None,
            rotation_error_deg: None,
            translation_error_deg: None,
            num_inliers: None,
            failure: Some(e.to_string()),
        },
    }
}

/// Aggregates per-pair results in the given order.
pub fn aggregate_geometric(pairs: Vec<GeometricPairResult>, cfg: &GeometricEvalConfig) -> GeometricReport {
    let homography: Vec<&GeometricPairResult> = pairs.iter().filter(|p| p.kind == "homography").collect();
    let pose_errors: Vec<f64> = pairs.iter().filter(|p| p.kind == "pose").map(|p| p.pose_error()).collect();
    let mma_mean = (!homography.is_empty()).then(|| {
        let mut acc = vec![0.0; cfg.mma_thresholds.len()];
        for p in &homography {
            if let Some(v) = &p.mma {
                acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
            }
        }
        acc.iter().map(|a| a / homography.len() as f64).collect()
    });
    GeometricReport {
        num_pairs: pairs.len(),
        num_homography_pairs: homography.len(),
        num_pose_pairs: pose_errors.len(),
        num_failures: pairs.iter().filter(|p| p.failure.is_some()).count(),
        mma_thresholds: cfg.mma_thresholds.clone(),
        mma: mma_mean,
        auc_thresholds: cfg.auc_thresholds.clone(),
        pose_auc: pose_auc(&pose_errors, &cfg.auc_thresholds).ok(),
        pairs,
    }
}

pub fn evaluate_geometric(pairs: &[ScenePair], cfg: &GeometricEvalConfig) -> Result<GeometricReport> {
    cfg.validate()?;
    let results = map_items(pairs, cfg.parallel, |p| evaluate_geometric_pair(p, cfg));
    Ok(aggregate_geometric(results, cfg))
}

impl Report for GeometricReport {
    fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "pairs {}  homography {}  pose {}  failures {}",
            self.num_pairs, self.num_homography_pairs, self.num_pose_pairs, self.num_failures
        );
        if let Some(m) = &self.mma {
            let _ = writeln!(s, "{:<12}{}", "threshold", self.mma_thresholds.iter().map(|t| format!("{t:>8}")).collect::<String>());
            let _ = writeln!(s, "{:<12}{}", "mma", m.iter().map(|v| format!("{v:>8.4}")).collect::<String>());
        }
        if let Some(a) = &self.pose_auc {
            let _ = writeln!(s, "{:<12}{}", "auc@", self.auc_thresholds.iter().map(|t| format!("{t:>8}")).collect::<String>());
            let _ = writeln!(s, "{:<12}{}", "pose_auc", a.iter().map(|v| format!("{v:>8.4}")).collect::<String>());
        }
        let _ = writeln!(s, "{:<24}{:>12}{:>9}{:>10}{:>10}{:>10}  failure", "pair", "kind", "matches", "mma@3", "rot", "trans");
        for p in &self.pairs {
            let mma3 = p.mma.as_ref().and_then(|m| self.mma_thresholds.iter().position(|t| *t == 3.0).map(|i| m[i]));
            let _ = writeln!(
                s,
                "{:<24}{:>12}{:>9}{:>10}{:>10}{:>10}  {}",
                p.name,
                p.kind,
                p.num_matches,
                fmt_opt(mma3),
                fmt_opt(p.rotation_error_deg),
                fmt_opt(p.translation_error_deg),
                p.failure.as_deref().unwrap_or("")
            );
        }
        s
    }

    fn is_empty(&self) -> bool {
        self.num_pairs == 0
    }
}

// ----------------------------------------------------------------- semantic

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Max side of the target bounding box, falling back to the image.
    Bbox,
    /// Max side of the target image.
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticEvalConfig {
    pub alphas: Vec<f64>,
    pub norm_mode: NormMode,
    pub normalize: bool,
    #[serde(skip)]
    pub parallel: bool,
}

impl Default for SemanticEvalConfig {
    fn default() -> Self {
        SemanticEvalConfig { alphas: PCK_ALPHAS.to_vec(), norm_mode: NormMode::Bbox, normalize: true, parallel: false }
    }
}

impl SemanticEvalConfig {
    pub fn validate(&self) -> Result<()> {
        validate_alphas(&self.alphas)
    }
}

#[derive(Debug, Clone)]
pub struct SemanticPair {
    pub name: String,
    pub map_a: FeatureMap,
    pub map_b: FeatureMap,
    pub queries_a: Vec<[f64; 2]>,
    pub gt_b: Vec<[f64; 2]>,
    /// `[x0, y0, x1, y1]` of the target object in image `b`.
    pub bbox_b: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticPairResult {
    pub name: String,
    pub num_queries: usize,
    pub norm_mode: NormMode,
    pub norm_length: f64,
    pub pck: Option<BTreeMap<String, f64>>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticReport {
    pub alphas: Vec<f64>,
    pub norm_mode: NormMode,
    pub num_pairs: usize,
    pub num_queries: usize,
    pub num_failures: usize,
    /// Pooled over every query point of every scored pair.
    pub pck: Option<BTreeMap<String, f64>>,
    pub pairs: Vec<SemanticPairResult>,
}

fn max_side(map: &FeatureMap) -> f64 {
    let (w, h) = map.image_size();
    w.max(h)
}

/// Per-alpha hit counts for dense-argmax predictions.
fn pck_hits(pred: &[[f64; 2]], gt: &[[f64; 2]], alphas: &[f64], norm_length: f64) -> Result<Vec<f64>> {
    alphas.iter().map(|a| pck(pred, gt, *a, norm_length).map(|f| f * pred.len() as f64)).collect()
}

fn semantic_pair(pair: &SemanticPair, cfg: &SemanticEvalConfig) -> (SemanticPairResult, Option<Vec<f64>>) {
    let (mode, norm_length) = match (cfg.norm_mode, pair.bbox_b) {
        (NormMode::Bbox, Some(b)) => (NormMode::Bbox, (b[2] - b[0]).abs().max((b[3] - b[1]).abs())),
        _ => (NormMode::Image, max_side(&pair.map_b)),
    };
    let mut out = SemanticPairResult {
        name: pair.name.clone(),
        num_queries: pair.queries_a.len(),
        norm_mode: mode,
        norm_length,
        pck: None,
        failure: None,
    };
    let scored = (|| {
        let q = sample_descriptors(&pair.map_a, &pair.queries_a, cfg.normalize)?;
        let pred = dense_argmax(&q, &pair.map_b, cfg.normalize)?;
        pck_hits(&pred, &pair.gt_b, &cfg.alphas, norm_length)
    })();
    match scored {
        Ok(hits) => {
            let n = pair.queries_a.len() as f64;
            out.pck = Some(cfg.alphas.iter().zip(&hits).map(|(a, h)| (alpha_key(*a), h / n)).collect());
            (out, Some(hits))
        }
        Err(e) => {
            out.failure = Some(e.to_string());
            (out, None)
        }
    }
}

pub fn evaluate_semantic(pairs: &[SemanticPair], cfg: &SemanticEvalConfig) -> Result<SemanticReport> {
    cfg.validate()?;
    let results = map_items(pairs, cfg.parallel, |p| semantic_pair(p, cfg));
    let mut totals = vec![0.0; cfg.alphas.len()];
    let mut scored_queries = 0usize;
    for (r, hits) in &results {
        if let Some(h) = hits {
            totals.iter_mut().zip(h).for_each(|(t, x)| *t += x);
            scored_queries += r.num_queries;
        }
    }
    let pck = (scored_queries > 0)
        .then(|| cfg.alphas.iter().zip(&totals).map(|(a, t)| (alpha_key(*a), t / scored_queries as f64)).collect());
    let pairs: Vec<SemanticPairResult> = results.into_iter().map(|(r, _)| r).collect();
    Ok(SemanticReport {
        alphas: cfg.alphas.clone(),
        norm_mode: cfg.norm_mode,
        num_pairs: pairs.len(),
        num_queries: pairs.iter().map(|p| p.num_queries).sum(),
        num_failures: pairs.iter().filter(|p| p.failure.is_some()).count(),
        pck,
        pairs,
    })
}

fn pck_columns(alphas: &[f64], values: Option<&BTreeMap<String, f64>>) -> String {
    alphas
        .iter()
        .map(|a| format!("{:>10}", fmt_opt(values.and_then(|v| v.get(&alpha_key(*a)).copied()))))
        .collect()
}

impl Report for SemanticReport {
    fn to_text(&self) -> String {
        let mut s = String::new();
        let header: String = self.alphas.iter().map(|a| format!("{:>10}", alpha_key(*a))).collect();
        let _ = writeln!(s, "pairs {}  queries {}  failures {}", self.num_pairs, self.num_queries, self.num_failures);
        let _ = writeln!(s, "{:<24}{:>8}{}", "pair", "norm", header);
        for p in &self.pairs {
            let mode = match p.norm_mode {
                NormMode::Bbox => "bbox",
                NormMode::Image => "image",
            };
            let _ = writeln!(s, "{:<24}{:>8}{}", p.name, mode, pck_columns(&self.alphas, p.pck.as_ref()));
        }
        let _ = writeln!(s, "{:<24}{:>8}{}", "all", "", pck_columns(&self.alphas, self.pck.as_ref()));
        s
    }

    fn is_empty(&self) -> bool {
        self.num_pairs == 0
    }
}

// ----------------------------------------------------------------- temporal

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub position: [f64; 2],
    pub visible: bool,
}

#[derive(Debug, Clone)]
pub struct TemporalSequence {
    pub name: String,
    pub frames: Vec<FeatureMap>,
    /// `tracks[frame][point]`; frame 0 holds the queries.
    pub tracks: Vec<Vec<TrackPoint>>,
}

impl TemporalSequence {
    /// Builds tracks from CSV rows; every `(frame, point_id)` must appear once.
    pub fn from_rows(name: &str, frames: Vec<FeatureMap>, rows: &[TrackRow]) -> Result<TemporalSequence> {
        let num_points = rows.iter().map(|r| r.point_id + 1).max().unwrap_or(0);
        let mut tracks: Vec<Vec<Option<TrackPoint>>> = vec![vec![None; num_points]; frames.len()];
        for (i, r) in rows.iter().enumerate() {
            let slot = tracks
                .get_mut(r.frame)
                .ok_or_else(|| crate::MatchaError::Domain(format!("track row {} names frame {} of {}", i + 1, r.frame, frames.len())))?;
            if slot[r.point_id].is_some() {
                return domain(format!("track row {} repeats frame {} point {}", i + 1, r.frame, r.point_id));
            }
            slot[r.point_id] = Some(TrackPoint { position: [r.x, r.y], visible: r.visible != 0 });
        }
        let tracks = tracks
            .into_iter()
            .enumerate()
            .map(|(f, pts)| {
                pts.into_iter()
                    .enumerate()
                    .map(|(p, t)| t.ok_or_else(|| crate::MatchaError::Domain(format!("track missing frame {f} point {p}"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TemporalSequence { name: name.to_string(), frames, tracks })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalEvalConfig {
    pub alphas: Vec<f64>,
    pub normalize: bool,
    #[serde(skip)]
    pub parallel: bool,
}

impl Default for TemporalEvalConfig {
    fn default() -> Self {
        TemporalEvalConfig { alphas: PCK_ALPHAS.to_vec(), normalize: true, parallel: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalFrameResult {
    pub frame: usize,
    pub num_visible: usize,
    pub norm_length: f64,
    pub pck: Option<BTreeMap<String, f64>>,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalReport {
    pub name: String,
    pub alphas: Vec<f64>,
    pub num_frames: usize,
    pub num_queries: usize,
    pub skipped_frames: Vec<usize>,
    /// Mean of per-frame PCK over evaluated frames.
    pub pck: Option<BTreeMap<String, f64>>,
    pub frames: Vec<TemporalFrameResult>,
}

pub fn evaluate_temporal(seq: &TemporalSequence, cfg: &TemporalEvalConfig) -> Result<TemporalReport> {
    validate_alphas(&cfg.alphas)?;
    if seq.tracks.len() != seq.frames.len() {
        return domain(format!("{} frames but tracks for {}", seq.frames.len(), seq.tracks.len()));
    }
    let Some(first) = seq.frames.first() else {
        return Ok(TemporalReport {
            name: seq.name.clone(),
            alphas: cfg.alphas.clone(),
            num_frames: 0,
            num_queries: 0,
            skipped_frames: Vec::new(),
            pck: None,
            frames: Vec::new(),
        });
    };
    // points occluded in the first frame have no query descriptor
    let query_ids: Vec<usize> = seq.tracks[0].iter().enumerate().filter(|(_, t)| t.visible).map(|(i, _)| i).collect();
    let queries: Vec<[f64; 2]> = query_ids.iter().map(|&i| seq.tracks[0][i].position).collect();
    let q = sample_descriptors(first, &queries, cfg.normalize)?;
    let later: Vec<usize> = (1..seq.frames.len()).collect();
    let frames = map_items(&later, cfg.parallel, |&f| -> Result<TemporalFrameResult> {
        let target = &seq.frames[f];
        let norm_length = max_side(target);
        let visible: Vec<usize> = (0..query_ids.len()).filter(|&k| seq.tracks[f][query_ids[k]].visible).collect();
        if visible.is_empty() {
            return Ok(TemporalFrameResult { frame: f, num_visible: 0, norm_length, pck: None, skipped: true });
        }
        let sub = crate::supervision::DescriptorSet::new(
            q.vectors.select(ndarray::Axis(0), &visible),
            visible.iter().map(|&k| queries[k]).collect(),
        )?;
        let pred = dense_argmax(&sub, target, cfg.normalize)?;
        let gt: Vec<[f64; 2]> = visible.iter().map(|&k| seq.tracks[f][query_ids[k]].position).collect();
        let values = cfg
            .alphas
            .iter()
            .map(|a| pck(&pred, &gt, *a, norm_length).map(|v| (alpha_key(*a), v)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(TemporalFrameResult { frame: f, num_visible: visible.len(), norm_length, pck: Some(values), skipped: false })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let evaluated: Vec<&BTreeMap<String, f64>> = frames.iter().filter_map(|f| f.pck.as_ref()).collect();
    let pck = (!evaluated.is_empty()).then(|| {
        cfg.alphas
            .iter()
            .map(|a| {
                let k = alpha_key(*a);
                let mean = evaluated.iter().map(|m| m[&k]).sum::<f64>() / evaluated.len() as f64;
                (k, mean)
            })
            .collect()
    });
    Ok(TemporalReport {
        name: seq.name.clone(),
        alphas: cfg.alphas.clone(),
        num_frames: seq.frames.len(),
        num_queries: query_ids.len(),
        skipped_frames: frames.iter().filter(|f| f.skipped).map(|f| f.frame).collect(),
        pck,
        frames,
    })
}

impl Report for TemporalReport {
    fn to_text(&self) -> String {
        let mut s = String::new();
        let header: String = self.alphas.iter().map(|a| format!("{:>10}", alpha_key(*a))).collect();
        let _ = writeln!(s, "sequence {}  frames {}  queries {}", self.name, self.num_frames, self.num_queries);
        let _ = writeln!(s, "{:<8}{:>9}{}", "frame", "visible", header);
        for f in &self.frames {
            let cols = if f.skipped { format!("{:>10}", "skipped") } else { pck_columns(&self.alphas, f.pck.as_ref()) };
            let _ = writeln!(s, "{:<8}{:>9}{}", f.frame, f.num_visible, cols);
        }
        let _ = writeln!(s, "{:<8}{:>9}{}", "mean", "", pck_columns(&self.alphas, self.pck.as_ref()));
        s
    }

    fn is_empty(&self) -> bool {
        self.frames.iter().all(|f| f.skipped)
    }
}
