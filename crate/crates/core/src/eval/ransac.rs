//! Essential matrix estimation: normalized 8-point solver inside RANSAC
//! with local optimization, then decomposition by cheirality.

use nalgebra::{Matrix2, Matrix3, SMatrix, SVector, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{hartley, smallest_eigen, CameraIntrinsics, RelativePose};
use super::matching::MatchSet;
use crate::error::{config, MatchaError, Result};

pub const MIN_SAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Sampson distance in normalized image coordinates.
    pub threshold: f64,
    /// Transfer error in pixels for homography fitting.
    pub homography_threshold_px: f64,
    pub confidence: f64,
    pub lo_rounds: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            max_iterations: 10_000,
            threshold: 1e-3,
            homography_threshold_px: 3.0,
            confidence: 0.9999,
            lo_rounds: 10,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !(self.homography_threshold_px > 0.0) {
            return config(format!(
                "ransac thresholds must be positive, got {} and {}",
                self.threshold, self.homography_threshold_px
            ));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return config(format!("ransac confidence must lie in (0, 1), got {}", self.confidence));
        }
        if self.max_iterations == 0 {
            return config("ransac max_iterations must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: RelativePose,
    pub essential: Matrix3<f64>,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl PoseEstimate {
    pub fn num_inliers(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }
}

/// First-order geometric distance of `(xa, xb)` to the epipolar constraint of `e`.
pub fn sampson_distance(e: &Matrix3<f64>, xa: [f64; 2], xb: [f64; 2]) -> f64 {
    let a = Vector3::new(xa[0], xa[1], 1.0);
    let b = Vector3::new(xb[0], xb[1], 1.0);
    let ea = e * a;
    let etb = e.transpose() * b;
    let r = b.dot(&ea);
    let denom = ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    r.abs() / denom.sqrt()
}

/// Projects onto essential matrices: equal leading singular values, zero third.
pub fn project_essential(e: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let s = (svd.singular_values[0] + svd.singular_values[1]) / 2.0;
    u * Matrix3::from_diagonal(&Vector3::new(s, s, 0.0)) * vt
}

fn project_rank2(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let s = svd.singular_values;
    svd.u.unwrap() * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], 0.0)) * svd.v_t.unwrap()
}

/// Hartley-normalized linear fit over the given pairs, projected to an
/// essential matrix. `None` for degenerate configurations.
pub fn eight_point(xa: &[[f64; 2]], xb: &[[f64; 2]]) -> Option<Matrix3<f64>> {
    eight_point_weighted(xa, xb, None)
}

/// [`eight_point`] with per-pair row weights on the linear system.
pub fn eight_point_weighted(xa: &[[f64; 2]], xb: &[[f64; 2]], weights: Option<&[f64]>) -> Option<Matrix3<f64>> {
    if xa.len() < MIN_SAMPLE {
        return None;
    }
    let (ta, na) = hartley(xa);
    let (tb, nb) = hartley(xb);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (i, (a, b)) in na.iter().zip(&nb).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let row = SVector::<f64, 9>::from_column_slice(&[
            b[0] * a[0],
            b[0] * a[1],
            b[0],
            b[1] * a[0],
            b[1] * a[1],
            b[1],
            a[0],
            a[1],
            1.0,
        ]);
        ata += row * row.transpose() * (w * w);
    }
    let (v, _, second, largest) = smallest_eigen(&ata);
    if !(largest > 0.0) || second <= 1e-12 * largest {
        return None;
    }
    let en = project_rank2(&Matrix3::from_row_slice(v.as_slice()));
    let e = project_essential(&(tb.transpose() * en * ta));
    let n = e.norm();
    if !(n > 0.0) || !n.is_finite() {
        return None;
    }
    Some(e / n)
}

/// Row weights turning the algebraic residual of the Hartley-normalized
/// system into an approximate Sampson distance under `e`.
fn sampson_weights(e: &Matrix3<f64>, xa: &[[f64; 2]], xb: &[[f64; 2]]) -> Vec<f64> {
    xa.iter()
        .zip(xb)
        .map(|(a, b)| {
            let ea = e * Vector3::new(a[0], a[1], 1.0);
            let etb = e.transpose() * Vector3::new(b[0], b[1], 1.0);
            let g = (ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y).sqrt();
            if g > 0.0 { 1.0 / g } else { 0.0 }
        })
        .collect()
}

fn score(e: &Matrix3<f64>, xa: &[[f64; 2]], xb: &[[f64; 2]], threshold: f64) -> Vec<bool> {
    xa.iter().zip(xb).map(|(a, b)| sampson_distance(e, *a, *b) <= threshold).collect()
}

fn subset(points: &[[f64; 2]], mask: &[bool]) -> Vec<[f64; 2]> {
    points.iter().zip(mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect()
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|m| **m).count()
}

fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let w8 = inlier_ratio.powi(MIN_SAMPLE as i32);
    if w8 >= 1.0 {
        return 1;
    }
    if w8 <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w8).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Depths `(λa, λb)` with `λb·xb ≈ λa·R·xa + t` in the least-squares sense.
fn depths(r: &Matrix3<f64>, t: &Vector3<f64>, xa: [f64; 2], xb: [f64; 2]) -> Option<(f64, f64)> {
    let ra = r * Vector3::new(xa[0], xa[1], 1.0);
    let b = Vector3::new(xb[0], xb[1], 1.0);
    // [ra, -b] · (λa, λb)ᵀ = -t
    let m = Matrix2::new(ra.dot(&ra), -ra.dot(&b), -ra.dot(&b), b.dot(&b));
    let rhs = Vector2::new(-ra.dot(t), b.dot(t));
    m.try_inverse().map(|inv| {
        let l = inv * rhs;
        (l.x, l.y)
    })
}

/// The four `(R, t)` factorizations of an essential matrix.
pub fn decompose_essential(e: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut vt = svd.v_t.unwrap();
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t: Vector3<f64> = u.column(2).into_owned();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Picks the factorization placing the most points in front of both cameras.
pub fn pose_from_essential(e: &Matrix3<f64>, xa: &[[f64; 2]], xb: &[[f64; 2]]) -> Result<RelativePose> {
    let mut best: Option<(usize, usize)> = None;
    let candidates = decompose_essential(e);
    for (ci, (r, t)) in candidates.iter().enumerate() {
        let front = xa
            .iter()
            .zip(xb)
            .filter(|(a, b)| matches!(depths(r, t, **a, **b), Some((la, lb)) if la > 0.0 && lb > 0.0))
            .count();
        if best.is_none_or(|(n, _)| front > n) {
            best = Some((front, ci));
        }
    }
    let (_, ci) = best.expect("four candidates");
    let (r, t) = candidates[ci];
    RelativePose::new(r, t)
}

/// Estimates the relative pose from pixel matches. Fewer than eight matches
/// is an insufficient-data error; a run in which every sample is degenerate
/// is a numerical error.
pub fn estimate_essential_ransac(
    matches: &MatchSet,
    ka: &CameraIntrinsics,
    kb: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate> {
    cfg.validate()?;
    let n = matches.len();
    if n < MIN_SAMPLE {
        return Err(MatchaError::InsufficientData(format!("essential estimation needs {MIN_SAMPLE} matches, got {n}")));
    }
    let xa: Vec<[f64; 2]> = matches.matches.iter().map(|m| ka.normalize(m.a)).collect();
    let xb: Vec<[f64; 2]> = matches.matches.iter().map(|m| kb.normalize(m.b)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Matrix3<f64>, Vec<bool>)> = None;
    let mut needed = cfg.max_iterations;
    let mut iterations = 0;
    while iterations < needed.min(cfg.max_iterations) {
        iterations += 1;
        let sample = rand::seq::index::sample(&mut rng, n, MIN_SAMPLE).into_vec();
        let sa: Vec<[f64; 2]> = sample.iter().map(|&i| xa[i]).collect();
        let sb: Vec<[f64; 2]> = sample.iter().map(|&i| xb[i]).collect();
        let Some(e) = eight_point(&sa, &sb) else { continue };
        let inliers = score(&e, &xa, &xb, cfg.threshold);
        if best.as_ref().is_some_and(|(_, b)| count(&inliers) <= count(b)) {
            continue;
        }
        let (e, inliers) = local_optimize(e, inliers, &xa, &xb, cfg);
        needed = required_iterations(count(&inliers) as f64 / n as f64, cfg.confidence, cfg.max_iterations);
        best = Some((e, inliers));
    }
    let (e, inliers) = best.ok_or_else(|| {
        MatchaError::Numerical(format!("every RANSAC sample was degenerate after {iterations} iterations"))
    })?;
    let pose = pose_from_essential(&e, &subset(&xa, &inliers), &subset(&xb, &inliers))?;
    Ok(PoseEstimate { pose, essential: e, inliers, iterations })
}

fn signed_sampson(e: &Matrix3<f64>, a: [f64; 2], b: [f64; 2]) -> f64 {
    let va = Vector3::new(a[0], a[1], 1.0);
    let vb = Vector3::new(b[0], b[1], 1.0);
    let ea = e * va;
    let etb = e.transpose() * vb;
    let g = (ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y).sqrt();
    if g > 0.0 { vb.dot(&ea) / g } else { 0.0 }
}

/// Pose perturbed by a rotation increment `w[0..3]` (left-multiplied) and a
/// tangent step `w[3..5]` of the translation direction.
fn perturb(r: &Matrix3<f64>, t: &Vector3<f64>, w: &[f64; 5]) -> (Matrix3<f64>, Vector3<f64>) {
    let (u1, u2) = tangent_basis(t);
    let dr = nalgebra::Rotation3::new(Vector3::new(w[0], w[1], w[2]));
    let tn = (t + u1 * w[3] + u2 * w[4]).normalize();
    (dr.matrix() * r, tn)
}

fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u1 = t.cross(&helper).normalize();
    (u1, t.cross(&u1).normalize())
}

/// Levenberg–Marquardt on the summed squared Sampson distance over the
/// 5-DoF essential manifold, starting from `(r, t)`.
pub fn refine_pose(
    r: Matrix3<f64>,
    t: Vector3<f64>,
    xa: &[[f64; 2]],
    xb: &[[f64; 2]],
    iterations: usize,
) -> (Matrix3<f64>, Vector3<f64>) {
    let residuals = |r: &Matrix3<f64>, t: &Vector3<f64>| -> Vec<f64> {
        let e = super::geometry::skew(t) * r;
        xa.iter().zip(xb).map(|(a, b)| signed_sampson(&e, *a, *b)).collect()
    };
    let cost = |res: &[f64]| res.iter().map(|v| v * v).sum::<f64>();
    let (mut r, mut t) = (r, t);
    let mut res = residuals(&r, &t);
    let mut c = cost(&res);
    let mut lambda = 1e-3;
    for _ in 0..iterations {
        let h = 1e-7;
        let mut jac = nalgebra::DMatrix::<f64>::zeros(res.len(), 5);
        for k in 0..5 {
            let mut w = [0.0; 5];
            w[k] = h;
            let (rp, tp) = perturb(&r, &t, &w);
            w[k] = -h;
            let (rm, tm) = perturb(&r, &t, &w);
            let (plus, minus) = (residuals(&rp, &tp), residuals(&rm, &tm));
            for i in 0..res.len() {
                jac[(i, k)] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * nalgebra::DVector::from_column_slice(&res);
        let mut improved = false;
        for _ in 0..8 {
            let mut a = jtj.clone();
            for k in 0..5 {
                a[(k, k)] += lambda * (1.0 + jtj[(k, k)]);
            }
            let Some(step) = a.lu().solve(&(-&g)) else { break };
            let w = [step[0], step[1], step[2], step[3], step[4]];
            let (rn, tn) = perturb(&r, &t, &w);
            let rn_res = residuals(&rn, &tn);
            let cn = cost(&rn_res);
            if cn < c {
                (r, t, res, c) = (rn, tn, rn_res, cn);
                lambda = (lambda * 0.1).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (r, t)
}

/// Iteratively reweighted linear refits followed by a nonlinear Sampson
/// refinement on the current inlier set, keeping the model with the most
/// inliers.
fn local_optimize(
    e: Matrix3<f64>,
    inliers: Vec<bool>,
    xa: &[[f64; 2]],
    xb: &[[f64; 2]],
    cfg: &RansacConfig,
) -> (Matrix3<f64>, Vec<bool>) {
    let mut best = (e, inliers);
    let mut current = best.clone();
    for _ in 0..cfg.lo_rounds {
        let sa = subset(xa, &current.1);
        let sb = subset(xb, &current.1);
        let weights = sampson_weights(&current.0, &sa, &sb);
        let Some(linear) = eight_point_weighted(&sa, &sb, Some(&weights)) else { break };
        let refit = match pose_from_essential(&linear, &sa, &sb) {
            Ok(p) => {
                let (r, t) = refine_pose(p.rotation, p.translation, &sa, &sb, 10);
                let e = super::geometry::skew(&t) * r;
                e / e.norm()
            }
            Err(_) => linear,
        };
        let refit_inliers = score(&refit, xa, xb, cfg.threshold);
        let converged = refit_inliers == current.1;
        current = (refit, refit_inliers);
        if count(&current.1) >= count(&best.1) {
            best = current.clone();
        }
        if converged {
            break;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::geometry::pose_error;
    use crate::eval::matching::Match;
    use nalgebra::Vector3;
    use rand::Rng;

    fn scene(n: usize, seed: u64) -> (Vec<[f64; 2]>, Vec<[f64; 2]>, RelativePose, CameraIntrinsics) {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let gt = RelativePose::from_axis_angle(Vector3::new(0.1, 1.0, 0.2), 0.25, Vector3::new(-1.0, 0.1, 0.2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Vec::new();
        let mut b = Vec::new();
        while a.len() < n {
            let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(4.0..8.0));
            let xb = gt.rotation * x + gt.translation;
            if xb.z <= 0.1 {
                continue;
            }
            a.push(k.project(&x));
            b.push(k.project(&xb));
        }
        (a, b, gt, k)
    }

    fn match_set(a: &[[f64; 2]], b: &[[f64; 2]]) -> MatchSet {
        MatchSet::new(a.iter().zip(b).map(|(a, b)| Match { a: *a, b: *b, index_a: 0, index_b: 0, score: 1.0 }).collect())
    }

    #[test]
    fn noiseless_scene_recovers_pose() {
        let (a, b, gt, k) = scene(100, 1);
        let est = estimate_essential_ransac(&match_set(&a, &b), &k, &k, &RansacConfig::default()).unwrap();
        let (r, t) = pose_error(&est.pose, &gt);
        assert!(r < 0.1 && t < 0.1, "{r} {t}");
        assert_eq!(est.num_inliers(), 100);
    }

    #[test]
    fn seven_matches_is_insufficient() {
        let (a, b, _, k) = scene(7, 2);
        let err = estimate_essential_ransac(&match_set(&a, &b), &k, &k, &RansacConfig::default()).unwrap_err();
        assert!(matches!(err, MatchaError::InsufficientData(_)));
    }

    #[test]
    fn identical_points_are_degenerate() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let a = vec![[10.0, 10.0]; 12];
        let cfg = RansacConfig { max_iterations: 20, ..Default::default() };
        let err = estimate_essential_ransac(&match_set(&a, &a), &k, &k, &cfg).unwrap_err();
        assert!(matches!(err, MatchaError::Numerical(_)));
    }

    #[test]
    fn eight_point_on_exact_data_satisfies_constraint() {
        let (a, b, gt, k) = scene(8, 3);
        let na: Vec<_> = a.iter().map(|p| k.normalize(*p)).collect();
        let nb: Vec<_> = b.iter().map(|p| k.normalize(*p)).collect();
        let e = eight_point(&na, &nb).unwrap();
        let gt_e = gt.essential();
        let gt_e = gt_e / gt_e.norm();
        let diff = (e - gt_e).norm().min((e + gt_e).norm());
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn config_validation() {
        assert!(RansacConfig { confidence: 1.0, ..Default::default() }.validate().is_err());
        assert!(RansacConfig { threshold: 0.0, ..Default::default() }.validate().is_err());
        assert!(RansacConfig::default().validate().is_ok());
    }

    #[test]
    fn adaptive_iteration_formula() {
        assert_eq!(required_iterations(1.0, 0.9999, 10_000), 1);
        assert_eq!(required_iterations(0.0, 0.9999, 10_000), 10_000);
        let n = required_iterations(0.7, 0.9999, 10_000);
        let expected = ((1.0f64 - 0.9999).ln() / (1.0 - 0.7f64.powi(8)).ln()).ceil() as usize;
        assert_eq!(n, expected);
    }
}
