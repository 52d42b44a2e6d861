//! Projective and two-view geometry: homographies, intrinsics, relative
//! poses and pose error.

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// 3×3 projective transform with `H[2][2] = 1` whenever it is nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Homography> {
        if m.iter().any(|v| !v.is_finite()) {
            return domain("homography has non-finite entries");
        }
        let m = if m[(2, 2)].abs() > 1e-15 { m / m[(2, 2)] } else { m };
        if m.determinant().abs() <= 1e-12 {
            return domain(format!("homography is singular (det {:e})", m.determinant()));
        }
        Ok(Homography(m))
    }

    pub fn identity() -> Homography {
        Homography(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Homography {
        Homography(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Homography> {
        Homography::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Homography {
        Homography::new(self.0.try_inverse().expect("homographies are invertible by construction"))
            .expect("inverse of an invertible homography is invertible")
    }

    pub fn compose(&self, first: &Homography) -> Result<Homography> {
        Homography::new(self.0 * first.0)
    }

    pub fn apply_point(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let v = self.0 * Vector3::new(p[0], p[1], 1.0);
        if v.z.abs() <= 1e-12 {
            None
        } else {
            Some([v.x / v.z, v.y / v.z])
        }
    }

    /// Least-squares homography from ≥ 4 point pairs (normalized DLT).
    pub fn from_correspondences(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Homography> {
        if src.len() != dst.len() || src.len() < 4 {
            return domain(format!("homography fit needs ≥ 4 pairs, got {} and {}", src.len(), dst.len()));
        }
        let (ts, ns) = hartley(src);
        let (td, nd) = hartley(dst);
        let mut ata = SMatrix::<f64, 9, 9>::zeros();
        for (s, d) in ns.iter().zip(&nd) {
            let (x, y, u, v) = (s[0], s[1], d[0], d[1]);
            let r1 = SVector::<f64, 9>::from_column_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
            let r2 = SVector::<f64, 9>::from_column_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
            ata += r1 * r1.transpose() + r2 * r2.transpose();
        }
        let h = smallest_eigenvector(&ata);
        let hn = Matrix3::from_row_slice(h.as_slice());
        let denorm = td.try_inverse().ok_or_else(|| crate::MatchaError::Numerical("degenerate points".into()))? * hn * ts;
        Homography::new(denorm)
    }
}

/// Applies `h` to every point; a point mapped to infinity is a domain error.
pub fn apply_homography(h: &Homography, points: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            h.apply_point(*p)
                .ok_or_else(|| crate::MatchaError::Domain(format!("point #{i} ({}, {}) maps to infinity", p[0], p[1])))
        })
        .collect()
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<CameraIntrinsics> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return domain(format!("intrinsics need positive focal lengths, got fx={fx} fy={fy}"));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Pixel to normalized image coordinates.
    pub fn normalize(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.cx) / self.fx, (p[1] - self.cy) / self.fy]
    }

    pub fn project(&self, x: &Vector3<f64>) -> [f64; 2] {
        [self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy]
    }
}

/// Transform from camera `a` to camera `b`: `X_b = R · X_a + t`, with `t` a unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<RelativePose> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if orth > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return domain(format!("rotation is not orthonormal (deviation {orth:e})"));
        }
        let n = translation.norm();
        if !(n > 0.0) || !n.is_finite() {
            return domain("translation must be a nonzero finite vector");
        }
        Ok(RelativePose { rotation, translation: translation / n })
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle_rad: f64, translation: Vector3<f64>) -> Result<RelativePose> {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle_rad);
        RelativePose::new(*r.matrix(), translation)
    }

    /// `E = [t]ₓ R`.
    pub fn essential(&self) -> Matrix3<f64> {
        skew(&self.translation) * self.rotation
    }
}

pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `(rotation error, translation-direction error)` in degrees. The
/// translation error ignores the sign of `t`.
pub fn pose_error(est: &RelativePose, gt: &RelativePose) -> (f64, f64) {
    let cos_r = (((est.rotation.transpose() * gt.rotation).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let cos_t = (est.translation.dot(&gt.translation).abs() / (est.translation.norm() * gt.translation.norm())).clamp(-1.0, 1.0);
    (cos_r.acos().to_degrees(), cos_t.acos().to_degrees())
}

/// Translation to the centroid and isotropic scaling to mean distance √2.
pub(crate) fn hartley(points: &[[f64; 2]]) -> (Matrix3<f64>, Vec<[f64; 2]>) {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = points.iter().map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let normalized = points.iter().map(|p| [s * (p[0] - cx), s * (p[1] - cy)]).collect();
    (t, normalized)
}

/// Eigenvector of the smallest eigenvalue of a symmetric matrix, plus the
/// smallest, second smallest and largest eigenvalues.
pub(crate) fn smallest_eigen<const N: usize>(m: &SMatrix<f64, N, N>) -> (SVector<f64, N>, f64, f64, f64) {
    let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_column_slice(N, N, m.as_slice()));
    let mut order: Vec<usize> = (0..N).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let v = SVector::<f64, N>::from_iterator(eig.eigenvectors.column(order[0]).iter().copied());
    (v, eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[N - 1]])
}

fn smallest_eigenvector(m: &SMatrix<f64, 9, 9>) -> SVector<f64, 9> {
    smallest_eigen(m).0
}
