//! PCK, MMA and pose AUC.

use crate::error::{domain, Result};
use crate::supervision::CorrespondenceSet;

use super::geometry::Homography;
use super::matching::MatchSet;

pub const MMA_THRESHOLDS: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
pub const AUC_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];
pub const PCK_ALPHAS: [f64; 3] = [0.05, 0.1, 0.15];

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Fraction of predictions within `alpha · norm_length` of the ground truth.
/// Non-finite predictions count as misses.
pub fn pck(pred: &[[f64; 2]], gt: &[[f64; 2]], alpha: f64, norm_length: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return domain(format!("{} predictions but {} ground-truth points", pred.len(), gt.len()));
    }
    if !(norm_length > 0.0) {
        return domain(format!("normalization length must be positive, got {norm_length}"));
    }
    if pred.is_empty() {
        return domain("PCK over zero points is undefined");
    }
    let bound = alpha * norm_length;
    let hits = pred.iter().zip(gt).filter(|(p, g)| dist(**p, **g) <= bound).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// [`pck`] on the `b` side of two index-aligned correspondence sets.
pub fn pck_correspondences(pred: &CorrespondenceSet, gt: &CorrespondenceSet, alpha: f64, norm_length: f64) -> Result<f64> {
    pck(&pred.b, &gt.b, alpha, norm_length)
}

/// Per threshold `t`, the fraction of matches with `‖H(p_a) − p_b‖ ≤ t`.
/// A match whose `p_a` maps to infinity counts as a miss.
pub fn mma(matches: &MatchSet, h: &Homography, thresholds: &[f64]) -> Result<Vec<f64>> {
    if matches.is_empty() {
        return domain("MMA over zero matches is undefined");
    }
    let errors: Vec<f64> = matches
        .matches
        .iter()
        .map(|m| h.apply_point(m.a).map_or(f64::INFINITY, |p| dist(p, m.b)))
        .collect();
    let n = errors.len() as f64;
    Ok(thresholds.iter().map(|t| errors.iter().filter(|e| **e <= *t).count() as f64 / n).collect())
}

/// `AUC(T) = (1/T)·∫₀ᵀ acc(θ) dθ` with `acc` the fraction of errors ≤ θ.
/// Each finite error `e < T` contributes `T − e`, so the integral is exact.
pub fn pose_auc(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return domain("pose AUC over zero pairs is undefined");
    }
    if let Some(i) = errors.iter().position(|e| e.is_nan() || *e < 0.0) {
        return domain(format!("pose error #{i} is {}", errors[i]));
    }
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| errors.iter().map(|e| (t - e).max(0.0)).sum::<f64>() / (n * t))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pck_cases() {
        let gt = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [50.0, 50.0]];
        assert_eq!(pck(&gt, &gt, 0.05, 100.0).unwrap(), 1.0);
        let pred = [[0.0, 0.0], [11.0, 0.0], [0.0, 13.0], [150.0, 50.0]];
        assert_eq!(pck(&pred, &gt, 0.05, 100.0).unwrap(), 0.75);
        assert_eq!(pck(&pred, &gt, 0.0, 100.0).unwrap(), 0.25);
        assert!(pck(&pred[..3], &gt, 0.05, 100.0).is_err());
        assert!(pck(&pred, &gt, 0.05, 0.0).is_err());
        assert_eq!(pck(&[[f64::INFINITY, 0.0]], &[[0.0, 0.0]], 1.0, 1e9).unwrap(), 0.0);
    }

    #[test]
    fn mma_cases() {
        let h = Homography::translation(2.0, 0.0);
        let exact = MatchSet::from_pairs(&[[1.0, 1.0], [5.0, 3.0]], &[[3.0, 1.0], [7.0, 3.0]]).unwrap();
        assert_eq!(mma(&exact, &h, &MMA_THRESHOLDS).unwrap(), vec![1.0; 10]);
        let off = MatchSet::from_pairs(&[[1.0, 1.0]], &[[4.5, 1.0]]).unwrap();
        let mut expected = vec![1.0; 10];
        expected[0] = 0.0;
        assert_eq!(mma(&off, &h, &MMA_THRESHOLDS).unwrap(), expected);
        assert!(mma(&MatchSet::default(), &h, &MMA_THRESHOLDS).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(pose_auc(&[0.0, 0.0], &AUC_THRESHOLDS).unwrap(), vec![1.0; 3]);
        assert_eq!(pose_auc(&[2.5], &AUC_THRESHOLDS).unwrap()[0], 0.5);
        assert_eq!(pose_auc(&[f64::INFINITY], &AUC_THRESHOLDS).unwrap(), vec![0.0; 3]);
        assert!(pose_auc(&[], &AUC_THRESHOLDS).is_err());
        assert!(pose_auc(&[f64::NAN], &AUC_THRESHOLDS).is_err());
    }
}
