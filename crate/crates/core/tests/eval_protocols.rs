use matcha_core::eval::geometry::pose_error;
use matcha_core::eval::*;
use matcha_core::io::TrackRow;
use matcha_core::{FeatureMap, Role, Stride};
use nalgebra::Vector3;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn textured(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array2::from_shape_fn((h * w, c), |_| rng.random_range(-1.0..1.0));
    FeatureMap::new(h, w, Stride::integer(8), Role::Unified, data).unwrap()
}

fn cell_centers(map: &FeatureMap) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    for y in 0..map.height() {
        for x in 0..map.width() {
            out.push(map.grid_to_pixel([x as f64, y as f64]));
        }
    }
    out
}

struct PoseScene {
    a: Vec<[f64; 2]>,
    b: Vec<[f64; 2]>,
    inlier: Vec<bool>,
    gt: RelativePose,
    k: CameraIntrinsics,
}

fn pose_scene(seed: u64, n: usize, outlier_frac: f64, noise_px: f64) -> PoseScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::new(800.0, 800.0, 320.0, 240.0).unwrap();
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let gt = RelativePose::from_axis_angle(axis, rng.random_range(0.05..0.3), t).unwrap();
    let normal = rand_distr::Normal::new(0.0, noise_px.max(1e-300)).unwrap();
    let (mut a, mut b, mut inlier) = (Vec::new(), Vec::new(), Vec::new());
    let n_out = (n as f64 * outlier_frac).round() as usize;
    while a.len() < n - n_out {
        let x = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..10.0));
        let xb = gt.rotation * x + gt.translation * 2.0;
        if xb.z < 1.0 {
            continue;
        }
        let mut pa = k.project(&x);
        let mut pb = k.project(&xb);
        if noise_px > 0.0 {
            for v in pa.iter_mut().chain(pb.iter_mut()) {
                *v += rng.sample(normal);
            }
        }
        a.push(pa);
        b.push(pb);
        inlier.push(true);
    }
    for _ in 0..n_out {
        a.push([rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)]);
        b.push([rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)]);
        inlier.push(false);
    }
    PoseScene { a, b, inlier, gt, k }
}

#[test]
fn ransac_with_outliers_and_noise() {
    let s = pose_scene(11, 100, 0.3, 0.5);
    let cfg = RansacConfig { threshold: 1.5 / 800.0, ..Default::default() };
    let est = estimate_essential_ransac(&MatchSet::from_pairs(&s.a, &s.b).unwrap(), &s.k, &s.k, &cfg).unwrap();
    let (r, t) = pose_error(&est.pose, &s.gt);
    assert!(r < 1.0 && t < 2.0, "rot {r} trans {t}");
    let recalled = s.inlier.iter().zip(&est.inliers).filter(|(g, e)| **g && **e).count();
    assert!(recalled as f64 >= 0.95 * 70.0, "{recalled}");
}

#[test]
fn ransac_permutation_keeps_count_and_error() {
    let s = pose_scene(5, 100, 0.3, 0.5);
    let cfg = RansacConfig { threshold: 1.5 / 800.0, ..Default::default() };
    let base = estimate_essential_ransac(&MatchSet::from_pairs(&s.a, &s.b).unwrap(), &s.k, &s.k, &cfg).unwrap();
    let mut order: Vec<usize> = (0..s.a.len()).collect();
    order.reverse();
    let pa: Vec<_> = order.iter().map(|&i| s.a[i]).collect();
    let pb: Vec<_> = order.iter().map(|&i| s.b[i]).collect();
    let perm = estimate_essential_ransac(&MatchSet::from_pairs(&pa, &pb).unwrap(), &s.k, &s.k, &cfg).unwrap();
    let (r0, t0) = pose_error(&base.pose, &s.gt);
    let (r1, t1) = pose_error(&perm.pose, &s.gt);
    assert!((base.num_inliers() as i64 - perm.num_inliers() as i64).abs() <= 1, "{} {}", base.num_inliers(), perm.num_inliers());
    assert!((r0 - r1).abs() < 0.2 && (t0 - t1).abs() < 0.5, "{r0} {r1} {t0} {t1}");
}

#[test]
fn ransac_is_deterministic_per_seed() {
    let s = pose_scene(9, 60, 0.3, 0.5);
    let m = MatchSet::from_pairs(&s.a, &s.b).unwrap();
    let cfg = RansacConfig { seed: 42, threshold: 1.5 / 800.0, ..Default::default() };
    let a = estimate_essential_ransac(&m, &s.k, &s.k, &cfg).unwrap();
    let b = estimate_essential_ransac(&m, &s.k, &s.k, &cfg).unwrap();
    assert_eq!(a, b);
}

fn riemann_auc(errors: &[f64], t: f64, samples: usize) -> f64 {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = errors.len() as f64;
    let dt = t / samples as f64;
    let mut acc = 0.0;
    let mut k = 0;
    for i in 0..samples {
        let theta = (i as f64 + 0.5) * dt;
        while k < sorted.len() && sorted[k] <= theta {
            k += 1;
        }
        acc += k as f64 / n * dt;
    }
    acc / t
}

#[test]
fn pose_auc_matches_riemann_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let n = rng.random_range(1..30);
        let errors: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.1) { f64::INFINITY } else { rng.random_range(0.0..30.0) })
            .collect();
        let exact = pose_auc(&errors, &AUC_THRESHOLDS).unwrap();
        for (e, t) in exact.iter().zip(AUC_THRESHOLDS) {
            assert!((e - riemann_auc(&errors, t, 1_000_000)).abs() < 1e-4);
        }
    }
}

proptest! {
    #[test]
    fn pck_and_mma_are_monotone(errs in prop::collection::vec(0.0f64..50.0, 1..40)) {
        let gt: Vec<[f64; 2]> = errs.iter().map(|_| [0.0, 0.0]).collect();
        let pred: Vec<[f64; 2]> = errs.iter().map(|e| [*e, 0.0]).collect();
        let mut prev = 0.0;
        for alpha in [0.0, 0.01, 0.05, 0.1, 0.15, 0.3, 1.0] {
            let v = pck(&pred, &gt, alpha, 100.0).unwrap();
            prop_assert!(v >= prev);
            prev = v;
        }
        let m = MatchSet::from_pairs(&gt, &pred).unwrap();
        let v = mma(&m, &Homography::identity(), &MMA_THRESHOLDS).unwrap();
        prop_assert!(v.windows(2).all(|w| w[1] >= w[0]));
    }
}

fn identity_pair(name: &str, gt: GroundTruth) -> ScenePair {
    let map = textured(8, 10, 16, 3);
    let kp = cell_centers(&map);
    ScenePair { name: name.into(), map_a: map.clone(), map_b: map, keypoints_a: kp.clone(), keypoints_b: kp, ground_truth: gt }
}

#[test]
fn identity_pair_has_perfect_mma() {
    let pair = identity_pair("id", GroundTruth::from_homography(&Homography::identity()));
    let report = evaluate_geometric(&[pair], &GeometricEvalConfig::default()).unwrap();
    assert_eq!(report.mma, Some(vec![1.0; 10]));
    assert_eq!(report.num_failures, 0);
    let json = report.to_json();
    let back: GeometricReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.to_json(), json);
}

#[test]
fn injected_exact_pose_matches_give_full_auc() {
    let cfg = GeometricEvalConfig::default();
    let mut results = Vec::new();
    for seed in 0..20 {
        let s = pose_scene(100 + seed, 100, 0.0, 0.0);
        let gt = GroundTruth::from_pose(s.k, s.k, &s.gt);
        results.push(evaluate_matches(&format!("p{seed}"), &MatchSet::from_pairs(&s.a, &s.b).unwrap(), &gt, &cfg));
    }
    let report = aggregate_geometric(results, &cfg);
    assert!(report.pose_auc.unwrap().iter().all(|a| *a > 0.99));
}

#[test]
fn empty_geometric_report() {
    let report = evaluate_geometric(&[], &GeometricEvalConfig::default()).unwrap();
    assert!(report.is_empty());
    assert_eq!(report.mma, None);
    assert_eq!(report.pose_auc, None);
}

#[test]
fn failed_pair_is_recorded_and_counts_as_infinite_error() {
    let s = pose_scene(1, 100, 0.0, 0.0);
    let gt = GroundTruth::from_pose(s.k, s.k, &s.gt);
    let cfg = GeometricEvalConfig::default();
    let few = MatchSet::from_pairs(&s.a[..5], &s.b[..5]).unwrap();
    let report = aggregate_geometric(vec![evaluate_matches("few", &few, &gt, &cfg)], &cfg);
    assert_eq!(report.num_failures, 1);
    assert_eq!(report.pose_auc, Some(vec![0.0; 3]));
}

#[test]
fn parallel_and_sequential_reports_are_identical() {
    let pairs: Vec<ScenePair> = (0..6)
        .map(|i| {
            let mut p = identity_pair(&format!("p{i}"), GroundTruth::from_homography(&Homography::translation(i as f64, 0.0)));
            p.map_b = textured(8, 10, 16, i);
            p
        })
        .collect();
    let seq = evaluate_geometric(&pairs, &GeometricEvalConfig::default()).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let par = pool.install(|| evaluate_geometric(&pairs, &GeometricEvalConfig { parallel: true, ..Default::default() }).unwrap());
    assert_eq!(seq.to_json(), par.to_json());
}

fn semantic_pair(map_b: FeatureMap) -> SemanticPair {
    let map_a = textured(6, 6, 8, 21);
    let q = cell_centers(&map_a);
    SemanticPair { name: "s".into(), map_a, map_b, queries_a: q.clone(), gt_b: q, bbox_b: None }
}

#[test]
fn semantic_identical_maps_score_one() {
    let p = semantic_pair(textured(6, 6, 8, 21));
    let r = evaluate_semantic(&[p], &SemanticEvalConfig::default()).unwrap();
    let keys: Vec<&String> = r.pck.as_ref().unwrap().keys().collect();
    assert_eq!(keys, vec!["pck@0.05", "pck@0.1", "pck@0.15"]);
    assert!(r.pck.unwrap().values().all(|v| *v == 1.0));
    assert_eq!(r.pairs[0].norm_mode, NormMode::Image);
}

#[test]
fn semantic_constant_target_predicts_first_cell() {
    let t = FeatureMap::constant(6, 6, &[1.0; 8], Stride::integer(8), Role::Unified).unwrap();
    let p = semantic_pair(t);
    let r = evaluate_semantic(std::slice::from_ref(&p), &SemanticEvalConfig::default()).unwrap();
    // brute force: every prediction is the first cell center (3.5, 3.5)
    for (alpha, key) in [(0.05, "pck@0.05"), (0.1, "pck@0.1"), (0.15, "pck@0.15")] {
        let hits = p.gt_b.iter().filter(|g| ((g[0] - 3.5).powi(2) + (g[1] - 3.5).powi(2)).sqrt() <= alpha * 48.0).count();
        assert_eq!(r.pck.as_ref().unwrap()[key], hits as f64 / p.gt_b.len() as f64);
    }
}

#[test]
fn semantic_bbox_norm_and_alpha_validation() {
    let mut p = semantic_pair(textured(6, 6, 8, 21));
    p.bbox_b = Some([0.0, 0.0, 20.0, 10.0]);
    let r = evaluate_semantic(&[p], &SemanticEvalConfig::default()).unwrap();
    assert_eq!(r.pairs[0].norm_mode, NormMode::Bbox);
    assert_eq!(r.pairs[0].norm_length, 20.0);
    let bad = SemanticEvalConfig { alphas: vec![0.1, 0.05], ..Default::default() };
    assert!(matches!(evaluate_semantic(&[], &bad), Err(matcha_core::MatchaError::Config(_))));
}

fn track_rows(frames: usize, points: &[[f64; 2]], shift: impl Fn(usize) -> [f64; 2], visible: impl Fn(usize, usize) -> bool) -> Vec<TrackRow> {
    let mut rows = Vec::new();
    for f in 0..frames {
        for (i, p) in points.iter().enumerate() {
            let s = shift(f);
            rows.push(TrackRow { frame: f, point_id: i, x: p[0] + s[0], y: p[1] + s[1], visible: visible(f, i) as u8 });
        }
    }
    rows
}

#[test]
fn temporal_identical_frames() {
    let f0 = textured(6, 8, 8, 4);
    let pts: Vec<[f64; 2]> = cell_centers(&f0).into_iter().step_by(5).collect();
    let rows = track_rows(3, &pts, |_| [0.0, 0.0], |_, _| true);
    let seq = TemporalSequence::from_rows("seq", vec![f0.clone(), f0.clone(), f0], &rows).unwrap();
    let r = evaluate_temporal(&seq, &TemporalEvalConfig::default()).unwrap();
    assert!(r.pck.unwrap().values().all(|v| *v == 1.0));
}

#[test]
fn temporal_translation_and_occlusion() {
    let f0 = textured(6, 8, 8, 4);
    // shift by one cell: 8 px to the right
    let f1 = f0.roll(1, 0);
    let pts: Vec<[f64; 2]> = (0..6).flat_map(|y| (0..7).map(move |x| [x as f64 * 8.0 + 3.5, y as f64 * 8.0 + 3.5])).collect();
    let rows = track_rows(3, &pts, |f| if f == 1 { [8.0, 0.0] } else { [0.0, 0.0] }, |f, _| f != 2);
    let seq = TemporalSequence::from_rows("seq", vec![f0.clone(), f1, f0], &rows).unwrap();
    let r = evaluate_temporal(&seq, &TemporalEvalConfig::default()).unwrap();
    assert_eq!(r.skipped_frames, vec![2]);
    assert!(r.frames[0].pck.as_ref().unwrap().values().all(|v| *v == 1.0));
    assert!(r.to_text().contains("skipped"));
}

#[test]
fn heatmap_self_pair_peaks_at_query() {
    let m = textured(5, 7, 6, 8);
    let q = m.grid_to_pixel([4.0, 3.0]);
    let h = similarity_heatmap(&m, q, &m).unwrap();
    let col = h.matrix().column(0).to_vec();
    let best = col.iter().enumerate().fold(0, |b, (i, v)| if *v > col[b] { i } else { b });
    assert_eq!(best, 3 * 7 + 4);
}

