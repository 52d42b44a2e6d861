use matcha_core::fusion::{Branch, FusionConfig, FusionParams};
use matcha_core::supervision::LossConfig;
use matcha_core::training::{
    batch_loss, generate_scene, loss_and_gradient, unfrozen_loss_and_gradient, GenerationConfig, Stage, Supervision,
    SyntheticScene,
};
use matcha_core::MatchaError;

fn toy_fusion(num_blocks: usize) -> FusionConfig {
    FusionConfig {
        num_blocks,
        hidden_dim: 8,
        num_heads: 2,
        patch_size: 2,
        out_dim_geometric: 2,
        out_dim_semantic: 4,
        in_dim_semantic: 6,
        in_dim_geometric: 4,
        dino_dim: 8,
        positional_encoding: false,
        pre_norm: false,
    }
}

fn toy_generation(supervision: Supervision) -> GenerationConfig {
    GenerationConfig {
        grid: [8, 8],
        geometric_channels: 4,
        geometric_signal_channels: 2,
        semantic_channels: 6,
        semantic_signal_channels: 3,
        dino_channels: 8,
        keypoints: 4,
        supervision,
        ..Default::default()
    }
}

fn scene(seed: u64, supervision: Supervision) -> SyntheticScene {
    generate_scene(seed, &toy_generation(supervision)).unwrap()
}

const H: f64 = 1e-5;

struct Check {
    /// Largest `|a − fd| / (1e-4·max(|a|,|fd|,1e-8) + roundoff)`; below 1 passes.
    max_ratio: f64,
    worst: String,
}

/// Central differences of the plain-forward objective against the tape
/// gradient. Each difference of two losses carries roundoff of a few ulps
/// of the loss, so that much slack (divided by `2h`) is allowed on top of
/// the relative tolerance.
fn fd_check(params: &FusionParams, scenes: &[SyntheticScene], stage: Stage, cfg: &LossConfig, grad: &[f64], only: Option<Branch>) -> Check {
    let mut check = Check { max_ratio: 0.0, worst: String::new() };
    for block in &params.layout().blocks {
        if only.is_some_and(|b| b != block.branch) {
            continue;
        }
        for i in block.range() {
            let mut p = params.clone();
            p.values_mut()[i] += H;
            let plus = batch_loss(&p, scenes, stage, cfg).unwrap().total;
            p.values_mut()[i] -= 2.0 * H;
            let minus = batch_loss(&p, scenes, stage, cfg).unwrap().total;
            let fd = (plus - minus) / (2.0 * H);
            let a = grad[i];
            let roundoff = 16.0 * f64::EPSILON * plus.abs().max(minus.abs()).max(1.0) / (2.0 * H);
            let ratio = (a - fd).abs() / (1e-4 * a.abs().max(fd.abs()).max(1e-8) + roundoff);
            if ratio > check.max_ratio {
                check.max_ratio = ratio;
                check.worst = format!("{}[{}]: tape {a:e}, fd {fd:e}", block.name, i - block.offset);
            }
        }
    }
    check
}

fn assert_gradient(params: &FusionParams, scenes: &[SyntheticScene], stage: Stage, cfg: &LossConfig) {
    let (loss, grad) = unfrozen_loss_and_gradient(params, scenes, stage, cfg, false).unwrap();
    let plain = batch_loss(params, scenes, stage, cfg).unwrap();
    assert!((loss.total - plain.total).abs() <= 1e-10 * plain.total.abs().max(1.0), "{loss:?} vs {plain:?}");
    let check = fd_check(params, scenes, stage, cfg, &grad, None);
    assert!(check.max_ratio < 1.0, "tolerance ratio {:e} at {}", check.max_ratio, check.worst);
}

#[test]
fn geometric_term_matches_finite_differences() {
    let params = FusionParams::init(&toy_fusion(1), 1).unwrap();
    assert_gradient(&params, &[scene(10, Supervision::Geometric)], Stage::Two, &LossConfig::default());
}

#[test]
fn contrastive_term_matches_finite_differences() {
    let params = FusionParams::init(&toy_fusion(1), 2).unwrap();
    let cfg = LossConfig { w_flow: 0.0, w_sem: 1.0, ..Default::default() };
    assert_gradient(&params, &[scene(11, Supervision::Semantic)], Stage::Two, &cfg);
}

#[test]
fn flow_term_matches_finite_differences() {
    let params = FusionParams::init(&toy_fusion(1), 3).unwrap();
    let cfg = LossConfig { w_cl: 0.0, w_sem: 1.0, ..Default::default() };
    assert_gradient(&params, &[scene(12, Supervision::Semantic)], Stage::Two, &cfg);
}

#[test]
fn total_matches_finite_differences_with_all_block_options() {
    let fusion = FusionConfig { positional_encoding: true, pre_norm: true, ..toy_fusion(2) };
    let params = FusionParams::init(&fusion, 4).unwrap();
    let cfg = LossConfig { normalize_descriptors: false, ..Default::default() };
    let scenes = [scene(13, Supervision::Geometric), scene(14, Supervision::Semantic)];
    assert_gradient(&params, &scenes, Stage::Two, &cfg);
}

#[test]
fn stage_one_freezes_semantic_branch() {
    let params = FusionParams::init(&toy_fusion(1), 5).unwrap();
    let cfg = LossConfig::default();
    let scenes = [scene(15, Supervision::Geometric), scene(16, Supervision::Semantic)];
    let (loss, grad) = loss_and_gradient(&params, &scenes, Stage::One, &cfg, false).unwrap();
    assert_eq!(loss.cl, 0.0);
    assert_eq!(loss.flow, 0.0);
    assert_eq!(loss.total, loss.geo);
    let mask = params.layout().branch_mask(Branch::Semantic);
    assert!(grad.iter().zip(&mask).filter(|(_, m)| **m).all(|(g, _)| *g == 0.0));
    assert!(grad.iter().zip(&mask).any(|(g, m)| !*m && *g != 0.0));
    let check = fd_check(&params, &scenes, Stage::One, &cfg, &grad, Some(Branch::Geometric));
    assert!(check.max_ratio < 1.0, "tolerance ratio {:e} at {}", check.max_ratio, check.worst);
}

#[test]
fn duplicated_batch_doubles_exactly() {
    let params = FusionParams::init(&toy_fusion(1), 6).unwrap();
    let cfg = LossConfig::default();
    let one = [scene(17, Supervision::Geometric), scene(18, Supervision::Semantic)];
    let two = [one[0].clone(), one[1].clone(), one[0].clone(), one[1].clone()];
    let (l1, g1) = loss_and_gradient(&params, &one, Stage::Two, &cfg, false).unwrap();
    let (l2, g2) = loss_and_gradient(&params, &two, Stage::Two, &cfg, false).unwrap();
    assert_eq!(l2.total, 2.0 * l1.total);
    assert_eq!(l2.geo, 2.0 * l1.geo);
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(*b, 2.0 * a);
    }
}

#[test]
fn parallel_reduction_is_bitwise_sequential() {
    let params = FusionParams::init(&toy_fusion(1), 7).unwrap();
    let cfg = LossConfig::default();
    let scenes: Vec<_> = (0..6)
        .map(|i| scene(20 + i, if i % 2 == 0 { Supervision::Geometric } else { Supervision::Semantic }))
        .collect();
    let seq = loss_and_gradient(&params, &scenes, Stage::Two, &cfg, false).unwrap();
    let par = loss_and_gradient(&params, &scenes, Stage::Two, &cfg, true).unwrap();
    assert_eq!(seq.0, par.0);
    assert!(seq.1.iter().zip(&par.1).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn non_finite_loss_names_the_term() {
    let mut params = FusionParams::init(&toy_fusion(1), 8).unwrap();
    for v in params.values_mut() {
        *v = 1e300;
    }
    let err = loss_and_gradient(&params, &[scene(30, Supervision::Geometric)], Stage::One, &LossConfig::default(), false)
        .unwrap_err();
    match err {
        MatchaError::Numerical(msg) => assert!(msg.contains("geometric") && msg.contains("scene 30"), "{msg}"),
        other => panic!("unexpected error {other:?}"),
    }
}
