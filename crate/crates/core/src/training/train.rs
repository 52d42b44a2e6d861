//! Two-stage training loop over freshly generated synthetic scenes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{batch_loss, loss_and_gradient, LossBreakdown, Stage};
use super::optim::{lr_schedule, optimizer_step, LrSchedule, OptimizerConfig, OptimizerState, REFERENCE_ITERATIONS};
use super::synth::{generate_scene, GenerationConfig, Supervision, SyntheticScene, WarpKind};
use crate::error::{config, MatchaError, Result};
use crate::fusion::{Branch, FusionConfig, FusionParams};
use crate::io::write_csv;
use crate::supervision::LossConfig;

pub const LOSS_LOG_HEADER: [&str; 7] = ["step", "stage", "lr", "loss_geo", "loss_cl", "loss_flow", "loss_total"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_iterations: u64,
    pub stage2_iterations: u64,
    pub stage1_batch: usize,
    /// Stage-2 batches alternate geometric and semantic scenes, starting
    /// with a geometric one.
    pub stage2_batch: usize,
    pub schedule: LrSchedule,
    /// When set, schedule thresholds are rescaled from a run of this many
    /// iterations to `stage1_iterations + stage2_iterations`.
    pub schedule_reference: Option<u64>,
    pub loss: LossConfig,
    pub fusion: FusionConfig,
    pub generation: GenerationConfig,
    /// Warp kinds cycled over the scenes of each batch.
    pub warps: Vec<WarpKind>,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Evaluate per-scene gradients on the rayon pool. Results do not depend on it.
    #[serde(skip)]
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_iterations: 150_000,
            stage2_iterations: 70_000,
            stage1_batch: 24,
            stage2_batch: 48,
            schedule: LrSchedule::default(),
            schedule_reference: None,
            loss: LossConfig::default(),
            fusion: FusionConfig::default(),
            generation: GenerationConfig::default(),
            warps: vec![WarpKind::Homography, WarpKind::Pose],
            optimizer: OptimizerConfig::default(),
            seed: 0,
            parallel: false,
        }
    }
}

impl TrainConfig {
    /// Laptop-scale run: a small transformer on 16×16 synthetic grids,
    /// 2000 + 2000 iterations with the schedule compressed to match.
    pub fn desk() -> TrainConfig {
        let generation = GenerationConfig::default();
        TrainConfig {
            stage1_iterations: 2000,
            stage2_iterations: 2000,
            stage1_batch: 4,
            stage2_batch: 4,
            schedule: LrSchedule { rates: vec![1e-3, 5e-4, 2e-4], thresholds: vec![100_000, 150_000] },
            schedule_reference: Some(REFERENCE_ITERATIONS),
            loss: LossConfig { normalize_descriptors: false, ..LossConfig::default() },
            fusion: FusionConfig {
                num_blocks: 2,
                hidden_dim: 64,
                num_heads: 4,
                patch_size: 2,
                out_dim_geometric: 16,
                out_dim_semantic: 48,
                in_dim_semantic: generation.semantic_channels,
                in_dim_geometric: generation.geometric_channels,
                dino_dim: generation.dino_channels,
                positional_encoding: false,
                pre_norm: false,
            },
            generation,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        self.fusion.validate()?;
        self.generation.validate()?;
        self.optimizer.validate()?;
        if self.stage1_iterations > 0 && self.stage1_batch == 0 || self.stage2_iterations > 0 && self.stage2_batch == 0 {
            return config("batch sizes must be positive for stages that run");
        }
        if self.warps.is_empty() {
            return config("warps must name at least one warp kind");
        }
        if self.schedule_reference == Some(0) {
            return config("schedule_reference must be positive");
        }
        if self.fusion.in_dim_geometric != self.generation.geometric_channels
            || self.fusion.in_dim_semantic != self.generation.semantic_channels
        {
            return config(format!(
                "fusion inputs ({} geometric, {} semantic) do not match generated channels ({}, {})",
                self.fusion.in_dim_geometric,
                self.fusion.in_dim_semantic,
                self.generation.geometric_channels,
                self.generation.semantic_channels
            ));
        }
        if !self.generation.grid[0].is_multiple_of(self.fusion.patch_size) || !self.generation.grid[1].is_multiple_of(self.fusion.patch_size) {
            return config("generated grid is not divisible by the patch size");
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> u64 {
        self.stage1_iterations + self.stage2_iterations
    }

    /// Schedule in this run's iteration count.
    pub fn effective_schedule(&self) -> LrSchedule {
        match self.schedule_reference {
            Some(r) => self.schedule.scaled(r, self.total_iterations()),
            None => self.schedule.clone(),
        }
    }
}

/// One row of the loss log; `step` counts iterations across both stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    pub loss_geo: f64,
    pub loss_cl: f64,
    pub loss_flow: f64,
    pub loss_total: f64,
}

pub fn write_loss_log(path: &Path, rows: &[LossLogRow]) -> Result<()> {
    write_csv(path, rows, &LOSS_LOG_HEADER)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub initial: FusionParams,
    pub params: FusionParams,
    /// Parameters at the end of stage 1.
    pub stage1_params: FusionParams,
    pub log: Vec<LossLogRow>,
    pub optimizer: OptimizerState,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of scene `index` at `step` of a run seeded with `seed`.
pub fn scene_seed(seed: u64, stage: Stage, step: u64, index: usize) -> u64 {
    mix(mix(mix(seed ^ (stage.number() as u64) << 56) ^ step) ^ index as u64)
}

/// The scenes of one training batch.
pub fn training_batch(cfg: &TrainConfig, stage: Stage, step: u64) -> Result<Vec<SyntheticScene>> {
    let size = match stage {
        Stage::One => cfg.stage1_batch,
        Stage::Two => cfg.stage2_batch,
    };
    (0..size)
        .map(|i| {
            let supervision = match stage {
                Stage::Two if i % 2 == 1 => Supervision::Semantic,
                _ => Supervision::Geometric,
            };
            let warp = cfg.warps[(step as usize + i) % cfg.warps.len()];
            let generation = GenerationConfig { supervision, warp, ..cfg.generation.clone() };
            generate_scene(scene_seed(cfg.seed, stage, step, i), &generation)
        })
        .collect()
}

/// Optional controls of a training run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from this state instead of the initialization.
    pub resume: Option<Checkpoint>,
    /// Stop before this global step (exclusive); the run can be resumed later.
    pub stop_at: Option<u64>,
    /// Hand a checkpoint to the caller every this many steps (0 = never).
    pub checkpoint_every: u64,
}

fn stage_at(cfg: &TrainConfig, step: u64) -> (Stage, u64) {
    if step < cfg.stage1_iterations {
        (Stage::One, step)
    } else {
        (Stage::Two, step - cfg.stage1_iterations)
    }
}

/// Runs stage 1 then stage 2 and returns every intermediate needed to audit
/// the run. `observe` sees each log row as it is produced; `on_checkpoint`
/// receives periodic checkpoints when `options.checkpoint_every > 0`.
pub fn run_training(
    cfg: &TrainConfig,
    options: RunOptions,
    mut observe: impl FnMut(&LossLogRow),
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let initial = FusionParams::init(&cfg.fusion, cfg.seed)?;
    let schedule = cfg.effective_schedule();
    let (mut params, mut stage1_params, mut state, mut log) = match options.resume {
        Some(ck) => {
            ck.check_config(cfg)?;
            let params = FusionParams::from_values(&cfg.fusion, ck.params)?;
            let stage1 = FusionParams::from_values(&cfg.fusion, ck.stage1_params)?;
            (params, stage1, ck.optimizer, ck.log)
        }
        None => {
            let state = OptimizerState::new(initial.len(), lr_schedule(0, &schedule), &cfg.optimizer);
            (initial.clone(), initial.clone(), state, Vec::with_capacity(cfg.total_iterations() as usize))
        }
    };
    let frozen = params.layout().branch_mask(Branch::Semantic);
    let end = options.stop_at.unwrap_or(u64::MAX).min(cfg.total_iterations());
    let mut step = log.len() as u64;
    while step < end {
        let (stage, local) = stage_at(cfg, step);
        let scenes = training_batch(cfg, stage, local)?;
        let (loss, grad) = loss_and_gradient(&params, &scenes, stage, &cfg.loss, cfg.parallel).map_err(|e| match e {
            MatchaError::Numerical(msg) => MatchaError::Numerical(format!("iteration {step} (stage {}): {msg}", stage.number())),
            other => other,
        })?;
        state.lr = lr_schedule(step, &schedule);
        let mask = (stage == Stage::One).then_some(frozen.as_slice());
        optimizer_step(params.values_mut(), &grad, &mut state, mask)?;
        if let Some(bad) = params.values().iter().position(|v| !v.is_finite()) {
            return Err(MatchaError::Numerical(format!(
                "iteration {step} (stage {}): parameter {bad} became non-finite",
                stage.number()
            )));
        }
        let row = LossLogRow {
            step,
            stage: stage.number(),
            lr: state.lr,
            loss_geo: loss.geo,
            loss_cl: loss.cl,
            loss_flow: loss.flow,
            loss_total: loss.total,
        };
        observe(&row);
        log.push(row);
        step += 1;
        if step <= cfg.stage1_iterations {
            stage1_params = params.clone();
        }
        if options.checkpoint_every > 0 && step.is_multiple_of(options.checkpoint_every) && step < cfg.total_iterations() {
            on_checkpoint(&Checkpoint::capture(cfg, &params, &stage1_params, &state, &log)?)?;
        }
    }
    Ok(TrainOutput { initial, params, stage1_params, log, optimizer: state })
}

pub fn train_with(cfg: &TrainConfig, observe: impl FnMut(&LossLogRow)) -> Result<TrainOutput> {
    run_training(cfg, RunOptions::default(), observe, |_| Ok(()))
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(cfg, |_| {})
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCK1";

/// Full-precision training state: parameters, optimizer moments and the
/// log so far, tied to the configuration that produced them.
///
/// Layout (little endian): magic, `u64` config length, config JSON,
/// `u64` parameter count `n`, `u64` optimizer step, `f64` lr, then `n`
/// values each of params, stage-1 params, first and second moments, then
/// `u64` log length and 7 `f64` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub params: Vec<f64>,
    pub stage1_params: Vec<f64>,
    pub optimizer: OptimizerState,
    pub log: Vec<LossLogRow>,
}

fn config_fingerprint(cfg: &TrainConfig) -> Result<String> {
    serde_json::to_string(cfg).map_err(|e| MatchaError::Format(e.to_string()))
}

impl Checkpoint {
    fn capture(cfg: &TrainConfig, params: &FusionParams, stage1: &FusionParams, state: &OptimizerState, log: &[LossLogRow]) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config_json: config_fingerprint(cfg)?,
            params: params.values().to_vec(),
            stage1_params: stage1.values().to_vec(),
            optimizer: state.clone(),
            log: log.to_vec(),
        })
    }

    pub fn from_output(cfg: &TrainConfig, out: &TrainOutput) -> Result<Checkpoint> {
        Checkpoint::capture(cfg, &out.params, &out.stage1_params, &out.optimizer, &out.log)
    }

    pub fn next_step(&self) -> u64 {
        self.log.len() as u64
    }

    fn check_config(&self, cfg: &TrainConfig) -> Result<()> {
        if self.config_json != config_fingerprint(cfg)? {
            return config("checkpoint was written by a different training configuration");
        }
        if self.next_step() > cfg.total_iterations() {
            return config(format!(
                "checkpoint is at step {}, beyond the configured {} iterations",
                self.next_step(),
                cfg.total_iterations()
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.params.len();
        let mut out = Vec::with_capacity(64 + self.config_json.len() + 32 * n + 56 * self.log.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        out.extend_from_slice(&self.optimizer.lr.to_le_bytes());
        for block in [&self.params, &self.stage1_params, &self.optimizer.m, &self.optimizer.v] {
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.log.len() as u64).to_le_bytes());
        for r in &self.log {
            for v in [r.step as f64, r.stage as f64, r.lr, r.loss_geo, r.loss_cl, r.loss_flow, r.loss_total] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; optimizer hyperparameters come from `cfg`.
    pub fn from_bytes(bytes: &[u8], cfg: &TrainConfig) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return crate::error::format("not a training checkpoint (bad magic)");
        }
        let len = r.u64()? as usize;
        let config_json = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| MatchaError::Format("checkpoint config is not UTF-8".into()))?;
        let n = r.u64()? as usize;
        let step = r.u64()?;
        let lr = r.f64()?;
        let mut blocks = Vec::with_capacity(4);
        for _ in 0..4 {
            blocks.push((0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        }
        let rows = r.u64()? as usize;
        let mut log = Vec::with_capacity(rows.min(1 << 24));
        for _ in 0..rows {
            let f: Vec<f64> = (0..7).map(|_| r.f64()).collect::<Result<_>>()?;
            log.push(LossLogRow {
                step: f[0] as u64,
                stage: f[1] as u8,
                lr: f[2],
                loss_geo: f[3],
                loss_cl: f[4],
                loss_flow: f[5],
                loss_total: f[6],
            });
        }
        if r.pos != bytes.len() {
            return crate::error::format(format!("checkpoint has {} trailing bytes", bytes.len() - r.pos));
        }
        let v = blocks.pop().expect("four blocks");
        let m = blocks.pop().expect("four blocks");
        let stage1_params = blocks.pop().expect("four blocks");
        let params = blocks.pop().expect("four blocks");
        let mut optimizer = OptimizerState::new(n, lr, &cfg.optimizer);
        optimizer.m = m;
        optimizer.v = v;
        optimizer.step = step;
        Ok(Checkpoint { config_json, params, stage1_params, optimizer, log })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes, cfg).map_err(|e| match e {
            MatchaError::Format(msg) => MatchaError::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return crate::error::format("checkpoint is truncated");
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Stage objective of `params` on a fixed set of probe scenes, for
/// comparing checkpoints of one run.
pub fn probe_loss(params: &FusionParams, scenes: &[SyntheticScene], stage: Stage, cfg: &LossConfig) -> Result<LossBreakdown> {
    batch_loss(params, scenes, stage, cfg)
}

/// Outcome of sparse matching on held-out scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchingScore {
    pub keypoints: usize,
    pub hits: usize,
    pub pck: f64,
}

/// Mutual nearest-neighbour matching of `F_g` read at each scene's GT
/// keypoints. A keypoint is a hit when its mutual match in view `b` lies
/// within `radius` pixels of its true position; unmatched keypoints miss.
pub fn geometric_matching_score(params: &FusionParams, scenes: &[SyntheticScene], radius: f64, normalize: bool) -> Result<MatchingScore> {
    let (mut keypoints, mut hits) = (0, 0);
    for scene in scenes {
        let gt = &scene.correspondences;
        let fa = crate::fusion::fusion_forward(&scene.semantic[0], &scene.geometric[0], params)?;
        let fb = crate::fusion::fusion_forward(&scene.semantic[1], &scene.geometric[1], params)?;
        let da = crate::eval::sample_descriptors(&fa.geometric, &gt.a, normalize)?;
        let db = crate::eval::sample_descriptors(&fb.geometric, &gt.b, normalize)?;
        let matches = crate::eval::mutual_nn_match(&da, &db)?;
        keypoints += gt.len();
        hits += matches
            .matches
            .iter()
            .filter(|m| {
                let t = gt.b[m.index_a];
                (m.b[0] - t[0]).hypot(m.b[1] - t[1]) <= radius
            })
            .count();
    }
    if keypoints == 0 {
        return Err(MatchaError::InsufficientData("no keypoints to score".into()));
    }
    Ok(MatchingScore { keypoints, hits, pck: hits as f64 / keypoints as f64 })
}
