use std::fmt::Write as _;
use std::path::Path;

use matcha_core::eval::{
    evaluate_geometric, evaluate_semantic, evaluate_temporal, mutual_nn_match, sample_descriptors, similarity_heatmap,
    write_heatmap_pgm, NormMode, Report, TemporalReport,
};
use matcha_core::fusion::{fusion_forward, merge_light, merge_unified, Branch, FusionParams};
use matcha_core::io::{read_keypoints, write_atomic};
use matcha_core::supervision::LossConfig;
use matcha_core::training::{run_training, write_loss_log, Checkpoint, LossLogRow, RunOptions, TrainConfig, TrainOutput};
use matcha_core::{mtf, FeatureMap, MatchaError, Result, Role};
use serde::{Deserialize, Serialize};

use crate::bench::{self, BenchKind, MapSource, SynthOptions};
use crate::config::RunConfig;
use crate::{Cli, Command, DataArgs, NormArg, Preset, ReportFormat};

pub const PARAMS_FILE: &str = "params.mfp";
pub const STAGE1_PARAMS_FILE: &str = "stage1.mfp";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.mck";

fn render(report: &impl Report, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Text => report.to_text(),
    }
}

fn require(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(MatchaError::Domain(format!("missing input {}", path.display())));
    }
    Ok(())
}

/// Reads a map whose file name should carry `expected`; a name without a
/// role suffix is accepted as that role.
fn read_role(path: &Path, expected: Role) -> Result<FeatureMap> {
    require(path)?;
    match mtf::role_from_path(path) {
        Some(role) if role != expected => Err(MatchaError::Domain(format!(
            "{} holds a {role} map, expected {expected}",
            path.display()
        ))),
        _ => mtf::read_as(path, expected),
    }
}

fn read_any(path: &Path) -> Result<FeatureMap> {
    require(path)?;
    mtf::read_as(path, mtf::role_from_path(path).unwrap_or(Role::Unified))
}

fn parse_role(s: &str) -> Result<Role> {
    Role::parse(s).ok_or_else(|| {
        let known: Vec<&str> = Role::ALL.iter().map(|r| r.as_str()).collect();
        MatchaError::Config(format!("unknown role {s:?}, expected one of {}", known.join(", ")))
    })
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn run(cli: &Cli) -> Result<String> {
    if cli.threads == 0 {
        return Err(MatchaError::Config("--threads must be at least 1".into()));
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| MatchaError::Config(format!("cannot start {} threads: {e}", cli.threads)))?;
    }
    let parallel = cli.threads > 1;
    match &cli.command {
        Command::Fuse { geometric, semantic, dino, no_dino, params, out } => {
            let report = fuse(&cfg, cli.seed.unwrap_or(0), geometric, semantic, dino.as_deref().filter(|_| !no_dino), params.as_deref(), out)?;
            Ok(render(&report, cli.report))
        }
        Command::Train { out, preset, resume, checkpoint_every, stop_at, log_every } => {
            let mut tc = cfg.train.clone().unwrap_or_else(|| match preset {
                Preset::Full => TrainConfig::default(),
                Preset::Desk => TrainConfig::desk(),
            });
            if let Some(seed) = cli.seed {
                tc.seed = seed;
            }
            tc.parallel = parallel;
            let opts = TrainArgs { resume: resume.as_deref(), checkpoint_every: *checkpoint_every, stop_at: *stop_at, log_every: *log_every };
            Ok(render(&train(&tc, out, &opts)?, cli.report))
        }
        Command::Match { a, b, keypoints_a, keypoints_b, out } => {
            Ok(render(&match_command(&cfg, a, b, keypoints_a, keypoints_b, out)?, cli.report))
        }
        Command::EvalGeometric { data } => {
            let mut ec = cfg.geometric.clone();
            ec.parallel = parallel;
            if let Some(seed) = cli.seed {
                ec.ransac.seed = seed;
            }
            ec.validate()?;
            let params = load_params(data)?;
            let source = MapSource::new(parse_role(&data.role)?, params.as_ref())?;
            let pairs = bench::load_geometric(&data.data, &source)?;
            let report = evaluate_geometric(&pairs, &ec)?;
            emit(&report, cli.report, data)
        }
        Command::EvalSemantic { data, norm } => {
            let mut ec = cfg.semantic.clone();
            ec.parallel = parallel;
            if let Some(n) = norm {
                ec.norm_mode = match n {
                    NormArg::Bbox => NormMode::Bbox,
                    NormArg::Image => NormMode::Image,
                };
            }
            ec.validate()?;
            let params = load_params(data)?;
            let source = MapSource::new(parse_role(&data.role)?, params.as_ref())?;
            let pairs = bench::load_semantic(&data.data, &source)?;
            let report = evaluate_semantic(&pairs, &ec)?;
            emit(&report, cli.report, data)
        }
        Command::EvalTemporal { data } => {
            let mut ec = cfg.temporal.clone();
            ec.parallel = parallel;
            let params = load_params(data)?;
            let source = MapSource::new(parse_role(&data.role)?, params.as_ref())?;
            let sequences = bench::load_temporal(&data.data, &source)?;
            let reports = sequences.iter().map(|s| evaluate_temporal(s, &ec)).collect::<Result<Vec<_>>>()?;
            emit(&TemporalSummary::new(&ec.alphas, reports), cli.report, data)
        }
        Command::Heatmap { a, b, x, y, out } => Ok(render(&heatmap(a, b, [*x, *y], out)?, cli.report)),
        Command::Synth { out, kind, entries, frames, motion, warps } => {
            let opts = SynthOptions {
                kind: *kind,
                entries: *entries,
                frames: *frames,
                motion: [motion[0], motion[1]],
                warps: warps.iter().map(|w| (*w).into()).collect(),
                seed: cli.seed.unwrap_or(0),
            };
            let (manifest, files) = bench::synthesize(out, &cfg.generation, &opts)?;
            let report = SynthReport { kind: manifest.kind, seed: manifest.seed, entries: manifest.entries.len(), files };
            Ok(render(&report, cli.report))
        }
    }
}

fn load_params(data: &DataArgs) -> Result<Option<FusionParams>> {
    data.params
        .as_deref()
        .map(|p| {
            require(p)?;
            FusionParams::load(p, None)
        })
        .transpose()
}

fn emit(report: &impl Report, format: ReportFormat, data: &DataArgs) -> Result<String> {
    let text = render(report, format);
    if let Some(path) = &data.out {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(text)
}

// ------------------------------------------------------------------- fuse

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseReport {
    pub output: String,
    pub variant: String,
    pub grid: [usize; 2],
    pub d_g: usize,
    pub d_s: usize,
    pub semantic_stride: usize,
    pub d_d: Option<usize>,
    pub dino_stride: Option<usize>,
    pub light_channels: usize,
    pub unified_channels: Option<usize>,
    pub output_channels: usize,
    pub loss: LossConfig,
}

impl Report for FuseReport {
    fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} descriptor {} on a {}x{} grid", self.variant, self.output, self.grid[0], self.grid[1]);
        let _ = write!(s, "channels: D_g {} + D_s/d_s {}/{}", self.d_g, self.d_s, self.semantic_stride);
        if let (Some(d), Some(t)) = (self.d_d, self.dino_stride) {
            let _ = write!(s, " + D_d/d_t {d}/{t}");
        }
        let _ = writeln!(s, " = {}", self.output_channels);
        let _ = writeln!(s, "F_t {}  F_m {}", self.light_channels, self.unified_channels.map_or("-".into(), |c| c.to_string()));
        s
    }

    fn is_empty(&self) -> bool {
        false
    }
}

fn fuse(
    cfg: &RunConfig,
    seed: u64,
    geometric: &Path,
    semantic: &Path,
    dino: Option<&Path>,
    params: Option<&Path>,
    out: &Path,
) -> Result<FuseReport> {
    cfg.loss.validate()?;
    let params = match params {
        Some(p) => {
            require(p)?;
            FusionParams::load(p, None)?
        }
        None => FusionParams::init(&cfg.fusion, seed)?,
    };
    let fc = *params.config();
    let geo = read_role(geometric, Role::GeometricRaw)?;
    let sem = read_role(semantic, Role::SemanticRaw)?;
    let dino = dino.map(|d| read_role(d, Role::Dino)).transpose()?;
    let fused = fusion_forward(&sem, &geo, &params)?;
    let light = merge_light(&fused.geometric, &fused.semantic, &fc)?;
    let (output, variant) = match &dino {
        Some(d) => (merge_unified(&fused.geometric, &fused.semantic, d, &fc)?, "unified"),
        None => (light.clone(), "light"),
    };
    mtf::write(out, &output)?;
    Ok(FuseReport {
        output: file_name(out),
        variant: variant.into(),
        grid: [output.height(), output.width()],
        d_g: fc.out_dim_geometric,
        d_s: fc.out_dim_semantic,
        semantic_stride: fc.semantic_stride(),
        d_d: dino.as_ref().map(|_| fc.dino_dim),
        dino_stride: dino.as_ref().map(|_| fc.dino_stride()),
        light_channels: light.channels(),
        unified_channels: dino.as_ref().map(|_| output.channels()),
        output_channels: output.channels(),
        loss: cfg.loss,
    })
}

// ------------------------------------------------------------------ train

pub struct TrainArgs<'a> {
    pub resume: Option<&'a Path>,
    pub checkpoint_every: u64,
    pub stop_at: Option<u64>,
    pub log_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub stage1_iterations: u64,
    pub stage2_iterations: u64,
    pub start_step: u64,
    pub completed_steps: u64,
    pub finished: bool,
    pub param_count: usize,
    pub files: Vec<String>,
    pub first: Option<LossLogRow>,
    pub last: Option<LossLogRow>,
    /// Set once stage 1 is complete.
    pub semantic_unchanged_in_stage1: Option<bool>,
    /// Set once stage 2 has run at least one iteration.
    pub semantic_changed_in_stage2: Option<bool>,
}

impl Report for TrainReport {
    fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "seed {}  steps {}..{} of {}+{}  {}",
            self.seed,
            self.start_step,
            self.completed_steps,
            self.stage1_iterations,
            self.stage2_iterations,
            if self.finished { "finished" } else { "stopped" }
        );
        let _ = writeln!(s, "{:<8}{:>7}{:>10}{:>14}{:>14}{:>14}{:>14}", "", "stage", "lr", "geo", "cl", "flow", "total");
        for (name, row) in [("first", &self.first), ("last", &self.last)] {
            if let Some(r) = row {
                let _ = writeln!(
                    s,
                    "{name:<8}{:>7}{:>10.1e}{:>14.4}{:>14.4}{:>14.4}{:>14.4}",
                    r.stage, r.lr, r.loss_geo, r.loss_cl, r.loss_flow, r.loss_total
                );
            }
        }
        let flag = |v: Option<bool>| v.map_or("-".to_string(), |b| b.to_string());
        let _ = writeln!(
            s,
            "semantic branch unchanged in stage 1: {}  changed in stage 2: {}",
            flag(self.semantic_unchanged_in_stage1),
            flag(self.semantic_changed_in_stage2)
        );
        let _ = writeln!(s, "wrote {}", self.files.join(", "));
        s
    }

    fn is_empty(&self) -> bool {
        false
    }
}

fn semantic_values(params: &FusionParams) -> Vec<u64> {
    let mask = params.layout().branch_mask(Branch::Semantic);
    params.values().iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| v.to_bits()).collect()
}

fn train_report(cfg: &TrainConfig, out: &TrainOutput, start: u64, files: Vec<String>) -> TrainReport {
    let done = out.log.len() as u64;
    let stage1_done = done >= cfg.stage1_iterations;
    TrainReport {
        seed: cfg.seed,
        stage1_iterations: cfg.stage1_iterations,
        stage2_iterations: cfg.stage2_iterations,
        start_step: start,
        completed_steps: done,
        finished: done == cfg.total_iterations(),
        param_count: out.params.len(),
        files,
        first: out.log.first().cloned(),
        last: out.log.last().cloned(),
        semantic_unchanged_in_stage1: stage1_done.then(|| semantic_values(&out.stage1_params) == semantic_values(&out.initial)),
        semantic_changed_in_stage2: (done > cfg.stage1_iterations)
            .then(|| semantic_values(&out.params) != semantic_values(&out.stage1_params)),
    }
}

fn train(cfg: &TrainConfig, dir: &Path, args: &TrainArgs) -> Result<TrainReport> {
    cfg.validate()?;
    let resume = args
        .resume
        .map(|p| {
            require(p)?;
            Checkpoint::load(p, cfg)
        })
        .transpose()?;
    let start = resume.as_ref().map_or(0, |c| c.next_step());
    let ck_path = dir.join(CHECKPOINT_FILE);
    let log_every = args.log_every;
    let options = RunOptions { resume, stop_at: args.stop_at, checkpoint_every: args.checkpoint_every };
    let out = run_training(
        cfg,
        options,
        |row| {
            if log_every > 0 && (row.step + 1) % log_every == 0 {
                eprintln!("step {} stage {} lr {:.1e} loss {:.4}", row.step + 1, row.stage, row.lr, row.loss_total);
            }
        },
        |ck| ck.save(&ck_path),
    )?;
    let mut files = vec![PARAMS_FILE.to_string(), STAGE1_PARAMS_FILE.to_string(), LOSS_LOG_FILE.to_string()];
    out.params.save(&dir.join(PARAMS_FILE))?;
    out.stage1_params.save(&dir.join(STAGE1_PARAMS_FILE))?;
    write_loss_log(&dir.join(LOSS_LOG_FILE), &out.log)?;
    if (out.log.len() as u64) < cfg.total_iterations() || args.checkpoint_every > 0 {
        Checkpoint::from_output(cfg, &out)?.save(&ck_path)?;
        files.push(CHECKPOINT_FILE.to_string());
    }
    Ok(train_report(cfg, &out, start, files))
}

// ------------------------------------------------------------------ match

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub output: String,
    pub keypoints_a: usize,
    pub keypoints_b: usize,
    pub matches: usize,
}

impl Report for MatchReport {
    fn to_text(&self) -> String {
        format!("{} matches from {} x {} keypoints -> {}\n", self.matches, self.keypoints_a, self.keypoints_b, self.output)
    }

    fn is_empty(&self) -> bool {
        false
    }
}

fn match_command(cfg: &RunConfig, a: &Path, b: &Path, ka: &Path, kb: &Path, out: &Path) -> Result<MatchReport> {
    require(ka)?;
    require(kb)?;
    let (map_a, map_b) = (read_any(a)?, read_any(b)?);
    let (pa, pb) = (read_keypoints(ka)?, read_keypoints(kb)?);
    let da = sample_descriptors(&map_a, &pa, cfg.geometric.normalize)?;
    let db = sample_descriptors(&map_b, &pb, cfg.geometric.normalize)?;
    let matches = mutual_nn_match(&da, &db)?;
    matches.write_csv(out)?;
    Ok(MatchReport { output: file_name(out), keypoints_a: pa.len(), keypoints_b: pb.len(), matches: matches.len() })
}

// ---------------------------------------------------------------- heatmap

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub output: String,
    pub width: usize,
    pub height: usize,
    pub query: [f64; 2],
    /// `[row, col]` of the query in the grid of `a`.
    pub query_cell: [usize; 2],
    /// `[row, col]` of the most similar cell of `b`.
    pub max_cell: [usize; 2],
}

impl Report for HeatmapReport {
    fn to_text(&self) -> String {
        format!(
            "{}x{} heatmap -> {}\nquery ({}, {}) at cell {:?}, peak at cell {:?}\n",
            self.width, self.height, self.output, self.query[0], self.query[1], self.query_cell, self.max_cell
        )
    }

    fn is_empty(&self) -> bool {
        false
    }
}

fn heatmap(a: &Path, b: &Path, query: [f64; 2], out: &Path) -> Result<HeatmapReport> {
    let (map_a, map_b) = (read_any(a)?, read_any(b)?);
    if !map_a.contains_pixel(query) {
        return Err(MatchaError::Domain(format!("query ({}, {}) lies outside {}", query[0], query[1], a.display())));
    }
    let heat = similarity_heatmap(&map_a, query, &map_b)?;
    // first maximum in row-major order
    let values = heat.matrix();
    let best = values
        .column(0)
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc })
        .0;
    write_heatmap_pgm(out, &heat)?;
    let g = map_a.pixel_to_grid(query);
    let cell = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    Ok(HeatmapReport {
        output: file_name(out),
        width: heat.width(),
        height: heat.height(),
        query,
        query_cell: [cell(g[1], map_a.height()), cell(g[0], map_a.width())],
        max_cell: [best / heat.width(), best % heat.width()],
    })
}

// ------------------------------------------------------------------ synth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub kind: BenchKind,
    pub seed: u64,
    pub entries: usize,
    pub files: usize,
}

impl Report for SynthReport {
    fn to_text(&self) -> String {
        format!("{:?} benchmark, seed {}: {} entries, {} files\n", self.kind, self.seed, self.entries, self.files)
    }

    fn is_empty(&self) -> bool {
        self.entries == 0
    }
}

// --------------------------------------------------------------- temporal

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalSummary {
    pub alphas: Vec<f64>,
    /// Mean over sequences that have at least one evaluated frame.
    pub pck: Option<std::collections::BTreeMap<String, f64>>,
    pub sequences: Vec<TemporalReport>,
}

impl TemporalSummary {
    fn new(alphas: &[f64], sequences: Vec<TemporalReport>) -> TemporalSummary {
        let scored: Vec<_> = sequences.iter().filter_map(|s| s.pck.as_ref()).collect();
        let pck = (!scored.is_empty()).then(|| {
            scored[0]
                .keys()
                .map(|k| (k.clone(), scored.iter().map(|m| m[k]).sum::<f64>() / scored.len() as f64))
                .collect()
        });
        TemporalSummary { alphas: alphas.to_vec(), pck, sequences }
    }
}

impl Report for TemporalSummary {
    fn to_text(&self) -> String {
        let mut s = String::new();
        for seq in &self.sequences {
            s.push_str(&seq.to_text());
            s.push('\n');
        }
        let _ = write!(s, "{:<8}", "overall");
        for a in &self.alphas {
            let key = format!("pck@{a}");
            let v = self.pck.as_ref().and_then(|m| m.get(&key));
            let _ = write!(s, "{:>10}", v.map_or("-".to_string(), |v| format!("{v:.4}")));
        }
        s.push('\n');
        s
    }

    fn is_empty(&self) -> bool {
        self.sequences.iter().all(|s| s.is_empty())
    }
}
