//! Benchmark directories: a `manifest.json`, feature maps named
//! `<stem>.<role>.mtf`, keypoint and track CSVs, and `gt.json`.
//!
//! Pair entries use the stems `<name>_a` / `<name>_b`; temporal entries
//! use `<name>_f000`, `<name>_f001`, ... and a `<name>.tracks.csv`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use matcha_core::eval::{GroundTruth, Homography, RelativePose, ScenePair, SemanticPair, TemporalSequence};
use matcha_core::fusion::{fusion_forward, merge_light, merge_unified, FusionParams};
use matcha_core::io::{read_csv, read_keypoints, write_atomic, write_csv, write_keypoints, TrackRow};
use matcha_core::training::{generate_scene, scene_seed, GenerationConfig, Stage, SyntheticScene, Warp, WarpKind};
use matcha_core::{mtf, FeatureMap, MatchaError, Result, Role};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const GROUND_TRUTH: &str = "gt.json";

/// Keeps benchmark scenes apart from the training stream of the same seed.
const BENCH_SALT: u64 = 0x6265_6e63_685f_7631;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BenchKind {
    Geometric,
    Semantic,
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: BenchKind,
    pub seed: u64,
    pub generation: GenerationConfig,
    pub entries: Vec<Entry>,
}

/// Semantic ground truth beyond the row-aligned keypoint files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticTruth {
    pub bbox_b: Option<[f64; 4]>,
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub kind: BenchKind,
    pub entries: usize,
    pub frames: usize,
    /// Per-frame displacement of temporal sequences, in pixels.
    pub motion: [f64; 2],
    pub warps: Vec<WarpKind>,
    pub seed: u64,
}

impl SynthOptions {
    pub fn validate(&self, gen: &GenerationConfig) -> Result<()> {
        gen.validate()?;
        if self.entries == 0 {
            return Err(MatchaError::Config("a benchmark needs at least one entry".into()));
        }
        if self.kind == BenchKind::Temporal && self.frames < 2 {
            return Err(MatchaError::Config(format!("a sequence needs at least 2 frames, got {}", self.frames)));
        }
        if self.warps.is_empty() {
            return Err(MatchaError::Config("at least one warp kind is required".into()));
        }
        if !self.motion.iter().all(|m| m.is_finite()) {
            return Err(MatchaError::Config(format!("motion must be finite, got {:?}", self.motion)));
        }
        Ok(())
    }
}

pub fn entry_seed(seed: u64, index: usize) -> u64 {
    scene_seed(seed ^ BENCH_SALT, Stage::One, 0, index)
}

pub fn ground_truth(warp: &Warp) -> Result<GroundTruth> {
    Ok(match warp {
        Warp::Identity => GroundTruth::from_homography(&Homography::identity()),
        Warp::Homography(h) => GroundTruth::from_homography(h),
        Warp::Pose { k, pose, baseline, .. } => {
            let metric = RelativePose::new(pose.rotation, pose.translation * *baseline)?;
            GroundTruth::from_pose(*k, *k, &metric)
        }
    })
}

fn stem_path(dir: &Path, stem: &str, role: Role) -> PathBuf {
    dir.join(mtf::file_name(stem, role))
}

fn keypoints_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.keypoints.csv"))
}

fn tracks_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.tracks.csv"))
}

pub fn frame_stem(name: &str, frame: usize) -> String {
    format!("{name}_f{frame:03}")
}

fn write_view(dir: &Path, stem: &str, scene: &SyntheticScene, view: usize, unified: &FeatureMap) -> Result<()> {
    mtf::write(&stem_path(dir, stem, Role::GeometricRaw), &scene.geometric[view])?;
    mtf::write(&stem_path(dir, stem, Role::SemanticRaw), &scene.semantic[view])?;
    mtf::write(&stem_path(dir, stem, Role::Dino), &scene.dino[view])?;
    mtf::write(&stem_path(dir, stem, Role::Unified), unified)
}

fn to_json(value: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s.into_bytes()
}

/// Generates every scene first, then writes the directory. Returns the
/// manifest and the number of files written.
pub fn synthesize(dir: &Path, gen: &GenerationConfig, opts: &SynthOptions) -> Result<(Manifest, usize)> {
    opts.validate(gen)?;
    let mut files = 0;
    let mut entries = Vec::with_capacity(opts.entries);
    match opts.kind {
        BenchKind::Geometric | BenchKind::Semantic => {
            let mut scenes = Vec::with_capacity(opts.entries);
            for i in 0..opts.entries {
                let cfg = GenerationConfig { warp: opts.warps[i % opts.warps.len()], ..gen.clone() };
                let scene = generate_scene(entry_seed(opts.seed, i), &cfg)?;
                let unified = scene.signal_maps(&cfg)?;
                scenes.push((format!("pair_{i:03}"), scene, unified));
            }
            let mut truth_geo = BTreeMap::new();
            let mut truth_sem = BTreeMap::new();
            for (name, scene, unified) in &scenes {
                for (view, side) in ["a", "b"].into_iter().enumerate() {
                    let stem = format!("{name}_{side}");
                    write_view(dir, &stem, scene, view, &unified[view])?;
                    let points = if view == 0 { &scene.correspondences.a } else { &scene.correspondences.b };
                    write_keypoints(&keypoints_path(dir, &stem), points)?;
                    files += 5;
                }
                truth_geo.insert(name.clone(), ground_truth(&scene.warp)?);
                truth_sem.insert(name.clone(), SemanticTruth { bbox_b: None });
                entries.push(Entry { name: name.clone(), frames: 2 });
            }
            let gt = if opts.kind == BenchKind::Geometric { to_json(&truth_geo) } else { to_json(&truth_sem) };
            write_atomic(&dir.join(GROUND_TRUTH), &gt)?;
            files += 1;
        }
        BenchKind::Temporal => {
            let mut sequences = Vec::with_capacity(opts.entries);
            for i in 0..opts.entries {
                let seed = entry_seed(opts.seed, i);
                let mut frames = Vec::with_capacity(opts.frames);
                for f in 1..opts.frames {
                    let shift = [opts.motion[0] * f as f64, opts.motion[1] * f as f64];
                    let cfg = GenerationConfig { warp: WarpKind::Translation, translation: shift, ..gen.clone() };
                    let scene = generate_scene(seed, &cfg)?;
                    let unified = scene.signal_maps(&cfg)?;
                    frames.push((scene, unified));
                }
                sequences.push((format!("seq_{i:03}"), frames));
            }
            for (name, frames) in &sequences {
                let (first, first_unified) = &frames[0];
                write_view(dir, &frame_stem(name, 0), first, 0, &first_unified[0])?;
                let queries = &first.correspondences.a;
                let (w, h) = first.image_size();
                let mut rows = Vec::with_capacity(queries.len() * opts.frames);
                for (k, q) in queries.iter().enumerate() {
                    rows.push(TrackRow { frame: 0, point_id: k, x: q[0], y: q[1], visible: 1 });
                }
                for (f, (scene, unified)) in frames.iter().enumerate() {
                    write_view(dir, &frame_stem(name, f + 1), scene, 1, &unified[1])?;
                    for (k, q) in queries.iter().enumerate() {
                        let p = scene.warp.forward(*q).unwrap_or([f64::NAN; 2]);
                        let inside = p[0] >= 0.0 && p[0] < w && p[1] >= 0.0 && p[1] < h;
                        let (x, y) = if inside { (p[0], p[1]) } else { (0.0, 0.0) };
                        rows.push(TrackRow { frame: f + 1, point_id: k, x, y, visible: inside as u8 });
                    }
                }
                write_csv(&tracks_path(dir, name), &rows, &["frame", "point_id", "x", "y", "visible"])?;
                files += 4 * opts.frames + 1;
                entries.push(Entry { name: name.clone(), frames: opts.frames });
            }
        }
    }
    let manifest = Manifest { kind: opts.kind, seed: opts.seed, generation: gen.clone(), entries };
    write_atomic(&dir.join(MANIFEST), &to_json(&manifest))?;
    Ok((manifest, files + 1))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| MatchaError::Domain(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| MatchaError::Format(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MatchaError::Domain(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| MatchaError::Format(format!("{}: {e}", path.display())))
}

fn expect_kind(manifest: &Manifest, kind: BenchKind, dir: &Path) -> Result<()> {
    if manifest.kind != kind {
        return Err(MatchaError::Domain(format!(
            "{} holds a {:?} benchmark, this command needs {kind:?}",
            dir.display(),
            manifest.kind
        )));
    }
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(MatchaError::Domain(format!("missing input {}", path.display())));
    }
    Ok(())
}

/// Where the descriptor maps of a benchmark come from.
pub enum MapSource<'a> {
    /// Read `<stem>.<role>.mtf` as stored.
    Stored(Role),
    /// Run the fusion stage on the stored raw maps and take `role` from it.
    Fused(Role, &'a FusionParams),
}

impl MapSource<'_> {
    pub fn new(role: Role, params: Option<&FusionParams>) -> Result<MapSource<'_>> {
        match params {
            None => Ok(MapSource::Stored(role)),
            Some(p) if matches!(role, Role::GeometricFused | Role::SemanticFused | Role::Concat | Role::Unified) => {
                Ok(MapSource::Fused(role, p))
            }
            Some(_) => Err(MatchaError::Config(format!("role {role} is not produced by the fusion stage"))),
        }
    }

    /// Checks that every file `load` will read exists.
    fn check(&self, dir: &Path, stem: &str) -> Result<()> {
        match self {
            MapSource::Stored(role) => require(&stem_path(dir, stem, *role)),
            MapSource::Fused(role, _) => {
                require(&stem_path(dir, stem, Role::GeometricRaw))?;
                require(&stem_path(dir, stem, Role::SemanticRaw))?;
                if *role == Role::Unified {
                    require(&stem_path(dir, stem, Role::Dino))?;
                }
                Ok(())
            }
        }
    }

    pub fn load(&self, dir: &Path, stem: &str) -> Result<FeatureMap> {
        match self {
            MapSource::Stored(role) => mtf::read_as(&stem_path(dir, stem, *role), *role),
            MapSource::Fused(role, params) => {
                let geo = mtf::read_as(&stem_path(dir, stem, Role::GeometricRaw), Role::GeometricRaw)?;
                let sem = mtf::read_as(&stem_path(dir, stem, Role::SemanticRaw), Role::SemanticRaw)?;
                let fused = fusion_forward(&sem, &geo, params)?;
                let cfg = params.config();
                match role {
                    Role::GeometricFused => Ok(fused.geometric),
                    Role::SemanticFused => Ok(fused.semantic),
                    Role::Concat => merge_light(&fused.geometric, &fused.semantic, cfg),
                    _ => {
                        let dino = mtf::read_as(&stem_path(dir, stem, Role::Dino), Role::Dino)?;
                        merge_unified(&fused.geometric, &fused.semantic, &dino, cfg)
                    }
                }
            }
        }
    }
}

fn check_pairs(dir: &Path, manifest: &Manifest, source: &MapSource) -> Result<()> {
    for e in &manifest.entries {
        for side in ["a", "b"] {
            let stem = format!("{}_{side}", e.name);
            source.check(dir, &stem)?;
            require(&keypoints_path(dir, &stem))?;
        }
    }
    require(&dir.join(GROUND_TRUTH))
}

pub fn load_geometric(dir: &Path, source: &MapSource) -> Result<Vec<ScenePair>> {
    let manifest = read_manifest(dir)?;
    expect_kind(&manifest, BenchKind::Geometric, dir)?;
    check_pairs(dir, &manifest, source)?;
    let mut truth: BTreeMap<String, GroundTruth> = read_json(&dir.join(GROUND_TRUTH))?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let ground_truth = truth
                .remove(&e.name)
                .ok_or_else(|| MatchaError::Domain(format!("{GROUND_TRUTH} has no entry for {}", e.name)))?;
            let (sa, sb) = (format!("{}_a", e.name), format!("{}_b", e.name));
            Ok(ScenePair {
                name: e.name.clone(),
                map_a: source.load(dir, &sa)?,
                map_b: source.load(dir, &sb)?,
                keypoints_a: read_keypoints(&keypoints_path(dir, &sa))?,
                keypoints_b: read_keypoints(&keypoints_path(dir, &sb))?,
                ground_truth,
            })
        })
        .collect()
}

pub fn load_semantic(dir: &Path, source: &MapSource) -> Result<Vec<SemanticPair>> {
    let manifest = read_manifest(dir)?;
    expect_kind(&manifest, BenchKind::Semantic, dir)?;
    check_pairs(dir, &manifest, source)?;
    let truth: BTreeMap<String, SemanticTruth> = read_json(&dir.join(GROUND_TRUTH))?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let (sa, sb) = (format!("{}_a", e.name), format!("{}_b", e.name));
            let queries_a = read_keypoints(&keypoints_path(dir, &sa))?;
            let gt_b = read_keypoints(&keypoints_path(dir, &sb))?;
            if queries_a.len() != gt_b.len() {
                return Err(MatchaError::Domain(format!(
                    "{}: {} queries but {} ground-truth points",
                    e.name,
                    queries_a.len(),
                    gt_b.len()
                )));
            }
            Ok(SemanticPair {
                name: e.name.clone(),
                map_a: source.load(dir, &sa)?,
                map_b: source.load(dir, &sb)?,
                queries_a,
                gt_b,
                bbox_b: truth.get(&e.name).and_then(|t| t.bbox_b),
            })
        })
        .collect()
}

pub fn load_temporal(dir: &Path, source: &MapSource) -> Result<Vec<TemporalSequence>> {
    let manifest = read_manifest(dir)?;
    expect_kind(&manifest, BenchKind::Temporal, dir)?;
    for e in &manifest.entries {
        for f in 0..e.frames {
            source.check(dir, &frame_stem(&e.name, f))?;
        }
        require(&tracks_path(dir, &e.name))?;
    }
    manifest
        .entries
        .iter()
        .map(|e| {
            let frames = (0..e.frames).map(|f| source.load(dir, &frame_stem(&e.name, f))).collect::<Result<Vec<_>>>()?;
            let rows: Vec<TrackRow> = read_csv(&tracks_path(dir, &e.name))?;
            TemporalSequence::from_rows(&e.name, frames, &rows)
        })
        .collect()
}
