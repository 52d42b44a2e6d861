//! Seeded synthetic training and benchmark scenes: procedural feature
//! fields, a ground-truth warp, warped feature maps and correspondences.

use nalgebra::{Matrix2, Vector2, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, MatchaError, Result};
use crate::eval::geometry::{CameraIntrinsics, Homography, RelativePose};
use crate::supervision::CorrespondenceSet;
use crate::tensor::{bilinear_taps, FeatureMap, Role, Stride};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpKind {
    Identity,
    Translation,
    Homography,
    Pose,
}

/// Which loss a scene supervises: geometric scenes show the same surface
/// twice, semantic scenes show two instances sharing only semantic content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    Geometric,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// `[height, width]` of the geometric (finest) grid.
    pub grid: [usize; 2],
    /// Pixels per geometric cell.
    pub stride: u32,
    pub geometric_channels: usize,
    /// Leading geometric channels that follow the warp; the rest are
    /// view-specific nuisance.
    pub geometric_signal_channels: usize,
    pub semantic_channels: usize,
    pub semantic_signal_channels: usize,
    pub dino_channels: usize,
    pub nuisance_amplitude: f64,
    /// Per-element Gaussian noise added to warped maps.
    pub noise_std: f64,
    pub keypoints: usize,
    pub min_keypoint_distance: f64,
    pub warp: WarpKind,
    /// Maximum corner displacement as a fraction of the image size.
    pub corner_jitter: f64,
    /// Pixel offset used by [`WarpKind::Translation`].
    pub translation: [f64; 2],
    pub max_rotation_deg: f64,
    /// Focal length as a multiple of the image width.
    pub focal_ratio: f64,
    /// Camera translation as a fraction of the mean scene depth.
    pub baseline: f64,
    /// Relative depth variation of the surface seen in pose scenes.
    pub relief: f64,
    pub outlier_fraction: f64,
    pub supervision: Supervision,
    pub geometric_wavelength: [f64; 2],
    pub semantic_wavelength: [f64; 2],
    pub waves: usize,
    pub blobs: usize,
    pub max_retries: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            grid: [16, 16],
            stride: 8,
            geometric_channels: 32,
            geometric_signal_channels: 16,
            semantic_channels: 48,
            semantic_signal_channels: 24,
            dino_channels: 64,
            nuisance_amplitude: 2.0,
            noise_std: 0.02,
            keypoints: 64,
            min_keypoint_distance: 6.0,
            warp: WarpKind::Homography,
            corner_jitter: 0.15,
            translation: [8.0, 0.0],
            max_rotation_deg: 10.0,
            focal_ratio: 1.2,
            baseline: 0.15,
            relief: 0.2,
            outlier_fraction: 0.0,
            supervision: Supervision::Geometric,
            geometric_wavelength: [24.0, 64.0],
            semantic_wavelength: [48.0, 128.0],
            waves: 8,
            blobs: 4,
            max_retries: 20,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid[0] < 2 || self.grid[1] < 2 || !self.grid[0].is_multiple_of(2) || !self.grid[1].is_multiple_of(2) {
            return config(format!("grid must be even and at least 2x2, got {:?}", self.grid));
        }
        if self.stride == 0 {
            return config("stride must be positive");
        }
        if self.geometric_signal_channels > self.geometric_channels || self.semantic_signal_channels > self.semantic_channels {
            return config("signal channel counts exceed total channel counts");
        }
        if self.geometric_channels == 0 || self.semantic_channels == 0 || self.dino_channels == 0 {
            return config("channel counts must be positive");
        }
        if !(0.0..=0.25).contains(&self.corner_jitter) {
            return config(format!("corner_jitter must lie in [0, 0.25], got {}", self.corner_jitter));
        }
        if !(0.0..=30.0).contains(&self.max_rotation_deg) {
            return config(format!("max_rotation_deg must lie in [0, 30], got {}", self.max_rotation_deg));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return config(format!("outlier_fraction must lie in [0, 1], got {}", self.outlier_fraction));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("nuisance_amplitude", self.nuisance_amplitude),
            ("relief", self.relief),
            ("min_keypoint_distance", self.min_keypoint_distance),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return config(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.focal_ratio > 0.0 && self.baseline > 0.0) {
            return config("focal_ratio and baseline must be positive");
        }
        if self.relief >= 0.9 {
            return config(format!("relief must stay below 0.9, got {}", self.relief));
        }
        for (name, w) in [("geometric_wavelength", self.geometric_wavelength), ("semantic_wavelength", self.semantic_wavelength)] {
            if !(w[0] > 0.0 && w[1] >= w[0]) {
                return config(format!("{name} must satisfy 0 < min <= max, got {w:?}"));
            }
        }
        if self.keypoints == 0 {
            return config("keypoints must be positive");
        }
        Ok(())
    }

    /// `(width, height)` of the image in pixels.
    pub fn image_size(&self) -> (f64, f64) {
        let s = self.stride as f64;
        (self.grid[1] as f64 * s, self.grid[0] as f64 * s)
    }

    pub fn semantic_grid(&self) -> [usize; 2] {
        [self.grid[0] / 2, self.grid[1] / 2]
    }

    /// Object-level grid with a 14-pixel patch, at least 1×1.
    pub fn dino_grid(&self) -> ([usize; 2], Stride) {
        let (w, h) = self.image_size();
        let gh = ((h / 14.0).round() as usize).max(1);
        let gw = ((w / 14.0).round() as usize).max(1);
        let stride = Stride::new(self.grid[1] as u32 * self.stride, gw as u32).expect("positive stride");
        ([gh, gw], stride)
    }
}

#[derive(Debug, Clone)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    inv_two_sigma2: f64,
    amp: f64,
}

/// Smooth random multichannel field over image pixels: random plane waves
/// plus Gaussian blobs, roughly unit variance per channel.
#[derive(Debug, Clone)]
pub struct Field {
    channels: Vec<(Vec<Wave>, Vec<Blob>)>,
}

impl Field {
    pub fn random(rng: &mut ChaCha8Rng, channels: usize, wavelength: [f64; 2], image: (f64, f64), waves: usize, blobs: usize) -> Field {
        let amp = (2.0 / waves.max(1) as f64).sqrt();
        let channels = (0..channels)
            .map(|_| {
                let w = (0..waves)
                    .map(|_| {
                        let lambda = rng.random_range(wavelength[0]..=wavelength[1]);
                        let theta = rng.random_range(0.0..std::f64::consts::TAU);
                        let k = std::f64::consts::TAU / lambda;
                        Wave { kx: k * theta.cos(), ky: k * theta.sin(), phase: rng.random_range(0.0..std::f64::consts::TAU), amp }
                    })
                    .collect();
                let b = (0..blobs)
                    .map(|_| {
                        let sigma = rng.random_range(wavelength[0] / 4.0..=wavelength[1] / 4.0);
                        Blob {
                            cx: rng.random_range(0.0..image.0),
                            cy: rng.random_range(0.0..image.1),
                            inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                            amp: rng.random_range(-1.0..1.0),
                        }
                    })
                    .collect();
                (w, b)
            })
            .collect();
        Field { channels }
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    pub fn eval(&self, p: [f64; 2], out: &mut [f64]) {
        for ((waves, blobs), o) in self.channels.iter().zip(out.iter_mut()) {
            let mut v = 0.0;
            for w in waves {
                v += w.amp * (w.kx * p[0] + w.ky * p[1] + w.phase).sin();
            }
            for b in blobs {
                let d2 = (p[0] - b.cx).powi(2) + (p[1] - b.cy).powi(2);
                v += b.amp * (-d2 * b.inv_two_sigma2).exp();
            }
            *o = v;
        }
    }
}

/// Smooth surface depth over image-`a` pixels for pose scenes.
#[derive(Debug, Clone)]
pub struct DepthField {
    pub mean: f64,
    pub relief: f64,
    waves: Vec<Wave>,
}

impl DepthField {
    pub fn depth(&self, p: [f64; 2]) -> f64 {
        let bump: f64 = self.waves.iter().map(|w| w.amp * (w.kx * p[0] + w.ky * p[1] + w.phase).sin()).sum();
        self.mean * (1.0 + self.relief * bump)
    }
}

/// Ground-truth map from image `a` to image `b`.
#[derive(Debug, Clone)]
pub enum Warp {
    Identity,
    Homography(Homography),
    Pose {
        k: CameraIntrinsics,
        /// Unit-translation pose; the metric translation is `baseline · t`.
        pose: RelativePose,
        baseline: f64,
        surface: DepthField,
    },
}

impl Warp {
    pub fn forward(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        match self {
            Warp::Identity => Some(p),
            Warp::Homography(h) => h.apply_point(p),
            Warp::Pose { k, pose, baseline, surface } => {
                let z = surface.depth(p);
                let ray = Vector3::new((p[0] - k.cx) / k.fx, (p[1] - k.cy) / k.fy, 1.0);
                let xb = pose.rotation * (ray * z) + pose.translation * *baseline;
                (xb.z > 1e-9).then(|| k.project(&xb))
            }
        }
    }

    /// Point of image `a` mapped onto `q`.
    pub fn inverse(&self, q: [f64; 2]) -> Option<[f64; 2]> {
        match self {
            Warp::Identity => Some(q),
            Warp::Homography(h) => h.inverse().apply_point(q),
            Warp::Pose { k, pose, baseline, surface } => {
                // start from the mean-depth plane homography, then Newton
                let t = pose.translation * *baseline;
                let plane = pose.rotation + t * Vector3::new(0.0, 0.0, 1.0 / surface.mean).transpose();
                let h = k.matrix() * plane * k.matrix().try_inverse()?;
                let mut u = Homography::new(h.try_inverse()?).ok()?.apply_point(q)?;
                for _ in 0..50 {
                    let f = self.forward(u)?;
                    let r = Vector2::new(f[0] - q[0], f[1] - q[1]);
                    if r.norm() < 1e-10 {
                        return Some(u);
                    }
                    let eps = 1e-4;
                    let fx = self.forward([u[0] + eps, u[1]])?;
                    let fy = self.forward([u[0], u[1] + eps])?;
                    let j = Matrix2::new(
                        (fx[0] - f[0]) / eps,
                        (fy[0] - f[0]) / eps,
                        (fx[1] - f[1]) / eps,
                        (fy[1] - f[1]) / eps,
                    );
                    let step = j.try_inverse()? * r;
                    u = [u[0] - step.x, u[1] - step.y];
                }
                let f = self.forward(u)?;
                ((f[0] - q[0]).hypot(f[1] - q[1]) < 1e-6).then_some(u)
            }
        }
    }

    pub fn homography(&self) -> Option<Homography> {
        match self {
            Warp::Identity => Some(Homography::identity()),
            Warp::Homography(h) => Some(*h),
            Warp::Pose { .. } => None,
        }
    }
}

/// One generated pair of views with every feature role and ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub seed: u64,
    pub supervision: Supervision,
    pub warp: Warp,
    /// `[a, b]` for each role.
    pub geometric: [FeatureMap; 2],
    pub semantic: [FeatureMap; 2],
    pub dino: [FeatureMap; 2],
    /// Sparse pairs; outliers (if any) replace the `b` side.
    pub correspondences: CorrespondenceSet,
    pub inliers: Vec<bool>,
    /// For every geometric cell of `a`, its image in `b` when inside.
    pub dense: Vec<Option<[f64; 2]>>,
}

impl SyntheticScene {
    pub fn image_size(&self) -> (f64, f64) {
        self.geometric[0].image_size()
    }

    /// Warp-consistent map pair of the unified stand-in: signal channels of
    /// every role, concatenated on the geometric grid.
    pub fn signal_maps(&self, cfg: &GenerationConfig) -> Result<[FeatureMap; 2]> {
        let build = |i: usize| -> Result<FeatureMap> {
            let g = &self.geometric[i];
            let sig = g.matrix().slice(ndarray::s![.., ..cfg.geometric_signal_channels]).to_owned();
            let geo = FeatureMap::new(g.height(), g.width(), g.stride(), Role::Unified, sig)?;
            let sem = self.semantic[i].resample(g.height(), g.width())?;
            let sem_sig = sem.matrix().slice(ndarray::s![.., ..cfg.semantic_signal_channels]).to_owned();
            let sem = FeatureMap::new(g.height(), g.width(), g.stride(), Role::Unified, sem_sig)?;
            geo.concat_channels(&sem, Role::Unified)
        };
        Ok([build(0)?, build(1)?])
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn render(h: usize, w: usize, stride: Stride, role: Role, parts: &[(&Field, f64)]) -> Result<FeatureMap> {
    let c: usize = parts.iter().map(|(f, _)| f.channels()).sum();
    let mut data = Array2::zeros((h * w, c));
    let probe = FeatureMap::new(h, w, stride, role, Array2::zeros((h * w, 0)))?;
    let mut buf = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let p = probe.grid_to_pixel([x as f64, y as f64]);
            let mut off = 0;
            for (field, scale) in parts {
                let n = field.channels();
                field.eval(p, &mut buf[off..off + n]);
                for v in &mut buf[off..off + n] {
                    *v *= scale;
                }
                off += n;
            }
            data.row_mut(y * w + x).assign(&ndarray::ArrayView1::from(&buf[..]));
        }
    }
    FeatureMap::new(h, w, stride, role, data)
}

/// Leading `channels` of `base` bilinearly pulled through the warp onto the
/// same grid; points whose preimage is undefined or outside read the border.
fn pull(base: &FeatureMap, channels: usize, warp: &Warp) -> Array2<f64> {
    let src = base.matrix();
    if matches!(warp, Warp::Identity) {
        return src.slice(ndarray::s![.., ..channels]).to_owned();
    }
    let (h, w) = (base.height(), base.width());
    let mut out = Array2::zeros((h * w, channels));
    for y in 0..h {
        for x in 0..w {
            let q = base.grid_to_pixel([x as f64, y as f64]);
            let p = warp.inverse(q).unwrap_or(q);
            let g = base.pixel_to_grid_clamped(p);
            let taps = bilinear_taps(g, h, w).expect("clamped point is on the grid");
            let mut row = out.row_mut(y * w + x);
            for (cell, wt) in taps {
                if wt != 0.0 {
                    row.scaled_add(wt, &src.slice(ndarray::s![cell, ..channels]));
                }
            }
        }
    }
    out
}

fn with_tail(head: Array2<f64>, tail: Option<&FeatureMap>, noise: f64, rng: &mut ChaCha8Rng, like: &FeatureMap) -> Result<FeatureMap> {
    let data = match tail {
        Some(t) => ndarray::concatenate(ndarray::Axis(1), &[head.view(), t.matrix()]).expect("same cell count"),
        None => head,
    };
    let mut data = data;
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).map_err(|e| MatchaError::Config(e.to_string()))?;
        data.mapv_inplace(|v| v + normal.sample(rng));
    }
    FeatureMap::new(like.height(), like.width(), like.stride(), like.role(), data)
}

fn random_warp(rng: &mut ChaCha8Rng, cfg: &GenerationConfig) -> Result<Warp> {
    let (w, h) = cfg.image_size();
    match cfg.warp {
        WarpKind::Identity => Ok(Warp::Identity),
        WarpKind::Translation => Ok(Warp::Homography(Homography::translation(cfg.translation[0], cfg.translation[1]))),
        WarpKind::Homography => {
            let src = [[-0.5, -0.5], [w - 0.5, -0.5], [w - 0.5, h - 0.5], [-0.5, h - 0.5]];
            let jitter = |rng: &mut ChaCha8Rng, size: f64| {
                if cfg.corner_jitter > 0.0 {
                    rng.random_range(-cfg.corner_jitter..=cfg.corner_jitter) * size
                } else {
                    0.0
                }
            };
            let dst: Vec<[f64; 2]> = src.iter().map(|p| [p[0] + jitter(rng, w), p[1] + jitter(rng, h)]).collect();
            // reject folded quadrilaterals
            let cross = |i: usize| {
                let (a, b, c) = (dst[i], dst[(i + 1) % 4], dst[(i + 2) % 4]);
                (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
            };
            if !(0..4).all(|i| cross(i) > 0.0) {
                return Err(MatchaError::Numerical("folded corner quadrilateral".into()));
            }
            Ok(Warp::Homography(Homography::from_correspondences(&src, &dst)?))
        }
        WarpKind::Pose => {
            let k = CameraIntrinsics::new(cfg.focal_ratio * w, cfg.focal_ratio * w, w / 2.0 - 0.5, h / 2.0 - 0.5)?;
            let axis = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            let angle = rng.random_range(0.0..=cfg.max_rotation_deg).to_radians();
            let t = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            let pose = RelativePose::from_axis_angle(axis, angle, t)?;
            let amp = (2.0 / 3.0f64).sqrt() / 2.0;
            let waves = (0..3)
                .map(|_| {
                    let lambda = rng.random_range(0.5 * w..=1.5 * w);
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let kk = std::f64::consts::TAU / lambda;
                    Wave { kx: kk * theta.cos(), ky: kk * theta.sin(), phase: rng.random_range(0.0..std::f64::consts::TAU), amp }
                })
                .collect();
            Ok(Warp::Pose { k, pose, baseline: cfg.baseline, surface: DepthField { mean: 1.0, relief: cfg.relief, waves } })
        }
    }
}

fn off_grid_lines(map: &FeatureMap, p: [f64; 2]) -> bool {
    let g = map.pixel_to_grid(p);
    g.iter().all(|v| (v - v.round()).abs() > 1e-3)
}

fn inside_hull(map: &FeatureMap, p: [f64; 2], margin: f64) -> bool {
    let g = map.pixel_to_grid(p);
    let m = margin / map.stride().value();
    g[0] >= m && g[1] >= m && g[0] <= (map.width() - 1) as f64 - m && g[1] <= (map.height() - 1) as f64 - m
}

fn sample_keypoints(
    rng: &mut ChaCha8Rng,
    warp: &Warp,
    grid_a: &FeatureMap,
    cfg: &GenerationConfig,
) -> Option<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    let (w, h) = cfg.image_size();
    let mut a: Vec<[f64; 2]> = Vec::with_capacity(cfg.keypoints);
    let mut b = Vec::with_capacity(cfg.keypoints);
    let mut attempts = 0;
    while a.len() < cfg.keypoints {
        attempts += 1;
        if attempts > 400 * cfg.keypoints {
            return None;
        }
        let p = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
        if !inside_hull(grid_a, p, 1.0) || !off_grid_lines(grid_a, p) {
            continue;
        }
        if a.iter().any(|q| (q[0] - p[0]).hypot(q[1] - p[1]) < cfg.min_keypoint_distance) {
            continue;
        }
        let Some(q) = warp.forward(p) else { continue };
        if !inside_hull(grid_a, q, 1.0) || !off_grid_lines(grid_a, q) {
            continue;
        }
        a.push(p);
        b.push(q);
    }
    Some((a, b))
}

/// Deterministic scene for `seed`. Warps that fold, fail to invert or leave
/// too little overlap for the keypoints are redrawn up to `max_retries` times.
pub fn generate_scene(seed: u64, cfg: &GenerationConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let (iw, ih) = cfg.image_size();
    let image = (iw, ih);
    let [gh, gw] = cfg.grid;
    let [sh, sw] = cfg.semantic_grid();
    let ([dh, dw], dino_stride) = cfg.dino_grid();
    let geo_stride = Stride::integer(cfg.stride);
    let sem_stride = Stride::integer(2 * cfg.stride);

    let mut field_rng = stream(seed, 1);
    let geo_signal = Field::random(&mut field_rng, cfg.geometric_signal_channels, cfg.geometric_wavelength, image, cfg.waves, cfg.blobs);
    let geo_other = Field::random(&mut field_rng, cfg.geometric_signal_channels, cfg.geometric_wavelength, image, cfg.waves, cfg.blobs);
    let geo_nuisance: Vec<Field> = (0..2)
        .map(|_| {
            Field::random(&mut field_rng, cfg.geometric_channels - cfg.geometric_signal_channels, cfg.geometric_wavelength, image, cfg.waves, cfg.blobs)
        })
        .collect();
    let sem_signal = Field::random(&mut field_rng, cfg.semantic_signal_channels, cfg.semantic_wavelength, image, cfg.waves, cfg.blobs);
    let sem_nuisance: Vec<Field> = (0..2)
        .map(|_| {
            Field::random(&mut field_rng, cfg.semantic_channels - cfg.semantic_signal_channels, cfg.semantic_wavelength, image, cfg.waves, cfg.blobs)
        })
        .collect();
    let dino_field = Field::random(&mut field_rng, cfg.dino_channels, cfg.semantic_wavelength, image, cfg.waves, cfg.blobs);

    let nuis = cfg.nuisance_amplitude;
    let geo_a = render(gh, gw, geo_stride, Role::GeometricRaw, &[(&geo_signal, 1.0), (&geo_nuisance[0], nuis)])?;
    let sem_a = render(sh, sw, sem_stride, Role::SemanticRaw, &[(&sem_signal, 1.0), (&sem_nuisance[0], nuis)])?;
    let dino_a = render(dh, dw, dino_stride, Role::Dino, &[(&dino_field, 1.0)])?;

    let mut warp_rng = stream(seed, 2);
    let mut found = None;
    let mut last_err = String::from("no attempt made");
    for _ in 0..=cfg.max_retries {
        match random_warp(&mut warp_rng, cfg) {
            Ok(warp) => match sample_keypoints(&mut warp_rng, &warp, &geo_a, cfg) {
                Some(kp) => {
                    found = Some((warp, kp));
                    break;
                }
                None => last_err = "too few keypoints visible in both views".into(),
            },
            Err(e) => last_err = e.to_string(),
        }
    }
    let (warp, (kp_a, mut kp_b)) = found.ok_or_else(|| {
        MatchaError::Numerical(format!("scene {seed}: no valid warp after {} retries ({last_err})", cfg.max_retries))
    })?;

    let mut noise_rng = stream(seed, 3);
    let noise = cfg.noise_std;
    let nuis_b_geo = render(gh, gw, geo_stride, Role::GeometricRaw, &[(&geo_nuisance[1], nuis)])?;
    let nuis_b_sem = render(sh, sw, sem_stride, Role::SemanticRaw, &[(&sem_nuisance[1], nuis)])?;
    let geo_head = match cfg.supervision {
        Supervision::Geometric => pull(&geo_a, cfg.geometric_signal_channels, &warp),
        Supervision::Semantic => render(gh, gw, geo_stride, Role::GeometricRaw, &[(&geo_other, 1.0)])?.into_matrix(),
    };
    let has_geo_nuisance = cfg.geometric_channels > cfg.geometric_signal_channels;
    let has_sem_nuisance = cfg.semantic_channels > cfg.semantic_signal_channels;
    let geo_b = with_tail(geo_head, has_geo_nuisance.then_some(&nuis_b_geo), noise, &mut noise_rng, &geo_a)?;
    let sem_b = with_tail(
        pull(&sem_a, cfg.semantic_signal_channels, &warp),
        has_sem_nuisance.then_some(&nuis_b_sem),
        noise,
        &mut noise_rng,
        &sem_a,
    )?;
    let dino_b = with_tail(pull(&dino_a, cfg.dino_channels, &warp), None, noise, &mut noise_rng, &dino_a)?;

    let n_out = (cfg.outlier_fraction * kp_a.len() as f64).round() as usize;
    let mut inliers = vec![true; kp_a.len()];
    let mut out_rng = stream(seed, 4);
    for i in rand::seq::index::sample(&mut out_rng, kp_a.len(), n_out).into_vec() {
        inliers[i] = false;
        loop {
            let q = [out_rng.random_range(0.0..iw), out_rng.random_range(0.0..ih)];
            if inside_hull(&geo_a, q, 1.0) {
                kp_b[i] = q;
                break;
            }
        }
    }

    let dense = (0..gh * gw)
        .map(|c| {
            let p = geo_a.grid_to_pixel([(c % gw) as f64, (c / gw) as f64]);
            warp.forward(p).filter(|q| geo_a.contains_pixel(*q))
        })
        .collect();

    Ok(SyntheticScene {
        seed,
        supervision: cfg.supervision,
        warp,
        geometric: [geo_a, geo_b],
        semantic: [sem_a, sem_b],
        dino: [dino_a, dino_b],
        correspondences: CorrespondenceSet::new(kp_a, kp_b)?,
        inliers,
        dense,
    })
}
