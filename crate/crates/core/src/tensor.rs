//! Dense feature maps and the grid operations shared by every other module.
//!
//! A [`FeatureMap`] is an `height × width × channels` grid stored row-major,
//! channel-last, as an `(height·width) × channels` matrix. Grid coordinate
//! `(x, y)` addresses cell centers; it maps to image pixels through
//!
//! ```text
//! pixel = grid · stride + stride / 2 − 0.5
//! ```
//!
//! so the center of cell 0 of an H/8 map sits at pixel 3.5. Every module
//! converts between the two frames with [`FeatureMap::grid_to_pixel`] and
//! [`FeatureMap::pixel_to_grid`].

use std::fmt;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, MatchaError, Result};

/// What a feature map represents; carried in file names, not file headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    GeometricRaw,
    SemanticRaw,
    Dino,
    GeometricFused,
    SemanticFused,
    Concat,
    Unified,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::GeometricRaw,
        Role::SemanticRaw,
        Role::Dino,
        Role::GeometricFused,
        Role::SemanticFused,
        Role::Concat,
        Role::Unified,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::GeometricRaw => "geometric_raw",
            Role::SemanticRaw => "semantic_raw",
            Role::Dino => "dino",
            Role::GeometricFused => "geometric_fused",
            Role::SemanticFused => "semantic_fused",
            Role::Concat => "concat",
            Role::Unified => "unified",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Image pixels per grid cell, kept as a reduced fraction so that grids such
/// as H/14 of a 128 px image (128/9 px per cell) survive a file round trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stride {
    num: u32,
    den: u32,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Stride {
    pub fn new(num: u32, den: u32) -> Result<Stride> {
        if num == 0 || den == 0 {
            return config(format!("stride {num}/{den} must be positive"));
        }
        let g = gcd(num as u64, den as u64) as u32;
        Ok(Stride { num: num / g, den: den / g })
    }

    pub fn integer(n: u32) -> Stride {
        Stride::new(n, 1).expect("integer stride must be positive")
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Stride after changing the cell count along an axis from `old` to `new`
    /// while covering the same image extent.
    pub fn rescaled(&self, old: usize, new: usize) -> Result<Stride> {
        let num = self.num as u64 * old as u64;
        let den = self.den as u64 * new as u64;
        let g = gcd(num, den);
        let (num, den) = (num / g, den / g);
        if num > u32::MAX as u64 || den > u32::MAX as u64 {
            return config(format!("stride {num}/{den} overflows u32"));
        }
        Stride::new(num as u32, den as u32)
    }
}

/// Dense `height × width × channels` grid of descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    stride: Stride,
    role: Role,
    data: Array2<f64>,
}

impl FeatureMap {
    /// Builds a map from a `(height·width) × channels` matrix.
    pub fn new(height: usize, width: usize, stride: Stride, role: Role, data: Array2<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return domain(format!("feature map must be at least 1x1, got {height}x{width}"));
        }
        if data.nrows() != height * width {
            return domain(format!(
                "feature map data has {} rows, expected {}x{}={}",
                data.nrows(),
                height,
                width,
                height * width
            ));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return domain(format!("feature map value #{bad} is not finite"));
        }
        let data = if data.is_standard_layout() { data } else { data.as_standard_layout().into_owned() };
        Ok(FeatureMap { height, width, stride, role, data })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        stride: Stride,
        role: Role,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let data = Array2::from_shape_fn((height * width, channels), |(cell, c)| f(cell / width, cell % width, c));
        FeatureMap::new(height, width, stride, role, data)
    }

    pub fn constant(height: usize, width: usize, values: &[f64], stride: Stride, role: Role) -> Result<Self> {
        FeatureMap::from_fn(height, width, values.len(), stride, role, |_, _, c| values[c])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn stride(&self) -> Stride {
        self.stride
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// `(height·width) × channels` view, rows in row-major cell order.
    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> ArrayView1<'_, f64> {
        self.data.row(row * self.width + col)
    }

    /// Image extent `(width_px, height_px)` covered by the grid.
    pub fn image_size(&self) -> (f64, f64) {
        let s = self.stride.value();
        (self.width as f64 * s, self.height as f64 * s)
    }

    pub fn grid_to_pixel(&self, grid: [f64; 2]) -> [f64; 2] {
        let s = self.stride.value();
        [grid[0] * s + s / 2.0 - 0.5, grid[1] * s + s / 2.0 - 0.5]
    }

    pub fn pixel_to_grid(&self, pixel: [f64; 2]) -> [f64; 2] {
        let s = self.stride.value();
        [(pixel[0] + 0.5) / s - 0.5, (pixel[1] + 0.5) / s - 0.5]
    }

    /// Image-pixel position of every cell center, row-major, as a `cells × 2` matrix.
    pub fn cell_pixel_positions(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.num_cells(), 2));
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.grid_to_pixel([x as f64, y as f64]);
                out[[y * self.width + x, 0]] = p[0];
                out[[y * self.width + x, 1]] = p[1];
            }
        }
        out
    }

    /// Clamps a pixel into the region spanned by cell centers and returns its grid coordinate.
    pub fn pixel_to_grid_clamped(&self, pixel: [f64; 2]) -> [f64; 2] {
        let g = self.pixel_to_grid(pixel);
        [g[0].clamp(0.0, (self.width - 1) as f64), g[1].clamp(0.0, (self.height - 1) as f64)]
    }

    /// Whether a pixel lies inside the image extent `[0, W·s) × [0, H·s)`,
    /// widened by half a pixel so that the last pixel center is inside.
    pub fn contains_pixel(&self, pixel: [f64; 2]) -> bool {
        let (w, h) = self.image_size();
        pixel[0].is_finite()
            && pixel[1].is_finite()
            && pixel[0] >= -0.5
            && pixel[1] >= -0.5
            && pixel[0] <= w - 0.5
            && pixel[1] <= h - 0.5
    }

    /// Bilinear samples at grid coordinates; rows of the result follow `points`.
    pub fn bilinear_sample(&self, points: &[[f64; 2]]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((points.len(), self.channels()));
        for (i, &p) in points.iter().enumerate() {
            let taps = bilinear_taps(p, self.height, self.width)?;
            let mut row = out.row_mut(i);
            for (cell, w) in taps {
                if w != 0.0 {
                    row.scaled_add(w, &self.data.row(cell));
                }
            }
        }
        Ok(out)
    }

    /// Bilinear samples at image-pixel positions. Pixels inside the image but
    /// outside the hull of cell centers read the nearest border value.
    pub fn sample_at_pixels(&self, pixels: &[[f64; 2]]) -> Result<Array2<f64>> {
        let taps = pixel_sampling_taps(self.height, self.width, self.stride, pixels)?;
        let mut out = Array2::zeros((pixels.len(), self.channels()));
        for (mut row, cell_taps) in out.rows_mut().into_iter().zip(taps) {
            for (cell, w) in cell_taps {
                if w != 0.0 {
                    row.scaled_add(w, &self.data.row(cell));
                }
            }
        }
        Ok(out)
    }

    /// Corner-aligned bilinear resampling: new grid index `i` reads old
    /// coordinate `i·(old−1)/(new−1)`. A length-1 axis reads the old center.
    pub fn resample(&self, new_height: usize, new_width: usize) -> Result<FeatureMap> {
        if new_height == 0 || new_width == 0 {
            return domain(format!("resample target must be at least 1x1, got {new_height}x{new_width}"));
        }
        if new_height == self.height && new_width == self.width {
            return Ok(self.clone());
        }
        let map_axis = |i: usize, old: usize, new: usize| -> f64 {
            if new == 1 {
                (old - 1) as f64 / 2.0
            } else {
                (i * (old - 1)) as f64 / (new - 1) as f64
            }
        };
        let mut points = Vec::with_capacity(new_height * new_width);
        for y in 0..new_height {
            for x in 0..new_width {
                points.push([map_axis(x, self.width, new_width), map_axis(y, self.height, new_height)]);
            }
        }
        let data = self.bilinear_sample(&points)?;
        let stride = self.stride.rescaled(self.width, new_width)?;
        FeatureMap::new(new_height, new_width, stride, self.role, data)
    }

    /// Keeps channels `0, stride, 2·stride, …`.
    pub fn channel_stride_slice(&self, stride: usize) -> Result<FeatureMap> {
        if stride == 0 {
            return config("channel stride must be at least 1");
        }
        if !self.channels().is_multiple_of(stride) {
            return config(format!(
                "{} channels are not divisible by channel stride {stride}",
                self.channels()
            ));
        }
        let data = self.data.slice(s![.., ..;stride]).to_owned();
        FeatureMap::new(self.height, self.width, self.stride, self.role, data)
    }

    /// Channel-wise concatenation, `self` first.
    pub fn concat_channels(&self, other: &FeatureMap, role: Role) -> Result<FeatureMap> {
        if self.height != other.height || self.width != other.width || self.stride != other.stride {
            return domain(format!(
                "cannot concatenate {}x{} (stride {}) with {}x{} (stride {})",
                self.height,
                self.width,
                self.stride.value(),
                other.height,
                other.width,
                other.stride.value()
            ));
        }
        let data = ndarray::concatenate(Axis(1), &[self.data.view(), other.data.view()])
            .map_err(|e| MatchaError::Domain(e.to_string()))?;
        FeatureMap::new(self.height, self.width, self.stride, role, data)
    }

    /// Divides every cell by `max(‖cell‖₂, epsilon)`.
    pub fn l2_normalize_channels(&self, epsilon: f64) -> Result<FeatureMap> {
        if !(epsilon > 0.0) {
            return config(format!("normalization epsilon must be positive, got {epsilon}"));
        }
        let mut data = self.data.clone();
        l2_normalize_rows(&mut data, epsilon);
        Ok(FeatureMap { data, ..self.clone() })
    }

    /// Cyclic shift by `(dx, dy)` cells: output cell `(x, y)` reads input `(x−dx, y−dy)`.
    pub fn roll(&self, dx: usize, dy: usize) -> FeatureMap {
        let mut data = Array2::zeros(self.data.raw_dim());
        for y in 0..self.height {
            for x in 0..self.width {
                let sy = (y + self.height - dy % self.height) % self.height;
                let sx = (x + self.width - dx % self.width) % self.width;
                data.row_mut(y * self.width + x).assign(&self.data.row(sy * self.width + sx));
            }
        }
        FeatureMap { data, ..self.clone() }
    }
}

/// Normalizes each row in place by `max(‖row‖₂, epsilon)`.
pub fn l2_normalize_rows(m: &mut Array2<f64>, epsilon: f64) {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt().max(epsilon);
        row.mapv_inplace(|v| v / norm);
    }
}

/// Bilinear taps for image-pixel positions on a `height × width` grid with
/// the given stride, using the same clamping as [`FeatureMap::sample_at_pixels`].
pub fn pixel_sampling_taps(height: usize, width: usize, stride: Stride, pixels: &[[f64; 2]]) -> Result<Vec<[(usize, f64); 4]>> {
    let probe = FeatureMap { height, width, stride, role: Role::Unified, data: Array2::zeros((0, 0)) };
    let outside: Vec<usize> = pixels
        .iter()
        .enumerate()
        .filter(|(_, p)| !probe.contains_pixel(**p))
        .map(|(i, _)| i)
        .collect();
    if !outside.is_empty() {
        return domain(format!("keypoints outside the image at indices {outside:?}"));
    }
    pixels
        .iter()
        .map(|p| bilinear_taps(probe.pixel_to_grid_clamped(*p), height, width))
        .collect()
}

/// The four `(cell index, weight)` taps of a bilinear read at grid point `p`.
///
/// The lower corner is `floor(p)` clamped to the second-to-last cell, so a
/// point on the last row or column puts weight 1 on it and exact grid
/// points reproduce stored values bit for bit.
pub fn bilinear_taps(p: [f64; 2], height: usize, width: usize) -> Result<[(usize, f64); 4]> {
    let [x, y] = p;
    let max_x = (width - 1) as f64;
    let max_y = (height - 1) as f64;
    if !(x >= 0.0 && x <= max_x && y >= 0.0 && y <= max_y) {
        return domain(format!("point ({x}, {y}) is outside grid [0, {max_x}] x [0, {max_y}]"));
    }
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    Ok([
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ])
}
