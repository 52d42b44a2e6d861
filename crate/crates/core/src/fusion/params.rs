//! Learnable weights of the fusion transformer, stored as one flat vector.
//!
//! Flat enumeration order (also the gradient and file order):
//!
//! 1. input projection, semantic branch then geometric branch
//! 2. for each block `i`: self-attention semantic, self-attention geometric,
//!    cross-attention semantic, cross-attention geometric; each attention is
//!    `q, k, v, o` projections
//! 3. MLP head semantic (`fc1`, `fc2`), then MLP head geometric
//!
//! Every linear layer is `weight` (`in × out`, row-major) followed by
//! `bias` (`1 × out`), applied as `x · W + b`. Key projections have no bias:
//! a per-query constant added to every logit cancels in the softmax.

use std::path::Path;
use std::sync::Arc;

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FusionConfig;
use crate::error::{config, format, MatchaError, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"MFP1";
const VERSION: u32 = 1;
/// Nonlinearity code stored in the params header: tanh-approximated GELU.
pub const NONLINEARITY_GELU_TANH: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// The `h` stream fed by the semantic backbone features.
    Semantic,
    /// The `l` stream fed by the geometric backbone features.
    Geometric,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Semantic => "semantic",
            Branch::Geometric => "geometric",
        }
    }

    pub fn other(self) -> Branch {
        match self {
            Branch::Semantic => Branch::Geometric,
            Branch::Geometric => Branch::Semantic,
        }
    }
}

/// One named matrix inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub branch: Branch,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub is_bias: bool,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchIds {
    pub input: LinearIds,
    pub self_attn: Vec<AttentionIds>,
    pub cross_attn: Vec<AttentionIds>,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

/// Shapes and offsets of every parameter matrix for one [`FusionConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
    pub semantic: BranchIds,
    pub geometric: BranchIds,
    pub total: usize,
}

struct LayoutBuilder {
    blocks: Vec<ParamBlock>,
    total: usize,
}

impl LayoutBuilder {
    fn matrix(&mut self, name: String, branch: Branch, rows: usize, cols: usize, is_bias: bool) -> usize {
        self.blocks.push(ParamBlock { name, branch, rows, cols, offset: self.total, is_bias });
        self.total += rows * cols;
        self.blocks.len() - 1
    }

    fn linear(&mut self, prefix: &str, branch: Branch, fan_in: usize, fan_out: usize) -> LinearIds {
        LinearIds {
            weight: self.matrix(format!("{prefix}.weight"), branch, fan_in, fan_out, false),
            bias: Some(self.matrix(format!("{prefix}.bias"), branch, 1, fan_out, true)),
        }
    }

    fn linear_no_bias(&mut self, prefix: &str, branch: Branch, fan_in: usize, fan_out: usize) -> LinearIds {
        LinearIds { weight: self.matrix(format!("{prefix}.weight"), branch, fan_in, fan_out, false), bias: None }
    }

    fn attention(&mut self, prefix: &str, branch: Branch, dim: usize) -> AttentionIds {
        AttentionIds {
            q: self.linear(&format!("{prefix}.q"), branch, dim, dim),
            k: self.linear_no_bias(&format!("{prefix}.k"), branch, dim, dim),
            v: self.linear(&format!("{prefix}.v"), branch, dim, dim),
            o: self.linear(&format!("{prefix}.o"), branch, dim, dim),
        }
    }
}

impl ParamLayout {
    pub fn new(cfg: &FusionConfig) -> ParamLayout {
        let p2 = cfg.patch_size * cfg.patch_size;
        let d = cfg.hidden_dim;
        let mut b = LayoutBuilder { blocks: Vec::new(), total: 0 };
        let in_sem = b.linear("semantic.input_proj", Branch::Semantic, p2 * cfg.in_dim_semantic, d);
        let in_geo = b.linear("geometric.input_proj", Branch::Geometric, p2 * cfg.in_dim_geometric, d);
        let (mut self_sem, mut self_geo, mut cross_sem, mut cross_geo) = (vec![], vec![], vec![], vec![]);
        for i in 0..cfg.num_blocks {
            self_sem.push(b.attention(&format!("block{i}.self.semantic"), Branch::Semantic, d));
            self_geo.push(b.attention(&format!("block{i}.self.geometric"), Branch::Geometric, d));
            cross_sem.push(b.attention(&format!("block{i}.cross.semantic"), Branch::Semantic, d));
            cross_geo.push(b.attention(&format!("block{i}.cross.geometric"), Branch::Geometric, d));
        }
        let fc1_sem = b.linear("semantic.mlp.fc1", Branch::Semantic, 2 * d, d);
        let fc2_sem = b.linear("semantic.mlp.fc2", Branch::Semantic, d, p2 * cfg.out_dim_semantic);
        let fc1_geo = b.linear("geometric.mlp.fc1", Branch::Geometric, 2 * d, d);
        let fc2_geo = b.linear("geometric.mlp.fc2", Branch::Geometric, d, p2 * cfg.out_dim_geometric);
        ParamLayout {
            blocks: b.blocks,
            semantic: BranchIds {
                input: in_sem,
                self_attn: self_sem,
                cross_attn: cross_sem,
                fc1: fc1_sem,
                fc2: fc2_sem,
            },
            geometric: BranchIds {
                input: in_geo,
                self_attn: self_geo,
                cross_attn: cross_geo,
                fc1: fc1_geo,
                fc2: fc2_geo,
            },
            total: b.total,
        }
    }

    pub fn branch(&self, branch: Branch) -> &BranchIds {
        match branch {
            Branch::Semantic => &self.semantic,
            Branch::Geometric => &self.geometric,
        }
    }

    /// Mask over the flat vector: `true` where the parameter belongs to `branch`.
    pub fn branch_mask(&self, branch: Branch) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for b in self.blocks.iter().filter(|b| b.branch == branch) {
            mask[b.range()].fill(true);
        }
        mask
    }
}

/// All learnable weights for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    config: FusionConfig,
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl FusionParams {
    /// Weights uniform in `±1/√fan_in`, biases zero, drawn in enumeration order.
    pub fn init(cfg: &FusionConfig, seed: u64) -> Result<FusionParams> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.total];
        for b in layout.blocks.iter().filter(|b| !b.is_bias) {
            let bound = 1.0 / (b.rows as f64).sqrt();
            for v in &mut values[b.range()] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(FusionParams { config: *cfg, layout: Arc::new(layout), values })
    }

    pub fn from_values(cfg: &FusionConfig, values: Vec<f64>) -> Result<FusionParams> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        if values.len() != layout.total {
            return config(format!("expected {} parameters, got {}", layout.total, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MatchaError::Numerical("parameter vector contains non-finite values".into()));
        }
        Ok(FusionParams { config: *cfg, layout: Arc::new(layout), values })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn matrix(&self, id: usize) -> ArrayView2<'_, f64> {
        let b = &self.layout.blocks[id];
        ArrayView2::from_shape((b.rows, b.cols), &self.values[b.range()]).expect("layout shape")
    }

    pub fn matrix_mut(&mut self, id: usize) -> ArrayViewMut2<'_, f64> {
        let b = self.layout.blocks[id].clone();
        ArrayViewMut2::from_shape((b.rows, b.cols), &mut self.values[b.range()]).expect("layout shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + self.values.len() * 4);
        out.extend_from_slice(MAGIC);
        let flags = (c.positional_encoding as u32) | ((c.pre_norm as u32) << 1);
        for v in [
            VERSION,
            c.num_blocks as u32,
            c.hidden_dim as u32,
            c.num_heads as u32,
            c.patch_size as u32,
            c.out_dim_geometric as u32,
            c.out_dim_semantic as u32,
            c.in_dim_semantic as u32,
            c.in_dim_geometric as u32,
            c.dino_dim as u32,
            flags,
            NONLINEARITY_GELU_TANH,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    /// Parses a params file; when `expected` is given its shape fields must match the header.
    pub fn from_bytes(bytes: &[u8], expected: Option<&FusionConfig>) -> Result<FusionParams> {
        const HEADER: usize = 4 + 12 * 4 + 8;
        if bytes.len() < HEADER {
            return format(format!("params header truncated ({} bytes)", bytes.len()));
        }
        if &bytes[..4] != MAGIC {
            return format(format!("bad params magic {:?}", &bytes[..4]));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if field(0) != VERSION {
            return format(format!("unsupported params version {}", field(0)));
        }
        if field(11) != NONLINEARITY_GELU_TANH {
            return format(format!("unsupported nonlinearity code {}", field(11)));
        }
        let flags = field(10);
        let cfg = FusionConfig {
            num_blocks: field(1) as usize,
            hidden_dim: field(2) as usize,
            num_heads: field(3) as usize,
            patch_size: field(4) as usize,
            out_dim_geometric: field(5) as usize,
            out_dim_semantic: field(6) as usize,
            in_dim_semantic: field(7) as usize,
            in_dim_geometric: field(8) as usize,
            dino_dim: field(9) as usize,
            positional_encoding: flags & 1 != 0,
            pre_norm: flags & 2 != 0,
        };
        cfg.validate().map_err(|e| MatchaError::Format(format!("params header: {e}")))?;
        if let Some(exp) = expected {
            check_same_config(exp, &cfg)?;
        }
        let count = u64::from_le_bytes(bytes[52..60].try_into().unwrap()) as usize;
        let layout_total = ParamLayout::new(&cfg).total;
        if count != layout_total {
            return format(format!("params header declares {count} values, layout needs {layout_total}"));
        }
        if bytes.len() != HEADER + count * 4 {
            return format(format!("params payload is {} bytes, expected {}", bytes.len(), HEADER + count * 4));
        }
        let values: Vec<f64> = bytes[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        FusionParams::from_values(&cfg, values).map_err(|e| MatchaError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, expected: Option<&FusionConfig>) -> Result<FusionParams> {
        let bytes = std::fs::read(path)?;
        FusionParams::from_bytes(&bytes, expected).map_err(|e| match e {
            MatchaError::Format(m) => MatchaError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn check_same_config(expected: &FusionConfig, found: &FusionConfig) -> Result<()> {
    let pairs = [
        ("num_blocks", expected.num_blocks, found.num_blocks),
        ("hidden_dim", expected.hidden_dim, found.hidden_dim),
        ("num_heads", expected.num_heads, found.num_heads),
        ("patch_size", expected.patch_size, found.patch_size),
        ("out_dim_geometric", expected.out_dim_geometric, found.out_dim_geometric),
        ("out_dim_semantic", expected.out_dim_semantic, found.out_dim_semantic),
        ("in_dim_semantic", expected.in_dim_semantic, found.in_dim_semantic),
        ("in_dim_geometric", expected.in_dim_geometric, found.in_dim_geometric),
        ("dino_dim", expected.dino_dim, found.dino_dim),
        ("positional_encoding", expected.positional_encoding as usize, found.positional_encoding as usize),
        ("pre_norm", expected.pre_norm as usize, found.pre_norm as usize),
    ];
    for (name, e, f) in pairs {
        if e != f {
            return config(format!("params file has {name}={f} but the configuration expects {name}={e}"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> FusionConfig {
        FusionConfig {
            num_blocks: 2,
            hidden_dim: 8,
            num_heads: 2,
            patch_size: 2,
            out_dim_geometric: 4,
            out_dim_semantic: 8,
            in_dim_semantic: 6,
            in_dim_geometric: 5,
            dino_dim: 16,
            positional_encoding: false,
            pre_norm: false,
        }
    }

    #[test]
    fn layout_counts() {
        let cfg = toy();
        let l = ParamLayout::new(&cfg);
        let lin = |i: usize, o: usize| i * o + o;
        let attn = 3 * lin(8, 8) + 8 * 8;
        let expected = lin(4 * 6, 8) + lin(4 * 5, 8) + 2 * 4 * attn + lin(16, 8) + lin(8, 4 * 8) + lin(16, 8) + lin(8, 4 * 4);
        assert_eq!(l.total, expected);
        assert_eq!(l.blocks[0].name, "semantic.input_proj.weight");
        assert_eq!(l.blocks.last().unwrap().name, "geometric.mlp.fc2.bias");
        let sem = l.branch_mask(Branch::Semantic).iter().filter(|m| **m).count();
        let geo = l.branch_mask(Branch::Geometric).iter().filter(|m| **m).count();
        assert_eq!(sem + geo, l.total);
    }

    #[test]
    fn init_bounds_and_determinism() {
        let cfg = toy();
        let a = FusionParams::init(&cfg, 7).unwrap();
        assert_eq!(a, FusionParams::init(&cfg, 7).unwrap());
        assert_ne!(a, FusionParams::init(&cfg, 8).unwrap());
        for b in &a.layout().blocks {
            let vals = &a.values()[b.range()];
            if b.is_bias {
                assert!(vals.iter().all(|v| *v == 0.0));
            } else {
                let bound = 1.0 / (b.rows as f64).sqrt();
                assert!(vals.iter().all(|v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = FusionParams::init(&toy(), 3).unwrap();
        let bytes = p.to_bytes();
        let q = FusionParams::from_bytes(&bytes, Some(&toy())).unwrap();
        assert_eq!(q.to_bytes(), bytes);
        for (a, b) in p.values().iter().zip(q.values()) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn truncated_file_is_format_error() {
        let bytes = FusionParams::init(&toy(), 3).unwrap().to_bytes();
        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(FusionParams::from_bytes(&bytes[..cut], None), Err(MatchaError::Format(_))));
        }
    }

    #[test]
    fn mismatched_blocks_names_both_values() {
        let bytes = FusionParams::init(&toy(), 3).unwrap().to_bytes();
        let other = FusionConfig { num_blocks: 3, ..toy() };
        match FusionParams::from_bytes(&bytes, Some(&other)) {
            Err(MatchaError::Config(m)) => assert!(m.contains("num_blocks=2") && m.contains("num_blocks=3"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
