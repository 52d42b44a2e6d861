use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use super::params::{AttentionIds, FusionParams, LinearIds};
use super::FusionConfig;
use crate::autodiff::{gelu, layer_norm_rows, softmax_rows};
use crate::error::{domain, Result};
use crate::tensor::{FeatureMap, Role, Stride};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// `N × D` patch tokens laid out row-major over a `grid_rows × grid_cols` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub values: Array2<f64>,
}

impl TokenMatrix {
    pub fn new(grid_rows: usize, grid_cols: usize, values: Array2<f64>) -> Result<TokenMatrix> {
        if grid_rows * grid_cols != values.nrows() {
            return domain(format!(
                "token grid {grid_rows}x{grid_cols} does not match {} tokens",
                values.nrows()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("token matrix contains non-finite values");
        }
        Ok(TokenMatrix { grid_rows, grid_cols, values })
    }

    pub fn num_tokens(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// For every element of the patchified `N × p²C` token matrix, the flat
/// index of the map element it copies. Tokens run row-major over the coarse
/// grid; inside a token, cells run row-major over the `p × p` block, channel-last.
pub fn patchify_index(height: usize, width: usize, channels: usize, p: usize) -> Vec<usize> {
    let (gr, gc) = (height / p, width / p);
    let dim = p * p * channels;
    let mut idx = vec![0; gr * gc * dim];
    for tr in 0..gr {
        for tc in 0..gc {
            let token = tr * gc + tc;
            for dy in 0..p {
                for dx in 0..p {
                    let cell = (tr * p + dy) * width + tc * p + dx;
                    for c in 0..channels {
                        idx[token * dim + (dy * p + dx) * channels + c] = cell * channels + c;
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`patchify_index`]: for every map element, its token element.
pub fn unpatchify_index(grid_rows: usize, grid_cols: usize, channels: usize, p: usize) -> Vec<usize> {
    let forward = patchify_index(grid_rows * p, grid_cols * p, channels, p);
    let mut inv = vec![0; forward.len()];
    for (token_elem, map_elem) in forward.into_iter().enumerate() {
        inv[map_elem] = token_elem;
    }
    inv
}

pub fn patchify(map: &FeatureMap, p: usize) -> Result<TokenMatrix> {
    if p == 0 || !map.height().is_multiple_of(p) || !map.width().is_multiple_of(p) {
        return domain(format!(
            "{}x{} map cannot be split into {p}x{p} patches",
            map.height(),
            map.width()
        ));
    }
    let c = map.channels();
    let idx = patchify_index(map.height(), map.width(), c, p);
    let src = map.matrix();
    let flat = src.as_slice().expect("feature maps are standard layout");
    let (gr, gc) = (map.height() / p, map.width() / p);
    let values = Array2::from_shape_fn((gr * gc, p * p * c), |(t, e)| flat[idx[t * p * p * c + e]]);
    TokenMatrix::new(gr, gc, values)
}

pub fn unpatchify(tokens: &TokenMatrix, p: usize, out_channels: usize, stride: Stride, role: Role) -> Result<FeatureMap> {
    if p == 0 || tokens.dim() != p * p * out_channels {
        return domain(format!(
            "token dim {} is not p²·channels = {}·{}",
            tokens.dim(),
            p * p,
            out_channels
        ));
    }
    let (h, w) = (tokens.grid_rows * p, tokens.grid_cols * p);
    let idx = unpatchify_index(tokens.grid_rows, tokens.grid_cols, out_channels, p);
    let src = tokens.values.as_standard_layout();
    let flat = src.as_slice().expect("standard layout");
    let data = Array2::from_shape_fn((h * w, out_channels), |(cell, c)| flat[idx[cell * out_channels + c]]);
    FeatureMap::new(h, w, stride, role, data)
}

fn linear(x: &ArrayView2<f64>, params: &FusionParams, ids: LinearIds) -> Array2<f64> {
    let y = x.dot(&params.matrix(ids.weight));
    match ids.bias {
        Some(b) => y + params.matrix(b),
        None => y,
    }
}

/// Per-head attention weights from one attention call.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub weights: Vec<Array2<f64>>,
}

/// Scaled dot-product attention of `queries` over `keys_values`, followed
/// by the output projection. Returns only the update; residuals are added by
/// [`fusion_block`].
pub fn multi_head_attention(
    queries: &TokenMatrix,
    keys_values: &TokenMatrix,
    params: &FusionParams,
    ids: &AttentionIds,
) -> Result<TokenMatrix> {
    Ok(multi_head_attention_traced(queries, keys_values, params, ids)?.0)
}

pub fn multi_head_attention_traced(
    queries: &TokenMatrix,
    keys_values: &TokenMatrix,
    params: &FusionParams,
    ids: &AttentionIds,
) -> Result<(TokenMatrix, AttentionTrace)> {
    let cfg = params.config();
    let d = cfg.hidden_dim;
    if queries.dim() != d || keys_values.dim() != d {
        return domain(format!(
            "attention expects dim {d}, got queries {} and keys {}",
            queries.dim(),
            keys_values.dim()
        ));
    }
    let (q_in, kv_in) = if cfg.pre_norm {
        (layer_norm_rows(&queries.values, LAYER_NORM_EPS), layer_norm_rows(&keys_values.values, LAYER_NORM_EPS))
    } else {
        (queries.values.clone(), keys_values.values.clone())
    };
    let q = linear(&q_in.view(), params, ids.q);
    let k = linear(&kv_in.view(), params, ids.k);
    let v = linear(&kv_in.view(), params, ids.v);
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut weights = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let w = softmax_rows(&scores);
        heads.push(w.dot(&v.slice(cols)));
        weights.push(w);
    }
    let views: Vec<_> = heads.iter().map(|h| h.view()).collect();
    let joined = concatenate(Axis(1), &views).expect("head outputs share row count");
    let out = linear(&joined.view(), params, ids.o);
    Ok((TokenMatrix::new(queries.grid_rows, queries.grid_cols, out)?, AttentionTrace { weights }))
}

fn add_tokens(a: &TokenMatrix, delta: &TokenMatrix) -> TokenMatrix {
    TokenMatrix { grid_rows: a.grid_rows, grid_cols: a.grid_cols, values: &a.values + &delta.values }
}

/// One fusion block, the four residual updates in order:
///
/// ```text
/// h_s = h + self_h(h)
/// l_s = l + self_l(l)
/// h'  = h + cross_h(h_s, l_s)
/// l'  = l + cross_l(l_s, h_s)
/// ```
///
/// The cross-attention residual is added to the block input, not to the
/// self-attended stream.
pub fn fusion_block(
    f_h: &TokenMatrix,
    f_l: &TokenMatrix,
    params: &FusionParams,
    block: usize,
) -> Result<(TokenMatrix, TokenMatrix)> {
    if f_h.num_tokens() != f_l.num_tokens() || f_h.dim() != f_l.dim() {
        return domain(format!(
            "fusion block inputs differ: {}x{} vs {}x{}",
            f_h.num_tokens(),
            f_h.dim(),
            f_l.num_tokens(),
            f_l.dim()
        ));
    }
    let layout = params.layout();
    if block >= layout.semantic.self_attn.len() {
        return domain(format!("block {block} does not exist"));
    }
    let sem = &layout.semantic;
    let geo = &layout.geometric;
    let h_s = add_tokens(f_h, &multi_head_attention(f_h, f_h, params, &sem.self_attn[block])?);
    let l_s = add_tokens(f_l, &multi_head_attention(f_l, f_l, params, &geo.self_attn[block])?);
    let h_next = add_tokens(f_h, &multi_head_attention(&h_s, &l_s, params, &sem.cross_attn[block])?);
    let l_next = add_tokens(f_l, &multi_head_attention(&l_s, &h_s, params, &geo.cross_attn[block])?);
    Ok((h_next, l_next))
}

/// Fixed 2-D sinusoidal encoding of the token grid: the first half of the
/// channels encode the column, the second half the row.
pub fn positional_encoding(grid_rows: usize, grid_cols: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((grid_rows * grid_cols, dim), |(t, ch)| {
        let (pos, k) = if ch < half { ((t % grid_cols) as f64, ch) } else { ((t / grid_cols) as f64, ch - half) };
        let width = if ch < half { half } else { dim - half };
        let freq = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / width.max(1) as f64);
        if k % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Intermediate token streams of a forward pass.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    pub initial_semantic: TokenMatrix,
    pub initial_geometric: TokenMatrix,
    pub final_semantic: TokenMatrix,
    pub final_geometric: TokenMatrix,
}

/// Output of [`fusion_forward`].
#[derive(Debug, Clone)]
pub struct FusedFeatures {
    /// `F_s`: semantic descriptor, `out_dim_semantic` channels.
    pub semantic: FeatureMap,
    /// `F_g`: geometric descriptor, `out_dim_geometric` channels.
    pub geometric: FeatureMap,
    pub trace: FusionTrace,
}

/// Checks both raw maps against the configuration and aligns the semantic
/// map to the geometric grid.
pub fn align_inputs(semantic_raw: &FeatureMap, geometric_raw: &FeatureMap, cfg: &FusionConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    if semantic_raw.channels() != cfg.in_dim_semantic {
        return domain(format!(
            "semantic input has {} channels, config expects {}",
            semantic_raw.channels(),
            cfg.in_dim_semantic
        ));
    }
    if geometric_raw.channels() != cfg.in_dim_geometric {
        return domain(format!(
            "geometric input has {} channels, config expects {}",
            geometric_raw.channels(),
            cfg.in_dim_geometric
        ));
    }
    let p = cfg.patch_size;
    if !geometric_raw.height().is_multiple_of(p) || !geometric_raw.width().is_multiple_of(p) {
        return domain(format!(
            "geometric grid {}x{} is not divisible by patch size {p}",
            geometric_raw.height(),
            geometric_raw.width()
        ));
    }
    let aligned = semantic_raw.resample(geometric_raw.height(), geometric_raw.width())?;
    Ok(aligned)
}

fn mlp_head(x: &Array2<f64>, params: &FusionParams, fc1: LinearIds, fc2: LinearIds) -> Array2<f64> {
    let hidden = linear(&x.view(), params, fc1).mapv(gelu);
    linear(&hidden.view(), params, fc2)
}

/// Dynamic fusion: resample-align, patchify, project, `k` fusion blocks,
/// `[F⁰ ‖ Fᵏ]` into each MLP head, unpatchify to the geometric grid.
pub fn fusion_forward(semantic_raw: &FeatureMap, geometric_raw: &FeatureMap, params: &FusionParams) -> Result<FusedFeatures> {
    let cfg = *params.config();
    let semantic_aligned = align_inputs(semantic_raw, geometric_raw, &cfg)?;
    let p = cfg.patch_size;
    let layout = params.layout();
    let tok_h = patchify(&semantic_aligned, p)?;
    let tok_l = patchify(geometric_raw, p)?;
    let (gr, gc) = (tok_l.grid_rows, tok_l.grid_cols);

    let mut h0 = linear(&tok_h.values.view(), params, layout.semantic.input);
    let mut l0 = linear(&tok_l.values.view(), params, layout.geometric.input);
    if cfg.positional_encoding {
        let pe = positional_encoding(gr, gc, cfg.hidden_dim);
        h0 += &pe;
        l0 += &pe;
    }
    let h0 = TokenMatrix::new(gr, gc, h0)?;
    let l0 = TokenMatrix::new(gr, gc, l0)?;
    let (mut h, mut l) = (h0.clone(), l0.clone());
    for block in 0..cfg.num_blocks {
        (h, l) = fusion_block(&h, &l, params, block)?;
    }
    let head_in = |first: &TokenMatrix, last: &TokenMatrix| {
        concatenate(Axis(1), &[first.values.view(), last.values.view()]).expect("same token count")
    };
    let s_tokens = mlp_head(&head_in(&h0, &h), params, layout.semantic.fc1, layout.semantic.fc2);
    let g_tokens = mlp_head(&head_in(&l0, &l), params, layout.geometric.fc1, layout.geometric.fc2);
    let stride = geometric_raw.stride();
    let semantic = unpatchify(&TokenMatrix::new(gr, gc, s_tokens)?, p, cfg.out_dim_semantic, stride, Role::SemanticFused)?;
    let geometric = unpatchify(&TokenMatrix::new(gr, gc, g_tokens)?, p, cfg.out_dim_geometric, stride, Role::GeometricFused)?;
    Ok(FusedFeatures {
        semantic,
        geometric,
        trace: FusionTrace { initial_semantic: h0, initial_geometric: l0, final_semantic: h, final_geometric: l },
    })
}

/// `F_t = F_g ‖ F_s[::d_s]`, the merged descriptor without the DINO-role map.
pub fn merge_light(geometric: &FeatureMap, semantic: &FeatureMap, cfg: &FusionConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    if geometric.channels() != cfg.out_dim_geometric || semantic.channels() != cfg.out_dim_semantic {
        return domain(format!(
            "merge expects {}+{} channels, got {}+{}",
            cfg.out_dim_geometric,
            cfg.out_dim_semantic,
            geometric.channels(),
            semantic.channels()
        ));
    }
    geometric.concat_channels(&semantic.channel_stride_slice(cfg.semantic_stride())?, Role::Concat)
}

/// `F_m = F_t ‖ F_d[::d_t]`, with `F_d` first resampled onto the fused grid.
pub fn merge_unified(geometric: &FeatureMap, semantic: &FeatureMap, dino: &FeatureMap, cfg: &FusionConfig) -> Result<FeatureMap> {
    let merged = merge_light(geometric, semantic, cfg)?;
    if dino.channels() != cfg.dino_dim {
        return domain(format!("dino map has {} channels, config expects {}", dino.channels(), cfg.dino_dim));
    }
    let dino = dino.resample(merged.height(), merged.width())?;
    let dino = FeatureMap::new(merged.height(), merged.width(), merged.stride(), dino.role(), dino.into_matrix())?;
    merged.concat_channels(&dino.channel_stride_slice(cfg.dino_stride())?, Role::Unified)
}
