//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every intermediate matrix of a forward pass together
//! with the operation that produced it. [`Tape::backward`] then walks the
//! records in reverse, accumulating adjoints. Only the operations needed by
//! the fusion transformer and the supervision losses are provided; each one
//! documents its adjoint rule next to its forward rule.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

/// Handle to a matrix recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse row mixing: output row `r` is `Σ w · input[j]` over `rows[r]`.
#[derive(Debug, Clone, Default)]
pub struct RowMix {
    pub rows: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// a (n×m) + b (1×m)
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MixRows(Var, Arc<RowMix>),
    /// out_flat[e] = in_flat[idx[e]]
    Gather(Var, Arc<Vec<usize>>),
    RowNorm(Var),
    NormalizeRows(Var, f64),
    LayerNormRows(Var, f64),
    Sum(Var),
    DiagSum(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recorded computation graph; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Row-wise layer normalization without affine parameters.
pub fn layer_norm_rows(a: &Array2<f64>, eps: f64) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        assert_eq!(self.value(bias).nrows(), 1, "bias must be a single row");
        let v = self.value(a) + self.value(bias);
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn mix_rows(&mut self, a: Var, mix: Arc<RowMix>) -> Var {
        let src = self.value(a);
        let mut v = Array2::zeros((mix.rows.len(), src.ncols()));
        for (r, taps) in mix.rows.iter().enumerate() {
            let mut row = v.row_mut(r);
            for &(j, w) in taps {
                row.scaled_add(w, &src.row(j));
            }
        }
        self.push(v, Op::MixRows(a, mix))
    }

    /// Element gather into a `rows × cols` result; `index` addresses the
    /// row-major flattening of `a`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let src = self.value(a);
        let flat = src.as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        let v = Array2::from_shape_fn((rows, cols), |(r, c)| flat[index[r * cols + c]]);
        self.push(v, Op::Gather(a, index))
    }

    pub fn row_norm(&mut self, a: Var) -> Var {
        let v = self.value(a).map_axis(Axis(1), |r| r.dot(&r).sqrt()).insert_axis(Axis(1));
        self.push(v, Op::RowNorm(a))
    }

    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        crate::tensor::l2_normalize_rows(&mut v, eps);
        self.push(v, Op::NormalizeRows(a, eps))
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let v = layer_norm_rows(self.value(a), eps);
        self.push(v, Op::LayerNormRows(a, eps))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn diag_sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).diag().sum());
        self.push(v, Op::DiagSum(a))
    }

    /// Adjoints of every recorded node with respect to the scalar `output`.
    /// Nodes that do not influence the output get `None`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array2::ones((1, 1)));

        fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    accumulate(&mut grads, *a, g.dot(self.value(*b)));
                    accumulate(&mut grads, *b, g.t().dot(self.value(*a)));
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::SoftmaxRows(a) => {
                    // dx = s ⊙ (g − ⟨g, s⟩_row)
                    let s = &node.value;
                    let mut dx = &g * s;
                    for (mut row, srow) in dx.rows_mut().into_iter().zip(s.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&srow, |d, &sv| *d -= dot * sv);
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LogSoftmaxRows(a) => {
                    // dx = g − softmax · Σ_row g
                    let mut dx = g.clone();
                    for (mut row, lrow) in dx.rows_mut().into_iter().zip(node.value.rows()) {
                        let total = row.sum();
                        row.zip_mut_with(&lrow, |d, &l| *d -= total * l.exp());
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::Gelu(a) => {
                    let mut dx = self.value(*a).mapv(gelu_grad);
                    dx *= &g;
                    accumulate(&mut grads, *a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut dx = Array2::zeros(src.raw_dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, dx);
                }
                Op::MixRows(a, mix) => {
                    let src = self.value(*a);
                    let mut dx = Array2::zeros(src.raw_dim());
                    for (r, taps) in mix.rows.iter().enumerate() {
                        for &(j, w) in taps {
                            dx.row_mut(j).scaled_add(w, &g.row(r));
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::Gather(a, index) => {
                    let src = self.value(*a);
                    let cols = src.ncols();
                    let mut dx = Array2::zeros(src.raw_dim());
                    for (e, gv) in g.iter().enumerate() {
                        let k = index[e];
                        dx[[k / cols, k % cols]] += gv;
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::RowNorm(a) => {
                    let src = self.value(*a);
                    let mut dx = src.clone();
                    for ((mut row, n), gv) in dx.rows_mut().into_iter().zip(node.value.column(0)).zip(g.column(0)) {
                        if *n > 0.0 {
                            row.mapv_inplace(|v| v * gv / n);
                        } else {
                            row.fill(0.0);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::NormalizeRows(a, eps) => {
                    let src = self.value(*a);
                    let mut dx = g.clone();
                    for ((mut drow, yrow), xrow) in dx.rows_mut().into_iter().zip(node.value.rows()).zip(src.rows()) {
                        let n = xrow.dot(&xrow).sqrt();
                        if n > *eps {
                            let gy = drow.dot(&yrow);
                            drow.zip_mut_with(&yrow, |d, &y| *d = (*d - gy * y) / n);
                        } else {
                            drow.mapv_inplace(|d| d / eps);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNormRows(a, eps) => {
                    let src = self.value(*a);
                    let mut dx = g.clone();
                    for ((mut drow, yrow), xrow) in dx.rows_mut().into_iter().zip(node.value.rows()).zip(src.rows()) {
                        let n = xrow.len() as f64;
                        let mean = xrow.sum() / n;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = drow.sum() / n;
                        let gy = drow.dot(&yrow) / n;
                        drow.zip_mut_with(&yrow, |d, &y| *d = inv * (*d - gmean - y * gy));
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::Sum(a) => {
                    let gv = g[[0, 0]];
                    accumulate(&mut grads, *a, Array2::from_elem(self.value(*a).raw_dim(), gv));
                }
                Op::DiagSum(a) => {
                    let gv = g[[0, 0]];
                    let mut dx = Array2::zeros(self.value(*a).raw_dim());
                    dx.diag_mut().fill(gv);
                    accumulate(&mut grads, *a, dx);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: &dyn Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(x.raw_dim());
        for idx in ndarray::indices(x.dim()) {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            out[idx] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn check(x: Array2<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = build(&mut tape, v);
        let g = tape.backward(out);
        let analytic = g.get(v).cloned().unwrap_or_else(|| Array2::zeros(x.raw_dim()));
        let numeric = numeric_grad(&x, &|p| {
            let mut t = Tape::new();
            let v = t.leaf(p.clone());
            let o = build(&mut t, v);
            t.scalar(o)
        });
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    fn x() -> Array2<f64> {
        array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.7]]
    }

    #[test]
    fn matmul_family() {
        let w = array![[0.5, -0.2], [0.1, 0.9], [-1.0, 0.3]];
        check(x(), |t, v| {
            let w = t.leaf(w.clone());
            let y = t.matmul(v, w);
            let z = t.matmul_t(y, y);
            let z = t.transpose(z);
            t.sum(z)
        });
    }

    #[test]
    fn softmax_and_log_softmax() {
        let weights = array![[1.0, -2.0, 0.5], [0.3, 0.7, -1.1]];
        check(x(), |t, v| {
            let s = t.softmax_rows(v);
            let c = t.leaf(weights.clone());
            let l = t.log_softmax_rows(v);
            let a = t.sub(s, l);
            let b = t.matmul_t(a, c);
            t.diag_sum(b)
        });
    }

    #[test]
    fn gelu_layernorm_normalize_norm() {
        check(x(), |t, v| {
            let a = t.gelu(v);
            let b = t.layer_norm_rows(a, 1e-5);
            let c = t.normalize_rows(b, 1e-8);
            let d = t.add(c, v);
            let e = t.row_norm(d);
            t.sum(e)
        });
    }

    #[test]
    fn structural_ops() {
        let bias = array![[0.1, 0.2]];
        let mix = Arc::new(RowMix { rows: vec![vec![(0, 0.25), (1, 0.75)], vec![(1, 1.0)], vec![]] });
        check(x(), |t, v| {
            let a = t.slice_cols(v, 1, 2);
            let b = t.leaf(bias.clone());
            let c = t.add_row(a, b);
            let d = t.concat_cols(&[c, v, a]);
            let e = t.mix_rows(d, mix.clone());
            let f = t.gather(e, Arc::new(vec![0, 5, 7, 1, 14, 3]), 2, 3);
            let g = t.scale(f, -1.5);
            let h = t.gelu(g);
            t.sum(h)
        });
    }

    #[test]
    fn unused_nodes_have_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(x());
        let b = t.leaf(x());
        let s = t.sum(a);
        let g = t.backward(s);
        assert!(g.get(b).is_none());
        assert!(g.get(a).unwrap().iter().all(|v| *v == 1.0));
    }
}
