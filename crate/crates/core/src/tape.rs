//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation records its output value and its inputs on a [`Tape`].
//! [`Tape::backward`] walks the record in reverse and accumulates adjoints.
//! Rows are items (nodes, edges) and columns are channels throughout.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use ndarray::{Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    LeakyRelu(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Recip(Var),
    LayerNorm {
        input: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    SegmentMean {
        input: Var,
        segment: Rc<[usize]>,
        counts: Rc<[usize]>,
    },
    SoftmaxRows(Var),
    RowNorm(Var),
    RowSumSq(Var),
    Mean(Var),
    Scalar {
        input: Var,
        local_grad: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when nothing downstream depended on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn layer_norm_rows(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| v * is);
        inv_std.push(is);
    }
    (xhat, inv_std)
}

pub(crate) fn segment_counts(segment: &[usize], segments: usize) -> Vec<usize> {
    let mut counts = vec![0usize; segments];
    for &s in segment {
        counts[s] += 1;
    }
    counts
}

pub(crate) fn segment_mean_rows(x: &Array2<f64>, segment: &[usize], counts: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((counts.len(), x.ncols()));
    for (r, &s) in segment.iter().enumerate() {
        let mut dst = out.row_mut(s);
        dst += &x.row(r);
    }
    for (s, mut row) in out.rows_mut().into_iter().enumerate() {
        if counts[s] > 0 {
            row /= counts[s] as f64;
        }
    }
    out
}

pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.to_owned();
    for mut row in y.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    y
}

pub(crate) fn row_sum_sq(x: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows(), 1), |(r, _)| x.row(r).iter().map(|v| v * v).sum::<f64>())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Array2<f64>) -> Array2<f64>, op: Op) -> Var {
        let value = f(&self.value(a));
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
        op: Op,
    ) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    /// Differentiable input (a parameter).
    pub fn param(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no adjoint.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.dot(y), Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, |x| x.t().as_standard_layout().into_owned(), Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + row`, broadcasting a `1×d` row over every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.binary(a, row, |x, r| x + r, Op::AddRow(a, row))
    }

    /// `a ∘ row`, broadcasting a `1×d` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        self.binary(a, row, |x, r| x * r, Op::MulRow(a, row))
    }

    /// `a ∘ col`, broadcasting an `n×1` column.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        self.binary(a, col, |x, c| x * c, Op::MulCol(a, col))
    }

    /// `a · s` for a `1×1` variable `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        self.binary(a, s, |x, y| x * y[[0, 0]], Op::MulScalar(a, s))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| x.mapv(|v| if v > 0.0 { v } else { slope * v }),
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(|v| v * sigmoid(v)), Op::Silu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(sigmoid), Op::Sigmoid(a))
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::recip), Op::Recip(a))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, a: Var) -> Var {
        let (xhat, inv_std) = layer_norm_rows(&self.value(a));
        let ng = self.needs(a);
        self.push(
            xhat.clone(),
            Op::LayerNorm {
                input: a,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|v| nodes[v.0].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ")
        };
        let ng = parts.iter().any(|&v| self.needs(v));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|v| nodes[v.0].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ")
        };
        let ng = parts.iter().any(|&v| self.needs(v));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&self, a: Var, index: Rc<[usize]>) -> Var {
        let value = self.value(a).select(Axis(0), &index);
        let ng = self.needs(a);
        self.push(value, Op::GatherRows(a, index), ng)
    }

    /// Row-wise mean of `a` within each segment; `segment[r]` names the output
    /// row that input row `r` contributes to.
    pub fn segment_mean(&self, a: Var, segment: Rc<[usize]>, segments: usize) -> Var {
        let counts = segment_counts(&segment, segments);
        let value = segment_mean_rows(&self.value(a), &segment, &counts);
        let ng = self.needs(a);
        self.push(
            value,
            Op::SegmentMean {
                input: a,
                segment,
                counts: counts.into(),
            },
            ng,
        )
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        self.unary(a, softmax_rows, Op::SoftmaxRows(a))
    }

    /// Euclidean norm of each row, as an `n×1` column.
    pub fn row_norm(&self, a: Var) -> Var {
        self.unary(a, |x| row_sum_sq(x).mapv(f64::sqrt), Op::RowNorm(a))
    }

    /// Squared Euclidean norm of each row, as an `n×1` column.
    pub fn row_sum_sq(&self, a: Var) -> Var {
        self.unary(a, row_sum_sq, Op::RowSumSq(a))
    }

    /// Mean of all entries, as `1×1`.
    pub fn mean(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| Array2::from_elem((1, 1), x.mean().unwrap_or(0.0)),
            Op::Mean(a),
        )
    }

    /// Scalar function of `a` evaluated outside the tape: `value` and its
    /// gradient `local_grad` (same shape as `a`).
    pub fn scalar_fn(&self, a: Var, value: f64, local_grad: Array2<f64>) -> Var {
        assert_eq!(local_grad.dim(), self.shape(a), "scalar_fn gradient shape");
        let ng = self.needs(a);
        self.push(
            Array2::from_elem((1, 1), value),
            Op::Scalar {
                input: a,
                local_grad,
            },
            ng,
        )
    }

    /// Accumulates d`root`/d`v` for every recorded variable. `root` is seeded
    /// with ones, so a `1×1` root yields ordinary gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(nodes[root.0].value.dim()));

        let acc = |grads: &mut Vec<Option<Array2<f64>>>, v: Var, delta: Array2<f64>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => *g += &delta,
                slot => *slot = Some(delta),
            }
        };

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if nodes[a.0].needs_grad {
                        acc(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if nodes[b.0].needs_grad {
                        acc(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().as_standard_layout().into_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    acc(&mut grads, *r, (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, &g * val(*r));
                }
                Op::MulCol(a, c) => {
                    acc(&mut grads, *c, (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                    acc(&mut grads, *a, &g * val(*c));
                }
                Op::MulScalar(a, s) => {
                    let sv = val(*s)[[0, 0]];
                    acc(&mut grads, *s, Array2::from_elem((1, 1), (&g * val(*a)).sum()));
                    acc(&mut grads, *a, g * sv);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::LeakyRelu(a, slope) => {
                    let mut d = g;
                    d.zip_mut_with(val(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv *= slope
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Silu(a) => {
                    let mut d = g;
                    d.zip_mut_with(val(*a), |gv, &x| {
                        let s = sigmoid(x);
                        *gv *= s * (1.0 + x * (1.0 - s));
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |gv, &y| *gv *= y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Recip(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |gv, &y| *gv *= -y * y);
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    input,
                    xhat,
                    inv_std,
                } => {
                    let d = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let sum_g = gr.sum();
                        let sum_gx = gr.dot(&xr);
                        let k = inv_std[r] / d;
                        for c in 0..out.len() {
                            out[c] = k * (d * gr[c] - sum_g - xr[c] * sum_gx);
                        }
                    }
                    acc(&mut grads, *input, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        if nodes[p.0].needs_grad {
                            acc(&mut grads, *p, g.slice(ndarray::s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        if nodes[p.0].needs_grad {
                            acc(&mut grads, *p, g.slice(ndarray::s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::GatherRows(a, index) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    for (r, &src) in index.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SegmentMean {
                    input,
                    segment,
                    counts,
                } => {
                    let mut d = Array2::zeros(val(*input).dim());
                    for (r, &s) in segment.iter().enumerate() {
                        let scale = 1.0 / counts[s] as f64;
                        d.row_mut(r).zip_mut_with(&g.row(s), |o, &gv| *o = gv * scale);
                    }
                    acc(&mut grads, *input, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                        let dot = row.sum();
                        row.zip_mut_with(&y.row(r), |o, &yv| *o -= yv * dot);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::RowNorm(a) => {
                    let x = val(*a);
                    let mut d = Array2::zeros(x.dim());
                    for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                        let norm = node.value[[r, 0]];
                        if norm > 0.0 {
                            let k = g[[r, 0]] / norm;
                            row.zip_mut_with(&x.row(r), |o, &xv| *o = k * xv);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::RowSumSq(a) => {
                    let x = val(*a);
                    let mut d = x * 2.0;
                    for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                        row *= g[[r, 0]];
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let dim = val(*a).dim();
                    let k = g[[0, 0]] / (dim.0 * dim.1) as f64;
                    acc(&mut grads, *a, Array2::from_elem(dim, k));
                }
                Op::Scalar { input, local_grad } => {
                    acc(&mut grads, *input, local_grad * g[[0, 0]]);
                }
            }
        }
        Gradients { grads }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum of weighted output)/d(input) for a
    /// single-input op built by `build`.
    fn check_unary(input: Array2<f64>, build: impl Fn(&Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let tape = Tape::new();
        let x = tape.param(input.clone());
        let y = build(&tape, x);
        let w = random(&mut rng, tape.shape(y).0, tape.shape(y).1);
        let wv = tape.constant(w.clone());
        let loss = tape.mean(tape.mul(y, wv));
        let analytic = tape.backward(loss).get(x).unwrap().clone();

        let eval = |p: &Array2<f64>| {
            let t = Tape::new();
            let x = t.param(p.clone());
            let y = build(&t, x);
            let wv = t.constant(w.clone());
            let l = t.mean(t.mul(y, wv));
            let v = t.value(l)[[0, 0]];
            v
        };
        let h = 1e-6;
        for idx in 0..input.len() {
            let mut plus = input.clone();
            let mut minus = input.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.iter().nth(idx).copied().unwrap();
            assert!(
                (a - fd).abs() <= 1e-6 * (1.0 + a.abs()),
                "entry {idx}: analytic {a} vs finite difference {fd}"
            );
        }
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 4, 3);
        check_unary(x.clone(), |t, v| t.leaky_relu(v, 0.01));
        check_unary(x.clone(), |t, v| t.silu(v));
        check_unary(x.clone(), |t, v| t.sigmoid(v));
        check_unary(x.mapv(|v| v.abs() + 0.5), |t, v| t.recip(v));
        check_unary(x.clone(), |t, v| t.add_const(t.scale(v, -2.5), 1.0));
        check_unary(x.clone(), |t, v| t.transpose(v));
        check_unary(x.clone(), |t, v| t.softmax_rows(v));
        check_unary(x.clone(), |t, v| t.layer_norm(v));
        check_unary(x.clone(), |t, v| t.row_norm(v));
        check_unary(x.clone(), |t, v| t.row_sum_sq(v));
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 5, 3);
        let idx: Rc<[usize]> = vec![4, 0, 0, 2, 3, 4, 1].into();
        check_unary(x.clone(), |t, v| t.gather_rows(v, idx.clone()));
        let seg: Rc<[usize]> = vec![1, 0, 1, 1, 2].into();
        check_unary(x.clone(), |t, v| t.segment_mean(v, seg.clone(), 3));
        check_unary(x.clone(), |t, v| t.concat_cols(&[v, t.scale(v, 2.0)]));
        check_unary(x.clone(), |t, v| t.concat_rows(&[v, t.silu(v)]));
    }

    #[test]
    fn binary_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 4, 3);
        let b = random(&mut rng, 3, 2);
        let row = random(&mut rng, 1, 3);
        let col = random(&mut rng, 4, 1);
        let same = random(&mut rng, 4, 3);
        let s = random(&mut rng, 1, 1);
        // differentiate with respect to each side in turn
        check_unary(a.clone(), |t, v| t.matmul(v, t.constant(b.clone())));
        check_unary(b.clone(), |t, v| t.matmul(t.constant(a.clone()), v));
        check_unary(row.clone(), |t, v| t.add_row(t.constant(a.clone()), v));
        check_unary(row.clone(), |t, v| t.mul_row(t.constant(a.clone()), v));
        check_unary(a.clone(), |t, v| t.mul_row(v, t.constant(row.clone())));
        check_unary(col.clone(), |t, v| t.mul_col(t.constant(a.clone()), v));
        check_unary(a.clone(), |t, v| t.mul_col(v, t.constant(col.clone())));
        check_unary(s.clone(), |t, v| t.mul_scalar(t.constant(a.clone()), v));
        check_unary(a.clone(), |t, v| t.mul_scalar(v, t.constant(s.clone())));
        check_unary(a.clone(), |t, v| t.mul(v, t.constant(same.clone())));
        check_unary(a.clone(), |t, v| t.sub(t.constant(same.clone()), v));
        check_unary(a.clone(), |t, v| t.add(v, v));
    }

    #[test]
    fn row_norm_of_zero_row_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(array![[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]);
        let n = tape.row_norm(x);
        assert_eq!(*tape.value(n), array![[0.0], [5.0]]);
        let g = tape.backward(tape.mean(n));
        let gx = g.get(x).unwrap();
        assert!(gx.row(0).iter().all(|v| *v == 0.0));
        assert!(gx.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(array![[1.0, 2.0]]);
        let p = tape.param(array![[3.0, 4.0]]);
        let g = tape.backward(tape.mean(tape.mul(c, p)));
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &array![[0.5, 1.0]]);
    }

    #[test]
    fn scalar_fn_chains_external_gradient() {
        let tape = Tape::new();
        let x = tape.param(array![[1.0, -2.0]]);
        let y = tape.scale(x, 3.0);
        let value: f64 = tape.value(y).iter().map(|v| v * v).sum();
        let grad = tape.value(y).mapv(|v| 2.0 * v);
        let s = tape.scalar_fn(y, value, grad);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap(), &array![[18.0, -36.0]]);
    }
}
