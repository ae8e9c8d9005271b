//! The operation set the network is written against, with two evaluators:
//! the recording [`Tape`] (training, gradients) and [`Eager`] (inference,
//! intermediates dropped as soon as they are consumed). Both share the
//! same value kernels, so they produce bitwise-identical outputs.

use std::rc::Rc;

use ndarray::{Array2, Axis};

use crate::tape::{self, Tape, Var};

pub trait Backend {
    type V: Clone;

    fn constant(&self, a: Array2<f64>) -> Self::V;
    fn to_array(&self, v: &Self::V) -> Array2<f64>;
    fn shape(&self, v: &Self::V) -> (usize, usize);

    fn matmul(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn transpose(&self, a: &Self::V) -> Self::V;
    fn add(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add_row(&self, a: &Self::V, row: &Self::V) -> Self::V;
    fn mul_row(&self, a: &Self::V, row: &Self::V) -> Self::V;
    fn mul_col(&self, a: &Self::V, col: &Self::V) -> Self::V;
    fn mul_scalar(&self, a: &Self::V, s: &Self::V) -> Self::V;
    fn scale(&self, a: &Self::V, c: f64) -> Self::V;
    fn add_const(&self, a: &Self::V, c: f64) -> Self::V;
    fn leaky_relu(&self, a: &Self::V, slope: f64) -> Self::V;
    fn silu(&self, a: &Self::V) -> Self::V;
    fn sigmoid(&self, a: &Self::V) -> Self::V;
    fn mul(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn recip(&self, a: &Self::V) -> Self::V;
    fn layer_norm(&self, a: &Self::V) -> Self::V;
    fn concat_cols(&self, parts: &[&Self::V]) -> Self::V;
    fn concat_rows(&self, parts: &[Self::V]) -> Self::V;
    fn gather_rows(&self, a: &Self::V, index: &Rc<[usize]>) -> Self::V;
    fn segment_mean(&self, a: &Self::V, segment: &Rc<[usize]>, segments: usize) -> Self::V;
    fn softmax_rows(&self, a: &Self::V) -> Self::V;
    fn row_norm(&self, a: &Self::V) -> Self::V;
    fn row_sum_sq(&self, a: &Self::V) -> Self::V;
}

impl Backend for Tape {
    type V = Var;

    fn constant(&self, a: Array2<f64>) -> Var {
        Tape::constant(self, a)
    }
    fn to_array(&self, v: &Var) -> Array2<f64> {
        self.value(*v).clone()
    }
    fn shape(&self, v: &Var) -> (usize, usize) {
        Tape::shape(self, *v)
    }
    fn matmul(&self, a: &Var, b: &Var) -> Var {
        Tape::matmul(self, *a, *b)
    }
    fn transpose(&self, a: &Var) -> Var {
        Tape::transpose(self, *a)
    }
    fn add(&self, a: &Var, b: &Var) -> Var {
        Tape::add(self, *a, *b)
    }
    fn sub(&self, a: &Var, b: &Var) -> Var {
        Tape::sub(self, *a, *b)
    }
    fn add_row(&self, a: &Var, row: &Var) -> Var {
        Tape::add_row(self, *a, *row)
    }
    fn mul_row(&self, a: &Var, row: &Var) -> Var {
        Tape::mul_row(self, *a, *row)
    }
    fn mul_col(&self, a: &Var, col: &Var) -> Var {
        Tape::mul_col(self, *a, *col)
    }
    fn mul_scalar(&self, a: &Var, s: &Var) -> Var {
        Tape::mul_scalar(self, *a, *s)
    }
    fn scale(&self, a: &Var, c: f64) -> Var {
        Tape::scale(self, *a, c)
    }
    fn add_const(&self, a: &Var, c: f64) -> Var {
        Tape::add_const(self, *a, c)
    }
    fn leaky_relu(&self, a: &Var, slope: f64) -> Var {
        Tape::leaky_relu(self, *a, slope)
    }
    fn silu(&self, a: &Var) -> Var {
        Tape::silu(self, *a)
    }
    fn sigmoid(&self, a: &Var) -> Var {
        Tape::sigmoid(self, *a)
    }
    fn mul(&self, a: &Var, b: &Var) -> Var {
        Tape::mul(self, *a, *b)
    }
    fn recip(&self, a: &Var) -> Var {
        Tape::recip(self, *a)
    }
    fn layer_norm(&self, a: &Var) -> Var {
        Tape::layer_norm(self, *a)
    }
    fn concat_cols(&self, parts: &[&Var]) -> Var {
        let parts: Vec<Var> = parts.iter().map(|v| **v).collect();
        Tape::concat_cols(self, &parts)
    }
    fn concat_rows(&self, parts: &[Var]) -> Var {
        Tape::concat_rows(self, parts)
    }
    fn gather_rows(&self, a: &Var, index: &Rc<[usize]>) -> Var {
        Tape::gather_rows(self, *a, Rc::clone(index))
    }
    fn segment_mean(&self, a: &Var, segment: &Rc<[usize]>, segments: usize) -> Var {
        Tape::segment_mean(self, *a, Rc::clone(segment), segments)
    }
    fn softmax_rows(&self, a: &Var) -> Var {
        Tape::softmax_rows(self, *a)
    }
    fn row_norm(&self, a: &Var) -> Var {
        Tape::row_norm(self, *a)
    }
    fn row_sum_sq(&self, a: &Var) -> Var {
        Tape::row_sum_sq(self, *a)
    }
}

/// Direct evaluation on owned arrays.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Backend for Eager {
    type V = Array2<f64>;

    fn constant(&self, a: Array2<f64>) -> Array2<f64> {
        a
    }
    fn to_array(&self, v: &Array2<f64>) -> Array2<f64> {
        v.clone()
    }
    fn shape(&self, v: &Array2<f64>) -> (usize, usize) {
        v.dim()
    }
    fn matmul(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        a.dot(b)
    }
    fn transpose(&self, a: &Array2<f64>) -> Array2<f64> {
        a.t().as_standard_layout().into_owned()
    }
    fn add(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        a + b
    }
    fn sub(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        a - b
    }
    fn add_row(&self, a: &Array2<f64>, row: &Array2<f64>) -> Array2<f64> {
        a + row
    }
    fn mul_row(&self, a: &Array2<f64>, row: &Array2<f64>) -> Array2<f64> {
        a * row
    }
    fn mul_col(&self, a: &Array2<f64>, col: &Array2<f64>) -> Array2<f64> {
        a * col
    }
    fn mul_scalar(&self, a: &Array2<f64>, s: &Array2<f64>) -> Array2<f64> {
        a * s[[0, 0]]
    }
    fn scale(&self, a: &Array2<f64>, c: f64) -> Array2<f64> {
        a * c
    }
    fn add_const(&self, a: &Array2<f64>, c: f64) -> Array2<f64> {
        a + c
    }
    fn leaky_relu(&self, a: &Array2<f64>, slope: f64) -> Array2<f64> {
        a.mapv(|v| if v > 0.0 { v } else { slope * v })
    }
    fn silu(&self, a: &Array2<f64>) -> Array2<f64> {
        a.mapv(|v| v * tape::sigmoid(v))
    }
    fn sigmoid(&self, a: &Array2<f64>) -> Array2<f64> {
        a.mapv(tape::sigmoid)
    }
    fn mul(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        a * b
    }
    fn recip(&self, a: &Array2<f64>) -> Array2<f64> {
        a.mapv(f64::recip)
    }
    fn layer_norm(&self, a: &Array2<f64>) -> Array2<f64> {
        tape::layer_norm_rows(a).0
    }
    fn concat_cols(&self, parts: &[&Array2<f64>]) -> Array2<f64> {
        let views: Vec<_> = parts.iter().map(|v| v.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ")
    }
    fn concat_rows(&self, parts: &[Array2<f64>]) -> Array2<f64> {
        let views: Vec<_> = parts.iter().map(|v| v.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ")
    }
    fn gather_rows(&self, a: &Array2<f64>, index: &Rc<[usize]>) -> Array2<f64> {
        a.select(Axis(0), index)
    }
    fn segment_mean(&self, a: &Array2<f64>, segment: &Rc<[usize]>, segments: usize) -> Array2<f64> {
        let counts = tape::segment_counts(segment, segments);
        tape::segment_mean_rows(a, segment, &counts)
    }
    fn softmax_rows(&self, a: &Array2<f64>) -> Array2<f64> {
        tape::softmax_rows(a)
    }
    fn row_norm(&self, a: &Array2<f64>) -> Array2<f64> {
        tape::row_sum_sq(a).mapv(f64::sqrt)
    }
    fn row_sum_sq(&self, a: &Array2<f64>) -> Array2<f64> {
        tape::row_sum_sq(a)
    }
}
