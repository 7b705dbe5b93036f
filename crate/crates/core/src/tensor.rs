//! Dense row-major `f64` tensors and the matrix kernels the graph uses.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::Result;

/// Dense tensor stored in row-major order.
///
/// Rank 0 (empty shape) is a scalar. Every dimension is positive, so
/// `data.len()` always equals the product of `shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("zero-sized dimension in {:?}", shape));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    /// 1-D tensor. Panics on an empty slice.
    pub fn vector(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "empty vector");
        Self { shape: vec![values.len()], data: values.to_vec() }
    }

    /// 2-D tensor from row slices of equal length.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err!("ragged or empty matrix rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self { shape: vec![rows.len(), cols], data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` for rank-2 tensors; rank-1 is read as a single row.
    pub fn as_matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err!("expected rank 1 or 2, got {:?}", s)),
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// `self += other` for equal shapes.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

// Below this many multiply-adds the packing overhead of the blocked GEMM
// outweighs its gains.
const GEMM_THRESHOLD: usize = 4096;

/// `c (m×n) += a (m×k) · b (k×n)`, where `a` and `b` are given with explicit
/// row and column strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m * k * n >= GEMM_THRESHOLD {
        // SAFETY: every index touched is inside the slices given the
        // shapes and strides checked by the callers.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_rs as isize,
                a_cs as isize,
                b.as_ptr(),
                b_rs as isize,
                b_cs as isize,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * a_rs + p * a_cs];
            if aip == 0.0 {
                continue;
            }
            if b_cs == 1 {
                let b_row = &b[p * b_rs..p * b_rs + n];
                for (cv, bv) in c_row.iter_mut().zip(b_row) {
                    *cv += aip * bv;
                }
            } else {
                for (j, cv) in c_row.iter_mut().enumerate() {
                    *cv += aip * b[p * b_rs + j * b_cs];
                }
            }
        }
    }
}

/// `y (b×out) = x (b×in) · wᵀ + bias`, with `w` stored `out×in`.
///
/// Always goes through the blocked kernel, whatever the size. The kernel
/// accumulates every output element over `in` in a fixed order that does
/// not depend on the number of rows, so a row's value does not depend on
/// which other rows share the batch.
pub(crate) fn linear_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    rows: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<f64> {
    debug_assert!(x.len() == rows * d_in && w.len() == d_out * d_in);
    let mut y = match bias {
        Some(b) => b.repeat(rows),
        None => vec![0.0; rows * d_out],
    };
    // SAFETY: x is rows×d_in, w is d_out×d_in read transposed through its
    // strides, y is rows×d_out; all row-major and fully in bounds.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            d_in,
            d_out,
            1.0,
            x.as_ptr(),
            d_in as isize,
            1,
            w.as_ptr(),
            1,
            d_in as isize,
            if bias.is_some() { 1.0 } else { 0.0 },
            y.as_mut_ptr(),
            d_out as isize,
            1,
        );
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_lengths() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
        assert_eq!(Tensor::new(&[], vec![4.0]).unwrap().item(), 4.0);
    }

    #[test]
    fn gemm_paths_agree() {
        // 20×30·30×10 goes through the blocked kernel, the loop path is
        // forced by calling with a tiny threshold-equivalent shape split.
        let (m, k, n) = (20, 30, 10);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 11) as f64 - 5.0).collect();
        let mut fast = vec![0.0; m * n];
        gemm_acc(m, k, n, &a, k, 1, &b, n, 1, &mut fast);
        let mut slow = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                slow[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        assert_eq!(fast, slow);
    }

    #[test]
    fn linear_forward_matches_naive() {
        let x = [1.0, 2.0, 3.0, -1.0, 0.5, 2.0];
        let w = [1.0, 0.0, 1.0, 2.0, -1.0, 0.5];
        let y = linear_forward(&x, &w, Some(&[0.5, -0.5]), 2, 3, 2);
        assert_eq!(y, vec![4.5, 1.0, 1.5, -2.0]);
    }

    #[test]
    fn linear_rows_are_batch_invariant() {
        let (d_in, d_out) = (37, 19);
        let w: Vec<f64> = (0..d_in * d_out).map(|i| libm::sin(i as f64 * 0.37)).collect();
        let x: Vec<f64> = (0..40 * d_in).map(|i| libm::cos(i as f64 * 0.11)).collect();
        let all = linear_forward(&x, &w, None, 40, d_in, d_out);
        let row7 = linear_forward(&x[7 * d_in..8 * d_in], &w, None, 1, d_in, d_out);
        assert_eq!(&all[7 * d_out..8 * d_out], row7.as_slice());
    }

    #[test]
    fn linear_rows_are_batch_invariant_across_shapes() {
        for (d_in, d_out) in [(1, 1), (3, 32), (4, 32), (8, 4), (34, 64), (64, 64), (64, 1), (300, 7)] {
            let w: Vec<f64> = (0..d_in * d_out).map(|i| libm::sin(i as f64 * 0.37)).collect();
            let b: Vec<f64> = (0..d_out).map(|i| libm::cos(i as f64)).collect();
            for rows in [2, 5, 64, 257] {
                let x: Vec<f64> = (0..rows * d_in).map(|i| libm::cos(i as f64 * 0.11) * 3.0).collect();
                let all = linear_forward(&x, &w, Some(&b), rows, d_in, d_out);
                for r in [0, rows / 2, rows - 1] {
                    let one = linear_forward(&x[r * d_in..(r + 1) * d_in], &w, Some(&b), 1, d_in, d_out);
                    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                    assert_eq!(bits(&all[r * d_out..(r + 1) * d_out]), bits(&one), "{d_in}x{d_out}, {rows} rows, row {r}");
                }
            }
        }
    }
}
