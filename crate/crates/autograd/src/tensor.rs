//! Dense row-major `f64` tensors.
//!
//! Shapes are plain `Vec<usize>` and data is a flat buffer; every op works on
//! explicit shapes rather than strides, which keeps the kernels simple enough
//! to audit. All reductions accumulate left-to-right in index order, so
//! results are bit-stable across runs.

use rand::Rng;

use crate::error::{Error, Result};

/// A dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching flat buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// A single-element tensor, used for scalar loss values.
    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Standard-normal entries drawn from `rng` in index order.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| standard_normal(rng)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// In-place `self += k * other`; the accumulation primitive of backward.
    pub fn axpy(&mut self, k: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "axpy on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    /// Matrix product of two rank-2 tensors, `[m,k] x [k,n] -> [m,n]`.
    ///
    /// Each output element accumulates over `p = 0..k` in order, so the
    /// reduction order — and therefore the result — is independent of the
    /// tiling below and bit-stable across runs.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || b.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, b.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (b.shape[0], b.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.shape, b.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &b.data, &mut out, m, k, n, false);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Matrix product against a transposed right operand,
    /// `[m,k] x [n,k]ᵀ -> [m,n]`, without materializing the transpose.
    ///
    /// Sums over `p = 0..k` in ascending order, so the result is bitwise
    /// equal to `self.matmul(&b.transposed()?)`.
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || b.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul_nt needs rank-2 operands, got {:?} and {:?}",
                self.shape, b.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (n, k2) = (b.shape[0], b.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul_nt inner dims differ: {:?} x {:?} transposed",
                self.shape, b.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &b.data, &mut out, m, k, n, true);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transposed(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose needs a rank-2 tensor, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// Sum of all entries, accumulated in index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.sum() / self.data.len() as f64
    }
}

/// Dense matrix product into a zeroed `out` buffer: `[m,k] x [k,n]` when
/// `b_transposed` is false, `[m,k] x [n,k]ᵀ` when true.
///
/// The main path computes 4x8 output tiles. For each 8-column block the used
/// slice of `b` is first packed into a contiguous `k x 8` panel (a straight
/// copy, so values are untouched); the kernel then streams the panel once per
/// row tile, broadcasting four `a` entries against each 8-wide panel row with
/// 32 accumulators live in registers. Row and column remainders fall back to
/// straight loops. Every path sums over `p` in ascending order, so the result
/// does not depend on the tiling.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize, b_transposed: bool) {
    const MR: usize = 4;
    const NR: usize = 8;
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    let mut panel = vec![0.0f64; k * NR];

    for j0 in (0..n_main).step_by(NR) {
        if b_transposed {
            pack_panel_rows(&mut panel, b, k, j0);
        } else {
            pack_panel_cols(&mut panel, b, k, n, j0);
        }
        for i0 in (0..m_main).step_by(MR) {
            let a_rows = [
                &a[i0 * k..(i0 + 1) * k],
                &a[(i0 + 1) * k..(i0 + 2) * k],
                &a[(i0 + 2) * k..(i0 + 3) * k],
                &a[(i0 + 3) * k..(i0 + 4) * k],
            ];
            let acc = kernel_4x8(a_rows, &panel);
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        for i in m_main..m {
            let acc = kernel_1x8(&a[i * k..(i + 1) * k], &panel);
            out[i * n + j0..i * n + j0 + NR].copy_from_slice(&acc);
        }
    }

    for j in n_main..n {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let mut s = 0.0;
            if b_transposed {
                let b_row = &b[j * k..(j + 1) * k];
                for (&a_ip, &b_jp) in a_row.iter().zip(b_row) {
                    s = fma(a_ip, b_jp, s);
                }
            } else {
                for (p, &a_ip) in a_row.iter().enumerate() {
                    s = fma(a_ip, b[p * n + j], s);
                }
            }
            out[i * n + j] = s;
        }
    }
}

/// Copies the 8-wide column block of row-major `b` starting at column `j0`
/// into `panel`, row-interleaved: `panel[p*8 + c] = b[p][j0 + c]`.
fn pack_panel_cols(panel: &mut [f64], b: &[f64], k: usize, n: usize, j0: usize) {
    for (p, dst) in panel.chunks_exact_mut(8).enumerate().take(k) {
        dst.copy_from_slice(&b[p * n + j0..p * n + j0 + 8]);
    }
}

/// Copies eight consecutive rows of row-major `b` (length-`k` each, starting
/// at row `j0`) into `panel`, interleaved: `panel[p*8 + c] = b[j0 + c][p]`.
fn pack_panel_rows(panel: &mut [f64], b: &[f64], k: usize, j0: usize) {
    for c in 0..8 {
        let b_row = &b[(j0 + c) * k..(j0 + c + 1) * k];
        for (p, &v) in b_row.iter().enumerate() {
            panel[p * 8 + c] = v;
        }
    }
}

/// Fused multiply-add on targets with a hardware instruction for it, plain
/// multiply-then-add elsewhere (the library fallback is far too slow). The
/// choice is fixed at compile time, so either way a given build is
/// deterministic.
#[inline(always)]
fn fma(a: f64, b: f64, c: f64) -> f64 {
    if cfg!(target_feature = "fma") {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// 4x8 micro-kernel: dot-products of four length-`k` rows of `a` against the
/// packed `k x 8` panel, accumulating over `p` in ascending order.
#[inline(always)]
fn kernel_4x8(a_rows: [&[f64]; 4], panel: &[f64]) -> [[f64; 8]; 4] {
    let mut acc = [[0.0f64; 8]; 4];
    for (p, b_row) in panel.chunks_exact(8).enumerate() {
        for r in 0..4 {
            let a_rp = a_rows[r][p];
            for c in 0..8 {
                acc[r][c] = fma(a_rp, b_row[c], acc[r][c]);
            }
        }
    }
    acc
}

/// Single-row variant of [`kernel_4x8`] for row remainders.
#[inline(always)]
fn kernel_1x8(a_row: &[f64], panel: &[f64]) -> [f64; 8] {
    let mut acc = [0.0f64; 8];
    for (p, b_row) in panel.chunks_exact(8).enumerate() {
        let a_ip = a_row[p];
        for c in 0..8 {
            acc[c] = fma(a_ip, b_row[c], acc[c]);
        }
    }
    acc
}

/// Standard normal via Box-Muller on the rng's uniform stream.
///
/// Deterministic for a fixed rng stream; kept local so tensor init does not
/// depend on a distributions crate.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            let r = (-2.0 * u1.ln()).sqrt();
            return r * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}
