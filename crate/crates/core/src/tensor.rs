//! Dense f32 tensor and the flat numeric kernels built on it.

use crate::error::{Error, Result};
use crate::parallel::fill_rows;

/// Dense row-major f32 tensor. Spatial tensors are channels-first
/// (`[C, H, W]`), token matrices are `[N, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor::new",
                format!("dims {dims:?} imply {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; len],
        }
    }

    /// 2-D constructor from row slices; rows must share a length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("tensor::from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Validates a 2-D shape and returns `(rows, cols)`.
    pub fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::shape(op, format!("expected 2-D tensor, got {other:?}"))),
        }
    }

    /// Row count of a 2-D tensor. Panics on other ranks (internal use).
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.dims[1]
    }

    /// Borrow row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Applies `f` elementwise, returning a new tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }

    /// Keeps `rows` of this 2-D tensor, selected by index.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            dims: vec![rows.len(), c],
            data,
        }
    }

    /// Copies columns `[lo, hi)` of a 2-D tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        debug_assert!(lo <= hi && hi <= c);
        let w = hi - lo;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + lo..i * c + hi]);
        }
        Tensor {
            dims: vec![r, w],
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            dims: vec![c, r],
            data,
        }
    }
}

/// Vertically concatenates 2-D tensors sharing a column count.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts
        .iter()
        .find(|t| t.rows() > 0)
        .map_or_else(|| parts.first().map_or(0, |t| t.cols()), |t| t.cols());
    let mut data = Vec::new();
    let mut rows = 0;
    for t in parts {
        let (r, c) = t.expect_matrix("concat_rows")?;
        if r > 0 && c != cols {
            return Err(Error::shape(
                "concat_rows",
                format!("column mismatch: {c} vs {cols}"),
            ));
        }
        rows += r;
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![rows, cols], data)
}

/// Horizontally concatenates 2-D tensors sharing a row count.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Tensor::new(vec![0, 0], vec![]);
    }
    let rows = parts[0].rows();
    let mut cols = 0;
    for t in parts {
        let (r, c) = t.expect_matrix("concat_cols")?;
        if r != rows {
            return Err(Error::shape("concat_cols", format!("row mismatch: {r} vs {rows}")));
        }
        cols += c;
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for t in parts {
            data.extend_from_slice(t.row(i));
        }
    }
    Tensor::new(vec![rows, cols], data)
}

/// Dot product with eight fixed-order partial accumulators. Deterministic
/// and wide enough for the autovectorizer.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))) + tail
}

/// `y += alpha * x`.
#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dense product of `a: [M, K]` and `b: [K, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.expect_matrix("matmul")?;
    let (kb, n) = b.expect_matrix("matmul")?;
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner dims differ: [{m}x{ka}] . [{kb}x{n}]"),
        ));
    }
    let mut out = vec![0.0f32; m * n];
    let ad = a.data();
    let bd = b.data();
    fill_rows(&mut out, m, n, m * ka * n, |i, out_row| {
        for k in 0..ka {
            axpy(ad[i * ka + k], &bd[k * n..(k + 1) * n], out_row);
        }
    });
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.expect_matrix("softmax_rows")?;
    let mut out = x.data().to_vec();
    fill_rows(&mut out, m, n, m * n * 4, |_, row| {
        softmax_slice(row);
    });
    Tensor::new(vec![m, n], out)
}

/// Branchless `e^x` for f32: Cody-Waite range reduction to `2^k * e^t`
/// with `|t| <= ln(2)/2` and a degree-6 Taylor tail (worst relative
/// error ~3e-7). Pure arithmetic, so results are identical across
/// platforms; the softmax paths lean on it heavily.
#[inline]
pub fn exp_fast(x: f32) -> f32 {
    // ln(2) split so that k * LN2_HI is exact for |k| <= 127.
    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 88.0);
    // Round-to-nearest-even via the sticky-add trick (|z| < 2^22 here).
    const MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23
    let k = (x * std::f32::consts::LOG2_E + MAGIC) - MAGIC;
    let t = (x - k * LN2_HI) - k * LN2_LO;
    let p = 1.0
        + t * (1.0
            + t * (0.5
                + t * (1.0 / 6.0
                    + t * (1.0 / 24.0 + t * (1.0 / 120.0 + t * (1.0 / 720.0))))));
    // 2^k via the exponent field; k in [-126, 127] after the clamp.
    f32::from_bits(((k as i32 + 127) as u32) << 23) * p
}

/// Max of a slice with eight independent lanes (input must be NaN-free).
#[inline]
pub(crate) fn max8(xs: &[f32]) -> f32 {
    let mut acc = [f32::NEG_INFINITY; 8];
    let chunks = xs.chunks_exact(8);
    let rem = chunks.remainder();
    for c in chunks {
        for l in 0..8 {
            acc[l] = acc[l].max(c[l]);
        }
    }
    let mut m = f32::NEG_INFINITY;
    for &v in acc.iter().chain(rem) {
        m = m.max(v);
    }
    m
}

/// Replaces `row` by `exp(row - max)` and returns the new sum, fusing
/// the exponential and reduction passes.
#[inline]
pub(crate) fn exp_sum_slice(row: &mut [f32], max: f32) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut chunks = row.chunks_exact_mut(8);
    for c in &mut chunks {
        for l in 0..8 {
            c[l] = exp_fast(c[l] - max);
            acc[l] += c[l];
        }
    }
    let mut tail = 0.0f32;
    for v in chunks.into_remainder() {
        *v = exp_fast(*v - max);
        tail += *v;
    }
    (((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))) + tail
}

/// In-place softmax of one row: vectorizable max / fused exp-sum /
/// scale passes.
#[inline]
pub(crate) fn softmax_slice(row: &mut [f32]) {
    let max = max8(row);
    let inv = 1.0 / exp_sum_slice(row, max);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn relu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn leaky_relu(x: f32, slope: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// `ELU(x) + 1`; strictly positive for finite input.
pub fn elu_plus_one(x: f32) -> f32 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Row-wise layer normalization of `x: [N, d]` followed by an affine map.
pub fn layer_norm_rows(x: &Tensor, scale: &[f32], shift: &[f32], epsilon: f32) -> Result<Tensor> {
    let (n, d) = x.expect_matrix("layer_norm_rows")?;
    if scale.len() != d || shift.len() != d {
        return Err(Error::shape(
            "layer_norm_rows",
            format!("affine params have {} / {} entries, need {d}", scale.len(), shift.len()),
        ));
    }
    let xd = x.data();
    let mut out = vec![0.0f32; n * d];
    fill_rows(&mut out, n, d, n * d * 4, |i, row| {
        let src = &xd[i * d..(i + 1) * d];
        let mean = src.iter().sum::<f32>() / d as f32;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + epsilon).sqrt();
        for c in 0..d {
            row[c] = (src[c] - mean) * inv * scale[c] + shift[c];
        }
    });
    Tensor::new(vec![n, d], out)
}
