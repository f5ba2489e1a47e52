//! Scaled dot-product, generalized-similarity and linear attention.
//!
//! All three operate headless on `[N, d]` matrices; multi-head callers
//! split columns first (see [`crate::mechanism`]).

use crate::error::{Error, Result};
use crate::parallel::fill_row_blocks;
use crate::tensor::{axpy, dot, Tensor};

/// Denominator guard for similarity-normalized attention.
pub const EPS_DEN: f32 = 1e-6;

/// What to do when an attention denominator falls below [`EPS_DEN`]:
/// stabilize by adding epsilon (the default for mechanisms) or error
/// naming the offending row (used by tests).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EpsPolicy {
    #[default]
    Stabilize,
    Strict,
}

impl EpsPolicy {
    /// Applies the policy to a raw denominator.
    #[inline]
    pub(crate) fn guard(self, row: usize, den: f32) -> Result<f32> {
        match self {
            EpsPolicy::Stabilize => Ok(den + EPS_DEN),
            EpsPolicy::Strict => {
                if den < EPS_DEN {
                    Err(Error::DegenerateAttention { row, denom: den })
                } else {
                    Ok(den)
                }
            }
        }
    }
}

/// Query/key/value triple. Keys and values share a row count; queries and
/// keys share a column count.
#[derive(Debug, Clone)]
pub struct Qkv {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl Qkv {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let qkv = Self { q, k, v };
        qkv.validate()?;
        Ok(qkv)
    }

    pub fn validate(&self) -> Result<()> {
        let (_, dq) = self.q.expect_matrix("qkv")?;
        let (nk, dk) = self.k.expect_matrix("qkv")?;
        let (nv, _) = self.v.expect_matrix("qkv")?;
        if dq != dk {
            return Err(Error::shape("qkv", format!("q cols {dq} != k cols {dk}")));
        }
        if nk != nv {
            return Err(Error::shape("qkv", format!("k rows {nk} != v rows {nv}")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }
}

/// Pairwise similarity used by [`generalized_attention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityFn {
    /// `exp(q.k / sqrt(d))` — strictly positive, recovers softmax attention.
    ExpScaledDot,
    /// Plain dot product; may take any sign.
    Dot,
}

// Query-block / key-tile sizes for the blocked softmax attention. Keys
// and values are streamed once per query block instead of once per row,
// and each tile stays cache-resident across the block's rows.
const Q_BLOCK: usize = 64;
const K_TILE: usize = 512;

/// Scaled dot-product attention, `softmax(Q K^T / sqrt(d)) V`.
///
/// Blocked over query rows and key tiles, with keys and values held
/// transposed (`[d, N_k]`) so both the logit and the aggregation passes
/// vectorize along the key axis; only a `Q_BLOCK x N_k` logit scratch is
/// materialized per block. Reduction orders are fixed, so outputs do not
/// depend on block or thread boundaries.
pub fn sdpa(qkv: &Qkv) -> Result<Tensor> {
    qkv.validate()?;
    let (n_q, d) = (qkv.q.rows(), qkv.q.cols());
    let n_k = qkv.k.rows();
    if n_k == 0 {
        return Err(Error::shape("sdpa", "attention over zero keys"));
    }
    let d_v = qkv.v.cols();
    let scale = 1.0 / (d as f32).sqrt();
    let q_scaled = qkv.q.map(|v| v * scale);
    let kt = qkv.k.transpose();
    let vt = qkv.v.transpose();
    let (ktd, vtd) = (kt.data(), vt.data());

    let mut out = vec![0.0f32; n_q * d_v];
    let work = n_q * n_k * (d + d_v);
    fill_row_blocks(&mut out, n_q, d_v, Q_BLOCK, work, |first, chunk| {
        let rows = chunk.len() / d_v;
        let mut logits = vec![0.0f32; rows * n_k];
        for tile_lo in (0..n_k).step_by(K_TILE) {
            let tile_hi = (tile_lo + K_TILE).min(n_k);
            for bi in 0..rows {
                let qi = q_scaled.row(first + bi);
                let lrow = &mut logits[bi * n_k + tile_lo..bi * n_k + tile_hi];
                for (c, &qc) in qi.iter().enumerate() {
                    axpy(qc, &ktd[c * n_k + tile_lo..c * n_k + tile_hi], lrow);
                }
            }
        }
        // Unnormalized softmax; the 1/sum lands on the short output rows.
        let mut inv_sums = vec![0.0f32; rows];
        for bi in 0..rows {
            let lrow = &mut logits[bi * n_k..(bi + 1) * n_k];
            let max = crate::tensor::max8(lrow);
            inv_sums[bi] = 1.0 / crate::tensor::exp_sum_slice(lrow, max);
        }
        for tile_lo in (0..n_k).step_by(K_TILE) {
            let tile_hi = (tile_lo + K_TILE).min(n_k);
            for bi in 0..rows {
                let y = &mut chunk[bi * d_v..(bi + 1) * d_v];
                let weights = &logits[bi * n_k + tile_lo..bi * n_k + tile_hi];
                for (c, yc) in y.iter_mut().enumerate() {
                    *yc += dot(weights, &vtd[c * n_k + tile_lo..c * n_k + tile_hi]);
                }
            }
        }
        for bi in 0..rows {
            let inv = inv_sums[bi];
            for yc in &mut chunk[bi * d_v..(bi + 1) * d_v] {
                *yc *= inv;
            }
        }
    });
    Tensor::new(vec![n_q, d_v], out)
}

/// Generalized similarity attention: `y_i = sum_j sim(Q_i,K_j) V_j / sum_j
/// sim(Q_i,K_j)`, by explicit double loop. Transparent enough to double as
/// the in-crate reference for the reordered linear form.
pub fn generalized_attention(qkv: &Qkv, sim: SimilarityFn, eps: EpsPolicy) -> Result<Tensor> {
    qkv.validate()?;
    let (n_q, d) = (qkv.q.rows(), qkv.q.cols());
    let n_k = qkv.k.rows();
    let d_v = qkv.v.cols();
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = Tensor::zeros(vec![n_q, d_v]);
    let data = out.data_mut();
    for i in 0..n_q {
        let qi = qkv.q.row(i);
        let mut den = 0.0f32;
        let y = &mut data[i * d_v..(i + 1) * d_v];
        for j in 0..n_k {
            let s = match sim {
                SimilarityFn::ExpScaledDot => (dot(qi, qkv.k.row(j)) * scale).exp(),
                SimilarityFn::Dot => dot(qi, qkv.k.row(j)),
            };
            den += s;
            axpy(s, qkv.v.row(j), y);
        }
        let den = eps.guard(i, den)?;
        for yc in y.iter_mut() {
            *yc /= den;
        }
    }
    Ok(out)
}

/// Linear attention in the associativity-reordered `O(N d^2)` form:
/// `S = K^T V`, `z = sum_j K_j`, then `y_i = (Q_i S) / (Q_i . z)`.
///
/// Callers must feed non-negative `Q`, `K` (ReLU-family feature maps) for
/// the denominators to be meaningful.
pub fn linear_attention(qkv: &Qkv, eps: EpsPolicy) -> Result<Tensor> {
    qkv.validate()?;
    let (n_q, d) = (qkv.q.rows(), qkv.q.cols());
    let n_k = qkv.k.rows();
    let d_v = qkv.v.cols();

    // S[d x d_v] and z[d] in one pass over keys.
    let mut s = vec![0.0f32; d * d_v];
    let mut z = vec![0.0f32; d];
    for j in 0..n_k {
        let kj = qkv.k.row(j);
        let vj = qkv.v.row(j);
        for c in 0..d {
            axpy(kj[c], vj, &mut s[c * d_v..(c + 1) * d_v]);
        }
        axpy(1.0, kj, &mut z);
    }

    let mut out = Tensor::zeros(vec![n_q, d_v]);
    let data = out.data_mut();
    for i in 0..n_q {
        let qi = qkv.q.row(i);
        let y = &mut data[i * d_v..(i + 1) * d_v];
        for c in 0..d {
            axpy(qi[c], &s[c * d_v..(c + 1) * d_v], y);
        }
        let den = eps.guard(i, dot(qi, &z))?;
        let inv = 1.0 / den;
        for yc in y.iter_mut() {
            *yc *= inv;
        }
    }
    Ok(out)
}

/// Splits `x: [N, d]` into `heads` column blocks of width `d / heads`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let (_, d) = x.expect_matrix("split_heads")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("dim {d} not divisible by {heads} heads")));
    }
    let d_h = d / heads;
    Ok((0..heads)
        .map(|h| x.slice_cols(h * d_h, (h + 1) * d_h))
        .collect())
}

/// Concatenates per-head outputs back into `[N, d]`.
pub fn merge_heads(parts: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = parts.iter().collect();
    crate::tensor::concat_cols(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{qkv_instance, uniform_tensor, SeedStream};
    use approx::assert_abs_diff_eq;

    #[test]
    fn sdpa_single_key_returns_value_row() {
        let mut rng = SeedStream::new(1).rng();
        let qkv = qkv_instance(&mut rng, 5, 1, 4, -3.0, 3.0);
        let y = sdpa(&qkv).unwrap();
        for i in 0..5 {
            for c in 0..4 {
                assert_abs_diff_eq!(y.row(i)[c], qkv.v.row(0)[c], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn sdpa_identical_keys_average_values() {
        let mut rng = SeedStream::new(2).rng();
        let k_row = uniform_tensor(&mut rng, &[1, 4], -2.0, 2.0);
        let k = Tensor::from_rows(&vec![k_row.row(0).to_vec(); 6]).unwrap();
        let v = uniform_tensor(&mut rng, &[6, 4], -2.0, 2.0);
        let q = uniform_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let y = sdpa(&Qkv { q, k, v: v.clone() }).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                let mean: f32 = (0..6).map(|j| v.row(j)[c]).sum::<f32>() / 6.0;
                assert_abs_diff_eq!(y.row(i)[c], mean, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn sdpa_matches_generalized_exp_scaled_dot() {
        let mut rng = SeedStream::new(3).rng();
        let qkv = qkv_instance(&mut rng, 4, 6, 8, -3.0, 3.0);
        let a = sdpa(&qkv).unwrap();
        let b = generalized_attention(&qkv, SimilarityFn::ExpScaledDot, EpsPolicy::Strict).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-5);
        }
    }

    #[test]
    fn generalized_dot_ratio_cancels_for_single_pair() {
        let q = Tensor::from_rows(&[vec![0.5, 1.5, -0.25]]).unwrap();
        let v = Tensor::from_rows(&[vec![3.0, -1.0, 2.0]]).unwrap();
        let qkv = Qkv {
            q: q.clone(),
            k: q,
            v: v.clone(),
        };
        let y = generalized_attention(&qkv, SimilarityFn::Dot, EpsPolicy::Strict).unwrap();
        for (a, b) in y.data().iter().zip(v.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn generalized_dot_all_ones_is_column_mean() {
        let mut rng = SeedStream::new(4).rng();
        let v = uniform_tensor(&mut rng, &[5, 3], -2.0, 2.0);
        let ones = Tensor::new(vec![4, 2], vec![1.0; 8]).unwrap();
        let kones = Tensor::new(vec![5, 2], vec![1.0; 10]).unwrap();
        let y = generalized_attention(
            &Qkv {
                q: ones,
                k: kones,
                v: v.clone(),
            },
            SimilarityFn::Dot,
            EpsPolicy::Strict,
        )
        .unwrap();
        for i in 0..4 {
            for c in 0..3 {
                let mean: f32 = (0..5).map(|j| v.row(j)[c]).sum::<f32>() / 5.0;
                assert_abs_diff_eq!(y.row(i)[c], mean, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn strict_mode_names_degenerate_row() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![2.0, 2.0]]).unwrap();
        let qkv = Qkv { q, k, v };
        match linear_attention(&qkv, EpsPolicy::Strict) {
            Err(Error::DegenerateAttention { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected degenerate-attention error, got {other:?}"),
        }
        // Stabilized mode keeps going and stays finite.
        let y = linear_attention(&qkv, EpsPolicy::Stabilize).unwrap();
        assert!(y.all_finite());
    }

    #[test]
    fn linear_single_key_ratio_cancels() {
        let mut rng = SeedStream::new(5).rng();
        let q = uniform_tensor(&mut rng, &[4, 3], 0.1, 2.0);
        let k = uniform_tensor(&mut rng, &[1, 3], 0.1, 2.0);
        let v = uniform_tensor(&mut rng, &[1, 3], -2.0, 2.0);
        let y = linear_attention(&Qkv { q, k, v: v.clone() }, EpsPolicy::Strict).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                assert_abs_diff_eq!(y.row(i)[c], v.row(0)[c], epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn linear_identical_keys_average_values() {
        let mut rng = SeedStream::new(6).rng();
        let krow = uniform_tensor(&mut rng, &[1, 4], 0.1, 1.0);
        let k = Tensor::from_rows(&vec![krow.row(0).to_vec(); 5]).unwrap();
        let v = uniform_tensor(&mut rng, &[5, 4], -2.0, 2.0);
        let q = uniform_tensor(&mut rng, &[3, 4], 0.1, 1.0);
        let y = linear_attention(&Qkv { q, k, v: v.clone() }, EpsPolicy::Strict).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                let mean: f32 = (0..5).map(|j| v.row(j)[c]).sum::<f32>() / 5.0;
                assert_abs_diff_eq!(y.row(i)[c], mean, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn linear_matches_generalized_dot_on_nonnegative_instances() {
        let seeds = SeedStream::new(40);
        for i in 0..100 {
            let mut rng = seeds.substream(i);
            let n = 1 + (i as usize % 64);
            let d = 1 + (i as usize % 16);
            let qkv = qkv_instance(&mut rng, n.min(16), n, d, 0.0, 3.0);
            let a = linear_attention(&qkv, EpsPolicy::Stabilize).unwrap();
            let b = generalized_attention(&qkv, SimilarityFn::Dot, EpsPolicy::Stabilize).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                let denom = y.abs().max(1e-3);
                assert!(
                    ((x - y) / denom).abs() < 1e-5,
                    "instance {i}: {x} vs {y}"
                );
            }
        }
    }
}
