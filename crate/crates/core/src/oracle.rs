//! Brute-force f64 reference implementations, used only by tests and the
//! verification command. Nothing here calls the production kernels: each
//! oracle is a plain nested loop over tensor elements, accumulated in
//! 64-bit and cast to f32 at the end. Single-threaded by design.

use crate::attention::{Qkv, SimilarityFn};
use crate::conv::{Conv2DParams, NormParams};
use crate::error::{Error, Result};
use crate::mmedit::JointQkv;
use crate::tensor::Tensor;

/// Triple-loop dense matrix product.
pub fn oracle_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.expect_matrix("oracle_matmul")?;
    let (kb, n) = b.expect_matrix("oracle_matmul")?;
    if ka != kb {
        return Err(Error::shape("oracle_matmul", "inner dims differ"));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for k in 0..ka {
                acc += a.data()[i * ka + k] as f64 * b.data()[k * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Quadruple-loop cross-correlation with the same windowing contract as
/// the production kernel (centered odd windows, zero fill, output extent
/// `ceil(extent / stride)`).
pub fn oracle_conv2d(x: &Tensor, p: &Conv2DParams) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() != 3 {
        return Err(Error::shape("oracle_conv2d", "input must be [C,H,W]"));
    }
    let (c_in, h, w) = (dims[0], dims[1], dims[2]);
    if c_in != p.in_channels() {
        return Err(Error::shape("oracle_conv2d", "channel mismatch"));
    }
    let out_c = p.out_channels();
    let k = p.kernel.dims()[2];
    let (oh, ow) = (h.div_ceil(p.stride), w.div_ceil(p.stride));
    let mut out = vec![0.0f32; out_c * oh * ow];
    for oc in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = p.bias.data()[oc] as f64;
                for ic in 0..c_in {
                    // Depthwise filters see only their own channel.
                    if p.depthwise && ic != oc {
                        continue;
                    }
                    let kc = if p.depthwise { 0 } else { ic };
                    for dy in 0..k {
                        for dx in 0..k {
                            let yy = oy as isize * p.stride as isize - p.padding as isize
                                + dy as isize;
                            let xx = ox as isize * p.stride as isize - p.padding as isize
                                + dx as isize;
                            if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let xv = x.data()[ic * h * w + yy as usize * w + xx as usize];
                            let kv =
                                p.kernel.data()[((oc * p.kernel.dims()[1] + kc) * k + dy) * k + dx];
                            acc += xv as f64 * kv as f64;
                        }
                    }
                }
                out[oc * oh * ow + oy * ow + ox] = acc as f32;
            }
        }
    }
    Tensor::new(vec![out_c, oh, ow], out)
}

/// Two-pass group normalization in f64.
pub fn oracle_group_norm(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() != 3 {
        return Err(Error::shape("oracle_group_norm", "input must be [C,H,W]"));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    if c != p.channels() {
        return Err(Error::shape("oracle_group_norm", "channel mismatch"));
    }
    let per = c / p.groups;
    let plane = h * w;
    let mut out = vec![0.0f32; c * plane];
    for g in 0..p.groups {
        let lo = g * per * plane;
        let hi = lo + per * plane;
        let n = (hi - lo) as f64;
        let mut mean = 0.0f64;
        for i in lo..hi {
            mean += x.data()[i] as f64;
        }
        mean /= n;
        let mut var = 0.0f64;
        for i in lo..hi {
            let d = x.data()[i] as f64 - mean;
            var += d * d;
        }
        var /= n;
        let inv = 1.0 / (var + p.epsilon as f64).sqrt();
        for lc in 0..per {
            let ch = g * per + lc;
            for i in 0..plane {
                let idx = ch * plane + i;
                let v = (x.data()[idx] as f64 - mean) * inv * p.scale.data()[ch] as f64
                    + p.shift.data()[ch] as f64;
                out[idx] = v as f32;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Per-element double-loop generalized attention (f64), erroring on a
/// denominator of exactly zero.
pub fn oracle_attention(qkv: &Qkv, sim: SimilarityFn) -> Result<Tensor> {
    let (out, _) = oracle_attention_counted(qkv, sim)?;
    Ok(out)
}

/// Same as [`oracle_attention`] but also counts the scalar multiplies it
/// performs, for cross-checking the analytic cost model at tiny sizes.
pub fn oracle_attention_counted(qkv: &Qkv, sim: SimilarityFn) -> Result<(Tensor, u64)> {
    qkv.validate()?;
    let (n_q, d) = (qkv.q.rows(), qkv.q.cols());
    let n_k = qkv.k.rows();
    let d_v = qkv.v.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0f32; n_q * d_v];
    let mut muls: u64 = 0;
    for i in 0..n_q {
        let mut num = vec![0.0f64; d_v];
        let mut den = 0.0f64;
        for j in 0..n_k {
            let mut s = 0.0f64;
            for c in 0..d {
                s += qkv.q.row(i)[c] as f64 * qkv.k.row(j)[c] as f64;
                muls += 1;
            }
            let sim_v = match sim {
                SimilarityFn::ExpScaledDot => (s * scale).exp(),
                SimilarityFn::Dot => s,
            };
            den += sim_v;
            for c in 0..d_v {
                num[c] += sim_v * qkv.v.row(j)[c] as f64;
                muls += 1;
            }
        }
        if den == 0.0 {
            return Err(Error::DegenerateAttention { row: i, denom: 0.0 });
        }
        for c in 0..d_v {
            out[i * d_v + c] = (num[c] / den) as f32;
        }
    }
    Ok((Tensor::new(vec![n_q, d_v], out)?, muls))
}

/// Joint softmax attention over concatenated image and prompt tokens:
/// materializes the full `(N_I + N_P)^2` logit matrix in f64, applies
/// exact row softmax, and splits the output back into the two streams.
pub fn oracle_joint(j: &JointQkv) -> Result<(Tensor, Tensor)> {
    j.validate()?;
    let d = j.q_img.cols();
    let (n_i, n_p) = (j.q_img.rows(), j.q_prm.rows());
    let n = n_i + n_p;
    let scale = 1.0 / (d as f64).sqrt();

    let key_row = |idx: usize| -> &[f32] {
        if idx < j.k_img.rows() {
            j.k_img.row(idx)
        } else {
            j.k_prm.row(idx - j.k_img.rows())
        }
    };
    let val_row = |idx: usize| -> &[f32] {
        if idx < j.v_img.rows() {
            j.v_img.row(idx)
        } else {
            j.v_prm.row(idx - j.v_img.rows())
        }
    };
    let n_keys = j.k_img.rows() + j.k_prm.rows();

    let mut out = vec![0.0f32; n * d];
    for i in 0..n {
        let qi = if i < n_i {
            j.q_img.row(i)
        } else {
            j.q_prm.row(i - n_i)
        };
        // Full logit row, exact softmax.
        let mut logits = vec![0.0f64; n_keys];
        for (jj, logit) in logits.iter_mut().enumerate() {
            let kr = key_row(jj);
            let mut s = 0.0f64;
            for c in 0..d {
                s += qi[c] as f64 * kr[c] as f64;
            }
            *logit = s * scale;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut den = 0.0f64;
        let mut weights = vec![0.0f64; n_keys];
        for (w, &l) in weights.iter_mut().zip(&logits) {
            *w = (l - max).exp();
            den += *w;
        }
        for c in 0..d {
            let mut acc = 0.0f64;
            for (jj, w) in weights.iter().enumerate() {
                acc += w * val_row(jj)[c] as f64;
            }
            out[i * d + c] = (acc / den) as f32;
        }
    }
    let img = Tensor::new(vec![n_i, d], out[..n_i * d].to_vec())?;
    let prm = Tensor::new(vec![n_p, d], out[n_i * d..].to_vec())?;
    Ok((img, prm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::EpsPolicy;
    use crate::sampling::{qkv_instance, SeedStream};
    use approx::assert_abs_diff_eq;

    #[test]
    fn attention_is_permutation_invariant_over_key_value_pairs() {
        let mut rng = SeedStream::new(9).rng();
        let qkv = qkv_instance(&mut rng, 3, 6, 4, -2.0, 2.0);
        let perm = [5usize, 2, 0, 4, 1, 3];
        let permuted = Qkv {
            q: qkv.q.clone(),
            k: qkv.k.select_rows(&perm),
            v: qkv.v.select_rows(&perm),
        };
        let a = oracle_attention(&qkv, SimilarityFn::ExpScaledDot).unwrap();
        let b = oracle_attention(&permuted, SimilarityFn::ExpScaledDot).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn one_by_one_returns_value() {
        let qkv = Qkv {
            q: Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(),
            k: Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap(),
            v: Tensor::from_rows(&[vec![3.0, -4.0]]).unwrap(),
        };
        let y = oracle_attention(&qkv, SimilarityFn::ExpScaledDot).unwrap();
        assert_eq!(y.data(), qkv.v.data());
    }

    #[test]
    fn cross_checks_production_paths() {
        let seeds = SeedStream::new(77);
        for i in 0..20 {
            let mut rng = seeds.substream(i);
            let qkv = qkv_instance(&mut rng, 6, 8, 8, -3.0, 3.0);
            let prod = crate::attention::sdpa(&qkv).unwrap();
            let orac = oracle_attention(&qkv, SimilarityFn::ExpScaledDot).unwrap();
            for (x, y) in prod.data().iter().zip(orac.data()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-5);
            }
            let lin_qkv = qkv_instance(&mut rng, 6, 8, 8, 0.0, 3.0);
            let prod = crate::attention::linear_attention(&lin_qkv, EpsPolicy::Strict).unwrap();
            let orac = oracle_attention(&lin_qkv, SimilarityFn::Dot).unwrap();
            for (x, y) in prod.data().iter().zip(orac.data()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn counted_multiplies_match_closed_form() {
        let mut rng = SeedStream::new(13).rng();
        let (n_q, n_k, d) = (3, 5, 4);
        let qkv = qkv_instance(&mut rng, n_q, n_k, d, -1.0, 1.0);
        let (_, muls) = oracle_attention_counted(&qkv, SimilarityFn::ExpScaledDot).unwrap();
        // Similarity pass + value weighting, both n_q * n_k * d.
        assert_eq!(muls, 2 * (n_q * n_k * d) as u64);
    }
}
