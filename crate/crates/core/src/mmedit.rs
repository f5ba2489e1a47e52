//! Hybrid multimodal joint attention.
//!
//! Joint softmax attention over concatenated image and prompt tokens can
//! be decomposed exactly into four blocks — image→image, image→prompt,
//! prompt→image, prompt→prompt — provided each block's softmax output is
//! re-weighted by a per-query-row normalization factor
//!
//! ```text
//! eta(q, k1, k2) = sum_j exp(q.k1_j / sqrt(d)) /
//!                  (sum_j exp(q.k1_j / sqrt(d)) + sum_j' exp(q.k2_j' / sqrt(d)))
//! ```
//!
//! (the 1/sqrt(d) scale sits inside every exponential; the identity with
//! the joint softmax fails without it). The hybrid variant swaps the
//! image→image block for linear attention over compressed keys/values and
//! mixes with either the exact linear factor
//!
//! ```text
//! eta_lin(q, k1, k2) = sum_j (q.k1_j) /
//!                      (sum_j (q.k1_j) + sum_j' exp(q.k2_j' / sqrt(d)))
//! ```
//!
//! (linear term unscaled, matching the linear-attention denominator) or
//! its token-count approximation `eta_hat = N_I / (N_I + N_T)`.

use crate::attention::{linear_attention, merge_heads, sdpa, split_heads, EpsPolicy, Qkv, EPS_DEN};
use crate::edit::{conv_fusion, edit_keys_values, ConvFusionWeights, SpatialCompressorWeights};
use crate::error::{Error, Result};
use crate::grid::ImageTokenGrid;
use crate::tensor::{concat_rows, dot, exp_fast, Tensor};
use crate::weights::{LinearWeights, WeightStore};

/// How the hybrid image rows are mixed with the prompt branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtaMode {
    /// Softmax image-image block with the exact Eq-7-style factor;
    /// reduces to plain joint attention on uncompressed inputs.
    ExactSoftmax,
    /// Linear image-image block with the exact linear factor.
    ExactLinear,
    /// Linear image-image block with the constant `N_I / (N_I + N_T)`.
    ApproxTokenCount,
}

/// Provenance of the image-side Q/K/V inside a [`JointQkv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageMapKind {
    PlainLinear,
    EditCompressed,
}

/// Image grid plus prompt sequence sharing one model dimension.
#[derive(Debug, Clone)]
pub struct MultimodalTokens {
    pub image: ImageTokenGrid,
    pub prompt: Tensor,
}

impl MultimodalTokens {
    pub fn new(image: ImageTokenGrid, prompt: Tensor) -> Result<Self> {
        let (_, dp) = prompt.expect_matrix("multimodal_tokens")?;
        if dp != image.dim() {
            return Err(Error::shape(
                "multimodal_tokens",
                format!("image dim {} != prompt dim {dp}", image.dim()),
            ));
        }
        Ok(Self { image, prompt })
    }

    pub fn n_image(&self) -> usize {
        self.image.token_count()
    }

    pub fn n_prompt(&self) -> usize {
        self.prompt.rows()
    }
}

/// Per-head queries/keys/values for both streams.
#[derive(Debug, Clone)]
pub struct JointQkv {
    pub q_img: Tensor,
    pub k_img: Tensor,
    pub v_img: Tensor,
    pub q_prm: Tensor,
    pub k_prm: Tensor,
    pub v_prm: Tensor,
    pub image_maps: ImageMapKind,
}

impl JointQkv {
    pub fn validate(&self) -> Result<()> {
        let d = self.q_img.expect_matrix("joint_qkv")?.1;
        for (name, t) in [
            ("k_img", &self.k_img),
            ("v_img", &self.v_img),
            ("q_prm", &self.q_prm),
            ("k_prm", &self.k_prm),
            ("v_prm", &self.v_prm),
        ] {
            let (_, dt) = t.expect_matrix("joint_qkv")?;
            if dt != d {
                return Err(Error::shape(
                    "joint_qkv",
                    format!("{name} has head dim {dt}, expected {d}"),
                ));
            }
        }
        if self.k_img.rows() != self.v_img.rows() {
            return Err(Error::shape("joint_qkv", "image k/v row counts differ"));
        }
        if self.k_prm.rows() != self.v_prm.rows() {
            return Err(Error::shape("joint_qkv", "prompt k/v row counts differ"));
        }
        Ok(())
    }
}

/// The block-softmax normalization factor for one query row, with the
/// stabilizing max shared across both key sets. Empty `k1` gives 0 by
/// convention, empty `k2` gives 1; both empty is a configuration error.
pub fn eta(q_row: &[f32], k1: &Tensor, k2: &Tensor) -> Result<f32> {
    let (n1, n2) = (k1.rows(), k2.rows());
    if n1 == 0 && n2 == 0 {
        return Err(Error::Config("eta needs at least one non-empty key set".into()));
    }
    if n1 == 0 {
        return Ok(0.0);
    }
    if n2 == 0 {
        return Ok(1.0);
    }
    let scale = 1.0 / (q_row.len() as f32).sqrt();
    let mut max = f32::NEG_INFINITY;
    for j in 0..n1 {
        max = max.max(dot(q_row, k1.row(j)) * scale);
    }
    for j in 0..n2 {
        max = max.max(dot(q_row, k2.row(j)) * scale);
    }
    let mut s1 = 0.0f32;
    for j in 0..n1 {
        s1 += exp_fast(dot(q_row, k1.row(j)) * scale - max);
    }
    let mut s2 = 0.0f32;
    for j in 0..n2 {
        s2 += exp_fast(dot(q_row, k2.row(j)) * scale - max);
    }
    Ok(s1 / (s1 + s2))
}

/// [`eta`] for every row of `q`.
pub fn eta_rows(q: &Tensor, k1: &Tensor, k2: &Tensor) -> Result<Vec<f32>> {
    (0..q.rows()).map(|i| eta(q.row(i), k1, k2)).collect()
}

/// The linear-branch mixing factor for one query row: linear similarity
/// mass over `k1` against exponential mass over `k2`. The caller
/// guarantees `q, k1 >= 0`.
pub fn eta_lin(q_row: &[f32], k1: &Tensor, k2: &Tensor, eps: EpsPolicy, row: usize) -> Result<f32> {
    let scale = 1.0 / (q_row.len() as f64).sqrt();
    let mut linear = 0.0f64;
    for j in 0..k1.rows() {
        linear += dot(q_row, k1.row(j)) as f64;
    }
    let mut exp_mass = 0.0f64;
    for j in 0..k2.rows() {
        exp_mass += (dot(q_row, k2.row(j)) as f64 * scale).exp();
    }
    let den = linear + exp_mass;
    let den = match eps {
        EpsPolicy::Stabilize => den + EPS_DEN as f64,
        EpsPolicy::Strict => {
            if den < EPS_DEN as f64 {
                return Err(Error::DegenerateAttention {
                    row,
                    denom: den as f32,
                });
            }
            den
        }
    };
    Ok((linear / den) as f32)
}

/// [`eta_lin`] for every row of `q`.
pub fn eta_lin_rows(q: &Tensor, k1: &Tensor, k2: &Tensor, eps: EpsPolicy) -> Result<Vec<f32>> {
    (0..q.rows()).map(|i| eta_lin(q.row(i), k1, k2, eps, i)).collect()
}

/// The token-count approximation `N_I / (N_I + N_T)` of the linear mixing
/// factor. `N_I` counts uncompressed image tokens (query rows); `N_T` is
/// the prompt token count.
pub fn eta_hat(n_image: usize, n_text: usize) -> f32 {
    if n_image + n_text == 0 {
        return 1.0;
    }
    n_image as f32 / (n_image + n_text) as f32
}

/// Joint softmax attention over the concatenated streams; the reference
/// the decomposition is checked against. Requires plain-linear
/// (uncompressed) image maps.
pub fn joint_attention_direct(j: &JointQkv) -> Result<(Tensor, Tensor)> {
    j.validate()?;
    if j.image_maps != ImageMapKind::PlainLinear {
        return Err(Error::Config(
            "joint_attention_direct needs uncompressed plain-linear image maps".into(),
        ));
    }
    let (n_i, n_p) = (j.q_img.rows(), j.q_prm.rows());
    let q = concat_rows(&[&j.q_img, &j.q_prm])?;
    let k = concat_rows(&[&j.k_img, &j.k_prm])?;
    let v = concat_rows(&[&j.v_img, &j.v_prm])?;
    let out = sdpa(&Qkv { q, k, v })?;
    let d = out.cols();
    let img = Tensor::new(vec![n_i, d], out.data()[..n_i * d].to_vec())?;
    let prm = Tensor::new(vec![n_p, d], out.data()[n_i * d..].to_vec())?;
    Ok((img, prm))
}

/// `w_i * a_i + (1 - w_i) * b_i` per row.
fn mix_rows(weights: &[f32], a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = a.expect_matrix("mix_rows")?;
    if b.dims() != a.dims() || weights.len() != n {
        return Err(Error::shape("mix_rows", "branch shapes disagree"));
    }
    let mut out = vec![0.0f32; n * d];
    for i in 0..n {
        let w = weights[i];
        let (ra, rb) = (a.row(i), b.row(i));
        for c in 0..d {
            out[i * d + c] = w * ra[c] + (1.0 - w) * rb[c];
        }
    }
    Tensor::new(vec![n, d], out)
}

/// One decomposed output stream: per-row eta-weighted mix of
/// `A(q, k1, v1)` and `A(q, k2, v2)`. Shared verbatim by the prompt side
/// of the hybrid path.
fn decomposed_rows(q: &Tensor, k1: &Tensor, v1: &Tensor, k2: &Tensor, v2: &Tensor) -> Result<Tensor> {
    if q.rows() == 0 {
        return Ok(Tensor::zeros(vec![0, if v1.rows() > 0 { v1.cols() } else { v2.cols() }]));
    }
    if k1.rows() == 0 && k2.rows() == 0 {
        return Err(Error::Config("attention over two empty key sets".into()));
    }
    if k2.rows() == 0 {
        return sdpa(&Qkv {
            q: q.clone(),
            k: k1.clone(),
            v: v1.clone(),
        });
    }
    if k1.rows() == 0 {
        return sdpa(&Qkv {
            q: q.clone(),
            k: k2.clone(),
            v: v2.clone(),
        });
    }
    let weights = eta_rows(q, k1, k2)?;
    let a = sdpa(&Qkv {
        q: q.clone(),
        k: k1.clone(),
        v: v1.clone(),
    })?;
    let b = sdpa(&Qkv {
        q: q.clone(),
        k: k2.clone(),
        v: v2.clone(),
    })?;
    mix_rows(&weights, &a, &b)
}

/// Exact four-block decomposition of [`joint_attention_direct`].
pub fn joint_attention_decomposed(j: &JointQkv) -> Result<(Tensor, Tensor)> {
    j.validate()?;
    let img = decomposed_rows(&j.q_img, &j.k_img, &j.v_img, &j.k_prm, &j.v_prm)?;
    let prm = decomposed_rows(&j.q_prm, &j.k_img, &j.v_img, &j.k_prm, &j.v_prm)?;
    Ok((img, prm))
}

/// Hybrid image rows with an explicit per-row mixing weight vector:
/// `w_i * A_lin(q, k_img, v_img)_i + (1 - w_i) * A(q, k_prm, v_prm)_i`.
/// Both eta modes route through here, so forcing the approximate mode's
/// weights to the exact ones reproduces the exact output bit for bit.
pub fn hybrid_image_rows_with_weights(
    q: &Tensor,
    k_img: &Tensor,
    v_img: &Tensor,
    k_prm: &Tensor,
    v_prm: &Tensor,
    weights: &[f32],
    eps: EpsPolicy,
) -> Result<Tensor> {
    let a_lin = linear_attention(
        &Qkv {
            q: q.clone(),
            k: k_img.clone(),
            v: v_img.clone(),
        },
        eps,
    )?;
    let across = sdpa(&Qkv {
        q: q.clone(),
        k: k_prm.clone(),
        v: v_prm.clone(),
    })?;
    mix_rows(weights, &a_lin, &across)
}

fn hybrid_image_rows(
    q: &Tensor,
    k_img: &Tensor,
    v_img: &Tensor,
    k_prm: &Tensor,
    v_prm: &Tensor,
    mode: EtaMode,
    eps: EpsPolicy,
    n_image: usize,
    n_text: usize,
) -> Result<Tensor> {
    if q.rows() == 0 {
        return Ok(Tensor::zeros(vec![0, v_img.cols()]));
    }
    match mode {
        EtaMode::ExactSoftmax => decomposed_rows(q, k_img, v_img, k_prm, v_prm),
        EtaMode::ExactLinear | EtaMode::ApproxTokenCount => {
            if k_prm.rows() == 0 {
                // Pure linear branch; the mixing weight is 1.
                return linear_attention(
                    &Qkv {
                        q: q.clone(),
                        k: k_img.clone(),
                        v: v_img.clone(),
                    },
                    eps,
                );
            }
            if k_img.rows() == 0 {
                return sdpa(&Qkv {
                    q: q.clone(),
                    k: k_prm.clone(),
                    v: v_prm.clone(),
                });
            }
            let weights = match mode {
                EtaMode::ExactLinear => eta_lin_rows(q, k_img, k_prm, eps)?,
                EtaMode::ApproxTokenCount => vec![eta_hat(n_image, n_text); q.rows()],
                EtaMode::ExactSoftmax => unreachable!(),
            };
            hybrid_image_rows_with_weights(q, k_img, v_img, k_prm, v_prm, &weights, eps)
        }
    }
}

/// Per-head hybrid joint attention over an already-formed [`JointQkv`].
/// Image rows mix the linear image-image branch with the prompt branch;
/// prompt rows reuse the decomposed path against the (possibly
/// compressed) image keys/values.
pub fn hybrid_attention_blocks(
    j: &JointQkv,
    mode: EtaMode,
    eps: EpsPolicy,
) -> Result<(Tensor, Tensor)> {
    j.validate()?;
    let n_image = j.q_img.rows();
    let n_text = j.k_prm.rows();
    let img = hybrid_image_rows(
        &j.q_img, &j.k_img, &j.v_img, &j.k_prm, &j.v_prm, mode, eps, n_image, n_text,
    )?;
    let prm = decomposed_rows(&j.q_prm, &j.k_img, &j.v_img, &j.k_prm, &j.v_prm)?;
    Ok((img, prm))
}

/// Weights for plain joint attention: per-stream projections.
#[derive(Debug, Clone)]
pub struct JointProjWeights {
    pub image_q: LinearWeights,
    pub image_k: LinearWeights,
    pub image_v: LinearWeights,
    pub prompt_q: LinearWeights,
    pub prompt_k: LinearWeights,
    pub prompt_v: LinearWeights,
    pub image_out: LinearWeights,
    pub prompt_out: LinearWeights,
}

impl JointProjWeights {
    pub fn from_store(store: &WeightStore) -> Result<Self> {
        Ok(Self {
            image_q: LinearWeights::from_store(store, "image.q_proj")?,
            image_k: LinearWeights::from_store(store, "image.k_proj")?,
            image_v: LinearWeights::from_store(store, "image.v_proj")?,
            prompt_q: LinearWeights::from_store(store, "prompt.q_proj")?,
            prompt_k: LinearWeights::from_store(store, "prompt.k_proj")?,
            prompt_v: LinearWeights::from_store(store, "prompt.v_proj")?,
            image_out: LinearWeights::from_store(store, "image.out_proj")?,
            prompt_out: LinearWeights::from_store(store, "prompt.out_proj")?,
        })
    }
}

/// Weights for the hybrid block: EDiT maps on the image side, plain
/// projections on the prompt side.
#[derive(Debug, Clone)]
pub struct HybridAttentionWeights {
    pub conv_fusion: ConvFusionWeights,
    pub compressor: SpatialCompressorWeights,
    pub prompt_q: LinearWeights,
    pub prompt_k: LinearWeights,
    pub prompt_v: LinearWeights,
    pub image_out: LinearWeights,
    pub prompt_out: LinearWeights,
}

impl HybridAttentionWeights {
    pub fn from_store(store: &WeightStore) -> Result<Self> {
        Ok(Self {
            conv_fusion: ConvFusionWeights::from_store(store)?,
            compressor: SpatialCompressorWeights::from_store(store)?,
            prompt_q: LinearWeights::from_store(store, "prompt.q_proj")?,
            prompt_k: LinearWeights::from_store(store, "prompt.k_proj")?,
            prompt_v: LinearWeights::from_store(store, "prompt.v_proj")?,
            image_out: LinearWeights::from_store(store, "image.out_proj")?,
            prompt_out: LinearWeights::from_store(store, "prompt.out_proj")?,
        })
    }
}

fn per_head_joint(
    q_img: &Tensor,
    k_img: &Tensor,
    v_img: &Tensor,
    q_prm: &Tensor,
    k_prm: &Tensor,
    v_prm: &Tensor,
    heads: usize,
    image_maps: ImageMapKind,
    run: impl Fn(&JointQkv) -> Result<(Tensor, Tensor)>,
) -> Result<(Tensor, Tensor)> {
    let qi = split_heads(q_img, heads)?;
    let ki = split_heads(k_img, heads)?;
    let vi = split_heads(v_img, heads)?;
    let qp = split_heads(q_prm, heads)?;
    let kp = split_heads(k_prm, heads)?;
    let vp = split_heads(v_prm, heads)?;
    let mut img_heads = Vec::with_capacity(heads);
    let mut prm_heads = Vec::with_capacity(heads);
    for h in 0..heads {
        let j = JointQkv {
            q_img: qi[h].clone(),
            k_img: ki[h].clone(),
            v_img: vi[h].clone(),
            q_prm: qp[h].clone(),
            k_prm: kp[h].clone(),
            v_prm: vp[h].clone(),
            image_maps,
        };
        let (img, prm) = run(&j)?;
        img_heads.push(img);
        prm_heads.push(prm);
    }
    Ok((merge_heads(&img_heads)?, merge_heads(&prm_heads)?))
}

/// Full joint attention over multimodal tokens with plain projections;
/// `decomposed` selects the four-block path.
pub fn joint_attention(
    m: &MultimodalTokens,
    w: &JointProjWeights,
    heads: usize,
    decomposed: bool,
) -> Result<(Tensor, Tensor)> {
    let x_img = m.image.tokens();
    let (q_img, k_img, v_img) = (
        w.image_q.apply(x_img)?,
        w.image_k.apply(x_img)?,
        w.image_v.apply(x_img)?,
    );
    let (q_prm, k_prm, v_prm) = (
        w.prompt_q.apply(&m.prompt)?,
        w.prompt_k.apply(&m.prompt)?,
        w.prompt_v.apply(&m.prompt)?,
    );
    let (img, prm) = per_head_joint(
        &q_img,
        &k_img,
        &v_img,
        &q_prm,
        &k_prm,
        &v_prm,
        heads,
        ImageMapKind::PlainLinear,
        |j| {
            if decomposed {
                joint_attention_decomposed(j)
            } else {
                joint_attention_direct(j)
            }
        },
    )?;
    Ok((w.image_out.apply(&img)?, w.prompt_out.apply(&prm)?))
}

/// Full hybrid joint attention: ConvFusion image queries, compressed
/// image keys/values, plain prompt projections.
pub fn hybrid_attention(
    m: &MultimodalTokens,
    w: &HybridAttentionWeights,
    mode: EtaMode,
    heads: usize,
    eps: EpsPolicy,
) -> Result<(Tensor, Tensor)> {
    let q_img = conv_fusion(&m.image, &w.conv_fusion)?;
    let (k_img, v_img) = edit_keys_values(&m.image, &w.compressor)?;
    let (q_prm, k_prm, v_prm) = (
        w.prompt_q.apply(&m.prompt)?,
        w.prompt_k.apply(&m.prompt)?,
        w.prompt_v.apply(&m.prompt)?,
    );
    let (img, prm) = per_head_joint(
        &q_img,
        &k_img,
        &v_img,
        &q_prm,
        &k_prm,
        &v_prm,
        heads,
        ImageMapKind::EditCompressed,
        |j| hybrid_attention_blocks(j, mode, eps),
    )?;
    Ok((w.image_out.apply(&img)?, w.prompt_out.apply(&prm)?))
}
