//! End-to-end forwards for every mechanism in the menu, driven by an
//! [`AttentionConfig`] and a validated [`WeightStore`]. This is what the
//! benchmark harness times.

use crate::attention::{
    linear_attention, merge_heads, sdpa, split_heads, EpsPolicy, Qkv,
};
use crate::config::{AttentionConfig, Mechanism};
use crate::edit::{edit_attention, EditAttentionWeights};
use crate::error::Result;
use crate::feature_maps::{kv_compress, KvCompressor, LinFusionMap, ReluLinearMap};
use crate::grid::ImageTokenGrid;
use crate::mmedit::{
    hybrid_attention, joint_attention, EtaMode, HybridAttentionWeights, JointProjWeights,
    MultimodalTokens,
};
use crate::sampling::{uniform_tensor, SeedStream};
use crate::tensor::{relu, Tensor};
use crate::weights::{validate, LinearWeights, WeightStore};

/// Seeded inputs for one forward: an image grid and (for multimodal
/// mechanisms) a prompt sequence.
#[derive(Debug, Clone)]
pub struct MechanismInputs {
    pub image: ImageTokenGrid,
    pub prompt: Tensor,
}

impl MechanismInputs {
    /// Tokens drawn uniform in [-1, 1] from the seed.
    pub fn seeded(cfg: &AttentionConfig, seed: u64) -> Result<Self> {
        let mut rng = SeedStream::new(seed).substream(1);
        let image = ImageTokenGrid::new(
            uniform_tensor(&mut rng, &[cfg.n_image(), cfg.dim], -1.0, 1.0),
            cfg.height,
            cfg.width,
        )?;
        let n_prompt = if cfg.mechanism.is_multimodal() {
            cfg.prompt_tokens
        } else {
            0
        };
        let prompt = uniform_tensor(&mut rng, &[n_prompt, cfg.dim], -1.0, 1.0);
        Ok(Self { image, prompt })
    }
}

/// Output of one forward: image-token rows, plus prompt rows for the
/// multimodal mechanisms.
#[derive(Debug, Clone)]
pub struct MechanismOutput {
    pub image: Tensor,
    pub prompt: Option<Tensor>,
}

fn per_head_softmax_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let (qs, ks, vs) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        outs.push(sdpa(&Qkv {
            q: qs[h].clone(),
            k: ks[h].clone(),
            v: vs[h].clone(),
        })?);
    }
    merge_heads(&outs)
}

fn per_head_linear_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    eps: EpsPolicy,
) -> Result<Tensor> {
    let (qs, ks, vs) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        outs.push(linear_attention(
            &Qkv {
                q: qs[h].clone(),
                k: ks[h].clone(),
                v: vs[h].clone(),
            },
            eps,
        )?);
    }
    merge_heads(&outs)
}

struct PlainProjections {
    q: LinearWeights,
    k: LinearWeights,
    v: LinearWeights,
    out: LinearWeights,
}

impl PlainProjections {
    fn from_store(store: &WeightStore) -> Result<Self> {
        Ok(Self {
            q: LinearWeights::from_store(store, "attn.q_proj")?,
            k: LinearWeights::from_store(store, "attn.k_proj")?,
            v: LinearWeights::from_store(store, "attn.v_proj")?,
            out: LinearWeights::from_store(store, "attn.out_proj")?,
        })
    }
}

/// Runs one forward pass of `cfg.mechanism` on `inputs` with `store`.
pub fn run_mechanism(
    cfg: &AttentionConfig,
    store: &WeightStore,
    inputs: &MechanismInputs,
) -> Result<MechanismOutput> {
    cfg.validate()?;
    validate(store, cfg)?;
    let x = inputs.image.tokens();
    let heads = cfg.heads;
    let eps = cfg.eps;
    match cfg.mechanism {
        Mechanism::Sdpa => {
            let p = PlainProjections::from_store(store)?;
            let (q, k, v) = (p.q.apply(x)?, p.k.apply(x)?, p.v.apply(x)?);
            let y = per_head_softmax_attention(&q, &k, &v, heads)?;
            Ok(MechanismOutput {
                image: p.out.apply(&y)?,
                prompt: None,
            })
        }
        Mechanism::Linear => {
            let p = PlainProjections::from_store(store)?;
            let (mut q, mut k, v) = (p.q.apply(x)?, p.k.apply(x)?, p.v.apply(x)?);
            // Clamp to the non-negative cone the linear form needs.
            q.map_inplace(relu);
            k.map_inplace(relu);
            let y = per_head_linear_attention(&q, &k, &v, heads, eps)?;
            Ok(MechanismOutput {
                image: p.out.apply(&y)?,
                prompt: None,
            })
        }
        Mechanism::Sana => {
            let q = ReluLinearMap::from_store(store, "q_map")?.apply(x)?;
            let k = ReluLinearMap::from_store(store, "k_map")?.apply(x)?;
            let v = LinearWeights::from_store(store, "attn.v_proj")?.apply(x)?;
            let out = LinearWeights::from_store(store, "attn.out_proj")?;
            let y = per_head_linear_attention(&q, &k, &v, heads, eps)?;
            Ok(MechanismOutput {
                image: out.apply(&y)?,
                prompt: None,
            })
        }
        Mechanism::LinFusion => {
            let q = LinFusionMap::from_store(store, "q_map")?.apply(x)?;
            let k = LinFusionMap::from_store(store, "k_map")?.apply(x)?;
            let v = LinearWeights::from_store(store, "attn.v_proj")?.apply(x)?;
            let out = LinearWeights::from_store(store, "attn.out_proj")?;
            let y = per_head_linear_attention(&q, &k, &v, heads, eps)?;
            Ok(MechanismOutput {
                image: out.apply(&y)?,
                prompt: None,
            })
        }
        Mechanism::KvComp { .. } => {
            let p = PlainProjections::from_store(store)?;
            let (q, k, v) = (p.q.apply(x)?, p.k.apply(x)?, p.v.apply(x)?);
            let compressor = KvCompressor::from_store(store)?;
            let (h, w) = (inputs.image.height(), inputs.image.width());
            let (kc, vc) = kv_compress(
                &ImageTokenGrid::new(k, h, w)?,
                &ImageTokenGrid::new(v, h, w)?,
                &compressor,
            )?;
            let y = per_head_softmax_attention(&q, &kc, &vc, heads)?;
            Ok(MechanismOutput {
                image: p.out.apply(&y)?,
                prompt: None,
            })
        }
        Mechanism::Edit => {
            let w = EditAttentionWeights::from_store(store)?;
            Ok(MechanismOutput {
                image: edit_attention(&inputs.image, &w, heads, eps)?,
                prompt: None,
            })
        }
        Mechanism::Joint | Mechanism::JointDecomposed => {
            let w = JointProjWeights::from_store(store)?;
            let m = MultimodalTokens::new(inputs.image.clone(), inputs.prompt.clone())?;
            let decomposed = cfg.mechanism == Mechanism::JointDecomposed;
            let (img, prm) = joint_attention(&m, &w, heads, decomposed)?;
            Ok(MechanismOutput {
                image: img,
                prompt: Some(prm),
            })
        }
        Mechanism::Hybrid | Mechanism::HybridExact => {
            let w = HybridAttentionWeights::from_store(store)?;
            let m = MultimodalTokens::new(inputs.image.clone(), inputs.prompt.clone())?;
            let mode = match cfg.mechanism {
                Mechanism::HybridExact => EtaMode::ExactLinear,
                _ => cfg.eta_mode,
            };
            let (img, prm) = hybrid_attention(&m, &w, mode, heads, eps)?;
            Ok(MechanismOutput {
                image: img,
                prompt: Some(prm),
            })
        }
    }
}
