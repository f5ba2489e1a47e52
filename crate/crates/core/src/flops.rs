//! Closed-form multiply-accumulate counts per mechanism.
//!
//! The model counts the algorithmic MACs of the linear-algebra core
//! (projections, feature maps, similarity logits, value aggregation);
//! exponentials, divisions and pure additions are excluded. Joint softmax
//! carries an `N_I^2` term; the hybrid path is affine in `N_I` at fixed
//! prompt length.

use crate::config::{AttentionConfig, Mechanism};

/// MAC counts split by role. `logits` covers similarity/denominator
/// terms (the `Q K^T` side), `aggregate` the value-weighting side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub projections: u64,
    pub feature_maps: u64,
    pub logits: u64,
    pub aggregate: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.projections + self.feature_maps + self.logits + self.aggregate
    }
}

fn proj(n: u64, d: u64) -> u64 {
    n * d * d
}

fn conv_fusion_macs(n: u64, d: u64, d_mid: u64) -> u64 {
    // 3x3 compress + group-norm scale/normalize + 1x1 expand.
    n * d_mid * d * 9 + 2 * n * d_mid + n * d * d_mid
}

fn spatial_compressor_macs(n: u64, n_comp: u64, d: u64) -> u64 {
    // Linear projection + depthwise 3x3 at the compressed resolution.
    n * d * d + n_comp * d * 9
}

fn lf_map_macs(n: u64, d: u64, d_mid: u64) -> u64 {
    // Down projection, layer norm, up projection.
    n * d * d_mid + 2 * n * d_mid + n * d_mid * d
}

/// Core closed forms over explicit token counts. `n_compressed` is the
/// image key/value count after spatial compression (`ceil` semantics come
/// from the caller); `n_kv` the count after k×k compression.
fn count(
    mechanism: Mechanism,
    n_image: u64,
    n_compressed: u64,
    n_kv: u64,
    n_prompt: u64,
    d: u64,
    heads: u64,
    d_mid: u64,
) -> FlopCount {
    let d_h = d / heads;
    let (n, c, p) = (n_image, n_compressed, n_prompt);
    let mut f = FlopCount::default();
    match mechanism {
        Mechanism::Sdpa => {
            f.projections = 4 * proj(n, d);
            f.logits = n * n * d;
            f.aggregate = n * n * d;
        }
        Mechanism::Linear => {
            f.projections = 4 * proj(n, d);
            f.logits = n * d;
            f.aggregate = 2 * n * d * d_h;
        }
        Mechanism::Sana => {
            f.feature_maps = 2 * proj(n, d);
            f.projections = 2 * proj(n, d);
            f.logits = n * d;
            f.aggregate = 2 * n * d * d_h;
        }
        Mechanism::LinFusion => {
            f.feature_maps = 2 * lf_map_macs(n, d, d_mid);
            f.projections = 2 * proj(n, d);
            f.logits = n * d;
            f.aggregate = 2 * n * d * d_h;
        }
        Mechanism::KvComp { factor } => {
            f.projections = 4 * proj(n, d);
            f.feature_maps = 2 * n_kv * d * (factor * factor) as u64;
            f.logits = n * n_kv * d;
            f.aggregate = n * n_kv * d;
        }
        Mechanism::Edit => {
            f.feature_maps = conv_fusion_macs(n, d, d_mid) + spatial_compressor_macs(n, c, d);
            f.projections = proj(n, d);
            f.logits = n * d;
            f.aggregate = (n + c) * d * d_h;
        }
        Mechanism::Joint => {
            f.projections = 4 * proj(n, d) + 4 * proj(p, d);
            let total = n + p;
            f.logits = total * total * d;
            f.aggregate = total * total * d;
        }
        Mechanism::JointDecomposed => {
            f.projections = 4 * proj(n, d) + 4 * proj(p, d);
            let total = n + p;
            // Block logits plus the eta normalization sums.
            f.logits = 2 * total * total * d;
            f.aggregate = total * total * d + 2 * total * d;
        }
        Mechanism::Hybrid | Mechanism::HybridExact => {
            f.feature_maps = conv_fusion_macs(n, d, d_mid) + spatial_compressor_macs(n, c, d);
            f.projections = 3 * proj(p, d) + proj(n, d) + proj(p, d);
            // Linear image-image block.
            f.logits = n * d;
            f.aggregate = (n + c) * d * d_h;
            // Image-prompt softmax block.
            f.logits += n * p * d;
            f.aggregate += n * p * d;
            // Prompt rows: eta over both key sets plus the two blocks.
            f.logits += p * (c + p) * d + p * c * d + p * p * d;
            f.aggregate += p * c * d + p * p * d + 2 * (n + p) * d;
            if mechanism == Mechanism::HybridExact {
                // Per-row exact linear factor: q.z plus prompt exponentials.
                f.logits += n * (1 + p) * d;
            }
        }
    }
    f
}

/// Closed forms over raw token counts, with even-grid compression
/// (`n/4` spatial, `n/k^2` for kv compression). Exact affinity in
/// `n_image` holds for counts divisible by `4` (resp. `k^2`).
pub fn flop_model_counts(
    mechanism: Mechanism,
    n_image: usize,
    n_prompt: usize,
    d: usize,
    heads: usize,
) -> FlopCount {
    let n_kv = match mechanism {
        Mechanism::KvComp { factor } => (n_image as u64).div_ceil((factor * factor) as u64),
        _ => 0,
    };
    count(
        mechanism,
        n_image as u64,
        (n_image as u64).div_ceil(4),
        n_kv,
        n_prompt as u64,
        d as u64,
        heads as u64,
        (d as u64).div_ceil(2),
    )
}

/// Cost model for a full configuration; compressed token counts follow
/// the grid's ceil semantics.
pub fn flop_model(cfg: &AttentionConfig) -> FlopCount {
    let (h, w) = (cfg.height, cfg.width);
    let n_compressed = (h.div_ceil(2) * w.div_ceil(2)) as u64;
    let n_kv = match cfg.mechanism {
        Mechanism::KvComp { factor } => (h.div_ceil(factor) * w.div_ceil(factor)) as u64,
        _ => 0,
    };
    let n_prompt = if cfg.mechanism.is_multimodal() {
        cfg.prompt_tokens as u64
    } else {
        0
    };
    count(
        cfg.mechanism,
        cfg.n_image() as u64,
        n_compressed,
        n_kv,
        n_prompt,
        cfg.dim as u64,
        cfg.heads as u64,
        cfg.mid_dim() as u64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hybrid_total(n: usize) -> u64 {
        flop_model_counts(Mechanism::Hybrid, n, 16, 64, 4).total()
    }

    #[test]
    fn hybrid_is_affine_in_image_tokens() {
        for n in [64usize, 256, 4096] {
            assert_eq!(hybrid_total(2 * n) + hybrid_total(0), 2 * hybrid_total(n), "n={n}");
        }
    }

    #[test]
    fn joint_fails_the_affinity_test() {
        let f = |n: usize| flop_model_counts(Mechanism::Joint, n, 16, 64, 4).total();
        assert!(f(2 * 256) + f(0) > 2 * f(256));
    }

    #[test]
    fn doubling_tokens_quadruples_joint_logits() {
        let f = |n: usize| flop_model_counts(Mechanism::Joint, n, 0, 64, 4).logits;
        assert_eq!(f(2048), 4 * f(1024));
    }

    #[test]
    fn kvcomp_logits_are_a_quarter_of_joint_at_equal_tokens() {
        let kv = flop_model_counts(Mechanism::KvComp { factor: 2 }, 4096, 0, 64, 4);
        let joint = flop_model_counts(Mechanism::Joint, 4096, 0, 64, 4);
        assert_eq!(4 * kv.logits, joint.logits);
    }

    #[test]
    fn joint_exceeds_hybrid_at_desk_scale() {
        let joint = flop_model_counts(Mechanism::Joint, 4096, 128, 64, 4).total();
        let hybrid = flop_model_counts(Mechanism::Hybrid, 4096, 128, 64, 4).total();
        assert!(joint > hybrid);
    }

    #[test]
    fn edit_is_cheaper_than_sdpa_at_desk_scale() {
        let edit = flop_model_counts(Mechanism::Edit, 4096, 0, 64, 4).total();
        let sdpa = flop_model_counts(Mechanism::Sdpa, 4096, 0, 64, 4).total();
        assert!(edit < sdpa);
    }

    #[test]
    fn sdpa_attention_terms_match_oracle_multiply_count() {
        use crate::attention::SimilarityFn;
        use crate::oracle::oracle_attention_counted;
        use crate::sampling::{qkv_instance, SeedStream};
        let mut rng = SeedStream::new(3).rng();
        let (n, d) = (6usize, 4usize);
        let qkv = qkv_instance(&mut rng, n, n, d, -1.0, 1.0);
        let (_, muls) = oracle_attention_counted(&qkv, SimilarityFn::ExpScaledDot).unwrap();
        let f = flop_model_counts(Mechanism::Sdpa, n, 0, d, 1);
        assert_eq!(muls, f.logits + f.aggregate);
    }
}
