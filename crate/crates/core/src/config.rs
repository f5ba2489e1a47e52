//! Mechanism menu and the configuration record shared by the CLI, the
//! cost model and the end-to-end forwards.

use crate::attention::EpsPolicy;
use crate::error::{Error, Result};
use crate::mmedit::EtaMode;

/// Attention mechanisms covered by the benchmark harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    /// Quadratic softmax self-attention over image tokens.
    Sdpa,
    /// Linear attention on plain projections with ReLU-clamped Q/K.
    Linear,
    /// Linear attention with ReLU(Linear(x)) query/key maps.
    Sana,
    /// Linear attention with the bottleneck `1 + ELU(x + ...)` maps.
    LinFusion,
    /// Softmax attention over k×k-compressed keys/values.
    KvComp { factor: usize },
    /// ConvFusion queries + Spatial Compressor keys/values + linear attention.
    Edit,
    /// Joint softmax attention over concatenated image and prompt tokens.
    Joint,
    /// Four-block decomposition of joint attention with per-row mixing.
    JointDecomposed,
    /// Hybrid joint attention, token-count approximated mixing weight.
    Hybrid,
    /// Hybrid joint attention with the exact linear mixing weight.
    HybridExact,
}

impl Mechanism {
    /// Stable identifier used in CSV output and CLI arguments.
    pub fn id(&self) -> String {
        match self {
            Mechanism::Sdpa => "sdpa".into(),
            Mechanism::Linear => "linear".into(),
            Mechanism::Sana => "sana".into(),
            Mechanism::LinFusion => "linfusion".into(),
            Mechanism::KvComp { factor } => format!("kvcomp:{factor}"),
            Mechanism::Edit => "edit".into(),
            Mechanism::Joint => "joint".into(),
            Mechanism::JointDecomposed => "joint-decomposed".into(),
            Mechanism::Hybrid => "hybrid".into(),
            Mechanism::HybridExact => "hybrid-exact".into(),
        }
    }

    /// Parses an identifier; `kvcomp` defaults to factor 2, `kvcomp:K`
    /// selects another factor.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("kvcomp") {
            let factor = match rest {
                "" => 2,
                _ => rest
                    .strip_prefix(':')
                    .and_then(|f| f.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("bad kvcomp spec `{s}`")))?,
            };
            if factor < 1 {
                return Err(Error::Config("kvcomp factor must be >= 1".into()));
            }
            return Ok(Mechanism::KvComp { factor });
        }
        match s {
            "sdpa" => Ok(Mechanism::Sdpa),
            "linear" => Ok(Mechanism::Linear),
            "sana" => Ok(Mechanism::Sana),
            "linfusion" => Ok(Mechanism::LinFusion),
            "edit" => Ok(Mechanism::Edit),
            "joint" => Ok(Mechanism::Joint),
            "joint-decomposed" => Ok(Mechanism::JointDecomposed),
            "hybrid" => Ok(Mechanism::Hybrid),
            "hybrid-exact" => Ok(Mechanism::HybridExact),
            other => Err(Error::Config(format!("unknown mechanism `{other}`"))),
        }
    }

    /// Whether the mechanism consumes prompt tokens in addition to the
    /// image grid.
    pub fn is_multimodal(&self) -> bool {
        matches!(
            self,
            Mechanism::Joint | Mechanism::JointDecomposed | Mechanism::Hybrid | Mechanism::HybridExact
        )
    }
}

/// One benchmark/forward configuration.
#[derive(Debug, Clone)]
pub struct AttentionConfig {
    pub mechanism: Mechanism,
    pub dim: usize,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    pub prompt_tokens: usize,
    pub eta_mode: EtaMode,
    pub eps: EpsPolicy,
}

impl AttentionConfig {
    pub fn new(
        mechanism: Mechanism,
        dim: usize,
        heads: usize,
        height: usize,
        width: usize,
        prompt_tokens: usize,
    ) -> Result<Self> {
        let eta_mode = match mechanism {
            Mechanism::HybridExact => EtaMode::ExactLinear,
            _ => EtaMode::ApproxTokenCount,
        };
        let cfg = Self {
            mechanism,
            dim,
            heads,
            height,
            width,
            prompt_tokens,
            eta_mode,
            eps: EpsPolicy::Stabilize,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("dim, heads and grid extents must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if let Mechanism::KvComp { factor } = self.mechanism {
            if factor < 1 {
                return Err(Error::Config("kvcomp factor must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn n_image(&self) -> usize {
        self.height * self.width
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// ConvFusion / LinFusion bottleneck width: half the model dim,
    /// rounded up.
    pub fn mid_dim(&self) -> usize {
        self.dim.div_ceil(2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrips_ids() {
        for id in [
            "sdpa",
            "linear",
            "sana",
            "linfusion",
            "kvcomp:2",
            "kvcomp:3",
            "edit",
            "joint",
            "joint-decomposed",
            "hybrid",
            "hybrid-exact",
        ] {
            assert_eq!(Mechanism::parse(id).unwrap().id(), id);
        }
        assert_eq!(Mechanism::parse("kvcomp").unwrap(), Mechanism::KvComp { factor: 2 });
        assert!(Mechanism::parse("flash").is_err());
        assert!(Mechanism::parse("kvcomp:0").is_err());
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(AttentionConfig::new(Mechanism::Sdpa, 10, 4, 2, 2, 0).is_err());
    }
}
