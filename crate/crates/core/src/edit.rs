//! Linear compressed self-attention: ConvFusion queries, Spatial
//! Compressor keys/values, composed with linear attention.

use crate::attention::{linear_attention, merge_heads, split_heads, EpsPolicy, Qkv};
use crate::conv::{conv2d, group_norm, Conv2DParams, NormParams};
use crate::error::{Error, Result};
use crate::feature_maps::{LEAKY_SLOPE, NORM_EPSILON};
use crate::grid::ImageTokenGrid;
use crate::tensor::{leaky_relu, relu, Tensor};
use crate::weights::{LinearWeights, WeightStore};

/// Residual two-conv query map: a 3×3 conv compressing channels to the
/// bottleneck width, LeakyReLU, group norm, a 1×1 conv expanding back,
/// residual add, outer ReLU.
#[derive(Debug, Clone)]
pub struct ConvFusionWeights {
    pub compress: Conv2DParams,
    pub norm: NormParams,
    pub expand: Conv2DParams,
}

impl ConvFusionWeights {
    pub fn new(compress: Conv2DParams, norm: NormParams, expand: Conv2DParams) -> Result<Self> {
        if expand.out_channels() != compress.in_channels() {
            return Err(Error::shape(
                "conv_fusion",
                format!(
                    "expand emits {} channels, residual needs {}",
                    expand.out_channels(),
                    compress.in_channels()
                ),
            ));
        }
        if norm.channels() != compress.out_channels()
            || expand.in_channels() != compress.out_channels()
        {
            return Err(Error::shape(
                "conv_fusion",
                "bottleneck widths of compress/norm/expand disagree",
            ));
        }
        Ok(Self {
            compress,
            norm,
            expand,
        })
    }

    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let compress = Conv2DParams::new(
            store.get("conv_fusion.compress.kernel")?.clone(),
            store.get("conv_fusion.compress.bias")?.clone(),
            1,
            false,
        )?;
        let d_mid = compress.out_channels();
        let norm = NormParams::new(
            store.get("conv_fusion.norm.scale")?.clone(),
            store.get("conv_fusion.norm.shift")?.clone(),
            gcd(32, d_mid),
            NORM_EPSILON,
        )?;
        let expand = Conv2DParams::new(
            store.get("conv_fusion.expand.kernel")?.clone(),
            store.get("conv_fusion.expand.bias")?.clone(),
            1,
            false,
        )?;
        Self::new(compress, norm, expand)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `ReLU(X + Conv1x1(GN(LeakyReLU(Conv3x3(X)))))` over the latent image;
/// token count preserved, output non-negative.
pub fn conv_fusion(x: &ImageTokenGrid, w: &ConvFusionWeights) -> Result<Tensor> {
    if w.compress.in_channels() != x.dim() {
        return Err(Error::shape(
            "conv_fusion",
            format!("tokens have dim {}, conv expects {}", x.dim(), w.compress.in_channels()),
        ));
    }
    let spatial = x.to_spatial();
    let mut t = conv2d(&spatial, &w.compress)?;
    t.map_inplace(|v| leaky_relu(v, LEAKY_SLOPE));
    let t = group_norm(&t, &w.norm)?;
    let mut t = conv2d(&t, &w.expand)?;
    for (o, r) in t.data_mut().iter_mut().zip(spatial.data()) {
        *o = relu(*o + *r);
    }
    Ok(ImageTokenGrid::from_spatial(&t)?.tokens().clone())
}

/// Linear projection followed by a stride-2 depthwise 3×3 convolution.
#[derive(Debug, Clone)]
pub struct SpatialCompressorWeights {
    pub proj: LinearWeights,
    pub dw: Conv2DParams,
}

impl SpatialCompressorWeights {
    pub fn new(proj: LinearWeights, dw: Conv2DParams) -> Result<Self> {
        if !dw.depthwise || dw.stride != 2 {
            return Err(Error::Config(
                "the spatial compressor conv must be depthwise with stride 2".into(),
            ));
        }
        Ok(Self { proj, dw })
    }

    pub fn from_store(store: &WeightStore) -> Result<Self> {
        Self::new(
            LinearWeights::from_store(store, "compressor.proj")?,
            Conv2DParams::new(
                store.get("compressor.dw.kernel")?.clone(),
                store.get("compressor.dw.bias")?.clone(),
                2,
                true,
            )?,
        )
    }
}

/// `Conv(Linear(X))`: maps `H*W` tokens to `ceil(H/2)*ceil(W/2)` tokens.
pub fn spatial_compressor(x: &ImageTokenGrid, w: &SpatialCompressorWeights) -> Result<Tensor> {
    let projected = w.proj.apply(x.tokens())?;
    let grid = ImageTokenGrid::new(projected, x.height(), x.width())?;
    let compressed = conv2d(&grid.to_spatial(), &w.dw)?;
    Ok(ImageTokenGrid::from_spatial(&compressed)?.tokens().clone())
}

/// Keys and values from one shared compressor evaluation:
/// `K = ReLU(phi(X))`, `V = phi(X)`.
pub fn edit_keys_values(
    x: &ImageTokenGrid,
    w: &SpatialCompressorWeights,
) -> Result<(Tensor, Tensor)> {
    let v = spatial_compressor(x, w)?;
    let k = v.map(relu);
    Ok((k, v))
}

/// All weights of one linear compressed attention block.
#[derive(Debug, Clone)]
pub struct EditAttentionWeights {
    pub conv_fusion: ConvFusionWeights,
    pub compressor: SpatialCompressorWeights,
    pub out_proj: LinearWeights,
}

impl EditAttentionWeights {
    pub fn from_store(store: &WeightStore) -> Result<Self> {
        Ok(Self {
            conv_fusion: ConvFusionWeights::from_store(store)?,
            compressor: SpatialCompressorWeights::from_store(store)?,
            out_proj: LinearWeights::from_store(store, "attn.out_proj")?,
        })
    }
}

/// Drop-in self-attention replacement: per-head linear attention over
/// ConvFusion queries and compressed keys/values, heads concatenated,
/// output projection applied.
pub fn edit_attention(
    x: &ImageTokenGrid,
    w: &EditAttentionWeights,
    heads: usize,
    eps: EpsPolicy,
) -> Result<Tensor> {
    let q = conv_fusion(x, &w.conv_fusion)?;
    let (k, v) = edit_keys_values(x, &w.compressor)?;
    let (qs, ks, vs) = (split_heads(&q, heads)?, split_heads(&k, heads)?, split_heads(&v, heads)?);
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
    w.out_proj.apply(&merge_heads(&outs)?)
}
