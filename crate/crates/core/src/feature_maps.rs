//! Token-wise query/key feature maps and k×k key/value token compression.

use crate::edit::{ConvFusionWeights, SpatialCompressorWeights};
use crate::error::{Error, Result};
use crate::grid::ImageTokenGrid;
use crate::tensor::{elu_plus_one, layer_norm_rows, leaky_relu, relu, Tensor};
use crate::weights::{LinearWeights, WeightStore};

/// Default LeakyReLU slope.
pub const LEAKY_SLOPE: f32 = 0.01;

/// Normalization epsilon used throughout the crate.
pub const NORM_EPSILON: f32 = 1e-5;

/// The query/key feature-map menu. Token-wise kinds accept bare
/// sequences; spatial kinds need an [`ImageTokenGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMapKind {
    Identity,
    /// `ReLU(Linear(x))`.
    ReluLinear,
    /// `1 + ELU(x + Linear(LN(LeakyReLU(Linear(x)))))`.
    LinFusion,
    /// Residual two-conv query map over the latent image.
    ConvFusion,
    /// Linear projection + stride-2 depthwise conv; compresses tokens.
    SpatialCompressor,
}

impl FeatureMapKind {
    /// Spatial kinds reshape tokens back to the latent image.
    pub fn needs_grid(&self) -> bool {
        matches!(self, FeatureMapKind::ConvFusion | FeatureMapKind::SpatialCompressor)
    }

    /// Every kind except the spatial compressor maps N tokens to N tokens.
    pub fn preserves_token_count(&self) -> bool {
        !matches!(self, FeatureMapKind::SpatialCompressor)
    }
}

/// Input for [`apply_feature_map`]: a bare `[N, d]` sequence or a grid.
#[derive(Debug, Clone, Copy)]
pub enum FeatureInput<'a> {
    Sequence(&'a Tensor),
    Grid(&'a ImageTokenGrid),
}

impl<'a> FeatureInput<'a> {
    fn tokens(&self) -> &'a Tensor {
        match self {
            FeatureInput::Sequence(t) => t,
            FeatureInput::Grid(g) => g.tokens(),
        }
    }
}

/// `ReLU(Linear(x))` parameters.
#[derive(Debug, Clone)]
pub struct ReluLinearMap {
    pub proj: LinearWeights,
}

impl ReluLinearMap {
    pub fn from_store(store: &WeightStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            proj: LinearWeights::from_store(store, &format!("{prefix}.proj"))?,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.proj.apply(x)?;
        y.map_inplace(relu);
        Ok(y)
    }
}

/// The bottleneck map `1 + ELU(x + up(LN(LeakyReLU(down(x)))))`. The down
/// projection halves the dimension; the up projection restores it.
#[derive(Debug, Clone)]
pub struct LinFusionMap {
    pub down: LinearWeights,
    pub norm_scale: Tensor,
    pub norm_shift: Tensor,
    pub up: LinearWeights,
}

impl LinFusionMap {
    pub fn from_store(store: &WeightStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            down: LinearWeights::from_store(store, &format!("{prefix}.down"))?,
            norm_scale: store.get(&format!("{prefix}.norm.scale"))?.clone(),
            norm_shift: store.get(&format!("{prefix}.norm.shift"))?.clone(),
            up: LinearWeights::from_store(store, &format!("{prefix}.up"))?,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut inner = self.down.apply(x)?;
        inner.map_inplace(|v| leaky_relu(v, LEAKY_SLOPE));
        let normed = layer_norm_rows(
            &inner,
            self.norm_scale.data(),
            self.norm_shift.data(),
            NORM_EPSILON,
        )?;
        let projected = self.up.apply(&normed)?;
        if projected.dims() != x.dims() {
            return Err(Error::shape(
                "linfusion_map",
                format!("up projection produced {:?}, input was {:?}", projected.dims(), x.dims()),
            ));
        }
        let mut out = projected;
        for (o, xi) in out.data_mut().iter_mut().zip(x.data()) {
            *o = elu_plus_one(*o + *xi);
        }
        Ok(out)
    }
}

/// Applies the named feature map. Spatial kinds reject bare sequences.
pub fn apply_feature_map(
    x: FeatureInput<'_>,
    kind: FeatureMapKind,
    store: &WeightStore,
    prefix: &str,
) -> Result<Tensor> {
    match kind {
        FeatureMapKind::Identity => Ok(x.tokens().clone()),
        FeatureMapKind::ReluLinear => ReluLinearMap::from_store(store, prefix)?.apply(x.tokens()),
        FeatureMapKind::LinFusion => LinFusionMap::from_store(store, prefix)?.apply(x.tokens()),
        FeatureMapKind::ConvFusion => match x {
            FeatureInput::Grid(g) => {
                crate::edit::conv_fusion(g, &ConvFusionWeights::from_store(store)?)
            }
            FeatureInput::Sequence(_) => Err(Error::Config(
                "ConvFusion needs an image token grid, not a bare sequence".into(),
            )),
        },
        FeatureMapKind::SpatialCompressor => match x {
            FeatureInput::Grid(g) => {
                crate::edit::spatial_compressor(g, &SpatialCompressorWeights::from_store(store)?)
            }
            FeatureInput::Sequence(_) => Err(Error::Config(
                "the spatial compressor needs an image token grid, not a bare sequence".into(),
            )),
        },
    }
}

/// Shared depthwise k×k stride-k aggregation kernel for key/value token
/// compression. One `[k, k]` filter per channel plus a bias; windows tile
/// the grid from the top-left corner, zero-filled past the bottom/right
/// edges, so H*W tokens become ceil(H/k)*ceil(W/k).
#[derive(Debug, Clone)]
pub struct KvCompressor {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl KvCompressor {
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        let dims = kernel.dims();
        if dims.len() != 3 || dims[1] != dims[2] {
            return Err(Error::shape(
                "kv_compress",
                format!("kernel must be [C,k,k], got {dims:?}"),
            ));
        }
        if dims[1] < 1 {
            return Err(Error::Config("kv_compress factor must be >= 1".into()));
        }
        if bias.dims() != [dims[0]] {
            return Err(Error::shape(
                "kv_compress",
                format!("bias dims {:?} do not match {} channels", bias.dims(), dims[0]),
            ));
        }
        Ok(Self { kernel, bias })
    }

    pub fn from_store(store: &WeightStore) -> Result<Self> {
        Self::new(
            store.get("kv_compress.kernel")?.clone(),
            store.get("kv_compress.bias")?.clone(),
        )
    }

    pub fn factor(&self) -> usize {
        self.kernel.dims()[1]
    }

    fn compress(&self, grid: &ImageTokenGrid) -> Result<Tensor> {
        let d = grid.dim();
        if self.kernel.dims()[0] != d {
            return Err(Error::shape(
                "kv_compress",
                format!("kernel has {} channels, tokens have {d}", self.kernel.dims()[0]),
            ));
        }
        let k = self.factor();
        let (h, w) = (grid.height(), grid.width());
        let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
        let src = grid.tokens().data();
        let kd = self.kernel.data();
        let bd = self.bias.data();
        let mut out = vec![0.0f32; oh * ow * d];
        for oy in 0..oh {
            for ox in 0..ow {
                let tok = oy * ow + ox;
                for c in 0..d {
                    let mut acc = bd[c];
                    for dy in 0..k {
                        let yy = oy * k + dy;
                        if yy >= h {
                            continue;
                        }
                        for dx in 0..k {
                            let xx = ox * k + dx;
                            if xx >= w {
                                continue;
                            }
                            acc += kd[(c * k + dy) * k + dx] * src[(yy * w + xx) * d + c];
                        }
                    }
                    out[tok * d + c] = acc;
                }
            }
        }
        Tensor::new(vec![oh * ow, d], out)
    }
}

/// Compresses key and value token grids with one shared kernel.
pub fn kv_compress(
    k: &ImageTokenGrid,
    v: &ImageTokenGrid,
    compressor: &KvCompressor,
) -> Result<(Tensor, Tensor)> {
    Ok((compressor.compress(k)?, compressor.compress(v)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{uniform_tensor, SeedStream};
    use crate::weights::Provenance;
    use approx::assert_abs_diff_eq;

    fn identity_linear(d: usize) -> LinearWeights {
        let mut w = vec![0.0f32; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        LinearWeights {
            weight: Tensor::new(vec![d, d], w).unwrap(),
            bias: Tensor::zeros(vec![d]),
        }
    }

    #[test]
    fn relu_linear_with_identity_projection_is_relu() {
        let mut rng = SeedStream::new(8).rng();
        let x = uniform_tensor(&mut rng, &[5, 4], -2.0, 2.0);
        let map = ReluLinearMap {
            proj: identity_linear(4),
        };
        let y = map.apply(&x).unwrap();
        for (yv, xv) in y.data().iter().zip(x.data()) {
            assert_eq!(*yv, relu(*xv));
        }
    }

    #[test]
    fn linfusion_with_zero_inner_weights_passes_residual() {
        let mut rng = SeedStream::new(9).rng();
        let x = uniform_tensor(&mut rng, &[6, 4], -3.0, 3.0);
        let map = LinFusionMap {
            down: LinearWeights {
                weight: Tensor::zeros(vec![4, 2]),
                bias: Tensor::zeros(vec![2]),
            },
            norm_scale: Tensor::new(vec![2], vec![1.0; 2]).unwrap(),
            norm_shift: Tensor::zeros(vec![2]),
            up: LinearWeights {
                weight: Tensor::zeros(vec![2, 4]),
                bias: Tensor::zeros(vec![4]),
            },
        };
        let y = map.apply(&x).unwrap();
        for (yv, xv) in y.data().iter().zip(x.data()) {
            assert_abs_diff_eq!(*yv, elu_plus_one(*xv), epsilon = 1e-6);
        }
    }

    #[test]
    fn linfusion_output_is_nonnegative() {
        let seeds = SeedStream::new(31);
        for i in 0..25 {
            let mut rng = seeds.substream(i);
            let x = uniform_tensor(&mut rng, &[4, 6], -50.0, 50.0);
            let map = LinFusionMap {
                down: LinearWeights {
                    weight: uniform_tensor(&mut rng, &[6, 3], -1.0, 1.0),
                    bias: uniform_tensor(&mut rng, &[3], -1.0, 1.0),
                },
                norm_scale: uniform_tensor(&mut rng, &[3], 0.5, 1.5),
                norm_shift: uniform_tensor(&mut rng, &[3], -0.5, 0.5),
                up: LinearWeights {
                    weight: uniform_tensor(&mut rng, &[3, 6], -1.0, 1.0),
                    bias: uniform_tensor(&mut rng, &[6], -1.0, 1.0),
                },
            };
            let y = map.apply(&x).unwrap();
            assert!(y.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn spatial_kind_rejects_bare_sequences() {
        let store = WeightStore::new(Provenance::Seeded(0));
        let x = Tensor::zeros(vec![4, 2]);
        let err = apply_feature_map(
            FeatureInput::Sequence(&x),
            FeatureMapKind::SpatialCompressor,
            &store,
            "",
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    fn averaging_compressor(d: usize, k: usize) -> KvCompressor {
        KvCompressor::new(
            Tensor::new(vec![d, k, k], vec![1.0 / (k * k) as f32; d * k * k]).unwrap(),
            Tensor::zeros(vec![d]),
        )
        .unwrap()
    }

    #[test]
    fn factor_one_is_identity() {
        let mut rng = SeedStream::new(10).rng();
        let tokens = uniform_tensor(&mut rng, &[6, 3], -2.0, 2.0);
        let grid = ImageTokenGrid::new(tokens.clone(), 2, 3).unwrap();
        let (k, v) = kv_compress(&grid, &grid, &averaging_compressor(3, 1)).unwrap();
        assert_eq!(k.data(), tokens.data());
        assert_eq!(v.data(), tokens.data());
    }

    #[test]
    fn factor_two_on_8x8_gives_16_tokens() {
        let grid = ImageTokenGrid::new(Tensor::zeros(vec![64, 2]), 8, 8).unwrap();
        let (k, _) = kv_compress(&grid, &grid, &averaging_compressor(2, 2)).unwrap();
        assert_eq!(k.rows(), 16);
    }

    #[test]
    fn averaging_kernel_keeps_constants_constant() {
        let grid = ImageTokenGrid::new(
            Tensor::new(vec![16, 2], vec![1.5; 32]).unwrap(),
            4,
            4,
        )
        .unwrap();
        let (k, _) = kv_compress(&grid, &grid, &averaging_compressor(2, 2)).unwrap();
        for &v in k.data() {
            assert_abs_diff_eq!(v, 1.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn token_count_law() {
        for h in 1..=9usize {
            for w in 1..=9usize {
                for f in [1usize, 2, 3] {
                    let grid =
                        ImageTokenGrid::new(Tensor::zeros(vec![h * w, 2]), h, w).unwrap();
                    let (k, v) = kv_compress(&grid, &grid, &averaging_compressor(2, f)).unwrap();
                    let want = h.div_ceil(f) * w.div_ceil(f);
                    assert_eq!(k.rows(), want, "H={h} W={w} f={f}");
                    assert_eq!(v.rows(), want);
                }
            }
        }
    }
}
