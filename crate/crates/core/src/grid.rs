//! Token sequences that remember their 2-D latent shape.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `[N, d]` token matrix carrying the latent image extents `(H, W)` with
/// `N == H * W`, tokens in row-major raster order. The spatial view is the
/// channels-first reshape `[d, H, W]`; converting back is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTokenGrid {
    tokens: Tensor,
    height: usize,
    width: usize,
}

impl ImageTokenGrid {
    pub fn new(tokens: Tensor, height: usize, width: usize) -> Result<Self> {
        let (n, _) = tokens.expect_matrix("ImageTokenGrid::new")?;
        if n != height * width {
            return Err(Error::shape(
                "ImageTokenGrid::new",
                format!("{n} tokens cannot fill a {height}x{width} grid"),
            ));
        }
        Ok(Self {
            tokens,
            height,
            width,
        })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn token_count(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// `[N, d]` tokens → `[d, H, W]` spatial tensor.
    pub fn to_spatial(&self) -> Tensor {
        let (n, d) = (self.token_count(), self.dim());
        let src = self.tokens.data();
        let mut out = vec![0.0f32; n * d];
        for tok in 0..n {
            for c in 0..d {
                out[c * n + tok] = src[tok * d + c];
            }
        }
        Tensor::new(vec![d, self.height, self.width], out).expect("consistent dims")
    }

    /// Inverse of [`to_spatial`](Self::to_spatial).
    pub fn from_spatial(spatial: &Tensor) -> Result<Self> {
        let dims = spatial.dims();
        if dims.len() != 3 {
            return Err(Error::shape(
                "ImageTokenGrid::from_spatial",
                format!("expected [d,H,W], got {dims:?}"),
            ));
        }
        let (d, h, w) = (dims[0], dims[1], dims[2]);
        let n = h * w;
        let src = spatial.data();
        let mut out = vec![0.0f32; n * d];
        for c in 0..d {
            for tok in 0..n {
                out[tok * d + c] = src[c * n + tok];
            }
        }
        ImageTokenGrid::new(Tensor::new(vec![n, d], out)?, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{uniform_tensor, SeedStream};

    #[test]
    fn token_count_must_match_extents() {
        let t = Tensor::zeros(vec![5, 4]);
        assert!(ImageTokenGrid::new(t, 2, 3).is_err());
    }

    #[test]
    fn spatial_roundtrip_is_lossless() {
        let mut rng = SeedStream::new(2).rng();
        for (h, w, d) in [(1, 1, 3), (2, 3, 4), (5, 2, 7)] {
            let tokens = uniform_tensor(&mut rng, &[h * w, d], -3.0, 3.0);
            let grid = ImageTokenGrid::new(tokens.clone(), h, w).unwrap();
            let back = ImageTokenGrid::from_spatial(&grid.to_spatial()).unwrap();
            assert_eq!(back.tokens().data(), tokens.data());
            assert_eq!((back.height(), back.width()), (h, w));
        }
    }
}
