//! 2-D convolution (cross-correlation) and group normalization over
//! channels-first `[C, H, W]` tensors.

use crate::error::{Error, Result};
use crate::parallel::fill_rows;
use crate::tensor::Tensor;

/// Parameters of a 2-D convolution. Kernels are `[outC, inC, kH, kW]`
/// (`[C, 1, kH, kW]` in depthwise mode). Only centered odd kernels are
/// supported (1×1 and 3×3), with zero-fill padding `kH/2` so the output
/// extent is `ceil(H / stride)` — "same" at stride 1, halved (rounded up)
/// at stride 2.
#[derive(Debug, Clone)]
pub struct Conv2DParams {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
}

impl Conv2DParams {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, depthwise: bool) -> Result<Self> {
        let dims = kernel.dims();
        if dims.len() != 4 {
            return Err(Error::shape("conv2d", format!("kernel must be 4-D, got {dims:?}")));
        }
        let (out_c, in_c, kh, kw) = (dims[0], dims[1], dims[2], dims[3]);
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::Config(format!(
                "only centered 1x1 and 3x3 kernels are supported, got {kh}x{kw}"
            )));
        }
        if stride < 1 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if depthwise && in_c != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("depthwise kernel must be [C,1,k,k], got inC={in_c}"),
            ));
        }
        if bias.dims() != [out_c] {
            return Err(Error::shape(
                "conv2d",
                format!("bias has dims {:?}, expected [{out_c}]", bias.dims()),
            ));
        }
        Ok(Self {
            kernel,
            bias,
            stride,
            padding: kh / 2,
            depthwise,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        if self.depthwise {
            self.kernel.dims()[0]
        } else {
            self.kernel.dims()[1]
        }
    }
}

/// Output extent of one spatial axis.
pub fn conv_out_extent(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

/// Cross-correlation of `x: [C, H, W]` with `p`. No kernel flip.
pub fn conv2d(x: &Tensor, p: &Conv2DParams) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() != 3 {
        return Err(Error::shape("conv2d", format!("input must be [C,H,W], got {dims:?}")));
    }
    let (c_in, h, w) = (dims[0], dims[1], dims[2]);
    if c_in != p.in_channels() {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c_in} channels, kernel expects {}", p.in_channels()),
        ));
    }
    let out_c = p.out_channels();
    let (oh, ow) = (conv_out_extent(h, p.stride), conv_out_extent(w, p.stride));
    let k = p.kernel.dims()[2];
    let pad = p.padding as isize;
    let xd = x.data();
    let kd = p.kernel.data();
    let bd = p.bias.data();
    let (stride, depthwise) = (p.stride as isize, p.depthwise);

    let mut out = vec![0.0f32; out_c * oh * ow];
    let work = out_c * oh * ow * k * k * if depthwise { 1 } else { c_in };
    fill_rows(&mut out, out_c, oh * ow, work, |oc, plane| {
        let bias = bd[oc];
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = oy as isize * stride - pad;
                let x0 = ox as isize * stride - pad;
                let mut acc = bias;
                if depthwise {
                    let kbase = oc * k * k;
                    acc += window_dot(xd, oc, h, w, y0, x0, k, &kd[kbase..kbase + k * k]);
                } else {
                    for ic in 0..c_in {
                        let kbase = (oc * c_in + ic) * k * k;
                        acc += window_dot(xd, ic, h, w, y0, x0, k, &kd[kbase..kbase + k * k]);
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    });
    Tensor::new(vec![out_c, oh, ow], out)
}

/// Sum over a k×k window of channel `ic`, zero outside the image.
#[inline]
fn window_dot(
    xd: &[f32],
    ic: usize,
    h: usize,
    w: usize,
    y0: isize,
    x0: isize,
    k: usize,
    kernel: &[f32],
) -> f32 {
    let base = ic * h * w;
    let mut acc = 0.0f32;
    for dy in 0..k {
        let yy = y0 + dy as isize;
        if yy < 0 || yy >= h as isize {
            continue;
        }
        let row = base + yy as usize * w;
        for dx in 0..k {
            let xx = x0 + dx as isize;
            if xx < 0 || xx >= w as isize {
                continue;
            }
            acc += kernel[dy * k + dx] * xd[row + xx as usize];
        }
    }
    acc
}

/// Group-normalization parameters; `groups == 1` is layer norm over
/// channels.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub scale: Tensor,
    pub shift: Tensor,
    pub groups: usize,
    pub epsilon: f32,
}

impl NormParams {
    pub fn new(scale: Tensor, shift: Tensor, groups: usize, epsilon: f32) -> Result<Self> {
        let c = scale.len();
        if shift.len() != c {
            return Err(Error::shape(
                "group_norm",
                format!("scale has {c} entries, shift has {}", shift.len()),
            ));
        }
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "channel count {c} not divisible by {groups} groups"
            )));
        }
        Ok(Self {
            scale,
            shift,
            groups,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Group normalization of `x: [C, H, W]`: per-group mean 0 / variance 1
/// (two-pass), then per-channel affine.
pub fn group_norm(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() != 3 {
        return Err(Error::shape("group_norm", format!("input must be [C,H,W], got {dims:?}")));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    if c != p.channels() {
        return Err(Error::shape(
            "group_norm",
            format!("input has {c} channels, params expect {}", p.channels()),
        ));
    }
    let per = c / p.groups;
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![0.0f32; c * plane];
    let scale = p.scale.data();
    let shift = p.shift.data();
    let (groups, eps) = (p.groups, p.epsilon);
    fill_rows(&mut out, groups, per * plane, c * plane * 4, |g, chunk| {
        let base = g * per * plane;
        let src = &xd[base..base + per * plane];
        let n = src.len() as f32;
        let mean = src.iter().sum::<f32>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for lc in 0..per {
            let ch = g * per + lc;
            let (s, b) = (scale[ch], shift[ch]);
            for i in 0..plane {
                chunk[lc * plane + i] = (src[lc * plane + i] - mean) * inv * s + b;
            }
        }
    });
    Tensor::new(vec![c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{uniform_tensor, SeedStream};
    use approx::assert_abs_diff_eq;

    fn identity_depthwise(c: usize) -> Conv2DParams {
        // 3x3 depthwise kernel with centre weight 1.
        let mut k = vec![0.0f32; c * 9];
        for ch in 0..c {
            k[ch * 9 + 4] = 1.0;
        }
        Conv2DParams::new(
            Tensor::new(vec![c, 1, 3, 3], k).unwrap(),
            Tensor::zeros(vec![c]),
            1,
            true,
        )
        .unwrap()
    }

    #[test]
    fn pointwise_conv_is_channel_mixing_matmul() {
        let mut rng = SeedStream::new(11).rng();
        let x = uniform_tensor(&mut rng, &[3, 4, 5], -2.0, 2.0);
        let kernel = uniform_tensor(&mut rng, &[2, 3, 1, 1], -1.0, 1.0);
        let p = Conv2DParams::new(kernel.clone(), Tensor::zeros(vec![2]), 1, false).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.dims(), &[2, 4, 5]);
        // Each pixel is the kernel matrix applied to its channel vector.
        for pix in 0..20 {
            for oc in 0..2 {
                let mut want = 0.0f32;
                for ic in 0..3 {
                    want += kernel.data()[oc * 3 + ic] * x.data()[ic * 20 + pix];
                }
                assert_abs_diff_eq!(y.data()[oc * 20 + pix], want, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut rng = SeedStream::new(3).rng();
        let x = uniform_tensor(&mut rng, &[2, 3, 3], -2.0, 2.0);
        let y = conv2d(&x, &identity_depthwise(2)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = SeedStream::new(17).rng();
        let x = uniform_tensor(&mut rng, &[3, 5, 5], -3.0, 3.0);
        let kernel = uniform_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let bias = uniform_tensor(&mut rng, &[4], -1.0, 1.0);
        let p = Conv2DParams::new(kernel, bias, 1, false).unwrap();
        let got = conv2d(&x, &p).unwrap();
        let want = crate::oracle::oracle_conv2d(&x, &p).unwrap();
        assert_eq!(got.dims(), want.dims());
        for (g, w) in got.data().iter().zip(want.data()) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-5);
        }
    }

    #[test]
    fn stride_two_halves_extents_with_ceil() {
        for (h, w) in [(4, 4), (5, 5), (1, 3), (7, 2)] {
            let x = Tensor::zeros(vec![1, h, w]);
            let k = Tensor::new(vec![1, 1, 3, 3], vec![0.1; 9]).unwrap();
            let p = Conv2DParams::new(k, Tensor::zeros(vec![1]), 2, true).unwrap();
            let y = conv2d(&x, &p).unwrap();
            assert_eq!(y.dims(), &[1, h.div_ceil(2), w.div_ceil(2)]);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::zeros(vec![2, 3, 3]);
        let k = Tensor::new(vec![1, 3, 1, 1], vec![0.0; 3]).unwrap();
        let p = Conv2DParams::new(k, Tensor::zeros(vec![1]), 1, false).unwrap();
        assert!(matches!(conv2d(&x, &p), Err(crate::Error::ShapeMismatch { .. })));
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let x = Tensor::new(vec![4, 2, 2], vec![7.0; 16]).unwrap();
        let p = NormParams::new(
            Tensor::new(vec![4], vec![1.0; 4]).unwrap(),
            Tensor::zeros(vec![4]),
            2,
            1e-5,
        )
        .unwrap();
        let y = group_norm(&x, &p).unwrap();
        for &v in y.data() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn group_norm_groups_eq_channels_is_instance_norm() {
        let mut rng = SeedStream::new(5).rng();
        let x = uniform_tensor(&mut rng, &[3, 2, 2], -2.0, 2.0);
        let p = NormParams::new(
            Tensor::new(vec![3], vec![1.0; 3]).unwrap(),
            Tensor::zeros(vec![3]),
            3,
            1e-5,
        )
        .unwrap();
        let y = group_norm(&x, &p).unwrap();
        // Each channel separately normalized: mean ~ 0, var ~ 1.
        for c in 0..3 {
            let plane = &y.data()[c * 4..(c + 1) * 4];
            let mean = plane.iter().sum::<f32>() / 4.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn group_norm_matches_oracle() {
        let mut rng = SeedStream::new(23).rng();
        let x = uniform_tensor(&mut rng, &[6, 3, 4], -3.0, 3.0);
        let p = NormParams::new(
            uniform_tensor(&mut rng, &[6], 0.5, 1.5),
            uniform_tensor(&mut rng, &[6], -0.5, 0.5),
            3,
            1e-5,
        )
        .unwrap();
        let got = group_norm(&x, &p).unwrap();
        let want = crate::oracle::oracle_group_norm(&x, &p).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-5);
        }
    }

    #[test]
    fn indivisible_groups_rejected() {
        let err = NormParams::new(Tensor::zeros(vec![5]), Tensor::zeros(vec![5]), 2, 1e-5);
        assert!(matches!(err, Err(crate::Error::Config(_))));
    }
}
