//! Neural-network primitives: convolution, batch norm (inference mode),
//! ReLU6, global average pooling, and the partial residual add — each with
//! an explicit backward implementation.
//!
//! Conventions, fixed crate-wide:
//! - Convolution is cross-correlation (no kernel flip).
//! - "Same" padding: output spatial = ceil(input/stride); when the total
//!   padding is odd the extra row/column goes on the bottom/right.
//! - Convolutions carry no bias (every conv in the shipped blocks is
//!   followed by batch norm; the classifier conv is bias-free too, which
//!   keeps parameter counting uniform).
//! - Accumulation happens in the tensor's own element type, so f32 forward
//!   passes are bitwise reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Round-half-up of a non-negative quantity to an integer.
/// `round_half_up(2.5) == 3`, `round_half_up(2.49) == 2`.
pub fn round_half_up(x: f64) -> usize {
    debug_assert!(x >= -0.5);
    let v = (x + 0.5).floor();
    if v < 0.0 {
        0
    } else {
        v as usize
    }
}

/// Round a raw (possibly fractional) channel count to a hardware-friendly
/// multiple of `divisor`, never shrinking below 90% of the request:
/// `v = max(divisor, floor(raw + divisor/2) / divisor * divisor)`,
/// then `v += divisor` if `v < 0.9 * raw`.
pub fn round_channels(raw: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut v = ((raw + d / 2.0).floor() as usize / divisor) * divisor;
    if v < divisor {
        v = divisor;
    }
    if (v as f64) < 0.9 * raw {
        v += divisor;
    }
    v
}

/// Output length of a "same"-padded convolution along one spatial dim.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Padding (begin, end) along one spatial dim for "same" output
/// `ceil(len/stride)`. When the total is odd, the extra unit goes on `end`
/// (bottom/right).
pub fn same_padding(len: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = conv_out_len(len, stride);
    let needed = (out - 1) * stride + k;
    let total = needed.saturating_sub(len);
    (total / 2, total - total / 2)
}

fn validate_conv<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    groups: usize,
) -> Result<(usize, usize, usize)> {
    let xs = x.shape();
    let ws = weight.shape();
    if !(stride == 1 || stride == 2) {
        return Err(Error::Config(format!("stride must be 1 or 2, got {stride}")));
    }
    if groups == 0 {
        return Err(Error::Config("groups must be >= 1".into()));
    }
    if ws.h != ws.w {
        return Err(Error::InvalidShape(format!(
            "kernel must be square, got {}x{}",
            ws.h, ws.w
        )));
    }
    let k = ws.h;
    let out_c = ws.n;
    if xs.c % groups != 0 || out_c % groups != 0 {
        return Err(Error::Config(format!(
            "channel counts must be divisible by groups: in={} out={} groups={}",
            xs.c, out_c, groups
        )));
    }
    if ws.c != xs.c / groups {
        return Err(Error::Config(format!(
            "weight expects {} input channels per group, input has {} ({} channels / {} groups)",
            ws.c,
            xs.c / groups,
            xs.c,
            groups
        )));
    }
    Ok((k, out_c, groups))
}

/// Direct "same"-padded 2-D convolution (cross-correlation), no bias.
///
/// `x`: `(N, C, H, W)`; `weight`: `(O, C/groups, k, k)`.
/// Output: `(N, O, ceil(H/stride), ceil(W/stride))`.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    groups: usize,
) -> Result<Tensor<E>> {
    let (k, out_c, groups) = validate_conv(x, weight, stride, groups)?;
    let xs = x.shape();
    let (oh, ow) = (conv_out_len(xs.h, stride), conv_out_len(xs.w, stride));
    let (pad_top, _) = same_padding(xs.h, k, stride);
    let (pad_left, _) = same_padding(xs.w, k, stride);
    let mut out = Tensor::zeros(Shape::new(xs.n, out_c, oh, ow))?;

    let cg = xs.c / groups; // input channels per group
    let og = out_c / groups; // output channels per group
    let xd = x.data();
    let wd = weight.data();
    let od = out.data_mut();

    for b in 0..xs.n {
        for g in 0..groups {
            for oc_local in 0..og {
                let oc = g * og + oc_local;
                let w_base = oc * cg * k * k;
                for oy in 0..oh {
                    let iy0 = (oy * stride) as isize - pad_top as isize;
                    for ox in 0..ow {
                        let ix0 = (ox * stride) as isize - pad_left as isize;
                        let mut acc = E::ZERO;
                        for ci in 0..cg {
                            let c = g * cg + ci;
                            let x_chan = (b * xs.c + c) * xs.h;
                            let w_chan = w_base + ci * k * k;
                            for ky in 0..k {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= xs.h as isize {
                                    continue;
                                }
                                let x_row = (x_chan + iy as usize) * xs.w;
                                let w_row = w_chan + ky * k;
                                for kx in 0..k {
                                    let ix = ix0 + kx as isize;
                                    if ix < 0 || ix >= xs.w as isize {
                                        continue;
                                    }
                                    acc += xd[x_row + ix as usize] * wd[w_row + kx];
                                }
                            }
                        }
                        od[((b * out_c + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d`]: gradients with respect to the input and the
/// weight, given the gradient at the output.
pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    groups: usize,
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (k, out_c, groups) = validate_conv(x, weight, stride, groups)?;
    let xs = x.shape();
    let (oh, ow) = (conv_out_len(xs.h, stride), conv_out_len(xs.w, stride));
    let expect = Shape::new(xs.n, out_c, oh, ow);
    if grad_out.shape() != expect {
        return Err(Error::ShapeMismatch(format!(
            "grad_out shape {} does not match forward output {}",
            grad_out.shape(),
            expect
        )));
    }
    let (pad_top, _) = same_padding(xs.h, k, stride);
    let (pad_left, _) = same_padding(xs.w, k, stride);

    let mut grad_x = Tensor::zeros(xs)?;
    let mut grad_w = Tensor::zeros(weight.shape())?;
    let cg = xs.c / groups;
    let og = out_c / groups;
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let gxd = grad_x.data_mut();
    let gwd = grad_w.data_mut();

    for b in 0..xs.n {
        for g in 0..groups {
            for oc_local in 0..og {
                let oc = g * og + oc_local;
                let w_base = oc * cg * k * k;
                for oy in 0..oh {
                    let iy0 = (oy * stride) as isize - pad_top as isize;
                    for ox in 0..ow {
                        let ix0 = (ox * stride) as isize - pad_left as isize;
                        let go = gd[((b * out_c + oc) * oh + oy) * ow + ox];
                        for ci in 0..cg {
                            let c = g * cg + ci;
                            let x_chan = (b * xs.c + c) * xs.h;
                            let w_chan = w_base + ci * k * k;
                            for ky in 0..k {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= xs.h as isize {
                                    continue;
                                }
                                let x_row = (x_chan + iy as usize) * xs.w;
                                let w_row = w_chan + ky * k;
                                for kx in 0..k {
                                    let ix = ix0 + kx as isize;
                                    if ix < 0 || ix >= xs.w as isize {
                                        continue;
                                    }
                                    gxd[x_row + ix as usize] += go * wd[w_row + kx];
                                    gwd[w_row + kx] += go * xd[x_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((grad_x, grad_w))
}

/// ReLU6: `min(max(x, 0), 6)` elementwise.
pub fn relu6<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let six = E::from_f64(6.0);
    x.map(|v| {
        if v < E::ZERO {
            E::ZERO
        } else if v > six {
            six
        } else {
            v
        }
    })
}

/// Backward of ReLU6: passes gradient where `0 < x < 6` (strict), blocks it
/// elsewhere.
pub fn relu6_backward<E: Element>(x: &Tensor<E>, grad_out: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch(format!(
            "relu6_backward: x {} vs grad_out {}",
            x.shape(),
            grad_out.shape()
        )));
    }
    let six = E::from_f64(6.0);
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > E::ZERO && v < six { g } else { E::ZERO })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Inference-mode batch normalization parameters. All four per-channel
/// vectors are stored as `(1, C, 1, 1)` tensors so they serialize uniformly
/// and can serve as autodiff leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub eps: f64,
}

impl<E: Element> BatchNorm<E> {
    /// Identity normalization: gamma 1, beta 0, mean 0, var 1.
    pub fn identity(channels: usize) -> Result<BatchNorm<E>> {
        let s = Shape::new(1, channels, 1, 1);
        Ok(BatchNorm {
            gamma: Tensor::filled(s, E::ONE)?,
            beta: Tensor::zeros(s)?,
            running_mean: Tensor::zeros(s)?,
            running_var: Tensor::filled(s, E::ONE)?,
            eps: BN_EPS,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            let s = t.shape();
            if s != Shape::new(1, c, 1, 1) {
                return Err(Error::Config(format!(
                    "batchnorm {name} must have shape 1x{c}x1x1, got {s}"
                )));
            }
        }
        if self.eps < 0.0 || !self.eps.is_finite() {
            return Err(Error::Config(format!(
                "batchnorm eps must be finite and >= 0, got {}",
                self.eps
            )));
        }
        if self.running_var.data().iter().any(|v| *v < E::ZERO) {
            return Err(Error::Config("batchnorm running_var must be >= 0".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        batchnorm(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.eps,
        )
    }
}

fn bn_check_channels<E: Element>(x: &Tensor<E>, per_channel: &Tensor<E>, name: &str) -> Result<()> {
    let c = x.shape().c;
    if per_channel.shape() != Shape::new(1, c, 1, 1) {
        return Err(Error::Config(format!(
            "batchnorm {name} must have shape 1x{c}x1x1 to match input {}, got {}",
            x.shape(),
            per_channel.shape()
        )));
    }
    Ok(())
}

/// Inference-mode batch normalization:
/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub fn batchnorm<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    mean: &Tensor<E>,
    var: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    bn_check_channels(x, gamma, "gamma")?;
    bn_check_channels(x, beta, "beta")?;
    bn_check_channels(x, mean, "running_mean")?;
    bn_check_channels(x, var, "running_var")?;
    let xs = x.shape();
    let mut scale = Vec::with_capacity(xs.c);
    let mut shift = Vec::with_capacity(xs.c);
    for c in 0..xs.c {
        let denom = (var.data()[c] + E::from_f64(eps)).sqrt();
        if !(denom > E::ZERO) || !denom.is_finite() {
            return Err(Error::Numeric(format!(
                "batchnorm channel {c}: sqrt(var + eps) = {denom} is not a positive finite number"
            )));
        }
        let s = gamma.data()[c] / denom;
        scale.push(s);
        shift.push(beta.data()[c] - mean.data()[c] * s);
    }
    let plane = xs.h * xs.w;
    let mut out = Tensor::zeros(xs)?;
    let xd = x.data();
    let od = out.data_mut();
    for b in 0..xs.n {
        for c in 0..xs.c {
            let base = (b * xs.c + c) * plane;
            for i in base..base + plane {
                od[i] = xd[i] * scale[c] + shift[c];
            }
        }
    }
    Ok(out)
}

/// Backward of inference-mode batch norm with respect to x, gamma, and beta.
/// Returns `(grad_x, grad_gamma, grad_beta)`; the per-channel gradients come
/// back as `(1, C, 1, 1)` tensors.
pub fn batchnorm_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    mean: &Tensor<E>,
    var: &Tensor<E>,
    eps: f64,
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    if x.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm_backward: x {} vs grad_out {}",
            x.shape(),
            grad_out.shape()
        )));
    }
    bn_check_channels(x, gamma, "gamma")?;
    bn_check_channels(x, mean, "running_mean")?;
    bn_check_channels(x, var, "running_var")?;
    let xs = x.shape();
    let cshape = Shape::new(1, xs.c, 1, 1);
    let mut grad_x = Tensor::zeros(xs)?;
    let mut grad_gamma = Tensor::zeros(cshape)?;
    let mut grad_beta = Tensor::zeros(cshape)?;
    let plane = xs.h * xs.w;
    let xd = x.data();
    let gd = grad_out.data();
    for c in 0..xs.c {
        let denom = (var.data()[c] + E::from_f64(eps)).sqrt();
        if !(denom > E::ZERO) || !denom.is_finite() {
            return Err(Error::Numeric(format!(
                "batchnorm channel {c}: sqrt(var + eps) = {denom} is not a positive finite number"
            )));
        }
        let inv = E::ONE / denom;
        let scale = gamma.data()[c] * inv;
        let mut gg = E::ZERO;
        let mut gb = E::ZERO;
        for b in 0..xs.n {
            let base = (b * xs.c + c) * plane;
            for i in base..base + plane {
                let g = gd[i];
                grad_x.data_mut()[i] = g * scale;
                gg += g * (xd[i] - mean.data()[c]) * inv;
                gb += g;
            }
        }
        grad_gamma.data_mut()[c] = gg;
        grad_beta.data_mut()[c] = gb;
    }
    Ok((grad_x, grad_gamma, grad_beta))
}

/// Global average pooling: `(N, C, H, W) -> (N, C, 1, 1)`, spatial mean.
pub fn global_avgpool<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    let plane = xs.h * xs.w;
    let inv = E::ONE / E::from_f64(plane as f64);
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, 1, 1))?;
    let xd = x.data();
    for b in 0..xs.n {
        for c in 0..xs.c {
            let base = (b * xs.c + c) * plane;
            let mut acc = E::ZERO;
            for i in base..base + plane {
                acc += xd[i];
            }
            out.data_mut()[b * xs.c + c] = acc * inv;
        }
    }
    Ok(out)
}

/// Backward of global average pooling: spreads each channel gradient evenly
/// over the spatial plane.
pub fn global_avgpool_backward<E: Element>(
    x_shape: Shape,
    grad_out: &Tensor<E>,
) -> Result<Tensor<E>> {
    let expect = Shape::new(x_shape.n, x_shape.c, 1, 1);
    if grad_out.shape() != expect {
        return Err(Error::ShapeMismatch(format!(
            "avgpool backward: grad_out {} does not match {}",
            grad_out.shape(),
            expect
        )));
    }
    let plane = x_shape.h * x_shape.w;
    let inv = E::ONE / E::from_f64(plane as f64);
    let mut grad_x = Tensor::zeros(x_shape)?;
    for b in 0..x_shape.n {
        for c in 0..x_shape.c {
            let g = grad_out.data()[b * x_shape.c + c] * inv;
            let base = (b * x_shape.c + c) * plane;
            for i in base..base + plane {
                grad_x.data_mut()[i] = g;
            }
        }
    }
    Ok(grad_x)
}

/// Elementwise sum of two same-shape tensors.
pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "add: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Number of channels that participate in a partial residual add:
/// `round_half_up(alpha * channels)`.
pub fn partial_split(alpha: f64, channels: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    Ok(round_half_up(alpha * channels as f64).min(channels))
}

/// Partial residual addition: the first `round(alpha * M)` channels receive
/// `residual + identity`; the remaining channels pass `residual` through
/// unchanged.
pub fn partial_residual_add<E: Element>(
    residual: &Tensor<E>,
    identity: &Tensor<E>,
    alpha: f64,
) -> Result<Tensor<E>> {
    if residual.shape() != identity.shape() {
        return Err(Error::ShapeMismatch(format!(
            "partial_residual_add: residual {} vs identity {}",
            residual.shape(),
            identity.shape()
        )));
    }
    let s = residual.shape();
    let split = partial_split(alpha, s.c)?;
    let mut out = residual.clone();
    let plane = s.h * s.w;
    for b in 0..s.n {
        for c in 0..split {
            let base = (b * s.c + c) * plane;
            for i in base..base + plane {
                out.data_mut()[i] += identity.data()[i];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t32(shape: Shape, data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn round_half_up_examples() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.49), 2);
        assert_eq!(round_half_up(0.0), 0);
        // alpha = 1/3 of 96 channels participates as 32
        assert_eq!(round_half_up((1.0 / 3.0) * 96.0), 32);
    }

    #[test]
    fn round_channels_examples() {
        assert_eq!(round_channels(96.0, 8), 96);
        assert_eq!(round_channels(72.0, 8), 72);
        assert_eq!(round_channels(33.6, 8), 32);
        assert_eq!(round_channels(32.0 * 0.35, 8), 16);
    }

    #[test]
    fn same_padding_law_all_sizes_1_to_14() {
        for len in 1..=14usize {
            for stride in [1usize, 2] {
                for k in [1usize, 3] {
                    let (lo, hi) = same_padding(len, k, stride);
                    let out = conv_out_len(len, stride);
                    assert_eq!(out, len.div_ceil(stride));
                    // padded length covers exactly the receptive span
                    assert_eq!(len + lo + hi, len.max((out - 1) * stride + k));
                    assert!(hi >= lo, "extra padding must go on the end side");
                }
            }
        }
    }

    #[test]
    fn conv_hand_example_2x2_all_ones_kernel() {
        // x = [[1,2],[3,4]], 3x3 kernel of ones, stride 1, same padding
        let x = t32(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::<f32>::filled(Shape::new(1, 1, 3, 3), 1.0).unwrap();
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv_identity_pointwise() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f32>::random_normal(Shape::new(2, 3, 4, 4), &mut rng, 0.0, 1.0).unwrap();
        // identity channel-mixing 1x1 kernel
        let mut w = Tensor::<f32>::zeros(Shape::new(3, 3, 1, 1)).unwrap();
        for c in 0..3 {
            w.set(c, c, 0, 0, 1.0);
        }
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_delta_depthwise() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f32>::random_normal(Shape::new(1, 4, 5, 5), &mut rng, 0.0, 1.0).unwrap();
        let mut w = Tensor::<f32>::zeros(Shape::new(4, 1, 3, 3)).unwrap();
        for c in 0..4 {
            w.set(c, 0, 1, 1, 1.0);
        }
        let y = conv2d(&x, &w, 1, 4).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_stride_two_shape() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 7, 9)).unwrap();
        let w = Tensor::<f32>::zeros(Shape::new(5, 2, 3, 3)).unwrap();
        let y = conv2d(&x, &w, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 5, 4, 5));
    }

    #[test]
    fn conv_group_mismatch_is_config_error() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4)).unwrap();
        let w = Tensor::<f32>::zeros(Shape::new(4, 1, 3, 3)).unwrap();
        assert!(matches!(conv2d(&x, &w, 1, 2), Err(Error::Config(_))));
    }

    #[test]
    fn conv_backward_zero_grad_gives_zero() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f32>::random_normal(Shape::new(1, 2, 4, 4), &mut rng, 0.0, 1.0).unwrap();
        let w = Tensor::<f32>::random_normal(Shape::new(3, 2, 3, 3), &mut rng, 0.0, 1.0).unwrap();
        let go = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4)).unwrap();
        let (gx, gw) = conv2d_backward(&x, &w, 1, 1, &go).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_identity_pointwise_passes_grad() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f32>::random_normal(Shape::new(1, 3, 4, 4), &mut rng, 0.0, 1.0).unwrap();
        let mut w = Tensor::<f32>::zeros(Shape::new(3, 3, 1, 1)).unwrap();
        for c in 0..3 {
            w.set(c, c, 0, 0, 1.0);
        }
        let go = Tensor::<f32>::random_normal(Shape::new(1, 3, 4, 4), &mut rng, 0.0, 1.0).unwrap();
        let (gx, _) = conv2d_backward(&x, &w, 1, 1, &go).unwrap();
        assert_eq!(gx, go);
    }

    #[test]
    fn relu6_definition_and_idempotence() {
        let x = t32(Shape::new(1, 1, 1, 3), vec![-1.0, 3.0, 7.0]);
        let y = relu6(&x);
        assert_eq!(y.data(), &[0.0, 3.0, 6.0]);
        assert_eq!(relu6(&y), y);
    }

    #[test]
    fn relu6_backward_gates_on_open_interval() {
        let x = t32(Shape::new(1, 1, 1, 4), vec![-1.0, 3.0, 7.0, 0.0]);
        let g = Tensor::<f32>::filled(x.shape(), 2.0).unwrap();
        let gx = relu6_backward(&x, &g).unwrap();
        assert_eq!(gx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_identity_params_is_identity_with_zero_eps() {
        let mut rng = Rng::new(5);
        let x = Tensor::<f64>::random_normal(Shape::new(2, 3, 2, 2), &mut rng, 0.0, 1.0).unwrap();
        let mut bn = BatchNorm::<f64>::identity(3).unwrap();
        bn.eps = 0.0;
        assert_eq!(bn.forward(&x).unwrap(), x);
    }

    #[test]
    fn batchnorm_affine_map() {
        let x = Tensor::<f64>::filled(Shape::new(1, 2, 2, 2), 5.0).unwrap();
        let mut bn = BatchNorm::<f64>::identity(2).unwrap();
        bn.eps = 0.0;
        bn.gamma = Tensor::filled(Shape::new(1, 2, 1, 1), 2.0).unwrap();
        bn.beta = Tensor::filled(Shape::new(1, 2, 1, 1), 1.0).unwrap();
        let y = bn.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 11.0));
    }

    #[test]
    fn batchnorm_channel_mismatch_is_config_error() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2)).unwrap();
        let bn = BatchNorm::<f32>::identity(4).unwrap();
        assert!(matches!(bn.forward(&x), Err(Error::Config(_))));
    }

    #[test]
    fn batchnorm_beta_gradient_is_channel_sum() {
        let mut rng = Rng::new(6);
        let x = Tensor::<f64>::random_normal(Shape::new(2, 3, 2, 2), &mut rng, 0.0, 1.0).unwrap();
        let go = Tensor::<f64>::random_normal(x.shape(), &mut rng, 0.0, 1.0).unwrap();
        let bn = BatchNorm::<f64>::identity(3).unwrap();
        let (_, _, gb) =
            batchnorm_backward(&x, &bn.gamma, &bn.running_mean, &bn.running_var, bn.eps, &go)
                .unwrap();
        for c in 0..3 {
            let mut want = 0.0;
            for b in 0..2 {
                for y in 0..2 {
                    for xx in 0..2 {
                        want += go.get(b, c, y, xx);
                    }
                }
            }
            assert!((gb.data()[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn avgpool_constant_and_sum_identity() {
        let x = Tensor::<f32>::filled(Shape::new(2, 3, 4, 4), 2.5).unwrap();
        let y = global_avgpool(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 1, 1));
        assert!(y.data().iter().all(|&v| v == 2.5));

        let mut rng = Rng::new(7);
        let x = Tensor::<f64>::random_normal(Shape::new(1, 2, 3, 5), &mut rng, 0.0, 1.0).unwrap();
        let y = global_avgpool(&x).unwrap();
        for c in 0..2 {
            let mut sum = 0.0;
            for yy in 0..3 {
                for xx in 0..5 {
                    sum += x.get(0, c, yy, xx);
                }
            }
            assert!((y.get(0, c, 0, 0) * 15.0 - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_add_alpha_extremes() {
        let mut rng = Rng::new(8);
        let r = Tensor::<f32>::random_normal(Shape::new(1, 4, 2, 2), &mut rng, 0.0, 1.0).unwrap();
        let i = Tensor::<f32>::random_normal(r.shape(), &mut rng, 0.0, 1.0).unwrap();
        let full = partial_residual_add(&r, &i, 1.0).unwrap();
        assert_eq!(full, add(&r, &i).unwrap());
        let none = partial_residual_add(&r, &i, 0.0).unwrap();
        assert_eq!(none, r);
    }

    #[test]
    fn partial_add_half_of_four_channels() {
        let r = Tensor::<f32>::zeros(Shape::new(1, 4, 1, 1)).unwrap();
        let i = Tensor::<f32>::filled(r.shape(), 1.0).unwrap();
        let y = partial_residual_add(&r, &i, 0.5).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn partial_add_rejects_bad_alpha() {
        let r = Tensor::<f32>::zeros(Shape::new(1, 4, 1, 1)).unwrap();
        assert!(partial_residual_add(&r, &r, 1.5).is_err());
        assert!(partial_residual_add(&r, &r, -0.1).is_err());
    }
}
