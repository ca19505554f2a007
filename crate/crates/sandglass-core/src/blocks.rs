//! Residual block families: sandglass, inverted residual (plus a
//! two-depthwise variant), classic bottleneck, and the three design-study
//! variants A/B/C.
//!
//! Activation policy (fixed per family, batch norm after every conv):
//! - Sandglass-family blocks (sandglass, classic, A, B, C) place ReLU6
//!   after the FIRST conv and the PENULTIMATE conv only; every other conv —
//!   in particular the one feeding the shortcut add — is linear.
//! - Inverted-family blocks (inverted, inverted-2dw) place ReLU6 after
//!   every conv except the final projection.
//!
//! Shortcut rule, uniform across families: a residual connection exists iff
//! `stride == 1 && in_channels == out_channels`. The sandglass block uses
//! the partial residual add over the first `round(alpha*M)` channels; every
//! other family adds the full tensor.

use crate::error::{Error, Result};
use crate::ops::{self, BatchNorm};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Element, Shape, Tensor};

/// Per-conv activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu6,
}

/// The block families this crate can build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Hourglass profile: wide depthwise ends, narrow pointwise middle.
    Sandglass,
    /// Expand -> depthwise -> project.
    InvertedResidual,
    /// Inverted residual with two consecutive middle depthwise convs.
    InvertedResidual2Dw,
    /// Reduce -> full 3x3 conv -> expand (ResNet-style bottleneck).
    ClassicBottleneck,
    /// Reduce -> depthwise (in the bottleneck) -> expand.
    VariantA,
    /// Reduce -> two depthwise convs -> expand.
    VariantB,
    /// Depthwise -> expand -> reduce -> depthwise (pointwise pair swapped
    /// inside an inverted-topology block).
    VariantC,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Sandglass => "sandglass",
            BlockKind::InvertedResidual => "inverted",
            BlockKind::InvertedResidual2Dw => "inverted-2dw",
            BlockKind::ClassicBottleneck => "classic",
            BlockKind::VariantA => "variant-a",
            BlockKind::VariantB => "variant-b",
            BlockKind::VariantC => "variant-c",
        }
    }

    pub fn parse(s: &str) -> Option<BlockKind> {
        Some(match s {
            "sandglass" => BlockKind::Sandglass,
            "inverted" => BlockKind::InvertedResidual,
            "inverted-2dw" => BlockKind::InvertedResidual2Dw,
            "classic" => BlockKind::ClassicBottleneck,
            "variant-a" => BlockKind::VariantA,
            "variant-b" => BlockKind::VariantB,
            "variant-c" => BlockKind::VariantC,
            _ => return None,
        })
    }

    pub const ALL: [BlockKind; 7] = [
        BlockKind::Sandglass,
        BlockKind::InvertedResidual,
        BlockKind::InvertedResidual2Dw,
        BlockKind::ClassicBottleneck,
        BlockKind::VariantA,
        BlockKind::VariantB,
        BlockKind::VariantC,
    ];
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters of one block.
///
/// `ratio` is the channel reduction ratio `t` for bottleneck-style families
/// (sandglass, classic, A, B) and the expansion ratio for inverted-style
/// families (inverted, inverted-2dw, C).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub ratio: u32,
    pub stride: usize,
    /// Identity-tensor multiplier for the partial residual add
    /// (sandglass only; must be 1.0 for every other family).
    pub alpha: f64,
}

impl BlockSpec {
    pub fn new(
        kind: BlockKind,
        in_channels: usize,
        out_channels: usize,
        ratio: u32,
        stride: usize,
    ) -> BlockSpec {
        BlockSpec {
            kind,
            in_channels,
            out_channels,
            ratio,
            stride,
            alpha: 1.0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> BlockSpec {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!(
                "channel counts must be >= 1, got in={} out={}",
                self.in_channels, self.out_channels
            )));
        }
        if self.ratio == 0 {
            return Err(Error::Config("ratio t must be >= 1".into()));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Config(format!(
                "stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.kind != BlockKind::Sandglass && self.alpha != 1.0 {
            return Err(Error::Config(format!(
                "alpha != 1 is only supported by the sandglass block, got alpha={} for {}",
                self.alpha, self.kind
            )));
        }
        Ok(())
    }

    /// Uniform shortcut rule.
    pub fn has_shortcut(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

/// Width of the pointwise bottleneck for reduction-style blocks
/// (sandglass, classic, variants A and B).
///
/// `h = round_half_up(M / t)`; if that is zero the spec is rejected. When
/// `h` falls below `N/6` it is lifted to `round_channels(ceil(N/6), 16)` —
/// without this floor the narrow early stages starve and the published
/// complexity of the reference networks is unreachable.
pub fn bottleneck_width(m: usize, n: usize, t: u32) -> Result<usize> {
    let h = ops::round_half_up(m as f64 / t as f64);
    if h == 0 {
        return Err(Error::Config(format!(
            "bottleneck width rounds to zero: in_channels={m}, t={t}"
        )));
    }
    if (h as f64) < n as f64 / 6.0 {
        Ok(ops::round_channels((n as f64 / 6.0).ceil(), 16))
    } else {
        Ok(h)
    }
}

/// One convolution with optional batch norm, optional folded bias, and an
/// activation. The building unit of both blocks and model stems/heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit<E: Element> {
    pub name: String,
    pub weight: Tensor<E>,
    pub stride: usize,
    pub groups: usize,
    /// Folded per-output-channel bias. Plain built models carry none; the
    /// quantizer introduces it when batch norm is folded into the weights.
    pub bias: Option<Vec<E>>,
    pub bn: Option<BatchNorm<E>>,
    pub act: Activation,
}

impl<E: Element> ConvUnit<E> {
    /// Zero-initialized conv (+ identity BN when `bn` is set).
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bn: bool,
        act: Activation,
    ) -> Result<ConvUnit<E>> {
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::Config(format!(
                "channels must divide groups: in={in_channels} out={out_channels} groups={groups}"
            )));
        }
        let weight = Tensor::zeros(Shape::new(out_channels, in_channels / groups, k, k))?;
        Ok(ConvUnit {
            name: name.to_string(),
            weight,
            stride,
            groups,
            bias: None,
            bn: if bn {
                Some(BatchNorm::identity(out_channels)?)
            } else {
                None
            },
            act,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels() && self.groups == self.out_channels()
    }

    /// Short layer-kind label for reports: "conv3x3", "dw3x3", "conv1x1".
    pub fn kind_str(&self) -> String {
        let k = self.kernel();
        if self.is_depthwise() {
            format!("dw{k}x{k}")
        } else {
            format!("conv{k}x{k}")
        }
    }

    /// Draw weights from normal(0, sqrt(2/fan_out)) and reset BN to
    /// identity. `fan_out = k*k*out_channels/groups` (9 per filter for 3x3
    /// depthwise).
    pub fn init_weights(&mut self, rng: &mut Rng) -> Result<()> {
        let k = self.kernel();
        let fan_out = (k * k * self.out_channels() / self.groups) as f64;
        self.weight =
            Tensor::random_normal(self.weight.shape(), rng, 0.0, (2.0 / fan_out).sqrt())?;
        if self.bn.is_some() {
            self.bn = Some(BatchNorm::identity(self.out_channels())?);
        }
        self.bias = None;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut y = ops::conv2d(x, &self.weight, self.stride, self.groups)?;
        if let Some(bias) = &self.bias {
            let s = y.shape();
            if bias.len() != s.c {
                return Err(Error::Config(format!(
                    "bias length {} does not match {} output channels",
                    bias.len(),
                    s.c
                )));
            }
            let plane = s.h * s.w;
            for b in 0..s.n {
                for c in 0..s.c {
                    let base = (b * s.c + c) * plane;
                    for i in base..base + plane {
                        y.data_mut()[i] += bias[c];
                    }
                }
            }
        }
        if let Some(bn) = &self.bn {
            y = bn.forward(&y)?;
        }
        Ok(match self.act {
            Activation::Relu6 => ops::relu6(&y),
            Activation::Linear => y,
        })
    }

    /// Record this unit on an autodiff tape. Weights and BN gamma/beta
    /// become fresh leaves each call.
    pub fn forward_tape(&self, tape: &mut Tape<E>, x: NodeId) -> Result<NodeId> {
        if self.bias.is_some() {
            return Err(Error::Config(
                "tape forward does not support folded biases".into(),
            ));
        }
        let w = tape.leaf(self.weight.clone());
        let mut y = tape.conv2d(x, w, self.stride, self.groups)?;
        if let Some(bn) = &self.bn {
            let g = tape.leaf(bn.gamma.clone());
            let b = tape.leaf(bn.beta.clone());
            y = tape.batchnorm(y, g, b, &bn.running_mean, &bn.running_var, bn.eps)?;
        }
        Ok(match self.act {
            Activation::Relu6 => tape.relu6(y),
            Activation::Linear => y,
        })
    }

    /// Output spatial length for an input spatial length.
    pub fn out_len(&self, len: usize) -> usize {
        ops::conv_out_len(len, self.stride)
    }
}

/// A built residual block: an ordered conv pipeline plus the shortcut flag.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGraph<E: Element> {
    pub spec: BlockSpec,
    pub units: Vec<ConvUnit<E>>,
    pub shortcut: bool,
}

impl<E: Element> BlockGraph<E> {
    /// Assemble the conv pipeline for `spec` with zero weights and identity
    /// batch norms. Use [`BlockGraph::init_weights`] to randomize.
    pub fn build(spec: BlockSpec) -> Result<BlockGraph<E>> {
        spec.validate()?;
        let (m, n, t, s) = (
            spec.in_channels,
            spec.out_channels,
            spec.ratio,
            spec.stride,
        );
        use Activation::{Linear, Relu6};
        let units: Vec<ConvUnit<E>> = match spec.kind {
            BlockKind::Sandglass => {
                let h = bottleneck_width(m, n, t)?;
                vec![
                    ConvUnit::new("dw1", m, m, 3, 1, m, true, Relu6)?,
                    ConvUnit::new("pw_reduce", m, h, 1, 1, 1, true, Linear)?,
                    ConvUnit::new("pw_expand", h, n, 1, 1, 1, true, Relu6)?,
                    ConvUnit::new("dw2", n, n, 3, s, n, true, Linear)?,
                ]
            }
            BlockKind::InvertedResidual => {
                let e = m * t as usize;
                if t == 1 {
                    vec![
                        ConvUnit::new("dw", m, m, 3, s, m, true, Relu6)?,
                        ConvUnit::new("pw_project", m, n, 1, 1, 1, true, Linear)?,
                    ]
                } else {
                    vec![
                        ConvUnit::new("pw_expand", m, e, 1, 1, 1, true, Relu6)?,
                        ConvUnit::new("dw", e, e, 3, s, e, true, Relu6)?,
                        ConvUnit::new("pw_project", e, n, 1, 1, 1, true, Linear)?,
                    ]
                }
            }
            BlockKind::InvertedResidual2Dw => {
                let e = m * t as usize;
                if t == 1 {
                    vec![
                        ConvUnit::new("dw1", m, m, 3, 1, m, true, Relu6)?,
                        ConvUnit::new("dw2", m, m, 3, s, m, true, Relu6)?,
                        ConvUnit::new("pw_project", m, n, 1, 1, 1, true, Linear)?,
                    ]
                } else {
                    vec![
                        ConvUnit::new("pw_expand", m, e, 1, 1, 1, true, Relu6)?,
                        ConvUnit::new("dw1", e, e, 3, 1, e, true, Relu6)?,
                        ConvUnit::new("dw2", e, e, 3, s, e, true, Relu6)?,
                        ConvUnit::new("pw_project", e, n, 1, 1, 1, true, Linear)?,
                    ]
                }
            }
            BlockKind::ClassicBottleneck => {
                let h = bottleneck_width(m, n, t)?;
                vec![
                    ConvUnit::new("pw_reduce", m, h, 1, 1, 1, true, Relu6)?,
                    ConvUnit::new("conv", h, h, 3, s, 1, true, Relu6)?,
                    ConvUnit::new("pw_expand", h, n, 1, 1, 1, true, Linear)?,
                ]
            }
            BlockKind::VariantA => {
                let h = bottleneck_width(m, n, t)?;
                vec![
                    ConvUnit::new("pw_reduce", m, h, 1, 1, 1, true, Relu6)?,
                    ConvUnit::new("dw", h, h, 3, s, h, true, Relu6)?,
                    ConvUnit::new("pw_expand", h, n, 1, 1, 1, true, Linear)?,
                ]
            }
            BlockKind::VariantB => {
                let h = bottleneck_width(m, n, t)?;
                vec![
                    ConvUnit::new("pw_reduce", m, h, 1, 1, 1, true, Relu6)?,
                    ConvUnit::new("dw1", h, h, 3, 1, h, true, Linear)?,
                    ConvUnit::new("dw2", h, h, 3, s, h, true, Relu6)?,
                    ConvUnit::new("pw_expand", h, n, 1, 1, 1, true, Linear)?,
                ]
            }
            BlockKind::VariantC => {
                let e = m * t as usize;
                if t == 1 {
                    vec![
                        ConvUnit::new("dw1", m, m, 3, 1, m, true, Relu6)?,
                        ConvUnit::new("pw_project", m, n, 1, 1, 1, true, Relu6)?,
                        ConvUnit::new("dw2", n, n, 3, s, n, true, Linear)?,
                    ]
                } else {
                    vec![
                        ConvUnit::new("dw1", m, m, 3, 1, m, true, Relu6)?,
                        ConvUnit::new("pw_expand", m, e, 1, 1, 1, true, Linear)?,
                        ConvUnit::new("pw_reduce", e, n, 1, 1, 1, true, Relu6)?,
                        ConvUnit::new("dw2", n, n, 3, s, n, true, Linear)?,
                    ]
                }
            }
        };
        Ok(BlockGraph {
            spec,
            units,
            shortcut: spec.has_shortcut(),
        })
    }

    /// The activation placed after each conv, in pipeline order.
    pub fn activation_map(&self) -> Vec<Activation> {
        self.units.iter().map(|u| u.act).collect()
    }

    /// Number of ReLU6 sites in the block.
    pub fn relu6_count(&self) -> usize {
        self.units
            .iter()
            .filter(|u| u.act == Activation::Relu6)
            .count()
    }

    pub fn init_weights(&mut self, rng: &mut Rng) -> Result<()> {
        for u in &mut self.units {
            u.init_weights(rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.shape().c != self.spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "block expects {} input channels, got {}",
                self.spec.in_channels,
                x.shape()
            )));
        }
        let mut y = x.clone();
        for u in &self.units {
            y = u.forward(&y)?;
        }
        if self.shortcut {
            if self.spec.kind == BlockKind::Sandglass {
                y = ops::partial_residual_add(&y, x, self.spec.alpha)?;
            } else {
                y = ops::add(&y, x)?;
            }
        }
        Ok(y)
    }

    /// Record the block on an autodiff tape, returning the output node.
    pub fn forward_tape(&self, tape: &mut Tape<E>, x: NodeId) -> Result<NodeId> {
        if tape.value(x).shape().c != self.spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "block expects {} input channels, got {}",
                self.spec.in_channels,
                tape.value(x).shape()
            )));
        }
        let mut y = x;
        for u in &self.units {
            y = u.forward_tape(tape, y)?;
        }
        if self.shortcut {
            y = if self.spec.kind == BlockKind::Sandglass {
                tape.partial_residual_add(y, x, self.spec.alpha)?
            } else {
                tape.add(y, x)?
            };
        }
        Ok(y)
    }

    /// Output shape for a given input shape.
    pub fn out_shape(&self, x: Shape) -> Shape {
        Shape::new(
            x.n,
            self.spec.out_channels,
            ops::conv_out_len(x.h, self.spec.stride),
            ops::conv_out_len(x.w, self.spec.stride),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: BlockKind, m: usize, n: usize, t: u32, s: usize) -> BlockSpec {
        BlockSpec::new(kind, m, n, t, s)
    }

    #[test]
    fn sandglass_table_widths_96_t6() {
        // 96 -> 96 -> 16 -> 96 -> 96 with shortcut
        let b = BlockGraph::<f32>::build(spec(BlockKind::Sandglass, 96, 96, 6, 1)).unwrap();
        assert!(b.shortcut);
        let widths: Vec<(usize, usize)> = b
            .units
            .iter()
            .map(|u| (u.in_channels(), u.out_channels()))
            .collect();
        assert_eq!(widths, vec![(96, 96), (96, 16), (16, 96), (96, 96)]);
        assert_eq!(
            b.activation_map(),
            vec![
                Activation::Relu6,
                Activation::Linear,
                Activation::Relu6,
                Activation::Linear
            ]
        );
    }

    #[test]
    fn sandglass_exactly_two_relu6_sites() {
        for (m, n, t, s) in [(96, 96, 6, 1), (32, 96, 2, 2), (8, 16, 2, 2)] {
            let b = BlockGraph::<f32>::build(spec(BlockKind::Sandglass, m, n, t, s)).unwrap();
            assert_eq!(b.relu6_count(), 2, "sandglass {m}->{n} t={t} s={s}");
            // the shortcut-feeding layers are linear
            assert_eq!(b.units[1].act, Activation::Linear, "pw_reduce must be linear");
            assert_eq!(
                b.units.last().unwrap().act,
                Activation::Linear,
                "final depthwise must be linear"
            );
        }
    }

    #[test]
    fn sandglass_depthwise_at_wide_ends() {
        let b = BlockGraph::<f32>::build(spec(BlockKind::Sandglass, 32, 96, 2, 2)).unwrap();
        assert!(b.units[0].is_depthwise() && b.units[0].out_channels() == 32);
        assert!(b.units[3].is_depthwise() && b.units[3].out_channels() == 96);
        // stride sits on the LAST depthwise only
        assert_eq!(b.units[0].stride, 1);
        assert_eq!(b.units[3].stride, 2);
        assert!(!b.shortcut);
    }

    #[test]
    fn bottleneck_width_zero_is_config_error() {
        assert!(matches!(
            bottleneck_width(8, 8, 32),
            Err(Error::Config(_))
        ));
        assert!(BlockGraph::<f32>::build(spec(BlockKind::Sandglass, 8, 8, 32, 1)).is_err());
    }

    #[test]
    fn zero_branch_with_shortcut_is_identity() {
        // zero weights + identity BN: branch contributes exactly 0
        let b = BlockGraph::<f32>::build(spec(BlockKind::Sandglass, 8, 8, 2, 1)).unwrap();
        let mut rng = Rng::new(20);
        let x = Tensor::<f32>::random_normal(Shape::new(1, 8, 6, 6), &mut rng, 0.0, 1.0).unwrap();
        let y = b.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn inverted_t1_degenerates_to_dwise_sandwich() {
        let b =
            BlockGraph::<f32>::build(spec(BlockKind::InvertedResidual, 32, 16, 1, 1)).unwrap();
        assert_eq!(b.units.len(), 2);
        assert!(b.units[0].is_depthwise());
        assert_eq!(b.units[1].kernel(), 1);
    }

    #[test]
    fn inverted_2dw_has_exactly_two_middle_depthwise() {
        let b =
            BlockGraph::<f32>::build(spec(BlockKind::InvertedResidual2Dw, 16, 16, 6, 1)).unwrap();
        let dws: Vec<&ConvUnit<f32>> =
            b.units.iter().filter(|u| u.is_depthwise()).collect();
        assert_eq!(dws.len(), 2);
        // stride goes on the second depthwise
        let b2 =
            BlockGraph::<f32>::build(spec(BlockKind::InvertedResidual2Dw, 16, 24, 6, 2)).unwrap();
        assert_eq!(b2.units[1].stride, 1);
        assert_eq!(b2.units[2].stride, 2);
    }

    #[test]
    fn variant_widths_and_activations() {
        // A: dw sits at the bottleneck width
        let a = BlockGraph::<f32>::build(spec(BlockKind::VariantA, 96, 96, 6, 1)).unwrap();
        let h = bottleneck_width(96, 96, 6).unwrap();
        assert!(a.units[1].is_depthwise() && a.units[1].out_channels() == h);
        assert_eq!(a.relu6_count(), 2);
        assert_eq!(a.units.last().unwrap().act, Activation::Linear);

        // B: two depthwise convs at the bottleneck width, stride on the second
        let b = BlockGraph::<f32>::build(spec(BlockKind::VariantB, 96, 144, 6, 2)).unwrap();
        assert!(b.units[1].is_depthwise() && b.units[2].is_depthwise());
        assert_eq!(b.units[1].stride, 1);
        assert_eq!(b.units[2].stride, 2);
        assert_eq!(b.relu6_count(), 2);
        assert_eq!(
            b.activation_map(),
            vec![
                Activation::Relu6,
                Activation::Linear,
                Activation::Relu6,
                Activation::Linear
            ]
        );

        // C: dw -> pw (linear) -> pw (relu6) -> dw (linear), expansion e = t*M
        let c = BlockGraph::<f32>::build(spec(BlockKind::VariantC, 16, 24, 6, 2)).unwrap();
        assert_eq!(c.units.len(), 4);
        assert!(c.units[0].is_depthwise() && c.units[3].is_depthwise());
        assert_eq!(c.units[1].out_channels(), 96);
        assert_eq!(c.units[3].stride, 2);
        assert_eq!(c.relu6_count(), 2);
        assert_eq!(c.units[1].act, Activation::Linear);
        assert_eq!(c.units[2].act, Activation::Relu6);
    }

    #[test]
    fn classic_bottleneck_uses_full_conv() {
        let b = BlockGraph::<f32>::build(spec(BlockKind::ClassicBottleneck, 16, 16, 2, 1)).unwrap();
        assert_eq!(b.units.len(), 3);
        assert_eq!(b.units[1].kernel(), 3);
        assert_eq!(b.units[1].groups, 1, "classic middle conv is NOT depthwise");
        assert_eq!(b.relu6_count(), 2);
    }

    #[test]
    fn shortcut_rule_uniform_across_families() {
        for kind in BlockKind::ALL {
            let with = BlockGraph::<f32>::build(spec(kind, 16, 16, 2, 1)).unwrap();
            assert!(with.shortcut, "{kind}: s=1, M=N must have a shortcut");
            let stride2 = BlockGraph::<f32>::build(spec(kind, 16, 16, 2, 2)).unwrap();
            assert!(!stride2.shortcut, "{kind}: s=2 must not have a shortcut");
            let chan = BlockGraph::<f32>::build(spec(kind, 16, 8, 2, 1)).unwrap();
            assert!(!chan.shortcut, "{kind}: M != N must not have a shortcut");
        }
    }

    #[test]
    fn forward_shape_law_grid_all_families() {
        let mut rng = Rng::new(21);
        for kind in BlockKind::ALL {
            for m in [8usize, 16] {
                for n in [8usize, 16] {
                    for t in [2u32, 6] {
                        for s in [1usize, 2] {
                            let mut b = BlockGraph::<f32>::build(spec(kind, m, n, t, s)).unwrap();
                            b.init_weights(&mut rng).unwrap();
                            let x = Tensor::<f32>::random_normal(
                                Shape::new(1, m, 8, 8),
                                &mut rng,
                                0.0,
                                1.0,
                            )
                            .unwrap();
                            let y = b.forward(&x).unwrap();
                            let expect = Shape::new(1, n, 8usize.div_ceil(s), 8usize.div_ceil(s));
                            assert_eq!(
                                y.shape(),
                                expect,
                                "{kind} m={m} n={n} t={t} s={s}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn alpha_rejected_outside_sandglass() {
        let s = spec(BlockKind::InvertedResidual, 8, 8, 2, 1).with_alpha(0.5);
        assert!(BlockGraph::<f32>::build(s).is_err());
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let b = BlockGraph::<f32>::build(spec(BlockKind::Sandglass, 8, 8, 2, 1)).unwrap();
        let x = Tensor::<f32>::zeros(Shape::new(1, 4, 8, 8)).unwrap();
        assert!(matches!(b.forward(&x), Err(Error::ShapeMismatch(_))));
    }
}
