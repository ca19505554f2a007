//! Full network builders (stem -> block stages -> optional head -> global
//! average pool -> 1x1 classifier conv), model-spec JSON, and the `.ncw`
//! weights format.
//!
//! Two topologies are supported:
//! - **Bottleneck topology** (`mobilenext`, `variant-a`, `variant-b`): the
//!   stage table ends in a wide (1280) block stage and the pooled features
//!   go straight into the classifier. The final stage width is never scaled
//!   below its table value.
//! - **Inverted topology** (`mobilenetv2`, `mobilenetv2-2dw`, `variant-c`):
//!   the stage table ends at 320 channels and a 1x1 head conv lifts to
//!   `max(1280, round_channels(1280 * m))` before pooling.

use std::io::{Read, Write};
use std::path::Path;

use crate::blocks::{Activation, BlockGraph, BlockKind, BlockSpec, ConvUnit};
use crate::error::{Error, Result};
use crate::ops::{self, round_channels};
use crate::rng::Rng;
use crate::tensor::{check_magic, read_header_line, Element, Shape, Tensor};

/// Network family selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    MobileNeXt,
    MobileNetV2,
    MobileNetV2TwoDw,
    VariantA,
    VariantB,
    VariantC,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::MobileNeXt => "mobilenext",
            Family::MobileNetV2 => "mobilenetv2",
            Family::MobileNetV2TwoDw => "mobilenetv2-2dw",
            Family::VariantA => "variant-a",
            Family::VariantB => "variant-b",
            Family::VariantC => "variant-c",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        Some(match s {
            "mobilenext" => Family::MobileNeXt,
            "mobilenetv2" => Family::MobileNetV2,
            "mobilenetv2-2dw" => Family::MobileNetV2TwoDw,
            "variant-a" => Family::VariantA,
            "variant-b" => Family::VariantB,
            "variant-c" => Family::VariantC,
            _ => return None,
        })
    }

    pub const ALL: [Family; 6] = [
        Family::MobileNeXt,
        Family::MobileNetV2,
        Family::MobileNetV2TwoDw,
        Family::VariantA,
        Family::VariantB,
        Family::VariantC,
    ];

    /// The block kind the family's stages are built from.
    pub fn block_kind(self) -> BlockKind {
        match self {
            Family::MobileNeXt => BlockKind::Sandglass,
            Family::MobileNetV2 => BlockKind::InvertedResidual,
            Family::MobileNetV2TwoDw => BlockKind::InvertedResidual2Dw,
            Family::VariantA => BlockKind::VariantA,
            Family::VariantB => BlockKind::VariantB,
            Family::VariantC => BlockKind::VariantC,
        }
    }

    /// Whether the family uses the inverted topology (MobileNetV2 stage
    /// table plus a 1280 head conv).
    pub fn inverted_topology(self) -> bool {
        matches!(
            self,
            Family::MobileNetV2 | Family::MobileNetV2TwoDw | Family::VariantC
        )
    }

    /// Default stage table `(t, c, s, b)` for the family.
    pub fn default_stages(self) -> Vec<StageSpec> {
        let kind = self.block_kind();
        let raw: &[(u32, usize, usize, usize)] = if self.inverted_topology() {
            &MOBILENETV2_STAGES
        } else {
            &MOBILENEXT_STAGES
        };
        raw.iter()
            .map(|&(t, c, s, b)| StageSpec {
                block: kind,
                t,
                c,
                s,
                b,
            })
            .collect()
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// MobileNeXt stage table `(t, c, s, b)`: reduction ratio, output channels,
/// first-block stride, repeats. 19 blocks total.
pub const MOBILENEXT_STAGES: [(u32, usize, usize, usize); 8] = [
    (2, 96, 2, 1),
    (6, 144, 1, 1),
    (6, 192, 2, 3),
    (6, 288, 2, 3),
    (6, 384, 1, 4),
    (6, 576, 2, 4),
    (6, 960, 1, 2),
    (6, 1280, 1, 1),
];

/// MobileNetV2 stage table `(t, c, s, b)`: expansion ratio, output channels,
/// first-block stride, repeats. 17 blocks total.
pub const MOBILENETV2_STAGES: [(u32, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 2, 3),
    (6, 64, 2, 4),
    (6, 96, 1, 3),
    (6, 160, 2, 3),
    (6, 320, 1, 1),
];

/// One row of a stage table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub block: BlockKind,
    /// Reduction ratio (bottleneck-style blocks) or expansion ratio
    /// (inverted-style blocks).
    pub t: u32,
    /// Unscaled output channels; the width multiplier applies on build.
    pub c: usize,
    /// Stride of the first block in the stage (repeats use stride 1).
    pub s: usize,
    /// Repeat count.
    pub b: usize,
}

/// Model-level configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub family: Family,
    pub width_multiplier: f64,
    pub resolution: usize,
    pub num_classes: usize,
    /// Identity-tensor multiplier threaded to every sandglass block.
    pub alpha: f64,
    /// Channel-rounding base.
    pub divisor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: Family::MobileNeXt,
            width_multiplier: 1.0,
            resolution: 224,
            num_classes: 1000,
            alpha: 1.0,
            divisor: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0) || !self.width_multiplier.is_finite() {
            return Err(Error::Config(format!(
                "width multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.divisor == 0 {
            return Err(Error::Config("divisor must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// A block instance inside a model, tagged with its stage position.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBlock<E: Element> {
    pub stage: usize,
    pub index_in_stage: usize,
    pub graph: BlockGraph<E>,
}

impl<E: Element> ModelBlock<E> {
    /// Layer-id prefix: "s{stage}.b{index}".
    pub fn id(&self) -> String {
        format!("s{}.b{}", self.stage, self.index_in_stage)
    }
}

/// A fully assembled network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<E: Element> {
    pub config: ModelConfig,
    pub stages: Vec<StageSpec>,
    pub stem: ConvUnit<E>,
    pub blocks: Vec<ModelBlock<E>>,
    pub head: Option<ConvUnit<E>>,
    pub classifier: ConvUnit<E>,
}

/// Observer injected into [`ModelGraph::forward_hooked`]. Called after every
/// named site with the site's activation; returning `Some` replaces the
/// activation (used for fake quantization), `None` passes it through.
pub trait ForwardHook<E: Element> {
    fn site(&mut self, id: &str, t: &Tensor<E>) -> Option<Tensor<E>>;
}

/// No-op hook: plain forward.
pub struct NoHook;

impl<E: Element> ForwardHook<E> for NoHook {
    fn site(&mut self, _id: &str, _t: &Tensor<E>) -> Option<Tensor<E>> {
        None
    }
}

/// Build a model with its family's default stage table. Weights start at
/// zero; call [`ModelGraph::init_weights`] for random initialization.
pub fn build_model<E: Element>(config: &ModelConfig) -> Result<ModelGraph<E>> {
    ModelGraph::from_stages(config, config.family.default_stages())
}

impl<E: Element> ModelGraph<E> {
    /// Build from an explicit stage table (toy models, imported specs).
    pub fn from_stages(config: &ModelConfig, stages: Vec<StageSpec>) -> Result<ModelGraph<E>> {
        config.validate()?;
        if stages.is_empty() {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        let m = config.width_multiplier;
        let divisor = config.divisor;
        let inverted = config.family.inverted_topology();

        let stem_c = round_channels(32.0 * m, divisor);
        let stem = ConvUnit::new("stem", 3, stem_c, 3, 2, 1, true, Activation::Relu6)?;

        let mut blocks = Vec::new();
        let mut cin = stem_c;
        let last_stage = stages.len() - 1;
        for (si, st) in stages.iter().enumerate() {
            if st.b == 0 {
                return Err(Error::Config(format!("stage {si}: repeat count b must be >= 1")));
            }
            let scaled = round_channels(st.c as f64 * m, divisor);
            // The final wide stage of the bottleneck topology keeps at least
            // its table width (1280 is never scaled down).
            let cout = if !inverted && si == last_stage {
                scaled.max(st.c)
            } else {
                scaled
            };
            for bi in 0..st.b {
                let stride = if bi == 0 { st.s } else { 1 };
                let alpha = if st.block == BlockKind::Sandglass {
                    config.alpha
                } else {
                    1.0
                };
                let spec = BlockSpec::new(st.block, cin, cout, st.t, stride).with_alpha(alpha);
                blocks.push(ModelBlock {
                    stage: si,
                    index_in_stage: bi,
                    graph: BlockGraph::build(spec)?,
                });
                cin = cout;
            }
        }

        let head = if inverted {
            let head_c = 1280usize.max(round_channels(1280.0 * m, divisor));
            Some(ConvUnit::new(
                "head",
                cin,
                head_c,
                1,
                1,
                1,
                true,
                Activation::Relu6,
            )?)
        } else {
            None
        };
        let feat_c = head.as_ref().map_or(cin, |h| h.out_channels());
        let classifier = ConvUnit::new(
            "classifier",
            feat_c,
            config.num_classes,
            1,
            1,
            1,
            false,
            Activation::Linear,
        )?;

        Ok(ModelGraph {
            config: *config,
            stages,
            stem,
            blocks,
            head,
            classifier,
        })
    }

    /// Draw all weights from the seed-determined stream, in walk order
    /// (stem, blocks in order, head, classifier). BN parameters reset to
    /// identity.
    pub fn init_weights(&mut self, seed: u64) -> Result<()> {
        let mut rng = Rng::new(seed);
        self.stem.init_weights(&mut rng)?;
        for b in &mut self.blocks {
            b.graph.init_weights(&mut rng)?;
        }
        if let Some(h) = &mut self.head {
            h.init_weights(&mut rng)?;
        }
        self.classifier.init_weights(&mut rng)?;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.forward_hooked(x, &mut NoHook)
    }

    /// Forward pass with a site observer. Site ids, in order: `input`,
    /// `stem`, `s{i}.b{j}.{unit}` after each conv unit, `s{i}.b{j}.add`
    /// after each shortcut, `head`, `pool`, `logits`.
    pub fn forward_hooked(
        &self,
        x: &Tensor<E>,
        hook: &mut dyn ForwardHook<E>,
    ) -> Result<Tensor<E>> {
        let r = self.config.resolution;
        let xs = x.shape();
        if xs.c != 3 || xs.h != r || xs.w != r {
            return Err(Error::ShapeMismatch(format!(
                "model expects input (n,3,{r},{r}), got {xs}"
            )));
        }
        let mut y = x.clone();
        if let Some(t) = hook.site("input", &y) {
            y = t;
        }
        y = self.stem.forward(&y)?;
        if let Some(t) = hook.site("stem", &y) {
            y = t;
        }
        for b in &self.blocks {
            let prefix = b.id();
            let input = y;
            let mut z = input.clone();
            for u in &b.graph.units {
                z = u.forward(&z)?;
                if let Some(t) = hook.site(&format!("{prefix}.{}", u.name), &z) {
                    z = t;
                }
            }
            if b.graph.shortcut {
                z = if b.graph.spec.kind == BlockKind::Sandglass {
                    ops::partial_residual_add(&z, &input, b.graph.spec.alpha)?
                } else {
                    ops::add(&z, &input)?
                };
                if let Some(t) = hook.site(&format!("{prefix}.add"), &z) {
                    z = t;
                }
            }
            y = z;
        }
        if let Some(h) = &self.head {
            y = h.forward(&y)?;
            if let Some(t) = hook.site("head", &y) {
                y = t;
            }
        }
        y = ops::global_avgpool(&y)?;
        if let Some(t) = hook.site("pool", &y) {
            y = t;
        }
        y = self.classifier.forward(&y)?;
        if let Some(t) = hook.site("logits", &y) {
            y = t;
        }
        Ok(y)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// All conv units with their layer ids, in forward order.
    pub fn unit_walk(&self) -> Vec<(String, &ConvUnit<E>)> {
        let mut out = vec![("stem".to_string(), &self.stem)];
        for b in &self.blocks {
            for u in &b.graph.units {
                out.push((format!("{}.{}", b.id(), u.name), u));
            }
        }
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        out.push(("classifier".to_string(), &self.classifier));
        out
    }

    fn unit_walk_mut(&mut self) -> Vec<(String, &mut ConvUnit<E>)> {
        let mut out: Vec<(String, &mut ConvUnit<E>)> =
            vec![("stem".to_string(), &mut self.stem)];
        for b in &mut self.blocks {
            let id = format!("s{}.b{}", b.stage, b.index_in_stage);
            for u in &mut b.graph.units {
                out.push((format!("{id}.{}", u.name), u));
            }
        }
        if let Some(h) = &mut self.head {
            out.push(("head".to_string(), h));
        }
        out.push(("classifier".to_string(), &mut self.classifier));
        out
    }

    /// Every parameter tensor with its id and role, in serialization order.
    /// Roles: "weight", "gamma", "beta", "running_mean", "running_var".
    pub fn named_tensors(&self) -> Vec<(String, &'static str, &Tensor<E>)> {
        let mut out = Vec::new();
        for (id, u) in self.unit_walk() {
            out.push((id.clone(), "weight", &u.weight));
            if let Some(bn) = &u.bn {
                out.push((id.clone(), "gamma", &bn.gamma));
                out.push((id.clone(), "beta", &bn.beta));
                out.push((id.clone(), "running_mean", &bn.running_mean));
                out.push((id, "running_var", &bn.running_var));
            }
        }
        out
    }

    /// Output shape after each stage (batch 1), in stage order.
    pub fn stage_output_shapes(&self) -> Vec<Shape> {
        let mut out = Vec::new();
        let mut shape = Shape::new(
            1,
            self.stem.out_channels(),
            ops::conv_out_len(self.config.resolution, self.stem.stride),
            ops::conv_out_len(self.config.resolution, self.stem.stride),
        );
        for b in &self.blocks {
            shape = b.graph.out_shape(shape);
            if out.len() == b.stage {
                out.push(shape);
            } else {
                out[b.stage] = shape;
            }
        }
        out
    }

    /// Spatial shape of the stem output (batch 1).
    pub fn stem_output_shape(&self) -> Shape {
        Shape::new(
            1,
            self.stem.out_channels(),
            ops::conv_out_len(self.config.resolution, self.stem.stride),
            ops::conv_out_len(self.config.resolution, self.stem.stride),
        )
    }
}

/// One resolved layer placement for the analyzer and shape tests (batch 1,
/// spatial from the model resolution).
#[derive(Clone, Debug)]
pub enum LayerPlacement {
    /// A conv unit (with optional BN folded AFTER it as a separate row).
    Conv {
        id: String,
        kind: String,
        input: Shape,
        output: Shape,
        weight: Shape,
        groups: usize,
        has_bn: bool,
    },
    /// A residual add joining two tensors of `shape`.
    Add { id: String, shape: Shape },
    /// Global average pooling.
    Pool { id: String, input: Shape, output: Shape },
}

impl<E: Element> ModelGraph<E> {
    /// Resolve every layer with concrete shapes at the configured
    /// resolution, batch 1, in forward order.
    pub fn layer_walk(&self) -> Vec<LayerPlacement> {
        fn push_unit<E: Element>(
            out: &mut Vec<LayerPlacement>,
            cur: &mut Shape,
            id: String,
            u: &ConvUnit<E>,
        ) {
            let output = Shape::new(
                1,
                u.out_channels(),
                ops::conv_out_len(cur.h, u.stride),
                ops::conv_out_len(cur.w, u.stride),
            );
            out.push(LayerPlacement::Conv {
                id,
                kind: u.kind_str(),
                input: *cur,
                output,
                weight: u.weight.shape(),
                groups: u.groups,
                has_bn: u.bn.is_some(),
            });
            *cur = output;
        }

        let mut out = Vec::new();
        let r = self.config.resolution;
        let mut cur = Shape::new(1, 3, r, r);

        push_unit(&mut out, &mut cur, "stem".into(), &self.stem);
        for b in &self.blocks {
            let block_in = cur;
            for u in &b.graph.units {
                push_unit(&mut out, &mut cur, format!("{}.{}", b.id(), u.name), u);
            }
            if b.graph.shortcut {
                debug_assert_eq!(block_in, cur);
                out.push(LayerPlacement::Add {
                    id: format!("{}.add", b.id()),
                    shape: cur,
                });
            }
        }
        if let Some(h) = &self.head {
            push_unit(&mut out, &mut cur, "head".into(), h);
        }
        let pooled = Shape::new(1, cur.c, 1, 1);
        out.push(LayerPlacement::Pool {
            id: "pool".into(),
            input: cur,
            output: pooled,
        });
        cur = pooled;
        push_unit(&mut out, &mut cur, "classifier".into(), &self.classifier);
        out
    }
}

// ---------------------------------------------------------------------------
// Model spec JSON
// ---------------------------------------------------------------------------

fn jkey<'a>(
    obj: &'a serde_json::Map<String, serde_json::Value>,
    ptr: &str,
    key: &str,
) -> Result<&'a serde_json::Value> {
    obj.get(key).ok_or_else(|| Error::Parse {
        pointer: format!("{ptr}/{key}"),
        msg: "missing required field".into(),
    })
}

fn jf64(v: &serde_json::Value, ptr: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::Parse {
        pointer: ptr.into(),
        msg: format!("expected a number, got {v}"),
    })
}

fn jusize(v: &serde_json::Value, ptr: &str) -> Result<usize> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| Error::Parse {
            pointer: ptr.into(),
            msg: format!("expected a non-negative integer, got {v}"),
        })
}

fn jstr<'a>(v: &'a serde_json::Value, ptr: &str) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::Parse {
        pointer: ptr.into(),
        msg: format!("expected a string, got {v}"),
    })
}

fn jobject<'a>(
    v: &'a serde_json::Value,
    ptr: &str,
) -> Result<&'a serde_json::Map<String, serde_json::Value>> {
    v.as_object().ok_or_else(|| Error::Parse {
        pointer: ptr.into(),
        msg: "expected a JSON object".into(),
    })
}

/// Parsed form of the model-spec JSON: the configuration plus the stage
/// table (which may be `None` when the document omits "stages", meaning the
/// family default applies).
pub struct ParsedModelSpec {
    pub config: ModelConfig,
    pub stages: Option<Vec<StageSpec>>,
}

/// Parse and validate a model-spec JSON document. Schema:
/// `{"family", "width_multiplier", "resolution", "num_classes", "alpha",
///   "divisor", "stages": [{"block","t","c","s","b"}...]}`.
/// Every field except "family" is optional and defaults as in
/// [`ModelConfig::default`]; unknown fields are rejected. Errors carry a
/// JSON pointer to the offending field.
pub fn parse_model_spec(json: &str) -> Result<ParsedModelSpec> {
    let value: serde_json::Value = serde_json::from_str(json).map_err(|e| Error::Parse {
        pointer: "".into(),
        msg: format!("invalid JSON: {e}"),
    })?;
    let obj = jobject(&value, "")?;

    for key in obj.keys() {
        if ![
            "family",
            "width_multiplier",
            "resolution",
            "num_classes",
            "alpha",
            "divisor",
            "stages",
        ]
        .contains(&key.as_str())
        {
            return Err(Error::Parse {
                pointer: format!("/{key}"),
                msg: "unknown field".into(),
            });
        }
    }

    let fam_str = jstr(jkey(obj, "", "family")?, "/family")?;
    let family = Family::parse(fam_str).ok_or_else(|| Error::Parse {
        pointer: "/family".into(),
        msg: format!(
            "unknown family {fam_str:?} (expected one of: {})",
            Family::ALL.map(|f| f.as_str()).join(", ")
        ),
    })?;

    let mut config = ModelConfig {
        family,
        ..ModelConfig::default()
    };
    if let Some(v) = obj.get("width_multiplier") {
        config.width_multiplier = jf64(v, "/width_multiplier")?;
    }
    if let Some(v) = obj.get("resolution") {
        config.resolution = jusize(v, "/resolution")?;
    }
    if let Some(v) = obj.get("num_classes") {
        config.num_classes = jusize(v, "/num_classes")?;
    }
    if let Some(v) = obj.get("alpha") {
        config.alpha = jf64(v, "/alpha")?;
    }
    if let Some(v) = obj.get("divisor") {
        config.divisor = jusize(v, "/divisor")?;
    }

    let stages = match obj.get("stages") {
        None => None,
        Some(v) => {
            let arr = v.as_array().ok_or_else(|| Error::Parse {
                pointer: "/stages".into(),
                msg: "expected an array".into(),
            })?;
            if arr.is_empty() {
                return Err(Error::Parse {
                    pointer: "/stages".into(),
                    msg: "stage table must not be empty".into(),
                });
            }
            let mut stages = Vec::with_capacity(arr.len());
            for (i, sv) in arr.iter().enumerate() {
                let ptr = format!("/stages/{i}");
                let sobj = jobject(sv, &ptr)?;
                for key in sobj.keys() {
                    if !["block", "t", "c", "s", "b"].contains(&key.as_str()) {
                        return Err(Error::Parse {
                            pointer: format!("{ptr}/{key}"),
                            msg: "unknown field".into(),
                        });
                    }
                }
                let bstr = jstr(jkey(sobj, &ptr, "block")?, &format!("{ptr}/block"))?;
                let block = BlockKind::parse(bstr).ok_or_else(|| Error::Parse {
                    pointer: format!("{ptr}/block"),
                    msg: format!(
                        "unknown block family {bstr:?} (expected one of: {})",
                        BlockKind::ALL.map(|k| k.as_str()).join(", ")
                    ),
                })?;
                let t = jusize(jkey(sobj, &ptr, "t")?, &format!("{ptr}/t"))?;
                let c = jusize(jkey(sobj, &ptr, "c")?, &format!("{ptr}/c"))?;
                let s = jusize(jkey(sobj, &ptr, "s")?, &format!("{ptr}/s"))?;
                let b = jusize(jkey(sobj, &ptr, "b")?, &format!("{ptr}/b"))?;
                if t == 0 || t > u32::MAX as usize {
                    return Err(Error::Parse {
                        pointer: format!("{ptr}/t"),
                        msg: "ratio t must be >= 1".into(),
                    });
                }
                if c == 0 {
                    return Err(Error::Parse {
                        pointer: format!("{ptr}/c"),
                        msg: "channel count c must be >= 1".into(),
                    });
                }
                if !(s == 1 || s == 2) {
                    return Err(Error::Parse {
                        pointer: format!("{ptr}/s"),
                        msg: format!("stride must be 1 or 2, got {s}"),
                    });
                }
                if b == 0 {
                    return Err(Error::Parse {
                        pointer: format!("{ptr}/b"),
                        msg: "repeat count b must be >= 1".into(),
                    });
                }
                stages.push(StageSpec {
                    block,
                    t: t as u32,
                    c,
                    s,
                    b,
                });
            }
            Some(stages)
        }
    };

    Ok(ParsedModelSpec { config, stages })
}

/// Build a model graph from a model-spec JSON document.
pub fn import_model_spec<E: Element>(json: &str) -> Result<ModelGraph<E>> {
    let parsed = parse_model_spec(json)?;
    match parsed.stages {
        Some(stages) => ModelGraph::from_stages(&parsed.config, stages),
        None => build_model(&parsed.config),
    }
}

/// Serialize a model's structure (not its weights) as deterministic JSON.
pub fn export_model_spec<E: Element>(g: &ModelGraph<E>) -> String {
    #[derive(serde::Serialize)]
    struct StageJson {
        block: &'static str,
        t: u32,
        c: usize,
        s: usize,
        b: usize,
    }
    #[derive(serde::Serialize)]
    struct SpecJson {
        family: &'static str,
        width_multiplier: f64,
        resolution: usize,
        num_classes: usize,
        alpha: f64,
        divisor: usize,
        stages: Vec<StageJson>,
    }
    let spec = SpecJson {
        family: g.config.family.as_str(),
        width_multiplier: g.config.width_multiplier,
        resolution: g.config.resolution,
        num_classes: g.config.num_classes,
        alpha: g.config.alpha,
        divisor: g.config.divisor,
        stages: g
            .stages
            .iter()
            .map(|s| StageJson {
                block: s.block.as_str(),
                t: s.t,
                c: s.c,
                s: s.s,
                b: s.b,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&spec).expect("spec serialization cannot fail")
}

// ---------------------------------------------------------------------------
// .ncw weights format
// ---------------------------------------------------------------------------
//
//   bytes 0..8   magic "NCWGHT01"
//   bytes 8..    UTF-8 JSON manifest line, '\n'-terminated:
//                {"dtype":"f32","tensors":[{"id","role","shape":[n,c,h,w],
//                  "offset":bytes-into-payload,"len":bytes}, ...]}
//   rest         concatenated little-endian payloads in manifest order

/// Magic prefix of a `.ncw` weights file.
pub const WEIGHTS_MAGIC: &[u8; 8] = b"NCWGHT01";

#[derive(serde::Serialize, serde::Deserialize)]
struct WeightsManifest {
    dtype: String,
    tensors: Vec<WeightsEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct WeightsEntry {
    id: String,
    role: String,
    shape: [u64; 4],
    offset: u64,
    len: u64,
}

/// Write all model parameters in `.ncw` format.
pub fn write_weights<E: Element, W: Write>(g: &ModelGraph<E>, w: &mut W) -> Result<()> {
    let named = g.named_tensors();
    let mut entries = Vec::with_capacity(named.len());
    let mut payload = Vec::new();
    for (id, role, tensor) in named {
        let offset = payload.len() as u64;
        for &v in tensor.data() {
            v.write_le(&mut payload);
        }
        entries.push(WeightsEntry {
            id,
            role: role.to_string(),
            shape: tensor.shape().dims().map(|d| d as u64),
            offset,
            len: payload.len() as u64 - offset,
        });
    }
    let manifest = WeightsManifest {
        dtype: E::DTYPE.as_str().to_string(),
        tensors: entries,
    };
    w.write_all(WEIGHTS_MAGIC)?;
    let mut line = serde_json::to_vec(&manifest).expect("manifest serialization cannot fail");
    line.push(b'\n');
    w.write_all(&line)?;
    w.write_all(&payload)?;
    Ok(())
}

/// Load `.ncw` weights into a structurally matching model graph. Every
/// parameter must be present with the right shape; extra tensors are
/// rejected.
pub fn read_weights<E: Element, R: Read>(g: &mut ModelGraph<E>, r: &mut R) -> Result<()> {
    check_magic(r, WEIGHTS_MAGIC, "weights")?;
    let line = read_header_line(r, 8)?;
    let manifest: WeightsManifest =
        serde_json::from_slice(&line).map_err(|e| Error::Format {
            offset: 8,
            msg: format!("invalid manifest JSON: {e}"),
        })?;
    if manifest.dtype != E::DTYPE.as_str() {
        return Err(Error::Format {
            offset: 8,
            msg: format!(
                "dtype mismatch: file holds {:?}, model needs {:?}",
                manifest.dtype,
                E::DTYPE.as_str()
            ),
        });
    }
    let payload_base = 8 + line.len() as u64 + 1;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut index: std::collections::HashMap<(String, String), &WeightsEntry> =
        std::collections::HashMap::new();
    for e in &manifest.tensors {
        if index.insert((e.id.clone(), e.role.clone()), e).is_some() {
            return Err(Error::Format {
                offset: 8,
                msg: format!("duplicate tensor {}:{} in manifest", e.id, e.role),
            });
        }
    }

    let mut used = 0usize;
    for (id, unit) in g.unit_walk_mut() {
        let mut fill = |role: &str, target: &mut Tensor<E>| -> Result<()> {
            let e = index.get(&(id.clone(), role.to_string())).ok_or_else(|| {
                Error::Format {
                    offset: 8,
                    msg: format!("manifest is missing tensor {id}:{role}"),
                }
            })?;
            used += 1;
            let shape = Shape::new(
                e.shape[0] as usize,
                e.shape[1] as usize,
                e.shape[2] as usize,
                e.shape[3] as usize,
            );
            if shape != target.shape() {
                return Err(Error::Format {
                    offset: 8,
                    msg: format!(
                        "tensor {id}:{role} has shape {shape}, model expects {}",
                        target.shape()
                    ),
                });
            }
            let need = target.numel() * E::DTYPE.size();
            if e.len as usize != need {
                return Err(Error::Format {
                    offset: payload_base + e.offset,
                    msg: format!(
                        "tensor {id}:{role} payload is {} bytes, shape needs {need}",
                        e.len
                    ),
                });
            }
            let start = e.offset as usize;
            let end = start + need;
            if end > payload.len() {
                return Err(Error::Format {
                    offset: payload_base + payload.len() as u64,
                    msg: format!(
                        "tensor {id}:{role} extends to byte {end} but payload holds {}",
                        payload.len()
                    ),
                });
            }
            let data: Vec<E> = payload[start..end]
                .chunks_exact(E::DTYPE.size())
                .map(E::read_le)
                .collect();
            *target = Tensor::from_vec(shape, data)?;
            Ok(())
        };
        fill("weight", &mut unit.weight)?;
        if let Some(bn) = &mut unit.bn {
            fill("gamma", &mut bn.gamma)?;
            fill("beta", &mut bn.beta)?;
            fill("running_mean", &mut bn.running_mean)?;
            fill("running_var", &mut bn.running_var)?;
        }
    }
    if used != manifest.tensors.len() {
        let expected: std::collections::HashSet<(String, String)> = g
            .named_tensors()
            .into_iter()
            .map(|(id, role, _)| (id, role.to_string()))
            .collect();
        let extra: Vec<String> = manifest
            .tensors
            .iter()
            .filter(|e| !expected.contains(&(e.id.clone(), e.role.clone())))
            .map(|e| format!("{}:{}", e.id, e.role))
            .collect();
        return Err(Error::Format {
            offset: 8,
            msg: format!("manifest holds tensors the model does not have: {extra:?}"),
        });
    }
    Ok(())
}

pub fn save_weights<E: Element>(g: &ModelGraph<E>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_weights(g, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_weights<E: Element>(g: &mut ModelGraph<E>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_weights(g, &mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> (ModelConfig, Vec<StageSpec>) {
        let config = ModelConfig {
            family: Family::MobileNeXt,
            width_multiplier: 1.0,
            resolution: 32,
            num_classes: 10,
            alpha: 1.0,
            divisor: 8,
        };
        let stages = vec![
            StageSpec {
                block: BlockKind::Sandglass,
                t: 2,
                c: 16,
                s: 1,
                b: 1,
            },
            StageSpec {
                block: BlockKind::Sandglass,
                t: 6,
                c: 24,
                s: 2,
                b: 2,
            },
        ];
        (config, stages)
    }

    #[test]
    fn mobilenext_has_19_blocks() {
        let g = build_model::<f32>(&ModelConfig::default()).unwrap();
        assert_eq!(g.num_blocks(), 19);
    }

    #[test]
    fn mobilenext_stage_output_shapes_match_published_table() {
        let g = build_model::<f32>(&ModelConfig::default()).unwrap();
        assert_eq!(g.stem_output_shape(), Shape::new(1, 32, 112, 112));
        let got = g.stage_output_shapes();
        let want = [
            (96, 56),
            (144, 56),
            (192, 28),
            (288, 14),
            (384, 14),
            (576, 7),
            (960, 7),
            (1280, 7),
        ];
        assert_eq!(got.len(), want.len());
        for (i, ((c, hw), shape)) in want.iter().zip(&got).enumerate() {
            assert_eq!(*shape, Shape::new(1, *c, *hw, *hw), "stage {i}");
        }
    }

    #[test]
    fn first_block_of_stride2_stage_carries_the_stride() {
        let g = build_model::<f32>(&ModelConfig::default()).unwrap();
        for b in &g.blocks {
            let stage_stride = g.stages[b.stage].s;
            let expect = if b.index_in_stage == 0 { stage_stride } else { 1 };
            assert_eq!(b.graph.spec.stride, expect, "block {}", b.id());
        }
    }

    #[test]
    fn stem_scales_with_multiplier() {
        let cfg = ModelConfig {
            width_multiplier: 0.35,
            ..ModelConfig::default()
        };
        let g = build_model::<f32>(&cfg).unwrap();
        assert_eq!(g.stem.out_channels(), 16); // 8 fails the 0.9 rule
        // final stage never drops below its table width
        assert_eq!(g.blocks.last().unwrap().graph.spec.out_channels, 1280);
    }

    #[test]
    fn mobilenetv2_t1_stage_has_two_convs() {
        let cfg = ModelConfig {
            family: Family::MobileNetV2,
            ..ModelConfig::default()
        };
        let g = build_model::<f32>(&cfg).unwrap();
        assert_eq!(g.num_blocks(), 17);
        assert_eq!(g.blocks[0].graph.units.len(), 2, "t=1 omits the expansion conv");
        assert!(g.head.is_some());
        assert_eq!(g.head.as_ref().unwrap().out_channels(), 1280);
    }

    #[test]
    fn mobilenetv2_14_head_is_1792() {
        let cfg = ModelConfig {
            family: Family::MobileNetV2,
            width_multiplier: 1.4,
            ..ModelConfig::default()
        };
        let g = build_model::<f32>(&cfg).unwrap();
        assert_eq!(g.head.as_ref().unwrap().out_channels(), 1792);
    }

    #[test]
    fn toy_forward_shapes_and_determinism() {
        let (config, stages) = toy_config();
        let mut g = ModelGraph::<f32>::from_stages(&config, stages).unwrap();
        g.init_weights(7).unwrap();
        let mut rng = Rng::new(99);
        let x = Tensor::<f32>::random_normal(Shape::new(1, 3, 32, 32), &mut rng, 0.0, 1.0)
            .unwrap();
        let y1 = g.forward(&x).unwrap();
        let y2 = g.forward(&x).unwrap();
        assert_eq!(y1.shape(), Shape::new(1, 10, 1, 1));
        assert_eq!(y1, y2, "forward must be deterministic");
    }

    #[test]
    fn forward_validates_resolution() {
        let (config, stages) = toy_config();
        let g = ModelGraph::<f32>::from_stages(&config, stages).unwrap();
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 16, 16)).unwrap();
        assert!(matches!(g.forward(&x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn init_weights_is_seed_deterministic_and_seed_sensitive() {
        let (config, stages) = toy_config();
        let mut a = ModelGraph::<f32>::from_stages(&config, stages.clone()).unwrap();
        let mut b = ModelGraph::<f32>::from_stages(&config, stages.clone()).unwrap();
        let mut c = ModelGraph::<f32>::from_stages(&config, stages).unwrap();
        a.init_weights(1).unwrap();
        b.init_weights(1).unwrap();
        c.init_weights(2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (id, u) in a.unit_walk() {
            if let Some(bn) = &u.bn {
                assert!(
                    bn.gamma.data().iter().all(|&v| v == 1.0),
                    "gamma of {id} must be ones after init"
                );
            }
        }
    }

    #[test]
    fn alpha_threads_to_sandglass_blocks_without_changing_shapes() {
        let (mut config, stages) = toy_config();
        config.alpha = 0.5;
        let mut g = ModelGraph::<f32>::from_stages(&config, stages.clone()).unwrap();
        g.init_weights(3).unwrap();
        for b in &g.blocks {
            assert_eq!(b.graph.spec.alpha, 0.5);
        }
        config.alpha = 1.0;
        let mut g1 = ModelGraph::<f32>::from_stages(&config, stages).unwrap();
        g1.init_weights(3).unwrap();
        let mut rng = Rng::new(17);
        let x = Tensor::<f32>::random_normal(Shape::new(1, 3, 32, 32), &mut rng, 0.0, 1.0)
            .unwrap();
        assert_eq!(
            g.forward(&x).unwrap().shape(),
            g1.forward(&x).unwrap().shape()
        );
    }

    #[test]
    fn export_import_roundtrip_identity() {
        let g = build_model::<f32>(&ModelConfig::default()).unwrap();
        let json = export_model_spec(&g);
        let g2 = import_model_spec::<f32>(&json).unwrap();
        assert_eq!(g, g2);
        // export is byte-stable
        assert_eq!(json, export_model_spec(&g2));
    }

    #[test]
    fn import_rejects_unknown_family_and_block() {
        let err = import_model_spec::<f32>(r#"{"family":"resnet"}"#);
        match err {
            Err(Error::Parse { pointer, .. }) => assert_eq!(pointer, "/family"),
            other => panic!("expected parse error, got {other:?}"),
        }
        let err = import_model_spec::<f32>(
            r#"{"family":"mobilenext","stages":[{"block":"bogus","t":2,"c":16,"s":1,"b":1}]}"#,
        );
        match err {
            Err(Error::Parse { pointer, .. }) => assert_eq!(pointer, "/stages/0/block"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn import_rejects_unknown_and_invalid_fields() {
        match import_model_spec::<f32>(r#"{"family":"mobilenext","bogus":1}"#) {
            Err(Error::Parse { pointer, .. }) => assert_eq!(pointer, "/bogus"),
            other => panic!("expected parse error, got {other:?}"),
        }
        match import_model_spec::<f32>(
            r#"{"family":"mobilenext","stages":[{"block":"sandglass","t":2,"c":16,"s":3,"b":1}]}"#,
        ) {
            Err(Error::Parse { pointer, .. }) => assert_eq!(pointer, "/stages/0/s"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn weights_roundtrip_preserves_forward() {
        let (config, stages) = toy_config();
        let mut g = ModelGraph::<f32>::from_stages(&config, stages).unwrap();
        g.init_weights(42).unwrap();
        let mut buf = Vec::new();
        write_weights(&g, &mut buf).unwrap();

        let json = export_model_spec(&g);
        let mut g2 = import_model_spec::<f32>(&json).unwrap();
        read_weights(&mut g2, &mut buf.as_slice()).unwrap();
        assert_eq!(g, g2);

        let mut rng = Rng::new(5);
        let x = Tensor::<f32>::random_normal(Shape::new(1, 3, 32, 32), &mut rng, 0.0, 1.0)
            .unwrap();
        assert_eq!(g.forward(&x).unwrap(), g2.forward(&x).unwrap());
    }

    #[test]
    fn weights_loader_rejects_mismatched_model() {
        let (config, stages) = toy_config();
        let mut g = ModelGraph::<f32>::from_stages(&config, stages).unwrap();
        g.init_weights(1).unwrap();
        let mut buf = Vec::new();
        write_weights(&g, &mut buf).unwrap();

        let other_cfg = ModelConfig {
            num_classes: 7,
            ..config
        };
        let mut other = ModelGraph::<f32>::from_stages(
            &other_cfg,
            g.stages.clone(),
        )
        .unwrap();
        assert!(matches!(
            read_weights(&mut other, &mut buf.as_slice()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn unsupported_family_string_is_rejected_at_parse() {
        assert!(Family::parse("squeezenet").is_none());
    }
}
