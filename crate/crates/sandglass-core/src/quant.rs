//! Post-training affine quantization with simulated-quantization forward.
//!
//! - Per-tensor affine grids: `q = clamp(round_ties_even(v/scale + zp))`,
//!   `v' = (q - zp) * scale`. Default 8 bits (grid 0..=255).
//! - Calibration is plain min/max, widened to include 0, scale floored at
//!   `1e-8`; activations are calibrated by observing every forward site over
//!   a set of calibration inputs.
//! - Batch norm is folded into the preceding conv (weight scale + bias)
//!   before weight quantization.
//! - The quantized forward is *fake* quantization: all arithmetic stays in
//!   float, but weights and every activation site are snapped onto their
//!   grids. Passthrough mode disables everything and reproduces the fp32
//!   forward bitwise.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{export_model_spec, import_model_spec, ForwardHook, ModelGraph};
use crate::tensor::{check_magic, read_header_line, Element, Shape, Tensor};

/// Scale floor applied when a calibrated range collapses to a point.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Per-tensor affine quantization parameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: u32,
    pub bits: u32,
}

impl QuantParams {
    /// Largest grid index (`2^bits - 1`).
    pub fn qmax(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Snap a value onto the grid index, round-half-to-even, clamped.
    pub fn quantize(&self, v: f64) -> u32 {
        let u = (v / self.scale + self.zero_point as f64).round_ties_even();
        u.clamp(0.0, self.qmax() as f64) as u32
    }

    /// Real value of a grid index.
    pub fn dequantize(&self, q: u32) -> f64 {
        (q as f64 - self.zero_point as f64) * self.scale
    }

    /// Round-trip through the grid (fake quantization).
    pub fn fake(&self, v: f64) -> f64 {
        self.dequantize(self.quantize(v))
    }
}

fn validate_bits(bits: u32) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::Config(format!(
            "quantization bits must be in 2..=8, got {bits}"
        )));
    }
    Ok(())
}

/// Compute quantization parameters from an observed value range. The range
/// is widened to include 0 so that zero is exactly representable.
pub fn calibrate(min: f64, max: f64, bits: u32) -> Result<QuantParams> {
    validate_bits(bits)?;
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::Numeric(format!(
            "calibration range [{min}, {max}] is not finite"
        )));
    }
    if min > max {
        return Err(Error::Numeric(format!(
            "calibration range [{min}, {max}] is inverted"
        )));
    }
    let lo = min.min(0.0);
    let hi = max.max(0.0);
    let qmax = ((1u32 << bits) - 1) as f64;
    let scale = ((hi - lo) / qmax).max(SCALE_FLOOR);
    let zero_point = (-lo / scale).round_ties_even().clamp(0.0, qmax) as u32;
    Ok(QuantParams {
        scale,
        zero_point,
        bits,
    })
}

/// Calibrate from a tensor's contents. Errors on any non-finite element.
pub fn calibrate_tensor<E: Element>(t: &Tensor<E>, bits: u32) -> Result<QuantParams> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in t.data() {
        let v = v.to_f64();
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value {v} encountered during calibration"
            )));
        }
        min = min.min(v);
        max = max.max(v);
    }
    calibrate(min, max, bits)
}

/// Quantization settings.
#[derive(Clone, Copy, Debug)]
pub struct QuantOptions {
    pub bits: u32,
    /// Disable quantization entirely: the model is stored/run as plain fp32
    /// and every report shows zero error.
    pub passthrough: bool,
}

impl Default for QuantOptions {
    fn default() -> Self {
        QuantOptions {
            bits: 8,
            passthrough: false,
        }
    }
}

/// A quantized weight grid kept for serialization.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeight {
    pub id: String,
    pub qp: QuantParams,
    pub shape: Shape,
    pub grid: Vec<u8>,
}

/// A model prepared for simulated-quantization inference.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel<E: Element> {
    /// BN-folded graph whose conv weights are already snapped to their
    /// grids (or the untouched fp32 graph in passthrough mode).
    pub graph: ModelGraph<E>,
    pub passthrough: bool,
    pub bits: u32,
    /// Per-conv-weight grids, in unit-walk order (empty in passthrough).
    pub weights: Vec<QuantizedWeight>,
    /// Per-activation-site parameters in forward order (empty in
    /// passthrough). Site ids match [`ModelGraph::forward_hooked`].
    pub sites: Vec<(String, QuantParams)>,
}

/// Fold every batch norm into its conv: `w'[oc] = w[oc] * g[oc]/sqrt(var+eps)`,
/// `bias[oc] = beta[oc] - mean[oc] * g[oc]/sqrt(var+eps)`.
pub fn fold_batchnorms<E: Element>(g: &mut ModelGraph<E>) -> Result<()> {
    let mut stack: Vec<&mut crate::blocks::ConvUnit<E>> = vec![&mut g.stem];
    for b in &mut g.blocks {
        for u in &mut b.graph.units {
            stack.push(u);
        }
    }
    if let Some(h) = &mut g.head {
        stack.push(h);
    }
    stack.push(&mut g.classifier);

    for unit in stack {
        let Some(bn) = unit.bn.take() else { continue };
        bn.validate()?;
        let ws = unit.weight.shape();
        let per_oc = ws.c * ws.h * ws.w;
        let mut bias = Vec::with_capacity(ws.n);
        for oc in 0..ws.n {
            let var = bn.running_var.data()[oc].to_f64();
            let denom = (var + bn.eps).sqrt();
            if !(denom > 0.0) || !denom.is_finite() {
                return Err(Error::Numeric(format!(
                    "batch-norm fold of {:?}: non-positive denominator {denom}",
                    unit.name
                )));
            }
            let s = bn.gamma.data()[oc].to_f64() / denom;
            let beta = bn.beta.data()[oc].to_f64();
            let mean = bn.running_mean.data()[oc].to_f64();
            bias.push(E::from_f64(beta - mean * s));
            let row = &mut unit.weight.data_mut()[oc * per_oc..(oc + 1) * per_oc];
            for w in row {
                *w = E::from_f64(w.to_f64() * s);
            }
        }
        unit.bias = Some(bias);
    }
    Ok(())
}

/// Hook that records min/max per site (calibration pass).
struct RangeRecorder {
    order: Vec<String>,
    ranges: HashMap<String, (f64, f64)>,
    bad_site: Option<String>,
}

impl RangeRecorder {
    fn new() -> Self {
        RangeRecorder {
            order: Vec::new(),
            ranges: HashMap::new(),
            bad_site: None,
        }
    }
}

impl<E: Element> ForwardHook<E> for RangeRecorder {
    fn site(&mut self, id: &str, t: &Tensor<E>) -> Option<Tensor<E>> {
        let entry = match self.ranges.get_mut(id) {
            Some(e) => e,
            None => {
                self.order.push(id.to_string());
                self.ranges
                    .entry(id.to_string())
                    .or_insert((f64::INFINITY, f64::NEG_INFINITY))
            }
        };
        for &v in t.data() {
            let v = v.to_f64();
            if !v.is_finite() {
                self.bad_site.get_or_insert_with(|| id.to_string());
                return None;
            }
            entry.0 = entry.0.min(v);
            entry.1 = entry.1.max(v);
        }
        None
    }
}

/// Hook that snaps every site onto its grid (simulated-quantization
/// forward). Sites without parameters pass through untouched.
struct FakeQuantHook<'a> {
    qps: &'a HashMap<String, QuantParams>,
}

impl<E: Element> ForwardHook<E> for FakeQuantHook<'_> {
    fn site(&mut self, id: &str, t: &Tensor<E>) -> Option<Tensor<E>> {
        let qp = self.qps.get(id)?;
        Some(t.map(|v| E::from_f64(qp.fake(v.to_f64()))))
    }
}

/// Hook that captures every site's activation tensor.
struct CaptureHook<E: Element> {
    tensors: Vec<(String, Tensor<E>)>,
}

impl<E: Element> ForwardHook<E> for CaptureHook<E> {
    fn site(&mut self, id: &str, t: &Tensor<E>) -> Option<Tensor<E>> {
        self.tensors.push((id.to_string(), t.clone()));
        None
    }
}

/// Quantize a model post-training: fold BN, snap weights to per-tensor
/// grids, calibrate every activation site over `calib` inputs.
pub fn quantize_model<E: Element>(
    g: &ModelGraph<E>,
    calib: &[Tensor<E>],
    opts: &QuantOptions,
) -> Result<QuantizedModel<E>> {
    validate_bits(opts.bits)?;
    if opts.passthrough {
        return Ok(QuantizedModel {
            graph: g.clone(),
            passthrough: true,
            bits: opts.bits,
            weights: Vec::new(),
            sites: Vec::new(),
        });
    }
    if calib.is_empty() {
        return Err(Error::Config(
            "quantization needs at least one calibration input".into(),
        ));
    }

    let mut folded = g.clone();
    fold_batchnorms(&mut folded)?;

    // Weight grids (biases stay in float).
    let mut weights = Vec::new();
    {
        let mut units: Vec<(String, &mut crate::blocks::ConvUnit<E>)> = Vec::new();
        units.push(("stem".to_string(), &mut folded.stem));
        for b in &mut folded.blocks {
            let id = format!("s{}.b{}", b.stage, b.index_in_stage);
            for u in &mut b.graph.units {
                units.push((format!("{id}.{}", u.name), u));
            }
        }
        if let Some(h) = &mut folded.head {
            units.push(("head".to_string(), h));
        }
        units.push(("classifier".to_string(), &mut folded.classifier));

        for (id, unit) in units {
            let qp = calibrate_tensor(&unit.weight, opts.bits)?;
            let mut grid = Vec::with_capacity(unit.weight.numel());
            for w in unit.weight.data_mut() {
                let q = qp.quantize(w.to_f64());
                grid.push(q as u8);
                *w = E::from_f64(qp.dequantize(q));
            }
            weights.push(QuantizedWeight {
                id,
                qp,
                shape: unit.weight.shape(),
                grid,
            });
        }
    }

    // Activation calibration on the folded, weight-quantized graph.
    let mut rec = RangeRecorder::new();
    for x in calib {
        folded.forward_hooked(x, &mut rec)?;
        if let Some(site) = rec.bad_site {
            return Err(Error::Numeric(format!(
                "non-finite activation at site {site:?} during calibration"
            )));
        }
    }
    let mut sites = Vec::with_capacity(rec.order.len());
    for id in rec.order {
        let (min, max) = rec.ranges[&id];
        sites.push((id, calibrate(min, max, opts.bits)?));
    }

    Ok(QuantizedModel {
        graph: folded,
        passthrough: false,
        bits: opts.bits,
        weights,
        sites,
    })
}

impl<E: Element> QuantizedModel<E> {
    fn site_map(&self) -> HashMap<String, QuantParams> {
        self.sites.iter().cloned().collect()
    }

    /// Simulated-quantization forward (plain fp32 forward in passthrough).
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if self.passthrough {
            return self.graph.forward(x);
        }
        let qps = self.site_map();
        self.graph.forward_hooked(x, &mut FakeQuantHook { qps: &qps })
    }

    fn forward_captured(&self, x: &Tensor<E>) -> Result<Vec<(String, Tensor<E>)>> {
        if self.passthrough {
            let mut cap = CaptureHook { tensors: Vec::new() };
            self.graph.forward_hooked(x, &mut cap)?;
            return Ok(cap.tensors);
        }
        // Capture after fake-quantizing each site.
        struct Both<'a, E: Element> {
            quant: FakeQuantHook<'a>,
            tensors: Vec<(String, Tensor<E>)>,
        }
        impl<E: Element> ForwardHook<E> for Both<'_, E> {
            fn site(&mut self, id: &str, t: &Tensor<E>) -> Option<Tensor<E>> {
                let replaced = ForwardHook::<E>::site(&mut self.quant, id, t);
                let kept = replaced.as_ref().unwrap_or(t);
                self.tensors.push((id.to_string(), kept.clone()));
                replaced
            }
        }
        let qps = self.site_map();
        let mut hook = Both {
            quant: FakeQuantHook { qps: &qps },
            tensors: Vec::new(),
        };
        self.graph.forward_hooked(x, &mut hook)?;
        Ok(hook.tensors)
    }
}

/// One row of the quantization error report.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SnrRow {
    pub id: String,
    pub mse: f64,
    /// Signal-to-quantization-noise ratio in dB; `None` is the infinite
    /// sentinel (zero error).
    pub snr_db: Option<f64>,
}

/// Per-site error report plus argmax agreement.
#[derive(Clone, Debug, serde::Serialize)]
pub struct QuantErrorReport {
    pub rows: Vec<SnrRow>,
    /// Fraction of probe items whose fp32 and quantized logits agree on the
    /// argmax class, in [0, 1].
    pub argmax_agreement: f64,
    pub probes: usize,
}

fn argmax_class<E: Element>(logits: &Tensor<E>, item: usize) -> usize {
    let s = logits.shape();
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for c in 0..s.c {
        let v = logits.get(item, c, 0, 0).to_f64();
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    best
}

/// Compare the fp32 reference against the quantized model on probe inputs:
/// per-site MSE and SNR, plus logits argmax agreement. One row per
/// activation site of the reference graph.
pub fn quant_error_report<E: Element>(
    reference: &ModelGraph<E>,
    qm: &QuantizedModel<E>,
    probes: &[Tensor<E>],
) -> Result<QuantErrorReport> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<String, (f64, f64, u64)> = HashMap::new(); // (sum x^2, sum err^2, count)
    let mut agree = 0usize;
    let mut items = 0usize;

    for x in probes {
        let mut ref_cap = CaptureHook { tensors: Vec::new() };
        let ref_logits = reference.forward_hooked(x, &mut ref_cap)?;
        let q_caps = qm.forward_captured(x)?;
        let q_logits = q_caps
            .last()
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Numeric("forward produced no sites".into()))?;
        if ref_cap.tensors.len() != q_caps.len() {
            return Err(Error::ShapeMismatch(format!(
                "site count mismatch: reference {} vs quantized {}",
                ref_cap.tensors.len(),
                q_caps.len()
            )));
        }
        for ((rid, rt), (qid, qt)) in ref_cap.tensors.iter().zip(&q_caps) {
            if rid != qid {
                return Err(Error::ShapeMismatch(format!(
                    "site order mismatch: {rid:?} vs {qid:?}"
                )));
            }
            let entry = match acc.get_mut(rid) {
                Some(e) => e,
                None => {
                    order.push(rid.clone());
                    acc.entry(rid.clone()).or_insert((0.0, 0.0, 0))
                }
            };
            for (a, b) in rt.data().iter().zip(qt.data()) {
                let a = a.to_f64();
                let d = a - b.to_f64();
                entry.0 += a * a;
                entry.1 += d * d;
                entry.2 += 1;
            }
        }
        let n = x.shape().n;
        for item in 0..n {
            if argmax_class(&ref_logits, item) == argmax_class(&q_logits, item) {
                agree += 1;
            }
        }
        items += n;
    }

    // With no probes, fall back to the structural site list so the row
    // count still equals the number of activation sites.
    if probes.is_empty() {
        let mut rec = RangeRecorder::new();
        let r = reference.config.resolution;
        let x = Tensor::<E>::zeros(Shape::new(1, 3, r, r))?;
        reference.forward_hooked(&x, &mut rec)?;
        for id in rec.order {
            order.push(id.clone());
            acc.insert(id, (0.0, 0.0, 0));
        }
    }

    let rows = order
        .into_iter()
        .map(|id| {
            let (sig, err, count) = acc[&id];
            let mse = if count == 0 { 0.0 } else { err / count as f64 };
            let snr_db = if err == 0.0 {
                None
            } else {
                Some(10.0 * (sig / err).log10())
            };
            SnrRow { id, mse, snr_db }
        })
        .collect();

    Ok(QuantErrorReport {
        rows,
        argmax_agreement: if items == 0 {
            1.0
        } else {
            agree as f64 / items as f64
        },
        probes: items,
    })
}

// ---------------------------------------------------------------------------
// .ncq quantized-model format
// ---------------------------------------------------------------------------
//
//   bytes 0..8   magic "NCQUANT1"
//   bytes 8..    UTF-8 JSON manifest line, '\n'-terminated:
//                {"model": <model-spec object>, "dtype", "passthrough",
//                 "bits", "sites":[{"id","scale","zero_point","bits"}...],
//                 "tensors":[{"id","role","shape","offset","len",
//                             "scale"?,"zero_point"?,"bits"?}...]}
//   rest         concatenated payloads: role "qweight" -> one byte per
//                element (grid index); all other roles -> little-endian
//                dtype elements.

/// Magic prefix of a `.ncq` quantized-model file.
pub const QUANT_MAGIC: &[u8; 8] = b"NCQUANT1";

#[derive(serde::Serialize, serde::Deserialize)]
struct SiteJson {
    id: String,
    scale: f64,
    zero_point: u32,
    bits: u32,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct QuantEntry {
    id: String,
    role: String,
    shape: [u64; 4],
    offset: u64,
    len: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    zero_point: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bits: Option<u32>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct QuantManifest {
    model: serde_json::Value,
    dtype: String,
    passthrough: bool,
    bits: u32,
    sites: Vec<SiteJson>,
    tensors: Vec<QuantEntry>,
}

/// Serialize a quantized model as `.ncq`.
pub fn write_quantized<E: Element, W: Write>(qm: &QuantizedModel<E>, w: &mut W) -> Result<()> {
    let model: serde_json::Value = serde_json::from_str(&export_model_spec(&qm.graph))
        .expect("exported spec is valid JSON");
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();

    let push_scalars = |id: &str, role: &str, shape: Shape, data: &[E],
                            tensors: &mut Vec<QuantEntry>,
                            payload: &mut Vec<u8>| {
        let offset = payload.len() as u64;
        for &v in data {
            v.write_le(payload);
        }
        tensors.push(QuantEntry {
            id: id.to_string(),
            role: role.to_string(),
            shape: shape.dims().map(|d| d as u64),
            offset,
            len: payload.len() as u64 - offset,
            scale: None,
            zero_point: None,
            bits: None,
        });
    };

    if qm.passthrough {
        for (id, role, t) in qm.graph.named_tensors() {
            push_scalars(&id, role, t.shape(), t.data(), &mut tensors, &mut payload);
        }
    } else {
        let mut grids: HashMap<&str, &QuantizedWeight> =
            qm.weights.iter().map(|qw| (qw.id.as_str(), qw)).collect();
        for (id, unit) in qm.graph.unit_walk() {
            let qw = grids.remove(id.as_str()).ok_or_else(|| {
                Error::Config(format!("quantized model lacks a grid for unit {id:?}"))
            })?;
            let offset = payload.len() as u64;
            payload.extend_from_slice(&qw.grid);
            tensors.push(QuantEntry {
                id: id.clone(),
                role: "qweight".to_string(),
                shape: qw.shape.dims().map(|d| d as u64),
                offset,
                len: qw.grid.len() as u64,
                scale: Some(qw.qp.scale),
                zero_point: Some(qw.qp.zero_point),
                bits: Some(qw.qp.bits),
            });
            if let Some(bias) = &unit.bias {
                push_scalars(
                    &id,
                    "bias",
                    Shape::new(1, bias.len(), 1, 1),
                    bias,
                    &mut tensors,
                    &mut payload,
                );
            }
        }
    }

    let manifest = QuantManifest {
        model,
        dtype: E::DTYPE.as_str().to_string(),
        passthrough: qm.passthrough,
        bits: qm.bits,
        sites: qm
            .sites
            .iter()
            .map(|(id, qp)| SiteJson {
                id: id.clone(),
                scale: qp.scale,
                zero_point: qp.zero_point,
                bits: qp.bits,
            })
            .collect(),
        tensors,
    };
    w.write_all(QUANT_MAGIC)?;
    let mut line = serde_json::to_vec(&manifest).expect("manifest serialization cannot fail");
    line.push(b'\n');
    w.write_all(&line)?;
    w.write_all(&payload)?;
    Ok(())
}

/// Load a `.ncq` quantized model.
pub fn read_quantized<E: Element, R: Read>(r: &mut R) -> Result<QuantizedModel<E>> {
    check_magic(r, QUANT_MAGIC, "quantized model")?;
    let line = read_header_line(r, 8)?;
    let manifest: QuantManifest = serde_json::from_slice(&line).map_err(|e| Error::Format {
        offset: 8,
        msg: format!("invalid manifest JSON: {e}"),
    })?;
    if manifest.dtype != E::DTYPE.as_str() {
        return Err(Error::Format {
            offset: 8,
            msg: format!(
                "dtype mismatch: file holds {:?}, caller needs {:?}",
                manifest.dtype,
                E::DTYPE.as_str()
            ),
        });
    }
    let payload_base = 8 + line.len() as u64 + 1;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let spec_json =
        serde_json::to_string(&manifest.model).expect("manifest model is valid JSON");
    let mut graph: ModelGraph<E> = import_model_spec(&spec_json)?;

    let slice = |e: &QuantEntry, elem_size: usize, numel: usize| -> Result<std::ops::Range<usize>> {
        let need = numel * elem_size;
        if e.len as usize != need {
            return Err(Error::Format {
                offset: payload_base + e.offset,
                msg: format!(
                    "tensor {}:{} payload is {} bytes, shape needs {need}",
                    e.id, e.role, e.len
                ),
            });
        }
        let start = e.offset as usize;
        let end = start + need;
        if end > payload.len() {
            return Err(Error::Format {
                offset: payload_base + payload.len() as u64,
                msg: format!(
                    "tensor {}:{} extends to byte {end} but payload holds {}",
                    e.id, e.role, payload.len()
                ),
            });
        }
        Ok(start..end)
    };

    let mut index: HashMap<(String, String), &QuantEntry> = HashMap::new();
    for e in &manifest.tensors {
        if index.insert((e.id.clone(), e.role.clone()), e).is_some() {
            return Err(Error::Format {
                offset: 8,
                msg: format!("duplicate tensor {}:{} in manifest", e.id, e.role),
            });
        }
    }

    let sites: Vec<(String, QuantParams)> = manifest
        .sites
        .iter()
        .map(|s| {
            (
                s.id.clone(),
                QuantParams {
                    scale: s.scale,
                    zero_point: s.zero_point,
                    bits: s.bits,
                },
            )
        })
        .collect();

    if manifest.passthrough {
        // Fill all named tensors exactly as a .ncw would.
        let elem = E::DTYPE.size();
        let expected: Vec<(String, &'static str)> = graph
            .named_tensors()
            .iter()
            .map(|(id, role, _)| (id.clone(), *role))
            .collect();
        for (id, role) in expected {
            let e = index
                .get(&(id.clone(), role.to_string()))
                .ok_or_else(|| Error::Format {
                    offset: 8,
                    msg: format!("manifest is missing tensor {id}:{role}"),
                })?;
            let shape = Shape::new(
                e.shape[0] as usize,
                e.shape[1] as usize,
                e.shape[2] as usize,
                e.shape[3] as usize,
            );
            let range = slice(e, elem, shape.numel())?;
            let data: Vec<E> = payload[range].chunks_exact(elem).map(E::read_le).collect();
            let t = Tensor::from_vec(shape, data)?;
            set_named_tensor(&mut graph, &id, role, t)?;
        }
        return Ok(QuantizedModel {
            graph,
            passthrough: true,
            bits: manifest.bits,
            weights: Vec::new(),
            sites,
        });
    }

    let mut weights = Vec::new();
    {
        let mut units: Vec<(String, &mut crate::blocks::ConvUnit<E>)> = Vec::new();
        units.push(("stem".to_string(), &mut graph.stem));
        for b in &mut graph.blocks {
            let id = format!("s{}.b{}", b.stage, b.index_in_stage);
            for u in &mut b.graph.units {
                units.push((format!("{id}.{}", u.name), u));
            }
        }
        if let Some(h) = &mut graph.head {
            units.push(("head".to_string(), h));
        }
        units.push(("classifier".to_string(), &mut graph.classifier));

        for (id, unit) in units {
            let e = index
                .get(&(id.clone(), "qweight".to_string()))
                .ok_or_else(|| Error::Format {
                    offset: 8,
                    msg: format!("manifest is missing tensor {id}:qweight"),
                })?;
            let shape = Shape::new(
                e.shape[0] as usize,
                e.shape[1] as usize,
                e.shape[2] as usize,
                e.shape[3] as usize,
            );
            if shape != unit.weight.shape() {
                return Err(Error::Format {
                    offset: 8,
                    msg: format!(
                        "tensor {id}:qweight has shape {shape}, model expects {}",
                        unit.weight.shape()
                    ),
                });
            }
            let (Some(scale), Some(zero_point), Some(bits)) = (e.scale, e.zero_point, e.bits)
            else {
                return Err(Error::Format {
                    offset: 8,
                    msg: format!("tensor {id}:qweight lacks quantization parameters"),
                });
            };
            if !(scale > 0.0) || !scale.is_finite() {
                return Err(Error::Format {
                    offset: 8,
                    msg: format!("tensor {id}:qweight has invalid scale {scale}"),
                });
            }
            validate_bits(bits).map_err(|_| Error::Format {
                offset: 8,
                msg: format!("tensor {id}:qweight has invalid bits {bits}"),
            })?;
            let qp = QuantParams {
                scale,
                zero_point,
                bits,
            };
            let range = slice(e, 1, shape.numel())?;
            let grid = payload[range].to_vec();
            let data: Vec<E> = grid
                .iter()
                .map(|&q| E::from_f64(qp.dequantize(q as u32)))
                .collect();
            unit.weight = Tensor::from_vec(shape, data)?;
            // A folded conv drops its BN and gains a bias.
            if let Some(e) = index.get(&(id.clone(), "bias".to_string())) {
                let n = unit.weight.shape().n;
                if e.shape != [1, n as u64, 1, 1] {
                    return Err(Error::Format {
                        offset: 8,
                        msg: format!(
                            "tensor {id}:bias has shape {:?}, expected [1,{n},1,1]",
                            e.shape
                        ),
                    });
                }
                let range = slice(e, E::DTYPE.size(), n)?;
                let bias: Vec<E> = payload[range]
                    .chunks_exact(E::DTYPE.size())
                    .map(E::read_le)
                    .collect();
                unit.bias = Some(bias);
                unit.bn = None;
            } else if unit.bn.is_some() {
                return Err(Error::Format {
                    offset: 8,
                    msg: format!("tensor {id} needs a folded bias but the file has none"),
                });
            }
            weights.push(QuantizedWeight {
                id,
                qp,
                shape,
                grid,
            });
        }
    }

    Ok(QuantizedModel {
        graph,
        passthrough: false,
        bits: manifest.bits,
        weights,
        sites,
    })
}

fn set_named_tensor<E: Element>(
    g: &mut ModelGraph<E>,
    id: &str,
    role: &str,
    t: Tensor<E>,
) -> Result<()> {
    let mut units: Vec<(String, &mut crate::blocks::ConvUnit<E>)> = Vec::new();
    units.push(("stem".to_string(), &mut g.stem));
    for b in &mut g.blocks {
        let bid = format!("s{}.b{}", b.stage, b.index_in_stage);
        for u in &mut b.graph.units {
            units.push((format!("{bid}.{}", u.name), u));
        }
    }
    if let Some(h) = &mut g.head {
        units.push(("head".to_string(), h));
    }
    units.push(("classifier".to_string(), &mut g.classifier));

    for (uid, unit) in units {
        if uid != id {
            continue;
        }
        let target = match role {
            "weight" => &mut unit.weight,
            "gamma" | "beta" | "running_mean" | "running_var" => {
                let bn = unit.bn.as_mut().ok_or_else(|| Error::Format {
                    offset: 8,
                    msg: format!("unit {id:?} has no batch norm for role {role:?}"),
                })?;
                match role {
                    "gamma" => &mut bn.gamma,
                    "beta" => &mut bn.beta,
                    "running_mean" => &mut bn.running_mean,
                    _ => &mut bn.running_var,
                }
            }
            _ => {
                return Err(Error::Format {
                    offset: 8,
                    msg: format!("unknown tensor role {role:?}"),
                })
            }
        };
        if t.shape() != target.shape() {
            return Err(Error::Format {
                offset: 8,
                msg: format!(
                    "tensor {id}:{role} has shape {}, model expects {}",
                    t.shape(),
                    target.shape()
                ),
            });
        }
        *target = t;
        return Ok(());
    }
    Err(Error::Format {
        offset: 8,
        msg: format!("model has no unit {id:?}"),
    })
}

pub fn save_quantized<E: Element>(qm: &QuantizedModel<E>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_quantized(qm, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_quantized<E: Element>(path: impl AsRef<Path>) -> Result<QuantizedModel<E>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_quantized(&mut f)
}
