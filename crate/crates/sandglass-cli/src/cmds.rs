//! The five subcommand implementations. Each returns the process exit code
//! (0 success, 1 runtime/numeric failure); usage errors exit 2 via clap.

use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sandglass_core::{
    analyze, display_millions, export_model_spec, gradcheck, load_quantized, load_weights,
    nudge_from_kinks, quant_error_report, quantize_model, read_tensor_file, save_quantized,
    write_tensor_file, BlockGraph, BlockKind, BlockSpec, ComplexityReport, ModelGraph,
    QuantOptions, QuantizedModel, Rng, Shape, Tensor, QUANT_MAGIC, WEIGHTS_MAGIC,
};

use crate::args::ModelFlags;
use crate::render::{bold, color_enabled, Align, Format, Table};

fn spec_value(g: &ModelGraph<f32>) -> serde_json::Value {
    serde_json::from_str(&export_model_spec(g)).expect("exported spec is valid JSON")
}

fn load_input_f32(path: &Path) -> Result<Tensor<f32>> {
    read_tensor_file(path)
        .and_then(|t| t.expect_f32())
        .with_context(|| format!("reading input tensor {}", path.display()))
}

/// Build the model and fill weights from `--weights` (.ncw) or seed init.
fn build_fp32(flags: &ModelFlags, weights: Option<&Path>, seed: u64) -> Result<ModelGraph<f32>> {
    let mut g = flags.build()?;
    match weights {
        Some(path) => {
            load_weights(&mut g, path)
                .with_context(|| format!("loading weights {}", path.display()))?;
        }
        None => g.init_weights(seed)?,
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// summary
// ---------------------------------------------------------------------------

pub fn summary(flags: &ModelFlags, include_bn_madds: bool, format: Format) -> Result<i32> {
    let g = flags.build()?;
    let report = analyze(&g, include_bn_madds);
    match format {
        Format::Json => {
            let out = serde_json::json!({
                "model": spec_value(&g),
                "report": report,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Format::Table | Format::Csv => {
            let table = summary_table(&report);
            if format == Format::Csv {
                print!("{}", table.render_csv());
            } else {
                let color = color_enabled();
                print!("{}", table.render(color));
                println!(
                    "{}",
                    bold(
                        &format!(
                            "total: {} params ({}M), {} madds ({}M)",
                            report.total_params,
                            display_millions(report.total_params),
                            report.total_madds,
                            display_millions(report.total_madds),
                        ),
                        color
                    )
                );
            }
        }
    }
    Ok(0)
}

fn summary_table(report: &ComplexityReport) -> Table {
    let mut table = Table::new(
        &["layer", "kind", "output", "params", "madds"],
        &[
            Align::Left,
            Align::Left,
            Align::Right,
            Align::Right,
            Align::Right,
        ],
    );
    for row in &report.rows {
        table.row(vec![
            row.id.clone(),
            row.kind.clone(),
            format!("{}x{}x{}", row.output[0], row.output[1], row.output[2]),
            row.params.to_string(),
            row.madds.to_string(),
        ]);
    }
    table
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(clap::Args, Clone, Debug, Default)]
pub struct VsFlags {
    /// Right-hand family (defaults to the left-hand value).
    #[arg(long)]
    pub vs_family: Option<String>,
    #[arg(long)]
    pub vs_width: Option<f64>,
    #[arg(long)]
    pub vs_resolution: Option<usize>,
    #[arg(long)]
    pub vs_classes: Option<usize>,
    #[arg(long)]
    pub vs_alpha: Option<f64>,
    /// Right-hand model-spec JSON file.
    #[arg(long)]
    pub vs_config: Option<PathBuf>,
}

impl VsFlags {
    fn right_flags(&self, left: &ModelFlags) -> Result<ModelFlags> {
        let family = match &self.vs_family {
            Some(s) => Some(
                sandglass_core::Family::parse(s)
                    .ok_or_else(|| anyhow::anyhow!("unknown family {s:?}"))?,
            ),
            None => left.family,
        };
        Ok(ModelFlags {
            family,
            width: self.vs_width.or(left.width),
            resolution: self.vs_resolution.or(left.resolution),
            classes: self.vs_classes.or(left.classes),
            alpha: self.vs_alpha.or(left.alpha),
            config: self.vs_config.clone().or_else(|| left.config.clone()),
        })
    }
}

pub fn compare(
    flags: &ModelFlags,
    vs: &VsFlags,
    include_bn_madds: bool,
    format: Format,
) -> Result<i32> {
    let left = flags.build()?;
    let right = vs.right_flags(flags)?.build()?;
    let lrep = analyze(&left, include_bn_madds);
    let rrep = analyze(&right, include_bn_madds);

    let dp = lrep.total_params as i128 - rrep.total_params as i128;
    let dm = lrep.total_madds as i128 - rrep.total_madds as i128;

    match format {
        Format::Json => {
            let out = serde_json::json!({
                "left": {"model": spec_value(&left), "report": lrep},
                "right": {"model": spec_value(&right), "report": rrep},
                "delta": {"params": dp as i64, "madds": dm as i64},
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Format::Table | Format::Csv => {
            let mut groups = lrep.group_names();
            for gname in rrep.group_names() {
                if !groups.contains(&gname) {
                    groups.push(gname);
                }
            }
            let mut table = Table::new(
                &[
                    "group",
                    "params(l)",
                    "madds(l)",
                    "params(r)",
                    "madds(r)",
                    "d-params",
                    "d-madds",
                ],
                &[
                    Align::Left,
                    Align::Right,
                    Align::Right,
                    Align::Right,
                    Align::Right,
                    Align::Right,
                    Align::Right,
                ],
            );
            for gname in &groups {
                let (lp, lm) = lrep.group_totals(gname);
                let (rp, rm) = rrep.group_totals(gname);
                table.row(vec![
                    gname.clone(),
                    lp.to_string(),
                    lm.to_string(),
                    rp.to_string(),
                    rm.to_string(),
                    (lp as i128 - rp as i128).to_string(),
                    (lm as i128 - rm as i128).to_string(),
                ]);
            }
            table.row(vec![
                "total".into(),
                lrep.total_params.to_string(),
                lrep.total_madds.to_string(),
                rrep.total_params.to_string(),
                rrep.total_madds.to_string(),
                dp.to_string(),
                dm.to_string(),
            ]);
            if format == Format::Csv {
                print!("{}", table.render_csv());
            } else {
                let color = color_enabled();
                println!(
                    "{}",
                    bold(
                        &format!(
                            "left: {} x{}  |  right: {} x{}",
                            lrep.family, lrep.width_multiplier, rrep.family, rrep.width_multiplier
                        ),
                        color
                    )
                );
                print!("{}", table.render(color));
                println!(
                    "delta: {dp} params ({}M), {dm} madds ({}M)",
                    display_millions(dp.unsigned_abs() as u64),
                    display_millions(dm.unsigned_abs() as u64),
                );
            }
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

enum LoadedModel {
    Fp32(ModelGraph<f32>),
    Quantized(QuantizedModel<f32>),
}

fn sniff_magic(path: &Path) -> Result<[u8; 8]> {
    let mut f = std::fs::File::open(path)
        .with_context(|| format!("opening weights {}", path.display()))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .with_context(|| format!("reading magic of {}", path.display()))?;
    Ok(magic)
}

fn load_model(flags: &ModelFlags, weights: Option<&Path>, seed: u64) -> Result<LoadedModel> {
    match weights {
        Some(path) if sniff_magic(path)? == *QUANT_MAGIC => {
            // .ncq embeds its own model spec; model flags are not consulted.
            Ok(LoadedModel::Quantized(load_quantized(path)?))
        }
        Some(path) if sniff_magic(path)? == *WEIGHTS_MAGIC => {
            Ok(LoadedModel::Fp32(build_fp32(flags, Some(path), seed)?))
        }
        Some(path) => bail!(
            "{} is neither a .ncw weights file nor a .ncq quantized model",
            path.display()
        ),
        None => Ok(LoadedModel::Fp32(build_fp32(flags, None, seed)?)),
    }
}

fn top_k(logits: &Tensor<f32>, item: usize, k: usize) -> Vec<usize> {
    let s = logits.shape();
    let mut idx: Vec<usize> = (0..s.c).collect();
    idx.sort_by(|&a, &b| {
        logits
            .get(item, b, 0, 0)
            .partial_cmp(&logits.get(item, a, 0, 0))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

#[allow(clippy::too_many_arguments)]
pub fn forward(
    flags: &ModelFlags,
    weights: Option<&Path>,
    input: &Path,
    out: Option<&Path>,
    seed: u64,
    format: Format,
) -> Result<i32> {
    let model = load_model(flags, weights, seed)?;
    let x = load_input_f32(input)?;
    let logits = match &model {
        LoadedModel::Fp32(g) => g.forward(&x)?,
        LoadedModel::Quantized(qm) => qm.forward(&x)?,
    };
    if let Some(path) = out {
        write_tensor_file(path, &logits)
            .with_context(|| format!("writing logits {}", path.display()))?;
    }

    let n = logits.shape().n;
    let argmax: Vec<usize> = (0..n).map(|i| top_k(&logits, i, 1)[0]).collect();
    let top5: Vec<Vec<usize>> = (0..n).map(|i| top_k(&logits, i, 5)).collect();

    match format {
        Format::Json => {
            let out_path = out.map(|p| p.display().to_string());
            let j = serde_json::json!({
                "argmax": argmax,
                "top5": top5,
                "out": out_path,
            });
            println!("{}", serde_json::to_string_pretty(&j)?);
        }
        Format::Table | Format::Csv => {
            for i in 0..n {
                println!(
                    "item {i}: argmax {}  top5 {:?}",
                    argmax[i], top5[i]
                );
            }
            if let Some(path) = out {
                println!("wrote logits to {}", path.display());
            }
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn gradcheck_cmd(
    kind: BlockKind,
    m: usize,
    n: usize,
    t: u32,
    s: usize,
    spatial: usize,
    step: f64,
    threshold: f64,
    seed: u64,
    format: Format,
) -> Result<i32> {
    let spec = BlockSpec::new(kind, m, n, t, s);
    let mut graph = BlockGraph::<f64>::build(spec)?;
    let mut rng = Rng::new(seed);
    graph.init_weights(&mut rng)?;

    let mut x0 = Tensor::<f64>::random_normal(Shape::new(1, m, spatial, spatial), &mut rng, 0.0, 1.0)?;
    nudge_from_kinks(&mut x0, 1e-3);

    let report = gradcheck(
        |tape, x| {
            let y = graph.forward_tape(tape, x)?;
            tape.sum(y)
        },
        &x0,
        step,
    )?;
    let pass = report.max_rel_err < threshold;

    match format {
        Format::Json => {
            let j = serde_json::json!({
                "block": kind.as_str(),
                "m": m, "n": n, "t": t, "s": s, "spatial": spatial,
                "step": step,
                "threshold": threshold,
                "max_rel_err": report.max_rel_err,
                "worst_coord": report.worst_coord,
                "pass": pass,
            });
            println!("{}", serde_json::to_string_pretty(&j)?);
        }
        Format::Table | Format::Csv => {
            println!(
                "block {} (m={m} n={n} t={t} s={s} spatial={spatial}): \
                 max relative error {:.3e} (threshold {threshold:.0e}) -> {}",
                kind.as_str(),
                report.max_rel_err,
                if pass { "PASS" } else { "FAIL" }
            );
        }
    }
    Ok(if pass { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn quantize(
    flags: &ModelFlags,
    weights: Option<&Path>,
    calib: &[PathBuf],
    probe: &[PathBuf],
    bits: u32,
    passthrough: bool,
    out: Option<&Path>,
    seed: u64,
    format: Format,
) -> Result<i32> {
    let g = build_fp32(flags, weights, seed)?;
    let calib_tensors: Vec<Tensor<f32>> = calib
        .iter()
        .map(|p| load_input_f32(p))
        .collect::<Result<_>>()?;
    let probe_tensors: Vec<Tensor<f32>> = if probe.is_empty() {
        calib_tensors.clone()
    } else {
        probe
            .iter()
            .map(|p| load_input_f32(p))
            .collect::<Result<_>>()?
    };

    let qm = quantize_model(
        &g,
        &calib_tensors,
        &QuantOptions { bits, passthrough },
    )?;
    if let Some(path) = out {
        save_quantized(&qm, path)
            .with_context(|| format!("writing quantized model {}", path.display()))?;
    }
    let report = quant_error_report(&g, &qm, &probe_tensors)?;

    match format {
        Format::Json => {
            let out_path = out.map(|p| p.display().to_string());
            let j = serde_json::json!({
                "model": spec_value(&g),
                "bits": bits,
                "passthrough": passthrough,
                "report": report,
                "out": out_path,
            });
            println!("{}", serde_json::to_string_pretty(&j)?);
        }
        Format::Table | Format::Csv => {
            let mut table = Table::new(
                &["site", "mse", "snr_db"],
                &[Align::Left, Align::Right, Align::Right],
            );
            for row in &report.rows {
                table.row(vec![
                    row.id.clone(),
                    format!("{:.3e}", row.mse),
                    match row.snr_db {
                        Some(v) => format!("{v:.2}"),
                        None => "inf".to_string(),
                    },
                ]);
            }
            if format == Format::Csv {
                print!("{}", table.render_csv());
            } else {
                print!("{}", table.render(color_enabled()));
            }
            println!(
                "argmax agreement: {:.1}% over {} probe items",
                report.argmax_agreement * 100.0,
                report.probes
            );
            if let Some(path) = out {
                println!("wrote quantized model to {}", path.display());
            }
        }
    }
    Ok(0)
}
