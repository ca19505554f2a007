//! `sandglass` — build, inspect, compare, run, gradient-check, and quantize
//! sandglass-family mobile CNNs.
//!
//! Exit codes: 0 success, 1 runtime/numeric error, 2 usage error.

mod args;
mod cmds;
mod render;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use args::ModelFlags;
use render::Format;

#[derive(Parser)]
#[command(
    name = "sandglass",
    version,
    about = "Mobile CNN building blocks: complexity analysis, inference, gradient checks, quantization",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-layer parameter/multiply-add table and totals.
    Summary {
        #[command(flatten)]
        model: ModelFlags,
        /// Count batch-norm scale/shift work in the madds totals.
        #[arg(long)]
        include_bn_madds: bool,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Aligned complexity comparison of two models.
    Compare {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        vs: cmds::VsFlags,
        #[arg(long)]
        include_bn_madds: bool,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Run a forward pass on an input tensor and report argmax/top-5.
    Forward {
        #[command(flatten)]
        model: ModelFlags,
        /// Weights file: .ncw (fp32) or .ncq (quantized; embeds its model).
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Input tensor (.nct, f32, shape n x 3 x r x r).
        #[arg(long)]
        input: PathBuf,
        /// Write logits to this .nct file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for weight initialization when no --weights is given.
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Finite-difference check of the block gradient (f64).
    Gradcheck {
        /// Block kind: sandglass, inverted, inverted-2dw, classic,
        /// variant-a, variant-b, variant-c.
        #[arg(long, value_parser = args::parse_block)]
        block: sandglass_core::BlockKind,
        /// Input channels.
        #[arg(long, default_value = "8")]
        m: usize,
        /// Output channels.
        #[arg(long, default_value = "8")]
        n: usize,
        /// Reduction/expansion ratio.
        #[arg(long, default_value = "2")]
        t: u32,
        /// Stride (1 or 2).
        #[arg(long, default_value = "1")]
        s: usize,
        /// Spatial extent of the toy input.
        #[arg(long, default_value = "6")]
        spatial: usize,
        /// Central-difference step h.
        #[arg(long, default_value = "1e-5")]
        step: f64,
        /// Pass iff max relative error is below this.
        #[arg(long, default_value = "1e-4")]
        threshold: f64,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Post-training quantization: calibrate, write .ncq, report SNR.
    Quantize {
        #[command(flatten)]
        model: ModelFlags,
        /// Fp32 weights to quantize (.ncw); seed init when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Calibration input tensor files (.nct); repeatable.
        #[arg(long, required_unless_present = "passthrough")]
        calib: Vec<PathBuf>,
        /// Probe inputs for the error report (defaults to the calibration
        /// set); repeatable.
        #[arg(long)]
        probe: Vec<PathBuf>,
        /// Quantization bit width (2..=8).
        #[arg(long, default_value = "8")]
        bits: u32,
        /// Disable quantization: store/run the model as plain fp32.
        #[arg(long)]
        passthrough: bool,
        /// Write the quantized model to this .ncq file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for weight initialization when no --weights is given.
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.cmd {
        Cmd::Summary {
            model,
            include_bn_madds,
            format,
        } => cmds::summary(&model, include_bn_madds, format),
        Cmd::Compare {
            model,
            vs,
            include_bn_madds,
            format,
        } => cmds::compare(&model, &vs, include_bn_madds, format),
        Cmd::Forward {
            model,
            weights,
            input,
            out,
            seed,
            format,
        } => cmds::forward(&model, weights.as_deref(), &input, out.as_deref(), seed, format),
        Cmd::Gradcheck {
            block,
            m,
            n,
            t,
            s,
            spatial,
            step,
            threshold,
            seed,
            format,
        } => cmds::gradcheck_cmd(block, m, n, t, s, spatial, step, threshold, seed, format),
        Cmd::Quantize {
            model,
            weights,
            calib,
            probe,
            bits,
            passthrough,
            out,
            seed,
            format,
        } => cmds::quantize(
            &model,
            weights.as_deref(),
            &calib,
            &probe,
            bits,
            passthrough,
            out.as_deref(),
            seed,
            format,
        ),
    }
}

/// Restore the default SIGPIPE disposition so that piping into a pager or
/// `head` terminates the process quietly instead of panicking on a failed
/// stdout write.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() {
    reset_sigpipe();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
