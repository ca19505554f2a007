//! Model-selection flags shared by the subcommands, with `--config` JSON
//! merging (explicit flags win over the config file, which wins over
//! defaults).

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use sandglass_core::{
    build_model, parse_model_spec, Family, ModelConfig, ModelGraph, StageSpec,
};

#[derive(clap::Args, Clone, Debug, Default)]
pub struct ModelFlags {
    /// Network family.
    #[arg(long, value_parser = parse_family)]
    pub family: Option<Family>,
    /// Width multiplier (e.g. 1.0, 0.75).
    #[arg(long)]
    pub width: Option<f64>,
    /// Input resolution (square).
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Number of classifier outputs.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Identity tensor multiplier for sandglass blocks, in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Model-spec JSON file; explicit flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn parse_family(s: &str) -> Result<Family, String> {
    Family::parse(s).ok_or_else(|| {
        format!(
            "unknown family {s:?} (expected one of: {})",
            Family::ALL.map(|f| f.as_str()).join(", ")
        )
    })
}

pub fn parse_block(s: &str) -> Result<sandglass_core::BlockKind, String> {
    sandglass_core::BlockKind::parse(s).ok_or_else(|| {
        format!(
            "unknown block {s:?} (expected one of: {})",
            sandglass_core::BlockKind::ALL.map(|k| k.as_str()).join(", ")
        )
    })
}

impl ModelFlags {
    /// Resolve config + optional explicit stage table.
    pub fn resolve(&self) -> Result<(ModelConfig, Option<Vec<StageSpec>>)> {
        let (mut config, stages) = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let parsed = parse_model_spec(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?;
                (parsed.config, parsed.stages)
            }
            None => (ModelConfig::default(), None),
        };
        if let Some(f) = self.family {
            if self.config.is_some() && stages.is_some() && f != config.family {
                bail!(
                    "--family {} conflicts with the config file's explicit stage table \
                     (family {})",
                    f,
                    config.family
                );
            }
            config.family = f;
        }
        if let Some(w) = self.width {
            config.width_multiplier = w;
        }
        if let Some(r) = self.resolution {
            config.resolution = r;
        }
        if let Some(k) = self.classes {
            config.num_classes = k;
        }
        if let Some(a) = self.alpha {
            config.alpha = a;
        }
        config.validate()?;
        Ok((config, stages))
    }

    /// Build the graph (weights zero-initialized).
    pub fn build(&self) -> Result<ModelGraph<f32>> {
        let (config, stages) = self.resolve()?;
        let g = match stages {
            Some(stages) => ModelGraph::from_stages(&config, stages)?,
            None => build_model(&config)?,
        };
        Ok(g)
    }
}
