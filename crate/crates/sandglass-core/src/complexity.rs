//! Static complexity analyzer: exact parameter and multiply-add counts per
//! layer, computed from shapes alone (no tensor data is touched).
//!
//! Counting convention (fixed so totals are reproducible):
//! - **Params**: conv weights (`Cout * Cin/groups * k * k`) plus 2 per
//!   batch-norm channel (gamma and beta). Running statistics are state, not
//!   parameters. The convolutions carry no biases.
//! - **Multiply-adds**: one per convolution MAC, i.e.
//!   `k^2 * (Cin/groups) * Cout * Hout * Wout` per conv layer at batch 1.
//!   Batch norm and elementwise work are excluded by default; with
//!   `include_bn_madds` each BN contributes `C * H * W`.
//!
//! All counts are exact `u64` integers; display rounding happens only at
//! the formatting edge.

use crate::model::{LayerPlacement, ModelGraph};
use crate::tensor::Element;

/// One row of the per-layer complexity table.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct LayerRow {
    pub id: String,
    /// "conv3x3", "dw3x3", "conv1x1", "bn", "add", or "avgpool".
    pub kind: String,
    /// Output extent `[channels, height, width]` at batch 1.
    pub output: [usize; 3],
    pub params: u64,
    pub madds: u64,
}

/// Full analyzer output for one model.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ComplexityReport {
    pub family: String,
    pub width_multiplier: f64,
    pub resolution: usize,
    pub num_classes: usize,
    pub include_bn_madds: bool,
    pub rows: Vec<LayerRow>,
    pub total_params: u64,
    pub total_madds: u64,
}

/// Analyze a model graph. Pure shape arithmetic: weights may be zero.
pub fn analyze<E: Element>(g: &ModelGraph<E>, include_bn_madds: bool) -> ComplexityReport {
    let mut rows = Vec::new();
    for item in g.layer_walk() {
        match item {
            LayerPlacement::Conv {
                id,
                kind,
                output,
                weight,
                has_bn,
                ..
            } => {
                let weight_numel = weight.numel() as u64;
                let spatial = (output.h * output.w) as u64;
                rows.push(LayerRow {
                    id: id.clone(),
                    kind,
                    output: [output.c, output.h, output.w],
                    params: weight_numel,
                    madds: weight_numel * spatial,
                });
                if has_bn {
                    let c = output.c as u64;
                    rows.push(LayerRow {
                        id: format!("{id}.bn"),
                        kind: "bn".into(),
                        output: [output.c, output.h, output.w],
                        params: 2 * c,
                        madds: if include_bn_madds { c * spatial } else { 0 },
                    });
                }
            }
            LayerPlacement::Add { id, shape } => {
                rows.push(LayerRow {
                    id,
                    kind: "add".into(),
                    output: [shape.c, shape.h, shape.w],
                    params: 0,
                    madds: 0,
                });
            }
            LayerPlacement::Pool { id, output, .. } => {
                rows.push(LayerRow {
                    id,
                    kind: "avgpool".into(),
                    output: [output.c, output.h, output.w],
                    params: 0,
                    madds: 0,
                });
            }
        }
    }
    let total_params = rows.iter().map(|r| r.params).sum();
    let total_madds = rows.iter().map(|r| r.madds).sum();
    ComplexityReport {
        family: g.config.family.as_str().to_string(),
        width_multiplier: g.config.width_multiplier,
        resolution: g.config.resolution,
        num_classes: g.config.num_classes,
        include_bn_madds,
        rows,
        total_params,
        total_madds,
    }
}

impl ComplexityReport {
    /// Sum of params/madds over all rows whose id starts with `prefix`
    /// (exactly, or followed by '.').
    pub fn group_totals(&self, prefix: &str) -> (u64, u64) {
        let mut p = 0;
        let mut m = 0;
        for r in &self.rows {
            if r.id == prefix || r.id.starts_with(&format!("{prefix}.")) {
                p += r.params;
                m += r.madds;
            }
        }
        (p, m)
    }

    /// Top-level group names in row order: "stem", "s0", "s1", ...,
    /// "head", "pool", "classifier".
    pub fn group_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            let group = match r.id.split_once('.') {
                Some((head, _)) => head.to_string(),
                None => r.id.clone(),
            };
            if names.last() != Some(&group) {
                names.push(group);
            }
        }
        names
    }
}

/// Format an exact count in millions with one decimal, rounding half to
/// even on the exact integer (no float in the path).
pub fn display_millions(v: u64) -> String {
    let q = v / 100_000; // tenths of a million
    let r = v % 100_000;
    let mut q = q;
    if r > 50_000 || (r == 50_000 && q % 2 == 1) {
        q += 1;
    }
    format!("{}.{}", q / 10, q % 10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Family, ModelConfig};

    fn report(family: Family, m: f64, include_bn: bool) -> ComplexityReport {
        let cfg = ModelConfig {
            family,
            width_multiplier: m,
            ..ModelConfig::default()
        };
        let g = build_model::<f32>(&cfg).unwrap();
        analyze(&g, include_bn)
    }

    #[test]
    fn display_millions_rounds_half_to_even_exactly() {
        assert_eq!(display_millions(0), "0.0");
        assert_eq!(display_millions(3_236_064), "3.2");
        assert_eq!(display_millions(303_402_240), "303.4");
        // exact halves round to the even tenth
        assert_eq!(display_millions(150_000), "0.2");
        assert_eq!(display_millions(250_000), "0.2");
        assert_eq!(display_millions(349_999), "0.3");
        assert_eq!(display_millions(350_001), "0.4");
    }

    #[test]
    fn stem_row_counts() {
        let r = report(Family::MobileNeXt, 1.0, false);
        let stem = &r.rows[0];
        assert_eq!(stem.id, "stem");
        // 3x3 conv, 3 -> 32, output 112x112
        assert_eq!(stem.params, 32 * 3 * 3 * 3);
        assert_eq!(stem.madds, 32 * 3 * 3 * 3 * 112 * 112);
        let bn = &r.rows[1];
        assert_eq!(bn.id, "stem.bn");
        assert_eq!(bn.params, 64);
        assert_eq!(bn.madds, 0);
    }

    #[test]
    fn bn_madds_flag_adds_channelwise_spatial_work() {
        let base = report(Family::MobileNeXt, 1.0, false);
        let with = report(Family::MobileNeXt, 1.0, true);
        assert_eq!(base.total_params, with.total_params);
        let stem_bn = with.rows.iter().find(|r| r.id == "stem.bn").unwrap();
        assert_eq!(stem_bn.madds, 32 * 112 * 112);
        assert!(with.total_madds > base.total_madds);
    }

    #[test]
    fn params_equal_weights_file_scalars_minus_running_stats() {
        let g = build_model::<f32>(&ModelConfig::default()).unwrap();
        let rep = analyze(&g, false);
        let mut scalars = 0u64;
        for (_, role, t) in g.named_tensors() {
            if role != "running_mean" && role != "running_var" {
                scalars += t.numel() as u64;
            }
        }
        assert_eq!(rep.total_params, scalars);
    }

    #[test]
    fn group_totals_partition_the_network() {
        let r = report(Family::MobileNeXt, 1.0, false);
        let groups = r.group_names();
        assert_eq!(groups.first().map(String::as_str), Some("stem"));
        assert_eq!(groups.last().map(String::as_str), Some("classifier"));
        let (p, m): (u64, u64) = groups
            .iter()
            .map(|gname| r.group_totals(gname))
            .fold((0, 0), |(ap, am), (p, m)| (ap + p, am + m));
        assert_eq!(p, r.total_params);
        assert_eq!(m, r.total_madds);
    }

    // Frozen totals: exact integers under the stated counting convention.
    // These are regression pins; the published rounded figures are checked
    // in the acceptance suite.

    #[test]
    fn frozen_totals_mobilenext() {
        let cases = [
            (1.4, 5_574_198, 571_343_696),
            (1.0, 3_236_064, 303_402_240),
            (0.75, 2_599_048, 204_906_752),
            (0.5, 2_078_928, 103_049_472),
            (0.35, 1_869_734, 73_263_744),
        ];
        for (m, params, madds) in cases {
            let r = report(Family::MobileNeXt, m, false);
            assert_eq!(r.total_params, params, "params at x{m}");
            assert_eq!(r.total_madds, madds, "madds at x{m}");
        }
    }

    #[test]
    fn frozen_totals_mobilenetv2() {
        let cases = [
            (1.4, 6_107_776, 582_195_824),
            (1.0, 3_503_872, 300_774_272),
            (0.75, 2_635_424, 209_069_792),
            (0.5, 1_967_680, 97_131_840),
            (0.35, 1_676_128, 59_285_808),
        ];
        for (m, params, madds) in cases {
            let r = report(Family::MobileNetV2, m, false);
            assert_eq!(r.total_params, params, "params at x{m}");
            assert_eq!(r.total_madds, madds, "madds at x{m}");
        }
    }

    #[test]
    fn frozen_totals_variants() {
        let cases = [
            (Family::VariantA, 3_073_968, 223_337_808),
            (Family::VariantB, 3_089_984, 228_890_880),
            (Family::VariantC, 3_455_296, 347_118_080),
            (Family::MobileNetV2TwoDw, 3_582_368, 334_445_504),
        ];
        for (f, params, madds) in cases {
            let r = report(f, 1.0, false);
            assert_eq!(r.total_params, params, "params of {}", f.as_str());
            assert_eq!(r.total_madds, madds, "madds of {}", f.as_str());
        }
    }

    #[test]
    fn frozen_totals_with_bn_madds() {
        let next = report(Family::MobileNeXt, 1.0, true);
        assert_eq!(next.total_madds, 312_201_072);
        let v2 = report(Family::MobileNetV2, 1.0, true);
        assert_eq!(v2.total_madds, 307_452_384);
    }
}
