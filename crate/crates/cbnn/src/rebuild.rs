//! Compact-network derivation and retraining.
//!
//! Once the low-order input slices are known to be redundant, the input loses
//! those channel planes and every hidden depth shrinks by the same factor
//! (N-P)/N; the compact network is then retrained from scratch on the pruned
//! input. Compression is reported as exact size/GOPs ratios between the two
//! architectures.

use crate::bitslice::slice_count_for;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{
    cost_model, reconstructed_cifar_arch, ArchitectureSpec, CostReport, LayerSpec, ParamStore,
};
use crate::training::{evaluate_dataset, train, InputMode, TrainConfig, TrainResult};

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub base_cost: CostReport,
    pub compact_cost: CostReport,
    /// base size_bits / compact size_bits, exact.
    pub size_ratio: f64,
    pub gops_ratio: f64,
    pub base_err: f64,
    pub compact_err: f64,
    /// compact_err - base_err.
    pub delta_err: f64,
}

fn scale_depth(depth: usize, n: usize, p: usize, strict: bool) -> Result<usize> {
    if depth * (n - p) % n == 0 {
        return Ok(depth * (n - p) / n);
    }
    if strict {
        return Err(Error::NonIntegralDepth { depth, n });
    }
    // round the scaled depth down to a multiple of 8, keeping at least 8
    Ok(((depth * (n - p) / n) / 8 * 8).max(8))
}

/// Scales every hidden depth and the bit-sliced input channel count by
/// (n - p)/n. The class count, layer sequence, spatial geometry and the
/// first layer's precision are all preserved.
pub fn shrink_arch(
    arch: &ArchitectureSpec,
    n: usize,
    p: usize,
    strict: bool,
) -> Result<ArchitectureSpec> {
    if n == 0 || p >= n {
        return Err(Error::MalformedConfig(format!(
            "pruned slice count {p} must be below the slice count {n}"
        )));
    }
    arch.validate()?;
    let (w, h, c) = arch.input_shape;
    if c % n != 0 {
        return Err(Error::InvalidArchitecture(format!(
            "input channel count {c} is not a multiple of the slice count {n}"
        )));
    }
    let input_shape = (w, h, c / n * (n - p));
    let last_dense = arch
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Dense { .. }));
    // channel count flowing into the next layer, before and after scaling
    let mut old_c = c;
    let mut new_c = input_shape.2;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for (i, spec) in arch.layers.iter().enumerate() {
        let layer = match *spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                padding,
                precision,
            } => {
                debug_assert_eq!(in_channels, old_c);
                let new_in = new_c;
                let out = scale_depth(out_channels, n, p, strict)?;
                old_c = out_channels;
                new_c = out;
                LayerSpec::Conv {
                    in_channels: new_in,
                    out_channels: out,
                    kernel,
                    padding,
                    precision,
                }
            }
            LayerSpec::Dense {
                in_features,
                out_features,
                precision,
            } => {
                // in_features is spatial * old_c, so it scales with the ratio
                let new_in = in_features / old_c * new_c;
                let new_out = if Some(i) == last_dense {
                    out_features
                } else {
                    scale_depth(out_features, n, p, strict)?
                };
                old_c = out_features;
                new_c = new_out;
                LayerSpec::Dense {
                    in_features: new_in,
                    out_features: new_out,
                    precision,
                }
            }
            LayerSpec::BatchNorm { .. } => LayerSpec::BatchNorm { channels: new_c },
            _ => spec.clone(),
        };
        layers.push(layer);
    }
    let compact = ArchitectureSpec {
        name: format!("{}-p{p}", arch.name),
        input_shape,
        layers,
    };
    compact.validate()?;
    Ok(compact)
}

/// The compact CIFAR architecture obtained by pruning `p` of the 8 input bit
/// slices: depths scaled by (8 - p)/8, 10 classes, full-precision first layer.
pub fn cbnn_cifar_arch(p: usize) -> Result<ArchitectureSpec> {
    shrink_arch(&reconstructed_cifar_arch(), 8, p, true)
}

/// Ratios recomputed exactly from the two cost reports.
pub fn compression_report(
    base_arch: &ArchitectureSpec,
    compact_arch: &ArchitectureSpec,
    nonbinary_weight_bits: u64,
    base_err: f64,
    compact_err: f64,
) -> Result<CompressionReport> {
    let base_cost = cost_model(base_arch, nonbinary_weight_bits)?;
    let compact_cost = cost_model(compact_arch, nonbinary_weight_bits)?;
    Ok(CompressionReport {
        size_ratio: base_cost.size_bits as f64 / compact_cost.size_bits as f64,
        gops_ratio: base_cost.macs as f64 / compact_cost.macs as f64,
        base_cost,
        compact_cost,
        base_err,
        compact_err,
        delta_err: compact_err - base_err,
    })
}

/// Structured-text form of the report. Printed ratios are recomputed from the
/// rounded MB/GOPs figures so the two printed columns stay consistent; when a
/// figure rounds to zero (tiny networks) the exact ratio is used instead.
pub fn report_text(report: &CompressionReport, base_name: &str, compact_name: &str) -> String {
    let bmb = round2(report.base_cost.size_mb);
    let cmb = round2(report.compact_cost.size_mb);
    let bg = round2(report.base_cost.gops);
    let cg = round2(report.compact_cost.gops);
    let size_ratio = if cmb > 0.0 { bmb / cmb } else { report.size_ratio };
    let gops_ratio = if cg > 0.0 { bg / cg } else { report.gops_ratio };
    let mut out = String::from("arch,err,delta_err,size_mb,size_ratio,gops,gops_ratio\n");
    out.push_str(&format!(
        "{base_name},{:.2},,{bmb:.2},1.0x,{bg:.2},1.0x\n",
        report.base_err
    ));
    out.push_str(&format!(
        "{compact_name},{:.2},{:+.2},{cmb:.2},{:.1}x,{cg:.2},{:.1}x\n",
        report.compact_err,
        report.delta_err,
        size_ratio,
        gops_ratio,
    ));
    out
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub struct RebuildOutcome {
    pub compact_arch: ArchitectureSpec,
    pub result: TrainResult,
    pub report: CompressionReport,
}

/// Prunes the dataset slices, shrinks the architecture accordingly, retrains
/// the compact network from scratch and evaluates both models on the
/// validation split.
pub fn rebuild_and_retrain(
    base_arch: &ArchitectureSpec,
    base_params: &ParamStore,
    prunable: &[usize],
    train_ds: &LabeledDataset,
    val_ds: &LabeledDataset,
    config: &TrainConfig,
) -> Result<RebuildOutcome> {
    let n = slice_count_for(train_ds.magnitude_bound);
    let compact_arch = shrink_arch(base_arch, n, prunable.len(), true)?;
    let base_err = evaluate_dataset(
        base_arch,
        base_params,
        val_ds,
        &InputMode::BitSliced { prune: vec![] },
    )?;
    let mode = InputMode::BitSliced { prune: prunable.to_vec() };
    let result = train(&compact_arch, config, train_ds, val_ds, &mode)?;
    let compact_err = result.history.last().map(|h| h.val_err).unwrap_or(f64::NAN);
    let report = compression_report(base_arch, &compact_arch, 16, base_err, compact_err)?;
    Ok(RebuildOutcome {
        compact_arch,
        result,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_bit_task;
    use crate::network::{cost_model, ArchitectureSpec, LayerSpec, Precision};
    use crate::training::init_params;

    #[test]
    fn half_shrink_of_cifar_matches_expected_figures() {
        let compact = cbnn_cifar_arch(4).unwrap();
        assert_eq!(compact.input_shape, (32, 32, 12));
        let depths: Vec<usize> = compact
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect();
        assert_eq!(depths, vec![64, 64, 128, 128, 256, 256]);
        let cost = cost_model(&compact, 16).unwrap();
        assert!((cost.size_mb - 0.45).abs() < 0.01);
        assert!((cost.gops - 0.32).abs() < 0.01);
    }

    #[test]
    fn five_eighths_shrink_reaches_quarter_megabyte() {
        let compact = cbnn_cifar_arch(5).unwrap();
        if let LayerSpec::Conv { out_channels, .. } = compact.layers[0] {
            assert_eq!(out_channels, 48);
        } else {
            panic!();
        }
        let cost = cost_model(&compact, 16).unwrap();
        assert!((cost.size_mb - 0.25).abs() < 0.01);
    }

    #[test]
    fn zero_prune_is_identity_up_to_name() {
        let base = reconstructed_cifar_arch();
        let same = shrink_arch(&base, 8, 0, true).unwrap();
        assert_eq!(same.input_shape, base.input_shape);
        assert_eq!(same.layers, base.layers);
    }

    #[test]
    fn class_and_layer_counts_preserved() {
        let base = reconstructed_cifar_arch();
        let compact = shrink_arch(&base, 8, 3, true).unwrap();
        assert_eq!(compact.layers.len(), base.layers.len());
        assert_eq!(compact.class_count().unwrap(), base.class_count().unwrap());
    }

    #[test]
    fn strict_mode_rejects_non_integral_depths() {
        let arch = ArchitectureSpec {
            name: "odd".into(),
            input_shape: (4, 4, 8),
            layers: vec![
                LayerSpec::Conv { in_channels: 8, out_channels: 100, kernel: 3, padding: 1, precision: Precision::Binary },
                LayerSpec::Dense { in_features: 1600, out_features: 4, precision: Precision::Binary },
            ],
        };
        assert!(matches!(
            shrink_arch(&arch, 8, 5, true),
            Err(Error::NonIntegralDepth { depth: 100, n: 8 })
        ));
        // relaxed mode rounds 37.5 down to a multiple of 8
        let relaxed = shrink_arch(&arch, 8, 5, false).unwrap();
        if let LayerSpec::Conv { out_channels, .. } = relaxed.layers[0] {
            assert_eq!(out_channels, 32);
        } else {
            panic!();
        }
    }

    #[test]
    fn pruned_count_must_stay_below_slice_count() {
        let base = reconstructed_cifar_arch();
        assert!(shrink_arch(&base, 8, 8, true).is_err());
    }

    #[test]
    fn all_binary_conv_net_shrinks_quadratically() {
        let arch = ArchitectureSpec {
            name: "convs".into(),
            input_shape: (8, 8, 8),
            layers: vec![
                LayerSpec::Conv { in_channels: 8, out_channels: 16, kernel: 3, padding: 1, precision: Precision::Binary },
                LayerSpec::Conv { in_channels: 16, out_channels: 32, kernel: 3, padding: 1, precision: Precision::Binary },
                LayerSpec::Conv { in_channels: 32, out_channels: 8, kernel: 1, padding: 0, precision: Precision::Binary },
            ],
        };
        let compact = shrink_arch(&arch, 8, 4, true).unwrap();
        let base_cost = cost_model(&arch, 16).unwrap();
        let compact_cost = cost_model(&compact, 16).unwrap();
        assert_eq!(base_cost.size_bits, compact_cost.size_bits * 4);
    }

    #[test]
    fn report_ratios_recompute_from_costs() {
        let base = crate::network::baseline_cifar_arch();
        let compact = cbnn_cifar_arch(4).unwrap();
        let report = compression_report(&base, &compact, 16, 11.6, 11.8).unwrap();
        assert_eq!(
            report.size_ratio,
            report.base_cost.size_bits as f64 / report.compact_cost.size_bits as f64
        );
        assert_eq!(
            report.gops_ratio,
            report.base_cost.macs as f64 / report.compact_cost.macs as f64
        );
        assert!((report.delta_err - 0.2).abs() < 1e-12);
        let text = report_text(&report, "base", "compact");
        assert!(text.contains("compact,11.80,+0.20,0.45,3.9x,0.32,3.8x"));
    }

    #[test]
    fn five_eighths_printed_ratio_is_seven() {
        let base = crate::network::baseline_cifar_arch();
        let compact = cbnn_cifar_arch(5).unwrap();
        let report = compression_report(&base, &compact, 16, 0.0, 0.0).unwrap();
        let text = report_text(&report, "base", "compact");
        assert!(text.contains("0.25,7.0x"), "{text}");
    }

    #[test]
    fn rebuild_retrains_on_pruned_slices() {
        let ds = synth_bit_task(160, 4, 4, 1, 4, &[3, 4], 3, 8).unwrap();
        let base = ArchitectureSpec {
            name: "tiny".into(),
            input_shape: (4, 4, 4),
            layers: vec![
                LayerSpec::Dense { in_features: 64, out_features: 16, precision: Precision::Full },
                LayerSpec::BatchNorm { channels: 16 },
                LayerSpec::SignActivation,
                LayerSpec::Dense { in_features: 16, out_features: 3, precision: Precision::Binary },
                LayerSpec::BatchNorm { channels: 3 },
            ],
        };
        let config = TrainConfig { epochs: 4, batch_size: 32, seed: 5, ..TrainConfig::default() };
        let base_result = train(&base, &config, &ds, &ds, &InputMode::BitSliced { prune: vec![] }).unwrap();
        let outcome = rebuild_and_retrain(&base, &base_result.state.params, &[1, 2], &ds, &ds, &config).unwrap();
        assert_eq!(outcome.compact_arch.input_shape, (4, 4, 2));
        if let LayerSpec::Dense { in_features, out_features, .. } = outcome.compact_arch.layers[0] {
            assert_eq!((in_features, out_features), (32, 8));
        } else {
            panic!();
        }
        assert_eq!(outcome.report.delta_err, outcome.report.compact_err - outcome.report.base_err);
        assert!(outcome.report.size_ratio > 1.0);
        let _ = init_params(&outcome.compact_arch, 0).unwrap();
    }
}
