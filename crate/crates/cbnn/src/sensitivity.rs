//! Post-training bit-slice sensitivity analysis.
//!
//! The network is left untouched; selected input slices are replaced with
//! fresh random bits and the resulting error rate is averaged over several
//! trials. The gap to the reference error ranks slices by how much the model
//! relies on them, and the prunable set is the largest low-order prefix whose
//! joint distortion stays under the error threshold.

use crate::data::{bitsliced_batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::network::{argmax, InferenceModel};
use crate::rng::stream_seed;
use rayon::prelude::*;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub struct SensitivityConfig {
    /// Distorted evaluations averaged per row.
    pub trials: usize,
    /// Error-tolerance threshold in percent.
    pub err_threshold: f64,
    pub seed: u64,
    /// Reference error override, in percent. Defaults to the analyzed
    /// model's own clean-input error; set this to compare against a
    /// different model's error instead.
    pub err_ref: Option<f64>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            trials: 10,
            err_threshold: 1.0,
            seed: 0,
            err_ref: None,
        }
    }
}

impl SensitivityConfig {
    fn check(&self) -> Result<()> {
        if self.trials < 1 || self.err_threshold <= 0.0 {
            return Err(Error::MalformedConfig(
                "trials must be >= 1 and err_threshold > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    /// The distorted slice set (1-based, ascending).
    pub slices: Vec<usize>,
    /// Mean error % under distortion.
    pub mean_err: f64,
    /// mean_err - err_ref.
    pub delta_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub err_ref: f64,
    pub rows: Vec<SensitivityRow>,
    pub turning_point: Option<usize>,
    /// Slices whose joint distortion keeps the error within the threshold.
    pub prunable: Vec<usize>,
}

/// Number of slices per base channel the model expects, or an error if the
/// model input is not the bit-sliced expansion of this dataset.
fn slice_count(model: &InferenceModel, ds: &LabeledDataset) -> Result<usize> {
    let (w, h, c) = model.arch.input_shape;
    let n = crate::bitslice::slice_count_for(ds.magnitude_bound);
    if w != ds.width || h != ds.height || c != ds.channels * n {
        return Err(Error::ShapeMismatch(format!(
            "model input ({w},{h},{c}) is not the {n}-slice expansion of \
             {}x{}x{} images",
            ds.width, ds.height, ds.channels
        )));
    }
    Ok(n)
}

/// Error % over the dataset with the given slices randomized (empty set =
/// clean evaluation). Fresh bits per image, derived from `seed`.
pub fn distorted_err(
    model: &InferenceModel,
    ds: &LabeledDataset,
    slices: &[usize],
    seed: u64,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = model.class_count();
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut wrong = 0usize;
    for (chunk_idx, chunk) in all.chunks(EVAL_CHUNK).enumerate() {
        let distort = if slices.is_empty() {
            None
        } else {
            Some((slices, stream_seed(seed, chunk_idx as u64)))
        };
        let (inputs, labels) = bitsliced_batch(ds, chunk, distort, &[])?;
        let logits = model.forward_batch(&inputs)?;
        for (row, &label) in logits.values.chunks(classes).zip(&labels) {
            if argmax(row) != label {
                wrong += 1;
            }
        }
    }
    Ok(100.0 * wrong as f64 / ds.len() as f64)
}

fn mean_distorted_err(
    model: &InferenceModel,
    ds: &LabeledDataset,
    slices: &[usize],
    config: &SensitivityConfig,
    row_tag: u64,
) -> Result<f64> {
    let errs: Vec<f64> = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let trial_seed = stream_seed(stream_seed(config.seed, row_tag), t as u64);
            distorted_err(model, ds, slices, trial_seed)
        })
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / config.trials as f64)
}

fn analyze(
    model: &InferenceModel,
    ds: &LabeledDataset,
    config: &SensitivityConfig,
    stacked: bool,
) -> Result<SensitivityReport> {
    config.check()?;
    let n = slice_count(model, ds)?;
    let err_ref = match config.err_ref {
        Some(e) => e,
        None => distorted_err(model, ds, &[], config.seed)?,
    };
    let mut rows = Vec::with_capacity(n);
    for k in 1..=n {
        let slices: Vec<usize> = if stacked { (1..=k).collect() } else { vec![k] };
        let mean_err = mean_distorted_err(model, ds, &slices, config, k as u64)?;
        rows.push(SensitivityRow {
            slices,
            mean_err,
            delta_err: mean_err - err_ref,
        });
    }
    let (prunable, turning_point) = if stacked {
        let deltas: Vec<f64> = rows.iter().map(|r| r.delta_err).collect();
        select_prunable(&deltas, config.err_threshold)?
    } else {
        (Vec::new(), None)
    };
    Ok(SensitivityReport {
        err_ref,
        rows,
        turning_point,
        prunable,
    })
}

/// Per-slice sensitivity: row n randomizes slice n alone.
pub fn analyze_single(
    model: &InferenceModel,
    ds: &LabeledDataset,
    config: &SensitivityConfig,
) -> Result<SensitivityReport> {
    analyze(model, ds, config, false)
}

/// Stacked sensitivity: row k randomizes slices 1..=k jointly in every base
/// channel. The prunable set and turning point are derived from these rows.
pub fn analyze_stack(
    model: &InferenceModel,
    ds: &LabeledDataset,
    config: &SensitivityConfig,
) -> Result<SensitivityReport> {
    analyze(model, ds, config, true)
}

/// From stacked-row deltas (row k = slices 1..=k), picks the prunable set as
/// the largest prefix whose rows all stay within the threshold, and the
/// turning point as the first row whose delta either flips sign against the
/// preceding same-signed run or rises by more than the threshold over its
/// predecessor.
pub fn select_prunable(stacked_deltas: &[f64], err_threshold: f64) -> Result<(Vec<usize>, Option<usize>)> {
    if stacked_deltas.is_empty() {
        return Err(Error::ShapeMismatch("empty sensitivity report".into()));
    }
    let mut prefix = 0usize;
    for &d in stacked_deltas {
        if d <= err_threshold {
            prefix += 1;
        } else {
            break;
        }
    }
    let mut turning_point = None;
    for k in 1..stacked_deltas.len() {
        let prev = stacked_deltas[k - 1];
        let cur = stacked_deltas[k];
        let sign_flip = (prev < 0.0) != (cur < 0.0);
        let jump = cur - prev > err_threshold;
        if sign_flip || jump {
            turning_point = Some(k + 1);
            break;
        }
    }
    Ok(((1..=prefix).collect(), turning_point))
}

/// Comma-separated report: one row per slice set, then a summary line.
pub fn report_csv(report: &SensitivityReport) -> String {
    let mut out = String::from("slice_spec,mean_err,delta_err\n");
    for row in &report.rows {
        let spec = match (row.slices.first(), row.slices.last()) {
            (Some(a), Some(b)) if a != b => format!("{a}-{b}"),
            (Some(a), _) => a.to_string(),
            _ => String::new(),
        };
        out.push_str(&format!("{spec},{:.4},{:.4}\n", row.mean_err, row.delta_err));
    }
    let tp = report
        .turning_point
        .map(|t| t.to_string())
        .unwrap_or_else(|| "none".into());
    let prunable = report
        .prunable
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    out.push_str(&format!("# turning_point={tp} prunable={{{prunable}}}\n"));
    out
}

/// (slice index, delta_err) pairs for external plotting.
pub fn plot_data(report: &SensitivityReport) -> String {
    let mut out = String::new();
    for (k, row) in report.rows.iter().enumerate() {
        out.push_str(&format!("{} {:.4}\n", k + 1, row.delta_err));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_bit_task;
    use crate::network::{ArchitectureSpec, LayerSpec, Precision};
    use crate::training::{train, InputMode, TrainConfig};

    #[test]
    fn prefix_and_turning_point_on_descending_then_flip() {
        let deltas = [-1.9, -1.7, -1.8, -0.9, 1.9, 12.6, 34.5, 48.0];
        let (p, tp) = select_prunable(&deltas, 1.0).unwrap();
        assert_eq!(p, vec![1, 2, 3, 4]);
        assert_eq!(tp, Some(5));
    }

    #[test]
    fn all_above_threshold_gives_empty_set() {
        let (p, _) = select_prunable(&[2.0, 3.0, 4.0], 1.0).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn all_below_threshold_gives_full_set_and_no_turning_point() {
        let (p, tp) = select_prunable(&[-0.5, -0.4, -0.3, -0.2], 1.0).unwrap();
        assert_eq!(p, vec![1, 2, 3, 4]);
        assert_eq!(tp, None);
    }

    #[test]
    fn abrupt_same_sign_jump_is_a_turning_point() {
        let (p, tp) = select_prunable(&[0.1, 0.2, 5.0, 6.0], 1.0).unwrap();
        assert_eq!(p, vec![1, 2]);
        assert_eq!(tp, Some(3));
    }

    #[test]
    fn empty_report_rejected() {
        assert!(select_prunable(&[], 1.0).is_err());
    }

    fn tiny_setup() -> (InferenceModel, crate::data::LabeledDataset) {
        let ds = synth_bit_task(200, 4, 4, 1, 4, &[3, 4], 3, 21).unwrap();
        let arch = ArchitectureSpec {
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
        let config = TrainConfig {
            epochs: 15,
            batch_size: 25,
            learning_rate: 5e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        let result = train(&arch, &config, &ds, &ds, &InputMode::BitSliced { prune: vec![] }).unwrap();
        let model = InferenceModel::from_params(&arch, &result.state.params).unwrap();
        (model, ds)
    }

    #[test]
    fn clean_evaluation_has_zero_delta_and_reports_are_reproducible() {
        let (model, ds) = tiny_setup();
        let clean_a = distorted_err(&model, &ds, &[], 5).unwrap();
        let clean_b = distorted_err(&model, &ds, &[], 99).unwrap();
        assert_eq!(clean_a, clean_b); // seed unused without distortion
        let config = SensitivityConfig { trials: 3, seed: 7, ..Default::default() };
        let a = analyze_single(&model, &ds, &config).unwrap();
        let b = analyze_single(&model, &ds, &config).unwrap();
        assert_eq!(a, b);
        for row in &a.rows {
            assert!((row.delta_err - (row.mean_err - a.err_ref)).abs() < 1e-12);
        }
    }

    #[test]
    fn significant_slices_hurt_more_than_noise_slices() {
        let (model, ds) = tiny_setup();
        let config = SensitivityConfig { trials: 4, seed: 11, ..Default::default() };
        let report = analyze_single(&model, &ds, &config).unwrap();
        // labels depend only on slices 3 and 4
        assert!(report.rows[3].delta_err > report.rows[0].delta_err);
        assert!(report.rows[3].delta_err > 5.0);
        let stacked = analyze_stack(&model, &ds, &config).unwrap();
        assert!(stacked.rows[0].delta_err.abs() < stacked.rows[3].delta_err);
        for &s in &stacked.prunable {
            assert!(stacked.rows[s - 1].delta_err <= config.err_threshold);
        }
    }

    #[test]
    fn err_ref_override_shifts_deltas() {
        let (model, ds) = tiny_setup();
        let config = SensitivityConfig { trials: 2, seed: 13, err_ref: Some(10.0), ..Default::default() };
        let report = analyze_single(&model, &ds, &config).unwrap();
        assert_eq!(report.err_ref, 10.0);
        for row in &report.rows {
            assert!((row.delta_err - (row.mean_err - 10.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (model, _) = tiny_setup();
        let other = synth_bit_task(10, 5, 5, 1, 4, &[4], 3, 2).unwrap();
        let config = SensitivityConfig::default();
        assert!(analyze_single(&model, &other, &config).is_err());
    }

    #[test]
    fn csv_layout() {
        let report = SensitivityReport {
            err_ref: 9.8,
            rows: vec![
                SensitivityRow { slices: vec![1], mean_err: 7.9, delta_err: -1.9 },
                SensitivityRow { slices: vec![1, 2], mean_err: 8.1, delta_err: -1.7 },
            ],
            turning_point: Some(5),
            prunable: vec![1, 2],
        };
        let csv = report_csv(&report);
        assert!(csv.contains("1,7.9000,-1.9000"));
        assert!(csv.contains("1-2,8.1000,-1.7000"));
        assert!(csv.contains("turning_point=5"));
        assert!(csv.contains("prunable={1 2}"));
    }
}
