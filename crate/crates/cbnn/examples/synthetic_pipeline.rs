//! End-to-end compression pipeline at desk scale on the synthetic
//! bit-significance task: train a network on bit-sliced input, measure
//! stacked slice sensitivity, prune the redundant slices, rebuild a compact
//! network and compare.
//!
//!     cargo run --release --example synthetic_pipeline

use cbnn::data::synth_bit_task;
use cbnn::network::{ArchitectureSpec, InferenceModel, LayerSpec, Precision};
use cbnn::rebuild::{rebuild_and_retrain, report_text};
use cbnn::sensitivity::{analyze_stack, report_csv, SensitivityConfig};
use cbnn::training::{train, InputMode, TrainConfig};

fn main() {
    // labels depend only on the three most significant of 8 bit slices
    let ds = synth_bit_task(2500, 8, 8, 1, 8, &[6, 7, 8], 4, 1).expect("dataset");
    let (train_ds, val_ds) = ds.split_at(2000);

    let arch = ArchitectureSpec {
        name: "synth".into(),
        input_shape: (8, 8, 8),
        layers: vec![
            LayerSpec::Conv { in_channels: 8, out_channels: 32, kernel: 3, padding: 1, precision: Precision::Full },
            LayerSpec::MaxPool { window: 2 },
            LayerSpec::BatchNorm { channels: 32 },
            LayerSpec::SignActivation,
            LayerSpec::Dense { in_features: 512, out_features: 64, precision: Precision::Binary },
            LayerSpec::BatchNorm { channels: 64 },
            LayerSpec::SignActivation,
            LayerSpec::Dense { in_features: 64, out_features: 4, precision: Precision::Binary },
            LayerSpec::BatchNorm { channels: 4 },
        ],
    };

    let config = TrainConfig { epochs: 12, batch_size: 50, seed: 7, ..TrainConfig::default() };
    println!("training the full-input network ...");
    let result = train(&arch, &config, &train_ds, &val_ds, &InputMode::BitSliced { prune: vec![] })
        .expect("training");
    for h in &result.history {
        println!("  epoch {:>2}: loss {:.4}  val err {:.2}%", h.epoch, h.train_loss, h.val_err);
    }

    let model = InferenceModel::from_params(&arch, &result.state.params).expect("model");
    let sens = SensitivityConfig { trials: 5, seed: 7, ..Default::default() };
    println!("\nstacked slice sensitivity:");
    let report = analyze_stack(&model, &val_ds, &sens).expect("sensitivity");
    print!("{}", report_csv(&report));

    println!("\nrebuilding with slices {:?} pruned ...", report.prunable);
    let outcome = rebuild_and_retrain(
        &arch,
        &result.state.params,
        &report.prunable,
        &train_ds,
        &val_ds,
        &config,
    )
    .expect("rebuild");
    print!("\n{}", report_text(&outcome.report, &arch.name, &outcome.compact_arch.name));
}
