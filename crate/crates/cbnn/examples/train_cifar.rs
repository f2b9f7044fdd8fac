//! Trains a quarter-depth network on a CIFAR-10 subset with bit-sliced input.
//! Needs the canonical CIFAR-10 binary files; point CIFAR10_DIR at the
//! directory holding data_batch_1.bin .. test_batch.bin.
//!
//!     CIFAR10_DIR=/path/to/cifar-10-batches-bin \
//!         cargo run --release --example train_cifar

use cbnn::data::load_cifar10;
use cbnn::network::{conv_ladder, Precision};
use cbnn::training::{train, InputMode, TrainConfig};
use std::path::Path;

fn main() {
    let dir = match std::env::var("CIFAR10_DIR") {
        Ok(d) => d,
        Err(_) => {
            eprintln!("set CIFAR10_DIR to the CIFAR-10 binary batch directory");
            std::process::exit(1);
        }
    };
    let (train_full, test) = load_cifar10(Path::new(&dir)).expect("load CIFAR-10");
    let train_ds = train_full.take(5000);
    let test_ds = test.take(1000);
    eprintln!("{} train / {} test images", train_ds.len(), test_ds.len());

    // quarter-depth variant of the bit-sliced-input network
    let arch = conv_ladder("cifar-quarter", (32, 32, 24), 32, 256, 10, Precision::Full, false);
    let config = TrainConfig { epochs: 5, batch_size: 100, seed: 1, ..TrainConfig::default() };
    let result = train(&arch, &config, &train_ds, &test_ds, &InputMode::BitSliced { prune: vec![] })
        .expect("training");
    for h in &result.history {
        println!("epoch {:>2}: loss {:.4}  test err {:.2}%", h.epoch, h.train_loss, h.val_err);
    }
}
