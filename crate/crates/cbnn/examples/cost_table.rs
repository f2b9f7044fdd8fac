//! Prints the analytic size/GOPs table for the stock architectures and the
//! compact-network sweep, and optionally dumps their text files for use with
//! the `cbnn cost` subcommand.
//!
//!     cargo run --release --example cost_table [-- --dump <dir>]

use cbnn::network::{
    baseline_cifar_arch, cost_model, gtsrb_baseline_arch, reconstructed_cifar_arch,
    svhn_baseline_arch,
};
use cbnn::rebuild::cbnn_cifar_arch;

fn main() {
    let mut archs = vec![
        baseline_cifar_arch(),
        reconstructed_cifar_arch(),
        svhn_baseline_arch(),
        gtsrb_baseline_arch(),
    ];
    for p in 1..=5 {
        archs.push(cbnn_cifar_arch(p).expect("shrink"));
    }

    println!("{:<24} {:>10} {:>8}", "architecture", "size_mb", "gops");
    for arch in &archs {
        let cost = cost_model(arch, 16).expect("cost");
        println!("{:<24} {:>10.2} {:>8.2}", arch.name, cost.size_mb, cost.gops);
    }

    let args: Vec<String> = std::env::args().collect();
    if let Some(i) = args.iter().position(|a| a == "--dump") {
        let dir = std::path::Path::new(args.get(i + 1).map(String::as_str).unwrap_or("."));
        std::fs::create_dir_all(dir).expect("create dump dir");
        for arch in &archs {
            let path = dir.join(format!("{}.arch", arch.name));
            std::fs::write(&path, arch.to_text()).expect("write arch file");
            println!("wrote {}", path.display());
        }
    }
}
