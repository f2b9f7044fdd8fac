//! Times the packed XNOR-popcount GEMM against the dense floating-point GEMM
//! at a few problem sizes.
//!
//!     cargo run --release --example kernel_bench

use cbnn::bench::{bench_gemm, report_csv};

fn main() {
    let sizes = [
        (128, 256, 128),
        (256, 1024, 256),
        (512, 4096, 512),
        (2048, 2048, 2048),
    ];
    let reports: Vec<_> = sizes
        .iter()
        .map(|&(m, k, n)| {
            eprintln!("benchmarking {m}x{k}x{n} ...");
            bench_gemm(m, k, n, 10, 0).expect("bench")
        })
        .collect();
    print!("{}", report_csv(&reports));
}
