//! Wall-clock benchmarks: packed XNOR-popcount kernels against the dense
//! floating-point path at identical logical dimensions, and end-to-end model
//! inference. Timings are medians over a repetition budget with one untimed
//! warm-up run.

use crate::error::Result;
use crate::network::InferenceModel;
use crate::rng::derive_rng;
use crate::tensor::{binary_gemm, dense_gemm, BitPackedMatrix, DenseTensor};
use rand::Rng;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub kernel: String,
    /// (m, k, n): an m-by-k times n-by-k (transposed) product.
    pub dims: (usize, usize, usize),
    pub packed_secs: f64,
    pub dense_secs: f64,
    /// dense time / packed time.
    pub speedup: f64,
}

fn median(mut times: Vec<f64>) -> f64 {
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// Times `f` `reps` times (plus one excluded warm-up) and returns the median
/// seconds per call.
pub fn time_median<T>(reps: usize, mut f: impl FnMut() -> T) -> f64 {
    std::hint::black_box(f());
    let times = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64()
        })
        .collect();
    median(times)
}

fn random_signs(rows: usize, cols: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = derive_rng(seed, stream);
    (0..rows * cols)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Benchmarks the packed {-1,+1} GEMM against the dense-float GEMM on the
/// same logical (m, k) x (n, k) problem.
pub fn bench_gemm(m: usize, k: usize, n: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    let a_vals = random_signs(m, k, seed, 1);
    let b_vals = random_signs(n, k, seed, 2);
    let a_packed = BitPackedMatrix::from_signs(m, k, &a_vals)?;
    let b_packed = BitPackedMatrix::from_signs(n, k, &b_vals)?;
    let a_dense = DenseTensor::from_vec(&[m, k], a_vals)?;
    // dense_gemm computes (m,k) x (k,n); transpose b for identical results
    let mut bt = vec![0.0f64; k * n];
    for r in 0..n {
        for c in 0..k {
            bt[c * n + r] = b_vals[r * k + c];
        }
    }
    let b_dense = DenseTensor::from_vec(&[k, n], bt)?;
    let packed_secs = time_median(reps, || binary_gemm(&a_packed, &b_packed).unwrap());
    let dense_secs = time_median(reps, || dense_gemm(&a_dense, &b_dense).unwrap());
    Ok(BenchReport {
        kernel: "gemm".into(),
        dims: (m, k, n),
        packed_secs,
        dense_secs,
        speedup: dense_secs / packed_secs,
    })
}

/// Median seconds for one forward pass of `model` over `input`.
pub fn bench_inference(model: &InferenceModel, input: &DenseTensor, reps: usize) -> Result<f64> {
    model.forward_batch(input)?; // surface errors before timing
    Ok(time_median(reps, || model.forward_batch(input).unwrap()))
}

pub fn report_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from("kernel,m,k,n,packed_secs,dense_secs,speedup\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{:.6e},{:.6e},{:.3}\n",
            r.kernel, r.dims.0, r.dims.1, r.dims.2, r.packed_secs, r.dense_secs, r.speedup
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_comparison_speedup_is_near_unity() {
        // the same packed kernel timed against itself
        let a = BitPackedMatrix::from_signs(64, 256, &random_signs(64, 256, 3, 1)).unwrap();
        let b = BitPackedMatrix::from_signs(64, 256, &random_signs(64, 256, 3, 2)).unwrap();
        let t1 = time_median(30, || binary_gemm(&a, &b).unwrap());
        let t2 = time_median(30, || binary_gemm(&a, &b).unwrap());
        let ratio = t1 / t2;
        assert!((0.5..2.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn packed_kernel_beats_dense_at_moderate_size() {
        let report = bench_gemm(128, 1024, 128, 5, 9).unwrap();
        assert!(report.speedup > 1.0, "speedup {}", report.speedup);
        assert!((report.speedup - report.dense_secs / report.packed_secs).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let r = BenchReport {
            kernel: "gemm".into(),
            dims: (1, 2, 3),
            packed_secs: 0.5,
            dense_secs: 1.0,
            speedup: 2.0,
        };
        let csv = report_csv(&[r]);
        assert!(csv.contains("gemm,1,2,3"));
        assert!(csv.contains(",2.000"));
    }
}
