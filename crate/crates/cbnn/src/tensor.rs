//! Dense tensors and bit-packed {-1,+1} matrices with XNOR-popcount kernels.
//!
//! A `BitPackedMatrix` stores one sign bit per element (1 encodes +1, 0
//! encodes -1) in little-endian 64-bit words, one padded word row per matrix
//! row. The inner product of two sign vectors is then
//! `2 * popcount(XNOR(a, b)) - n`, which equals the real dot product over the
//! +-1 encoding.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Dense real-valued tensor, row-major, last dimension fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        DenseTensor {
            shape: shape.to_vec(),
            values: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                len,
                values.len()
            )));
        }
        Ok(DenseTensor {
            shape: shape.to_vec(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Sign matrix packed one bit per element into 64-bit words.
///
/// Bit value 1 encodes +1 and 0 encodes -1. Padding bits in the last word of
/// each row are kept at zero and masked out of every popcount.
#[derive(Debug, Clone, PartialEq)]
pub struct BitPackedMatrix {
    pub rows: usize,
    pub cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitPackedMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        BitPackedMatrix {
            rows,
            cols,
            words_per_row,
            words: vec![0u64; rows * words_per_row],
        }
    }

    /// Packs the signs of `values` (row-major, `rows * cols` entries).
    /// Zero maps to +1 so that packing is total on finite inputs.
    pub fn from_signs(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} matrix wants {} values, got {}",
                rows,
                cols,
                rows * cols,
                values.len()
            )));
        }
        let mut m = BitPackedMatrix::zeros(rows, cols);
        for r in 0..rows {
            let row = &values[r * cols..(r + 1) * cols];
            let base = r * m.words_per_row;
            for (j, &v) in row.iter().enumerate() {
                if v >= 0.0 {
                    m.words[base + j / 64] |= 1u64 << (j % 64);
                }
            }
        }
        Ok(m)
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn row_words_mut(&mut self, r: usize) -> &mut [u64] {
        &mut self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let w = self.words[r * self.words_per_row + c / 64];
        if (w >> (c % 64)) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// Unpacks the whole matrix back to +-1 values, row-major.
    pub fn unpack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.get(r, c));
            }
        }
        out
    }
}

/// Binarizes a dense tensor into a packed sign matrix.
///
/// The tensor is interpreted row-major with the given row count; elements
/// `>= 0` map to +1 (bit 1), negative elements to -1 (bit 0).
pub fn sign_binarize(x: &DenseTensor, rows: usize) -> Result<BitPackedMatrix> {
    if rows == 0 || x.len() % rows != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} values do not split into {} rows",
            x.len(),
            rows
        )));
    }
    BitPackedMatrix::from_signs(rows, x.len() / rows, &x.values)
}

#[inline]
fn tail_mask(cols: usize) -> u64 {
    match cols % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// XNOR-popcount inner product of two packed sign rows of logical length
/// `cols`: returns `2 * popcount(XNOR) - cols`, i.e. the +-1 dot product.
#[inline]
pub fn xnor_popcount_words(a: &[u64], b: &[u64], cols: usize) -> i64 {
    debug_assert_eq!(a.len(), b.len());
    let mask = tail_mask(cols);
    let last = a.len() - 1;
    let mut agree: u32 = 0;
    for i in 0..last {
        agree += (!(a[i] ^ b[i])).count_ones();
    }
    agree += ((!(a[last] ^ b[last])) & mask).count_ones();
    2 * agree as i64 - cols as i64
}

/// Inner product of row `ra` of `a` with row `rb` of `b`.
pub fn xnor_popcount_dot(a: &BitPackedMatrix, ra: usize, b: &BitPackedMatrix, rb: usize) -> Result<i64> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch(format!(
            "row lengths differ: {} vs {}",
            a.cols, b.cols
        )));
    }
    if a.cols == 0 {
        return Ok(0);
    }
    Ok(xnor_popcount_words(a.row_words(ra), b.row_words(rb), a.cols))
}

/// Packed GEMM: entry (i, j) of the result is the +-1 inner product of row i
/// of `a` with row j of `b` (`b` holds the transposed right operand).
pub fn binary_gemm(a: &BitPackedMatrix, b: &BitPackedMatrix) -> Result<DenseTensor> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch(format!(
            "inner dimensions differ: {} vs {}",
            a.cols, b.cols
        )));
    }
    let mut out = vec![0.0f64; a.rows * b.rows];
    let cols = a.cols;
    if cols == 0 {
        return DenseTensor::from_vec(&[a.rows, b.rows], out);
    }
    let wpr = a.words_per_row;
    let mask = tail_mask(cols);
    let last = wpr - 1;
    out.par_chunks_mut(b.rows)
        .enumerate()
        .for_each(|(i, row)| {
            let ar = a.row_words(i);
            // fixed-width kernels for the word counts short conv patches hit;
            // the unrolled trip count removes per-dot loop overhead
            match wpr {
                5 => bgemm_row::<5>(ar, &b.words, mask, cols, row),
                9 => bgemm_row::<9>(ar, &b.words, mask, cols, row),
                18 => bgemm_row::<18>(ar, &b.words, mask, cols, row),
                36 => bgemm_row::<36>(ar, &b.words, mask, cols, row),
                _ => {
                    for (br, slot) in b.words.chunks_exact(wpr).zip(row.iter_mut()) {
                        let mut agree: u32 = 0;
                        for (&x, &y) in ar[..last].iter().zip(&br[..last]) {
                            agree += (!(x ^ y)).count_ones();
                        }
                        let agree =
                            agree + ((!(ar[last] ^ br[last])) & mask).count_ones();
                        *slot = (2 * agree as i64 - cols as i64) as f64;
                    }
                }
            }
        });
    DenseTensor::from_vec(&[a.rows, b.rows], out)
}

/// One output row of [`binary_gemm`] with a compile-time word count `W`:
/// XNOR-popcount dots of the `W`-word row `ar` against every `W`-word row of
/// `bwords`. Integer sums, so unrolling cannot change results.
#[inline(always)]
fn bgemm_row<const W: usize>(ar: &[u64], bwords: &[u64], mask: u64, cols: usize, row: &mut [f64]) {
    let ar: &[u64; W] = ar.try_into().expect("row width");
    let pairs = row.len() / 2;
    for (br, slot) in bwords[..pairs * 2 * W]
        .chunks_exact(2 * W)
        .zip(row[..pairs * 2].chunks_exact_mut(2))
    {
        let mut agree0: u32 = 0;
        let mut agree1: u32 = 0;
        for t in 0..W - 1 {
            agree0 += (!(ar[t] ^ br[t])).count_ones();
            agree1 += (!(ar[t] ^ br[W + t])).count_ones();
        }
        agree0 += ((!(ar[W - 1] ^ br[W - 1])) & mask).count_ones();
        agree1 += ((!(ar[W - 1] ^ br[2 * W - 1])) & mask).count_ones();
        slot[0] = (2 * agree0 as i64 - cols as i64) as f64;
        slot[1] = (2 * agree1 as i64 - cols as i64) as f64;
    }
    if row.len() % 2 == 1 {
        let br = &bwords[(row.len() - 1) * W..];
        let mut agree: u32 = 0;
        for t in 0..W - 1 {
            agree += (!(ar[t] ^ br[t])).count_ones();
        }
        agree += ((!(ar[W - 1] ^ br[W - 1])) & mask).count_ones();
        row[row.len() - 1] = (2 * agree as i64 - cols as i64) as f64;
    }
}

/// Plain real matrix product `a (m x k) * b (k x n)`.
pub fn dense_gemm(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "inner dimensions differ: {} vs {}",
            ka, kb
        )));
    }
    let out = gemm_nn(&a.values, m, ka, &b.values, n);
    DenseTensor::from_vec(&[m, n], out)
}

/// `c = a (m x k) * b (k x n)`, row-parallel, fixed per-row accumulation order.
pub fn gemm_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0f64; m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    });
    c
}

/// `c = a (m x k) * b^T` where `b` is stored as `n x k` rows.
pub fn gemm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0f64; m * n];
    #[cfg(target_arch = "x86_64")]
    let use_fma = std::arch::is_x86_feature_detected!("avx2")
        && std::arch::is_x86_feature_detected!("fma");
    // eight rows of `a` share each pass over `b`, keeping `b` traffic low
    c.par_chunks_mut(8 * n).enumerate().for_each(|(blk, cblk)| {
        let rows = cblk.len() / n;
        let ablk = &a[blk * 8 * k..(blk * 8 + rows) * k];
        #[cfg(target_arch = "x86_64")]
        if use_fma {
            unsafe {
                if rows == 8 {
                    gemm_nt_rows_fma::<8>(ablk, b, k, n, cblk);
                } else {
                    for r in 0..rows {
                        gemm_nt_rows_fma::<1>(
                            &ablk[r * k..(r + 1) * k],
                            b,
                            k,
                            n,
                            &mut cblk[r * n..(r + 1) * n],
                        );
                    }
                }
            }
            return;
        }
        if rows == 8 {
            gemm_nt_rows::<8>(ablk, b, k, n, cblk);
        } else {
            for r in 0..rows {
                gemm_nt_rows::<1>(&ablk[r * k..(r + 1) * k], b, k, n, &mut cblk[r * n..(r + 1) * n]);
            }
        }
    });
    c
}

/// `R` output rows of [`gemm_nt`]: dot products of each row of `ablk` against
/// every row of `b`. Every dot product uses four independent accumulators
/// reduced in a fixed order regardless of `R`, so results are deterministic
/// and identical across block sizes.
#[inline(always)]
fn gemm_nt_rows<const R: usize>(ablk: &[f64], b: &[f64], k: usize, n: usize, cblk: &mut [f64]) {
    let ach: [&[[f64; 4]]; R] = std::array::from_fn(|r| ablk[r * k..(r + 1) * k].as_chunks().0);
    let atail: [&[f64]; R] = std::array::from_fn(|r| ablk[r * k..(r + 1) * k].as_chunks::<4>().1);
    for j in 0..n {
        let brow = &b[j * k..(j + 1) * k];
        let (bch, btail) = brow.as_chunks::<4>();
        let mut acc = [[0.0f64; 4]; R];
        for (ci, y) in bch.iter().enumerate() {
            for r in 0..R {
                let x = &ach[r][ci];
                for l in 0..4 {
                    acc[r][l] += x[l] * y[l];
                }
            }
        }
        let mut sums: [f64; R] =
            std::array::from_fn(|r| (acc[r][0] + acc[r][1]) + (acc[r][2] + acc[r][3]));
        for (ti, &y) in btail.iter().enumerate() {
            for r in 0..R {
                sums[r] += atail[r][ti] * y;
            }
        }
        for r in 0..R {
            cblk[r * n + j] = sums[r];
        }
    }
}

/// AVX2/FMA kernel for [`gemm_nt_rows`]: one 4-lane fused-multiply-add
/// accumulator per output row, reduced lane-pairwise at the end, scalar tail.
/// Fixed accumulation order, so the result is run-to-run deterministic (FMA
/// rounds once per step, so it differs in the last bits from the portable
/// fallback — dispatch is per-machine, never mixed within a run).
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn gemm_nt_rows_fma<const R: usize>(ablk: &[f64], b: &[f64], k: usize, n: usize, cblk: &mut [f64]) {
    use std::arch::x86_64::*;
    let kc = k / 4 * 4;
    for j in 0..n {
        let brow = &b[j * k..(j + 1) * k];
        let mut acc: [__m256d; R] = [_mm256_setzero_pd(); R];
        let mut t = 0;
        while t < kc {
            let y = _mm256_loadu_pd(brow.as_ptr().add(t));
            for r in 0..R {
                let x = _mm256_loadu_pd(ablk.as_ptr().add(r * k + t));
                acc[r] = _mm256_fmadd_pd(x, y, acc[r]);
            }
            t += 4;
        }
        for r in 0..R {
            let lo = _mm256_castpd256_pd128(acc[r]);
            let hi = _mm256_extractf128_pd(acc[r], 1);
            let s = _mm_add_pd(lo, hi);
            let mut sum = _mm_cvtsd_f64(s) + _mm_cvtsd_f64(_mm_unpackhi_pd(s, s));
            for t in kc..k {
                sum += ablk[r * k + t] * brow[t];
            }
            cblk[r * n + j] = sum;
        }
    }
}

/// `c = a^T (m x r)^T ... ` — given `a` as `r x m` and `b` as `r x k`,
/// computes the `m x k` product `a^T * b`. Used for weight gradients.
pub fn gemm_tn(a: &[f64], r: usize, m: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut c = vec![0.0f64; m * k];
    c.par_chunks_mut(k).enumerate().for_each(|(o, crow)| {
        for rr in 0..r {
            let w = a[rr * m + o];
            if w == 0.0 {
                continue;
            }
            let brow = &b[rr * k..(rr + 1) * k];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += w * bj;
            }
        }
    });
    c
}

/// im2col lowering for batched activations laid out as (batch, h, w, c).
///
/// Each output row is one receptive field flattened in (kh, kw, c) order,
/// matching the activation memory layout; convolution then becomes a GEMM
/// against filters flattened the same way. `pad_value` fills the padding ring
/// (0 for real-valued activations, -1 for binarized ones).
pub fn im2col(
    x: &[f64],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    padding: usize,
    pad_value: f64,
) -> Result<DenseTensor> {
    let oh = (h + 2 * padding).checked_sub(kernel - 1).ok_or_else(|| {
        Error::ShapeMismatch(format!("kernel {} larger than padded input {}", kernel, h + 2 * padding))
    })?;
    let ow = (w + 2 * padding).checked_sub(kernel - 1).ok_or_else(|| {
        Error::ShapeMismatch(format!("kernel {} larger than padded input {}", kernel, w + 2 * padding))
    })?;
    if oh == 0 || ow == 0 {
        return Err(Error::ShapeMismatch(
            "kernel larger than padded input".to_string(),
        ));
    }
    let patch = kernel * kernel * c;
    let rows = batch * oh * ow;
    let mut out = vec![pad_value; rows * patch];
    out.par_chunks_mut(ow * patch)
        .enumerate()
        .for_each(|(bi, band)| {
            let b = bi / oh;
            let oy = bi % oh;
            let img = &x[b * h * w * c..(b + 1) * h * w * c];
            for ox in 0..ow {
                let dst = &mut band[ox * patch..(ox + 1) * patch];
                for ky in 0..kernel {
                    let iy = oy + ky;
                    if iy < padding || iy >= h + padding {
                        continue;
                    }
                    let iy = iy - padding;
                    for kx in 0..kernel {
                        let ix = ox + kx;
                        if ix < padding || ix >= w + padding {
                            continue;
                        }
                        let ix = ix - padding;
                        let src = &img[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                        let off = (ky * kernel + kx) * c;
                        dst[off..off + c].copy_from_slice(src);
                    }
                }
            }
        });
    DenseTensor::from_vec(&[rows, patch], out)
}

/// Reads up to 64 bits starting at bit offset `off`, zero-extended past the
/// end of `src`.
#[inline]
fn read_bits64(src: &[u64], off: usize, n: usize) -> u64 {
    let w = off / 64;
    let s = off % 64;
    let mut v = src[w] >> s;
    if s != 0 && w + 1 < src.len() {
        v |= src[w + 1] << (64 - s);
    }
    if n < 64 {
        v &= (1u64 << n) - 1;
    }
    v
}

/// ORs the low `n` bits of `v` into `dst` at bit offset `off`. The target
/// bits must currently be zero.
#[inline]
fn write_bits64(dst: &mut [u64], off: usize, v: u64, n: usize) {
    let w = off / 64;
    let s = off % 64;
    dst[w] |= v << s;
    if s != 0 && n > 64 - s {
        dst[w + 1] |= v >> (64 - s);
    }
}

/// Copies `len` bits from `src` (starting at `src_off`) into the zeroed
/// region of `dst` starting at `dst_off`, 64 bits at a time.
#[inline]
fn blit_bits(dst: &mut [u64], dst_off: usize, src: &[u64], src_off: usize, len: usize) {
    let mut copied = 0;
    while copied < len {
        let take = (len - copied).min(64);
        let chunk = read_bits64(src, src_off + copied, take);
        write_bits64(dst, dst_off + copied, chunk, take);
        copied += take;
    }
}

/// Fused im2col + sign packing for +-1 activations: produces the same rows as
/// `from_signs` applied to `im2col(.., pad_value = -1.0)` without materializing
/// the dense patch matrix. Padding cells stay at bit 0 (-1).
///
/// Each input image row is sign-packed once; patch rows are then assembled
/// with word-level bit copies, so the cost scales with the activation volume
/// rather than with the patch matrix size.
pub fn im2col_packed(
    x: &[f64],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    padding: usize,
) -> Result<BitPackedMatrix> {
    let oh = (h + 2 * padding).checked_sub(kernel - 1).ok_or_else(|| {
        Error::ShapeMismatch(format!("kernel {} larger than padded input {}", kernel, h + 2 * padding))
    })?;
    let ow = (w + 2 * padding).checked_sub(kernel - 1).ok_or_else(|| {
        Error::ShapeMismatch(format!("kernel {} larger than padded input {}", kernel, w + 2 * padding))
    })?;
    if oh == 0 || ow == 0 {
        return Err(Error::ShapeMismatch(
            "kernel larger than padded input".to_string(),
        ));
    }
    let row_bits = w * c;
    let rwpr = row_bits.div_ceil(64);
    let mut packed_rows = vec![0u64; batch * h * rwpr];
    packed_rows
        .par_chunks_mut(rwpr)
        .enumerate()
        .for_each(|(ri, dst)| {
            let src = &x[ri * row_bits..(ri + 1) * row_bits];
            for (j, &v) in src.iter().enumerate() {
                dst[j / 64] |= ((v >= 0.0) as u64) << (j % 64);
            }
        });

    let patch = kernel * kernel * c;
    let rows = batch * oh * ow;
    let mut m = BitPackedMatrix::zeros(rows, patch);
    let wpr = m.words_per_row;
    m.words
        .par_chunks_mut(ow * wpr)
        .enumerate()
        .for_each(|(bi, band)| {
            let b = bi / oh;
            let oy = bi % oh;
            for ox in 0..ow {
                let dst = &mut band[ox * wpr..(ox + 1) * wpr];
                // kernel columns whose input column lands inside the image
                let kx0 = padding.saturating_sub(ox);
                let kx1 = kernel.min(w + padding - ox);
                let len = (kx1 - kx0) * c;
                let src_off = (ox + kx0 - padding) * c;
                for ky in 0..kernel {
                    let iy = oy + ky;
                    if iy < padding || iy >= h + padding {
                        continue;
                    }
                    let iy = iy - padding;
                    let src = &packed_rows[(b * h + iy) * rwpr..(b * h + iy + 1) * rwpr];
                    blit_bits(dst, (ky * kernel + kx0) * c, src, src_off, len);
                }
            }
        });
    Ok(m)
}

/// Scatter-add inverse of [`im2col`]: accumulates patch gradients back onto
/// the (batch, h, w, c) activation grid. Padding cells are discarded.
pub fn col2im(
    cols: &[f64],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    padding: usize,
) -> Vec<f64> {
    let oh = h + 2 * padding - kernel + 1;
    let ow = w + 2 * padding - kernel + 1;
    let patch = kernel * kernel * c;
    let mut out = vec![0.0f64; batch * h * w * c];
    out.par_chunks_mut(h * w * c)
        .enumerate()
        .for_each(|(b, img)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &cols[((b * oh + oy) * ow + ox) * patch..][..patch];
                    for ky in 0..kernel {
                        let iy = oy + ky;
                        if iy < padding || iy >= h + padding {
                            continue;
                        }
                        let iy = iy - padding;
                        for kx in 0..kernel {
                            let ix = ox + kx;
                            if ix < padding || ix >= w + padding {
                                continue;
                            }
                            let ix = ix - padding;
                            let off = (ky * kernel + kx) * c;
                            let dst = &mut img[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                            for (d, s) in dst.iter_mut().zip(&row[off..off + c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        });
    out
}
