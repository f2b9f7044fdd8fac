//! Bit-sliced input conversion and slice-level distortion/pruning.
//!
//! An integer image with magnitude bound A expands losslessly into
//! N = ceil(log2(A + 1)) binary channel planes per original channel; slice
//! index 1 is the least significant bit. All slice indices in this module are
//! 1-based to match that convention.

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use rand::Rng;
use std::io::{Read, Write};

/// Raw non-negative integer image data of shape (W, H, C).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelTensor {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Maximum representable value A.
    pub magnitude_bound: u32,
    /// Row-major (H, W, C), channel fastest.
    pub values: Vec<u32>,
}

impl PixelTensor {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        magnitude_bound: u32,
        values: Vec<u32>,
    ) -> Result<Self> {
        if values.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "({width},{height},{channels}) wants {} values, got {}",
                width * height * channels,
                values.len()
            )));
        }
        if let Some(&v) = values.iter().find(|&&v| v > magnitude_bound) {
            return Err(Error::ValueOutOfRange {
                value: v,
                bound: magnitude_bound,
            });
        }
        Ok(PixelTensor {
            width,
            height,
            channels,
            magnitude_bound,
            values,
        })
    }
}

/// Binarized expansion of a [`PixelTensor`]: one channel per bit position per
/// original channel, shape (W, H, C*N).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitSlicedTensor {
    pub width: usize,
    pub height: usize,
    pub base_channels: usize,
    pub bits_per_channel: usize,
    pub magnitude_bound: u32,
    /// Row-major (H, W, C*N); within a pixel the planes of base channel c
    /// occupy indices c*N .. c*N+N, least significant slice first.
    pub bits: Vec<u8>,
}

impl BitSlicedTensor {
    pub fn channel_count(&self) -> usize {
        self.base_channels * self.bits_per_channel
    }

    #[inline]
    pub fn bit(&self, y: usize, x: usize, base_channel: usize, slice: usize) -> u8 {
        let cc = self.channel_count();
        self.bits[(y * self.width + x) * cc + base_channel * self.bits_per_channel + (slice - 1)]
    }

    fn check_slices(&self, slices: &[usize]) -> Result<()> {
        for &s in slices {
            if s == 0 || s > self.bits_per_channel {
                return Err(Error::SliceOutOfRange {
                    index: s,
                    max: self.bits_per_channel,
                });
            }
        }
        Ok(())
    }
}

/// Lossless conversion from integer pixels to bit-sliced binary form.
pub fn int2b(input: &PixelTensor) -> Result<BitSlicedTensor> {
    let n = ceil_log2(input.magnitude_bound as u64 + 1);
    if let Some(&v) = input.values.iter().find(|&&v| v > input.magnitude_bound) {
        return Err(Error::ValueOutOfRange {
            value: v,
            bound: input.magnitude_bound,
        });
    }
    let mut bits = Vec::with_capacity(input.values.len() * n);
    for &v in &input.values {
        for s in 0..n {
            bits.push(((v >> s) & 1) as u8);
        }
    }
    Ok(BitSlicedTensor {
        width: input.width,
        height: input.height,
        base_channels: input.channels,
        bits_per_channel: n,
        magnitude_bound: input.magnitude_bound,
        bits,
    })
}

/// Inverse of [`int2b`]; exact for every valid input.
pub fn b2int(input: &BitSlicedTensor) -> Result<PixelTensor> {
    if input.bits.len() != input.width * input.height * input.channel_count() {
        return Err(Error::ShapeMismatch(format!(
            "bit array length {} does not match ({},{},{})",
            input.bits.len(),
            input.width,
            input.height,
            input.channel_count()
        )));
    }
    let n = input.bits_per_channel;
    let mut values = Vec::with_capacity(input.width * input.height * input.base_channels);
    for chunk in input.bits.chunks(n) {
        let mut v = 0u32;
        for (s, &b) in chunk.iter().enumerate() {
            debug_assert!(b <= 1);
            v |= (b as u32) << s;
        }
        values.push(v);
    }
    PixelTensor::new(
        input.width,
        input.height,
        input.base_channels,
        input.magnitude_bound,
        values,
    )
}

fn ceil_log2(x: u64) -> usize {
    (64 - (x - 1).leading_zeros() as usize).max(1)
}

/// Slices produced when expanding values bounded by `magnitude_bound`.
pub fn slice_count_for(magnitude_bound: u32) -> usize {
    ceil_log2(magnitude_bound as u64 + 1)
}

/// Replaces the targeted slices (in every base channel) with independent fair
/// coin flips; every other bit is copied unchanged. Deterministic in `seed`.
pub fn randomize_slices(
    input: &BitSlicedTensor,
    slices: &[usize],
    seed: u64,
) -> Result<BitSlicedTensor> {
    input.check_slices(slices)?;
    let mut out = input.clone();
    if slices.is_empty() {
        return Ok(out);
    }
    let n = input.bits_per_channel;
    let cc = input.channel_count();
    let mut rng = derive_rng(seed, 0);
    // Fixed traversal order (pixel, base channel, slice) keeps the stream
    // reproducible independent of the slice set's ordering.
    let mut targets = slices.to_vec();
    targets.sort_unstable();
    targets.dedup();
    for px in 0..input.width * input.height {
        for c in 0..input.base_channels {
            for &s in &targets {
                out.bits[px * cc + c * n + (s - 1)] = rng.random::<bool>() as u8;
            }
        }
    }
    Ok(out)
}

/// Removes the given slices from every base channel; surviving slices keep
/// their relative order.
pub fn prune_slices(input: &BitSlicedTensor, slices: &[usize]) -> Result<BitSlicedTensor> {
    input.check_slices(slices)?;
    let n = input.bits_per_channel;
    let mut keep: Vec<usize> = (1..=n).filter(|s| !slices.contains(s)).collect();
    keep.dedup();
    if keep.is_empty() {
        return Err(Error::EmptyPrune(n));
    }
    if keep.len() == n {
        return Ok(input.clone());
    }
    let cc = input.channel_count();
    let mut bits = Vec::with_capacity(input.width * input.height * input.base_channels * keep.len());
    for px in 0..input.width * input.height {
        for c in 0..input.base_channels {
            for &s in &keep {
                bits.push(input.bits[px * cc + c * n + (s - 1)]);
            }
        }
    }
    Ok(BitSlicedTensor {
        width: input.width,
        height: input.height,
        base_channels: input.base_channels,
        bits_per_channel: keep.len(),
        magnitude_bound: input.magnitude_bound,
        bits,
    })
}

/// Serializes as a 5-field little-endian u32 header (width, height,
/// base_channels, bits_per_channel, magnitude_bound) followed by the bits
/// packed row-major (H, W, channel), LSB-first within little-endian u64 words.
pub fn write_bitsliced<W: Write>(w: &mut W, t: &BitSlicedTensor) -> Result<()> {
    for field in [
        t.width as u32,
        t.height as u32,
        t.base_channels as u32,
        t.bits_per_channel as u32,
        t.magnitude_bound,
    ] {
        w.write_all(&field.to_le_bytes())?;
    }
    let mut word = 0u64;
    let mut used = 0u32;
    for &b in &t.bits {
        word |= (b as u64) << used;
        used += 1;
        if used == 64 {
            w.write_all(&word.to_le_bytes())?;
            word = 0;
            used = 0;
        }
    }
    if used > 0 {
        w.write_all(&word.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_bitsliced<R: Read>(r: &mut R) -> Result<BitSlicedTensor> {
    let mut buf4 = [0u8; 4];
    let mut fields = [0u32; 5];
    for f in fields.iter_mut() {
        r.read_exact(&mut buf4)?;
        *f = u32::from_le_bytes(buf4);
    }
    let [width, height, base_channels, bits_per_channel, magnitude_bound] = fields;
    let total = width as usize * height as usize * base_channels as usize * bits_per_channel as usize;
    let mut bits = Vec::with_capacity(total);
    let mut buf8 = [0u8; 8];
    while bits.len() < total {
        r.read_exact(&mut buf8)?;
        let word = u64::from_le_bytes(buf8);
        let take = (total - bits.len()).min(64);
        for i in 0..take {
            bits.push(((word >> i) & 1) as u8);
        }
    }
    Ok(BitSlicedTensor {
        width: width as usize,
        height: height as usize,
        base_channels: base_channels as usize,
        bits_per_channel: bits_per_channel as usize,
        magnitude_bound,
        bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tensor_from(values: Vec<u32>, w: usize, h: usize, c: usize, a: u32) -> PixelTensor {
        PixelTensor::new(w, h, c, a, values).unwrap()
    }

    #[test]
    fn cifar_shape_expands_to_24_channels() {
        let t = tensor_from(vec![0; 32 * 32 * 3], 32, 32, 3, 255);
        let b = int2b(&t).unwrap();
        assert_eq!(b.bits_per_channel, 8);
        assert_eq!(b.channel_count(), 24);
    }

    #[test]
    fn zero_pixel_yields_all_zero_slices() {
        let t = tensor_from(vec![0], 1, 1, 1, 255);
        let b = int2b(&t).unwrap();
        assert_eq!(b.bits, vec![0; 8]);
    }

    #[test]
    fn value_170_expands_alternating() {
        let t = tensor_from(vec![170], 1, 1, 1, 255);
        let b = int2b(&t).unwrap();
        assert_eq!(b.bits, vec![0, 1, 0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn roundtrip_all_byte_values() {
        let values: Vec<u32> = (0..256).collect();
        let t = tensor_from(values, 16, 16, 1, 255);
        assert_eq!(b2int(&int2b(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn out_of_range_value_rejected() {
        assert!(PixelTensor::new(1, 1, 1, 100, vec![101]).is_err());
    }

    #[test]
    fn zeroing_slice_n_moves_values_at_most_pow2() {
        let values: Vec<u32> = (0..256).collect();
        let t = tensor_from(values.clone(), 16, 16, 1, 255);
        let b = int2b(&t).unwrap();
        for n in 1..=8usize {
            let mut z = b.clone();
            for chunk in z.bits.chunks_mut(8) {
                chunk[n - 1] = 0;
            }
            let back = b2int(&z).unwrap();
            for (orig, got) in values.iter().zip(&back.values) {
                assert!((*orig as i64 - *got as i64).unsigned_abs() <= 1 << (n - 1));
            }
        }
    }

    #[test]
    fn randomize_empty_set_is_identity() {
        let t = tensor_from((0..64).collect(), 8, 8, 1, 255);
        let b = int2b(&t).unwrap();
        assert_eq!(randomize_slices(&b, &[], 42).unwrap(), b);
    }

    #[test]
    fn randomize_is_deterministic_in_seed() {
        let t = tensor_from((0..64).collect(), 8, 8, 1, 255);
        let b = int2b(&t).unwrap();
        let a1 = randomize_slices(&b, &[1, 3], 42).unwrap();
        let a2 = randomize_slices(&b, &[1, 3], 42).unwrap();
        let a3 = randomize_slices(&b, &[1, 3], 43).unwrap();
        assert_eq!(a1, a2);
        assert_ne!(a1, a3);
    }

    #[test]
    fn randomize_preserves_untouched_slices() {
        let t = tensor_from((0..=255).cycle().take(32 * 32 * 3).collect(), 32, 32, 3, 255);
        let b = int2b(&t).unwrap();
        let r = randomize_slices(&b, &[2, 5], 9).unwrap();
        for px in 0..32 * 32 {
            for c in 0..3 {
                for s in 1..=8 {
                    if s != 2 && s != 5 {
                        assert_eq!(b.bit(px / 32, px % 32, c, s), r.bit(px / 32, px % 32, c, s));
                    }
                }
            }
        }
    }

    #[test]
    fn randomize_out_of_range_rejected() {
        let t = tensor_from(vec![1], 1, 1, 1, 255);
        let b = int2b(&t).unwrap();
        assert!(randomize_slices(&b, &[9], 0).is_err());
        assert!(randomize_slices(&b, &[0], 0).is_err());
    }

    #[test]
    fn randomized_bits_are_fair_coins() {
        // ~1.57M replaced bits across slices 1-4 of a 32x32x24 tensor.
        let t = tensor_from(vec![0; 32 * 32 * 3], 32, 32, 3, 255);
        let b = int2b(&t).unwrap();
        let mut ones = 0u64;
        let mut total = 0u64;
        for trial in 0..400u64 {
            let r = randomize_slices(&b, &[1, 2, 3, 4], trial).unwrap();
            for px in 0..32 * 32 {
                for c in 0..3 {
                    for s in 1..=4 {
                        ones += r.bit(px / 32, px % 32, c, s) as u64;
                        total += 1;
                    }
                }
            }
        }
        assert!(total >= 1_000_000);
        let frac = ones as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.01, "fraction of ones {frac}");
    }

    #[test]
    fn prune_four_of_eight_halves_channels() {
        let t = tensor_from(vec![0; 32 * 32 * 3], 32, 32, 3, 255);
        let b = int2b(&t).unwrap();
        let p = prune_slices(&b, &[1, 2, 3, 4]).unwrap();
        assert_eq!(p.channel_count(), 12);
    }

    #[test]
    fn prune_empty_set_is_identity() {
        let t = tensor_from((0..64).collect(), 8, 8, 1, 255);
        let b = int2b(&t).unwrap();
        assert_eq!(prune_slices(&b, &[]).unwrap(), b);
    }

    #[test]
    fn prune_five_of_eight_leaves_nine_channels() {
        let t = tensor_from(vec![0; 32 * 32 * 3], 32, 32, 3, 255);
        let b = int2b(&t).unwrap();
        let p = prune_slices(&b, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(p.channel_count(), 9);
    }

    #[test]
    fn prune_all_slices_rejected() {
        let t = tensor_from(vec![3], 1, 1, 1, 3);
        let b = int2b(&t).unwrap();
        assert!(prune_slices(&b, &[1, 2]).is_err());
    }

    #[test]
    fn pruned_slices_keep_relative_order() {
        let t = tensor_from(vec![0b10110101], 1, 1, 1, 255);
        let b = int2b(&t).unwrap();
        let p = prune_slices(&b, &[2, 4]).unwrap();
        // surviving slices 1,3,5,6,7,8 of value 0b10110101 -> 1,1,1,1,0,1
        assert_eq!(p.bits, vec![1, 1, 1, 1, 0, 1]);
    }

    #[test]
    fn serialization_roundtrip() {
        let t = tensor_from((0..=255).cycle().take(7 * 5 * 3).collect(), 7, 5, 3, 255);
        let b = int2b(&t).unwrap();
        let mut buf = Vec::new();
        write_bitsliced(&mut buf, &b).unwrap();
        assert_eq!(buf.len(), 20 + (b.bits.len().div_ceil(64)) * 8);
        let back = read_bitsliced(&mut buf.as_slice()).unwrap();
        assert_eq!(back, b);
    }

    proptest! {
        #[test]
        fn roundtrip_random_tensors(seed in 0u64..1000, a in 1u32..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (w, h, c) = (4usize, 3usize, 2usize);
            let values: Vec<u32> = (0..w * h * c).map(|_| rng.random_range(0..=a)).collect();
            let t = PixelTensor::new(w, h, c, a, values).unwrap();
            prop_assert_eq!(b2int(&int2b(&t).unwrap()).unwrap(), t);
        }
    }
}
