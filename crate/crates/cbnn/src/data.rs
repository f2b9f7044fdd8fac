//! Dataset ingestion and the synthetic bit-significance task.
//!
//! CIFAR-10 arrives in its canonical binary layout: one record per image,
//! 1 label byte followed by 3072 pixel bytes in channel-planar R,G,B order.
//! Synthetic datasets serialize in the same record layout for fixture reuse.

use crate::bitslice::{int2b, prune_slices, randomize_slices, PixelTensor};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream_seed};
use crate::tensor::DenseTensor;
use rand::Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Fraction of significant bits flipped away from the class template when
/// sampling the synthetic task; small enough that the nearest template always
/// recovers the generating class.
const SYNTH_NOISE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A batch of integer images with class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub magnitude_bound: u32,
    pub class_count: usize,
    pub split: Split,
    /// Image-major; each image row-major (H, W, C), channel fastest.
    pub pixels: Vec<u16>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels_per_image(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn image(&self, i: usize) -> Result<PixelTensor> {
        let n = self.pixels_per_image();
        PixelTensor::new(
            self.width,
            self.height,
            self.channels,
            self.magnitude_bound,
            self.pixels[i * n..(i + 1) * n].iter().map(|&v| v as u32).collect(),
        )
    }

    /// First `n` images as a new dataset.
    pub fn take(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        let ppi = self.pixels_per_image();
        LabeledDataset {
            pixels: self.pixels[..n * ppi].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Splits into the first `n` images and the remainder (e.g. train/val
    /// halves of one generated task).
    pub fn split_at(&self, n: usize) -> (LabeledDataset, LabeledDataset) {
        let n = n.min(self.len());
        let ppi = self.pixels_per_image();
        let rest = LabeledDataset {
            pixels: self.pixels[n * ppi..].to_vec(),
            labels: self.labels[n..].to_vec(),
            split: Split::Test,
            ..self.clone()
        };
        (self.take(n), rest)
    }
}

fn read_planar_records<R: Read>(
    r: &mut R,
    width: usize,
    height: usize,
    channels: usize,
    class_count: usize,
    split: Split,
) -> Result<LabeledDataset> {
    let plane = width * height;
    let record = 1 + plane * channels;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.is_empty() || raw.len() % record != 0 {
        return Err(Error::MalformedData {
            offset: (raw.len() / record * record) as u64,
            reason: format!("file length {} is not a multiple of the {record}-byte record", raw.len()),
        });
    }
    let count = raw.len() / record;
    let mut pixels = Vec::with_capacity(count * plane * channels);
    let mut labels = Vec::with_capacity(count);
    for (i, rec) in raw.chunks(record).enumerate() {
        let label = rec[0] as usize;
        if label >= class_count {
            return Err(Error::MalformedData {
                offset: (i * record) as u64,
                reason: format!("label {label} out of range for {class_count} classes"),
            });
        }
        labels.push(label);
        // channel-planar -> interleaved (H, W, C)
        for px in 0..plane {
            for c in 0..channels {
                pixels.push(rec[1 + c * plane + px] as u16);
            }
        }
    }
    Ok(LabeledDataset {
        width,
        height,
        channels,
        magnitude_bound: 255,
        class_count,
        split,
        pixels,
        labels,
    })
}

/// Writes a dataset back to the planar record layout (requires byte-range
/// pixels and labels).
pub fn write_records<W: Write>(w: &mut W, ds: &LabeledDataset) -> Result<()> {
    if ds.magnitude_bound > 255 || ds.class_count > 256 {
        return Err(Error::MalformedData {
            offset: 0,
            reason: "record layout holds byte-range pixels and labels only".into(),
        });
    }
    let plane = ds.width * ds.height;
    for i in 0..ds.len() {
        w.write_all(&[ds.labels[i] as u8])?;
        let img = &ds.pixels[i * plane * ds.channels..(i + 1) * plane * ds.channels];
        for c in 0..ds.channels {
            for px in 0..plane {
                w.write_all(&[img[px * ds.channels + c] as u8])?;
            }
        }
    }
    Ok(())
}

/// Reads a planar record file with explicit geometry (fixtures, synthetic
/// datasets saved via [`write_records`]).
pub fn read_records(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    class_count: usize,
) -> Result<LabeledDataset> {
    let mut r = BufReader::new(File::open(path)?);
    read_planar_records(&mut r, width, height, channels, class_count, Split::Train)
}

pub fn save_records(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&mut w, ds)
}

/// Loads the canonical CIFAR-10 binary distribution from a directory holding
/// `data_batch_1.bin` .. `data_batch_5.bin` and `test_batch.bin`.
pub fn load_cifar10(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut train: Option<LabeledDataset> = None;
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        let mut r = BufReader::new(File::open(&path)?);
        let batch = read_planar_records(&mut r, 32, 32, 3, 10, Split::Train)?;
        match &mut train {
            None => train = Some(batch),
            Some(t) => {
                t.pixels.extend_from_slice(&batch.pixels);
                t.labels.extend_from_slice(&batch.labels);
            }
        }
    }
    let mut r = BufReader::new(File::open(dir.join("test_batch.bin"))?);
    let mut test = read_planar_records(&mut r, 32, 32, 3, 10, Split::Test)?;
    test.split = Split::Test;
    Ok((train.expect("five train batches"), test))
}

/// Synthetic classification task whose labels depend only on the chosen bit
/// slices.
///
/// Each class owns a random template over the significant bits. A sample
/// draws a class, copies the template with a small flip rate, and fills every
/// non-significant bit with a fair coin. The stored label is recomputed as
/// the nearest template in Hamming distance over the significant bits alone,
/// so mutating non-significant slices can never change it.
#[allow(clippy::too_many_arguments)]
pub fn synth_bit_task(
    samples: usize,
    width: usize,
    height: usize,
    channels: usize,
    n_bits: usize,
    significant_slices: &[usize],
    classes: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    for &s in significant_slices {
        if s == 0 || s > n_bits {
            return Err(Error::SliceOutOfRange { index: s, max: n_bits });
        }
    }
    let sig_bits = width * height * channels * significant_slices.len();
    if sig_bits < 64 && classes > 1usize << sig_bits {
        return Err(Error::ClassCapacity { classes });
    }
    let magnitude_bound = ((1u64 << n_bits) - 1) as u32;
    let mut rng = derive_rng(seed, 0x5b17);
    let templates: Vec<Vec<u8>> = (0..classes)
        .map(|_| (0..sig_bits).map(|_| rng.random::<bool>() as u8).collect())
        .collect();

    let per_pixel = channels;
    let mut pixels = Vec::with_capacity(samples * width * height * per_pixel);
    let mut labels = Vec::with_capacity(samples);
    let mut sig_buf = vec![0u8; sig_bits];
    for _ in 0..samples {
        let class = rng.random_range(0..classes);
        let template = &templates[class];
        let mut sig_pos = 0usize;
        for _px in 0..width * height {
            for _c in 0..channels {
                let mut value = 0u32;
                for slice in 1..=n_bits {
                    let bit = if significant_slices.contains(&slice) {
                        let b = template[sig_pos] ^ u8::from(rng.random::<f64>() < SYNTH_NOISE);
                        sig_buf[sig_pos] = b;
                        sig_pos += 1;
                        b
                    } else {
                        rng.random::<bool>() as u8
                    };
                    value |= (bit as u32) << (slice - 1);
                }
                pixels.push(value as u16);
            }
        }
        labels.push(nearest_template(&templates, &sig_buf));
    }
    Ok(LabeledDataset {
        width,
        height,
        channels,
        magnitude_bound,
        class_count: classes,
        split: Split::Train,
        pixels,
        labels,
    })
}

fn nearest_template(templates: &[Vec<u8>], bits: &[u8]) -> usize {
    let mut best = 0usize;
    let mut best_d = usize::MAX;
    for (c, t) in templates.iter().enumerate() {
        let d = t.iter().zip(bits).filter(|(a, b)| a != b).count();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Recomputes the label of raw pixel values under the same nearest-template
/// rule; test hook for the label-invariance property.
pub fn synth_label_fn(
    templates_seed: u64,
    width: usize,
    height: usize,
    channels: usize,
    n_bits: usize,
    significant_slices: &[usize],
    classes: usize,
    values: &[u16],
) -> usize {
    let sig_bits = width * height * channels * significant_slices.len();
    let mut rng = derive_rng(templates_seed, 0x5b17);
    let templates: Vec<Vec<u8>> = (0..classes)
        .map(|_| (0..sig_bits).map(|_| rng.random::<bool>() as u8).collect())
        .collect();
    let mut bits = Vec::with_capacity(sig_bits);
    for &v in values {
        for slice in 1..=n_bits {
            if significant_slices.contains(&slice) {
                bits.push(((v >> (slice - 1)) & 1) as u8);
            }
        }
    }
    nearest_template(&templates, &bits)
}

/// Builds a (n, h, w, C*N') input batch of {0,1} activations from bit-sliced
/// images, optionally randomizing slices (fresh bits per image, derived from
/// `seed`) and/or pruning slices.
pub fn bitsliced_batch(
    ds: &LabeledDataset,
    indices: &[usize],
    distort: Option<(&[usize], u64)>,
    prune: &[usize],
) -> Result<(DenseTensor, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut values = Vec::new();
    let mut labels = Vec::with_capacity(indices.len());
    let mut channel_count = 0;
    for (k, &i) in indices.iter().enumerate() {
        let mut sliced = int2b(&ds.image(i)?)?;
        if let Some((slices, seed)) = distort {
            sliced = randomize_slices(&sliced, slices, stream_seed(seed, k as u64))?;
        }
        if !prune.is_empty() {
            sliced = prune_slices(&sliced, prune)?;
        }
        channel_count = sliced.channel_count();
        values.extend(sliced.bits.iter().map(|&b| b as f64));
        labels.push(ds.labels[i]);
    }
    let t = DenseTensor::from_vec(
        &[indices.len(), ds.height, ds.width, channel_count],
        values,
    )?;
    Ok((t, labels))
}

/// Full-precision input batch: pixel values scaled to [0, 1].
pub fn full_precision_batch(
    ds: &LabeledDataset,
    indices: &[usize],
) -> Result<(DenseTensor, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ppi = ds.width * ds.height * ds.channels;
    let scale = 1.0 / ds.magnitude_bound as f64;
    let mut values = Vec::with_capacity(indices.len() * ppi);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        values.extend(ds.pixels[i * ppi..(i + 1) * ppi].iter().map(|&v| v as f64 * scale));
        labels.push(ds.labels[i]);
    }
    let t = DenseTensor::from_vec(&[indices.len(), ds.height, ds.width, ds.channels], values)?;
    Ok((t, labels))
}

/// Converts every image to its bit-sliced form and writes a dataset file:
/// image count and class count (u32 LE each), then one label byte plus the
/// standard bit-sliced tensor block per image.
pub fn write_bitsliced_dataset<W: Write>(w: &mut W, ds: &LabeledDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.class_count as u32).to_le_bytes())?;
    for i in 0..ds.len() {
        w.write_all(&[ds.labels[i] as u8])?;
        crate::bitslice::write_bitsliced(w, &int2b(&ds.image(i)?)?)?;
    }
    Ok(())
}

/// Reads a [`write_bitsliced_dataset`] file back into tensors and labels.
pub fn read_bitsliced_dataset<R: Read>(
    r: &mut R,
) -> Result<(Vec<crate::bitslice::BitSlicedTensor>, Vec<usize>, usize)> {
    let mut header = [0u8; 8];
    r.read_exact(&mut header).map_err(|e| Error::MalformedData {
        offset: 0,
        reason: format!("truncated dataset header: {e}"),
    })?;
    let count = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let class_count = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let mut label = [0u8; 1];
        r.read_exact(&mut label)?;
        if label[0] as usize >= class_count {
            return Err(Error::LabelOutOfRange {
                label: label[0] as usize,
                classes: class_count,
            });
        }
        labels.push(label[0] as usize);
        tensors.push(crate::bitslice::read_bitsliced(r)?);
    }
    Ok((tensors, labels, class_count))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_planar_file() -> Vec<u8> {
        // two 2x2x3 records
        let mut raw = Vec::new();
        for (label, base) in [(3u8, 0u8), (7, 100)] {
            raw.push(label);
            for c in 0..3u8 {
                for px in 0..4u8 {
                    raw.push(base + c * 10 + px);
                }
            }
        }
        raw
    }

    #[test]
    fn planar_records_roundtrip_exactly() {
        let raw = tiny_planar_file();
        let ds = read_planar_records(&mut raw.as_slice(), 2, 2, 3, 10, Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 7]);
        // record 0, pixel 0: channels R=0, G=10, B=20
        assert_eq!(&ds.pixels[0..3], &[0, 10, 20]);
        let mut out = Vec::new();
        write_records(&mut out, &ds).unwrap();
        assert_eq!(out, raw);
    }

    #[test]
    fn truncated_file_rejected_with_offset() {
        let mut raw = tiny_planar_file();
        raw.pop();
        let err = read_planar_records(&mut raw.as_slice(), 2, 2, 3, 10, Split::Train).unwrap_err();
        match err {
            Error::MalformedData { offset, .. } => assert_eq!(offset, 13),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn synth_task_same_seed_identical() {
        let a = synth_bit_task(20, 4, 4, 1, 8, &[6, 7, 8], 4, 9).unwrap();
        let b = synth_bit_task(20, 4, 4, 1, 8, &[6, 7, 8], 4, 9).unwrap();
        assert_eq!(a, b);
        let c = synth_bit_task(20, 4, 4, 1, 8, &[6, 7, 8], 4, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_labels_invariant_under_noise_slice_mutation() {
        let ds = synth_bit_task(50, 4, 4, 1, 8, &[6, 7, 8], 4, 9).unwrap();
        let ppi = 16;
        for i in 0..ds.len() {
            // zero slices 1-5 of every pixel
            let mangled: Vec<u16> = ds.pixels[i * ppi..(i + 1) * ppi]
                .iter()
                .map(|&v| v & 0b1110_0000)
                .collect();
            let relabel = synth_label_fn(9, 4, 4, 1, 8, &[6, 7, 8], 4, &mangled);
            assert_eq!(relabel, ds.labels[i]);
        }
    }

    #[test]
    fn synth_rejects_excess_classes() {
        assert!(synth_bit_task(4, 1, 1, 1, 2, &[1], 3, 0).is_err());
    }

    #[test]
    fn bitsliced_batch_shapes_and_prune() {
        let ds = synth_bit_task(6, 4, 4, 1, 8, &[6, 7, 8], 2, 1).unwrap();
        let (t, labels) = bitsliced_batch(&ds, &[0, 2, 4], None, &[]).unwrap();
        assert_eq!(t.shape, vec![3, 4, 4, 8]);
        assert_eq!(labels.len(), 3);
        let (t, _) = bitsliced_batch(&ds, &[0, 2, 4], None, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(t.shape, vec![3, 4, 4, 3]);
    }

    #[test]
    fn record_file_roundtrip_via_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.bin");
        let ds = synth_bit_task(12, 3, 2, 2, 8, &[7, 8], 3, 5).unwrap();
        save_records(&path, &ds).unwrap();
        let back = read_records(&path, 3, 2, 2, 3).unwrap();
        assert_eq!(back.pixels, ds.pixels);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn bitsliced_dataset_roundtrip() {
        let ds = synth_bit_task(6, 3, 3, 2, 4, &[3, 4], 3, 17).unwrap();
        let mut buf = Vec::new();
        write_bitsliced_dataset(&mut buf, &ds).unwrap();
        let (tensors, labels, classes) = read_bitsliced_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(labels, ds.labels);
        assert_eq!(classes, 3);
        assert_eq!(tensors.len(), 6);
        for (i, t) in tensors.iter().enumerate() {
            assert_eq!(t, &int2b(&ds.image(i).unwrap()).unwrap());
        }
        assert!(read_bitsliced_dataset(&mut &buf[..buf.len() - 2]).is_err());
    }
}
