//! Model checkpoint serialization.
//!
//! Fixed little-endian layout: a magic/version header, the architecture in
//! its text form, training metadata, then one parameter block per layer.
//! Binary-layer weights are stored as sign bits (1 = +1) packed LSB-first
//! into 64-bit words in canonical weight order (out, in, kh, kw); the first
//! layer's full-precision weights and all batchnorm parameters are stored as
//! 32-bit floats. Reloading reproduces forward passes bit-identically.

use crate::error::{Error, Result};
use crate::network::{ArchitectureSpec, LayerParams, LayerSpec, ParamStore, Precision};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CBNN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: u32,
    /// Final validation error %, NaN if never evaluated.
    pub final_err: f32,
}

fn pack_signs(weights: &[f32]) -> Vec<u64> {
    let mut words = vec![0u64; weights.len().div_ceil(64)];
    for (i, &w) in weights.iter().enumerate() {
        if w >= 0.0 {
            words[i / 64] |= 1u64 << (i % 64);
        }
    }
    words
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    arch: &ArchitectureSpec,
    params: &ParamStore,
    meta: &CheckpointMeta,
) -> Result<()> {
    if params.layers.len() != arch.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "parameter store has {} layers, architecture {}",
            params.layers.len(),
            arch.layers.len()
        )));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let text = arch.to_text();
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&meta.seed.to_le_bytes())?;
    w.write_all(&meta.epochs.to_le_bytes())?;
    w.write_all(&meta.final_err.to_le_bytes())?;
    for (i, (spec, p)) in arch.layers.iter().zip(&params.layers).enumerate() {
        match (spec.precision(), p) {
            (
                Some(Precision::Binary),
                LayerParams::Conv { weights } | LayerParams::Dense { weights },
            ) => {
                if weights.len() != spec.weight_count() {
                    return Err(Error::MissingParams(i));
                }
                for word in pack_signs(weights) {
                    w.write_all(&word.to_le_bytes())?;
                }
            }
            (
                Some(Precision::Full),
                LayerParams::Conv { weights } | LayerParams::Dense { weights },
            ) => {
                if weights.len() != spec.weight_count() {
                    return Err(Error::MissingParams(i));
                }
                for v in weights {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            (None, LayerParams::BatchNorm { scale, shift, mean, var }) => {
                for arr in [scale, shift, mean, var] {
                    for v in arr {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            (None, LayerParams::None) => {}
            _ => return Err(Error::MissingParams(i)),
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::MalformedData {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_checkpoint<R: Read>(
    r: &mut R,
) -> Result<(ArchitectureSpec, ParamStore, CheckpointMeta)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::MalformedData {
            offset: 0,
            reason: "bad magic, not a checkpoint file".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::MalformedData {
            offset: 4,
            reason: format!("unsupported format version {version}"),
        });
    }
    let text_len = cur.u32("architecture length")? as usize;
    let text_off = cur.pos as u64;
    let text = std::str::from_utf8(cur.take(text_len, "architecture text")?).map_err(|_| {
        Error::MalformedData {
            offset: text_off,
            reason: "architecture text is not UTF-8".into(),
        }
    })?;
    let arch = ArchitectureSpec::from_text(text)?;
    let meta = CheckpointMeta {
        seed: cur.u64("seed")?,
        epochs: cur.u32("epochs")?,
        final_err: cur.f32("final error")?,
    };
    let mut layers = Vec::with_capacity(arch.layers.len());
    for spec in &arch.layers {
        let count = spec.weight_count();
        let p = match (spec, spec.precision()) {
            (_, Some(Precision::Binary)) => {
                let raw = cur.take(8 * count.div_ceil(64), "binary weights")?;
                let mut weights = Vec::with_capacity(count);
                for (i, word) in raw
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .enumerate()
                {
                    for b in 0..64 {
                        if i * 64 + b >= count {
                            break;
                        }
                        weights.push(if word >> b & 1 == 1 { 1.0f32 } else { -1.0 });
                    }
                }
                match spec {
                    LayerSpec::Conv { .. } => LayerParams::Conv { weights },
                    _ => LayerParams::Dense { weights },
                }
            }
            (_, Some(Precision::Full)) => {
                let weights = cur.f32_vec(count, "full-precision weights")?;
                match spec {
                    LayerSpec::Conv { .. } => LayerParams::Conv { weights },
                    _ => LayerParams::Dense { weights },
                }
            }
            (LayerSpec::BatchNorm { channels }, None) => LayerParams::BatchNorm {
                scale: cur.f32_vec(*channels, "batchnorm scale")?,
                shift: cur.f32_vec(*channels, "batchnorm shift")?,
                mean: cur.f32_vec(*channels, "batchnorm mean")?,
                var: cur.f32_vec(*channels, "batchnorm variance")?,
            },
            _ => LayerParams::None,
        };
        layers.push(p);
    }
    if cur.pos != buf.len() {
        return Err(Error::MalformedData {
            offset: cur.pos as u64,
            reason: format!("{} trailing bytes", buf.len() - cur.pos),
        });
    }
    Ok((arch, ParamStore { layers }, meta))
}

pub fn save_checkpoint(
    path: &Path,
    arch: &ArchitectureSpec,
    params: &ParamStore,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, arch, params, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ArchitectureSpec, ParamStore, CheckpointMeta)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
