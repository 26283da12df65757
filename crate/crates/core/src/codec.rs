//! Flat weight vectors, fixed-size chunking and the `MCWT` checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `MCWT`, `u16` version, `u32`
//! entry count, then per entry a `u16` name length, the UTF-8 name, a `u16`
//! rank and `rank` `u64` dimensions; then a `u64` value count followed by
//! that many `f64` values in manifest order.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::gan::{ManifestEntry, ModelParams, NamedTensors};
use crate::wire::Reader;

pub const MAGIC: [u8; 4] = *b"MCWT";
pub const VERSION: u16 = 1;
pub const DEFAULT_CHUNK_SIZE: usize = 250;

/// All values of a parameter set, concatenated in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub manifest: Vec<ManifestEntry>,
    pub values: Vec<f64>,
}

impl WeightVector {
    pub fn new(manifest: Vec<ManifestEntry>, values: Vec<f64>) -> Result<Self, FormatError> {
        let declared: usize = manifest.iter().map(ManifestEntry::numel).sum();
        if declared != values.len() {
            return Err(FormatError::LengthMismatch {
                declared,
                actual: values.len(),
            });
        }
        Ok(Self { manifest, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy the values into a parameter set with the same manifest.
    pub fn write_into<P: NamedTensors>(&self, target: &mut P) -> Result<()> {
        if target.manifest() != self.manifest {
            return Err(FormatError::Manifest("target layout differs from the weight vector's".into()).into());
        }
        let mut offset = 0;
        for (_, t) in target.named_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&self.values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

pub fn flatten<P: NamedTensors>(params: &P) -> WeightVector {
    let named = params.named();
    let mut values = Vec::with_capacity(named.iter().map(|(_, t)| t.numel()).sum());
    for (_, t) in &named {
        values.extend_from_slice(t.data());
    }
    WeightVector {
        manifest: params.manifest(),
        values,
    }
}

/// Rebuild a Semi-ACGAN from its flat form; the architecture is read off the manifest.
pub fn unflatten(w: &WeightVector) -> Result<ModelParams> {
    let arch = ModelParams::arch_from_manifest(&w.manifest)?;
    let mut params = ModelParams::zeros(arch)?;
    w.write_into(&mut params)?;
    Ok(params)
}

/// Equal-length chunks; the last one is zero-padded by `pad_len` values.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSet {
    pub chunk_size: usize,
    pub chunks: Vec<Vec<f64>>,
    pub pad_len: usize,
}

impl ChunkSet {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn total_len(&self) -> usize {
        self.chunks.len() * self.chunk_size - self.pad_len
    }
}

pub fn num_chunks(total_len: usize, chunk_size: usize) -> usize {
    total_len.div_ceil(chunk_size)
}

pub fn chunk(values: &[f64], chunk_size: usize) -> Result<ChunkSet> {
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    let chunks: Vec<Vec<f64>> = values
        .chunks(chunk_size)
        .map(|c| {
            let mut c = c.to_vec();
            c.resize(chunk_size, 0.0);
            c
        })
        .collect();
    let pad_len = chunks.len() * chunk_size - values.len();
    Ok(ChunkSet {
        chunk_size,
        chunks,
        pad_len,
    })
}

/// Concatenate the chunks and strip the padding.
pub fn unchunk(c: &ChunkSet) -> Result<Vec<f64>, FormatError> {
    if c.pad_len > c.chunk_size || (c.chunks.is_empty() && c.pad_len > 0) {
        return Err(FormatError::BadPadding {
            pad_len: c.pad_len,
            chunk_size: c.chunk_size,
        });
    }
    let mut out = Vec::with_capacity(c.chunks.len() * c.chunk_size);
    for ch in &c.chunks {
        if ch.len() != c.chunk_size {
            return Err(FormatError::LengthMismatch {
                declared: c.chunk_size,
                actual: ch.len(),
            });
        }
        out.extend_from_slice(ch);
    }
    out.truncate(out.len() - c.pad_len);
    Ok(out)
}

/// Chunked representation of models as offsets from a fixed reference model.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetCodec {
    arch: crate::gan::Architecture,
    reference: WeightVector,
    chunk_size: usize,
}

impl OffsetCodec {
    pub fn new(reference: &ModelParams, chunk_size: usize) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::Config("chunk size must be at least 1".into()));
        }
        Ok(Self {
            arch: reference.arch,
            reference: flatten(reference),
            chunk_size,
        })
    }

    pub fn num_chunks(&self) -> usize {
        num_chunks(self.reference.len(), self.chunk_size)
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn arch(&self) -> &crate::gan::Architecture {
        &self.arch
    }

    pub fn reference(&self) -> Result<ModelParams> {
        unflatten(&self.reference)
    }

    pub fn encode(&self, params: &ModelParams) -> Result<ChunkSet> {
        let w = flatten(params);
        if w.manifest != self.reference.manifest {
            return Err(FormatError::Manifest("model layout differs from the reference".into()).into());
        }
        let offsets: Vec<f64> = w.values.iter().zip(&self.reference.values).map(|(v, r)| v - r).collect();
        chunk(&offsets, self.chunk_size)
    }

    pub fn decode(&self, chunks: &ChunkSet) -> Result<ModelParams> {
        if chunks.chunk_size != self.chunk_size || chunks.len() != self.num_chunks() {
            return Err(Error::Contract(format!(
                "{} chunks of {}, codec expects {} of {}",
                chunks.len(),
                chunks.chunk_size,
                self.num_chunks(),
                self.chunk_size
            )));
        }
        // Decoded sets carry no padding information of their own.
        let mut c = chunks.clone();
        c.pad_len = c.len() * c.chunk_size - self.reference.len();
        let offsets = unchunk(&c)?;
        let values = offsets.iter().zip(&self.reference.values).map(|(o, r)| r + o).collect();
        unflatten(&WeightVector::new(self.reference.manifest.clone(), values)?)
    }
}

pub fn encode_checkpoint(w: &WeightVector) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + w.values.len() * 8 + w.manifest.len() * 48);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let entries = u32::try_from(w.manifest.len()).map_err(|_| Error::Data("too many manifest entries".into()))?;
    out.extend_from_slice(&entries.to_le_bytes());
    for e in &w.manifest {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Data(format!("tensor name too long: {}", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let rank = u16::try_from(e.shape.len()).map_err(|_| Error::Data(format!("rank too large for {}", e.name)))?;
        out.extend_from_slice(&rank.to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    out.extend_from_slice(&(w.values.len() as u64).to_le_bytes());
    for v in &w.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<WeightVector, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let entries = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(entries.min(1 << 16));
    for _ in 0..entries {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::Manifest("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u16()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?).map_err(|_| FormatError::Manifest(format!("dimension of {name} overflows")))?;
            shape.push(d);
        }
        manifest.push(ManifestEntry { name, shape });
    }
    let declared = manifest
        .iter()
        .try_fold(0usize, |acc, e| {
            e.shape
                .iter()
                .try_fold(1usize, |p, &d| p.checked_mul(d))
                .and_then(|n| acc.checked_add(n))
        })
        .ok_or_else(|| FormatError::Manifest("declared size overflows".into()))?;
    let count = r.u64()?;
    if count != declared as u64 {
        return Err(FormatError::LengthMismatch {
            declared,
            actual: count as usize,
        });
    }
    let payload = r.take(declared.checked_mul(8).ok_or_else(|| FormatError::Manifest("payload size overflows".into()))?)?;
    let values = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    r.finish()?;
    WeightVector::new(manifest, values)
}

pub fn save_weights(path: impl AsRef<Path>, w: &WeightVector) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(w)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightVector> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    save_weights(path, &flatten(params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    unflatten(&load_weights(path)?)
}
