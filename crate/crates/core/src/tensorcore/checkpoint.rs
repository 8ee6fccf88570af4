//! Parameter checkpoints.
//!
//! Layout (little-endian): magic `MOEAMCPT`, `u32` version, `u32` manifest
//! length, JSON manifest listing each entry's name, shape, dtype and byte
//! offset, then the concatenated `f32` arrays and a CRC32 over those bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOEAMCPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: Vec<Entry>,
}

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<(), TensorError> {
    let mut offset = 0u64;
    let mut params = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        params.push(Entry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            trainable: p.trainable,
        });
        offset += 4 * p.value.numel() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest { params }).map_err(|e| TensorError::Malformed(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(&manifest)?;
    let mut crc = crc32fast::Hasher::new();
    let mut buf = Vec::new();
    for (_, p) in store.iter() {
        buf.clear();
        for &v in p.value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        crc.update(&buf);
        w.write_all(&buf)?;
    }
    w.write_all(&crc.finalize().to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<(), TensorError> {
    write_checkpoint(store, BufWriter::new(File::create(path)?))
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), TensorError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Truncated,
        _ => TensorError::Io(e),
    })
}

/// Reads a checkpoint into a fresh store with zero gradients.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore, TensorError> {
    let mut word = [0u8; 8];
    fill(&mut r, &mut word)?;
    if &word != CHECKPOINT_MAGIC {
        return Err(TensorError::BadMagic);
    }
    let mut u = [0u8; 4];
    fill(&mut r, &mut u)?;
    let version = u32::from_le_bytes(u);
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::UnsupportedVersion(version));
    }
    fill(&mut r, &mut u)?;
    let mut manifest = vec![0u8; u32::from_le_bytes(u) as usize];
    fill(&mut r, &mut manifest)?;
    let manifest: Manifest = serde_json::from_slice(&manifest).map_err(|e| TensorError::Malformed(e.to_string()))?;

    let mut store = ParamStore::new();
    let mut crc = crc32fast::Hasher::new();
    let mut expected = 0u64;
    for e in manifest.params {
        if e.dtype != "f32" {
            return Err(TensorError::Malformed(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected {
            return Err(TensorError::Malformed(format!("{}: offset {} != {expected}", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let mut raw = vec![0u8; 4 * n];
        fill(&mut r, &mut raw)?;
        crc.update(&raw);
        expected += raw.len() as u64;
        let data: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let t = Tensor::new(e.shape, data)?;
        if e.trainable {
            store.add(&e.name, t)?;
        } else {
            store.add_buffer(&e.name, t)?;
        }
    }
    fill(&mut r, &mut u)?;
    let stored = u32::from_le_bytes(u);
    let computed = crc.finalize();
    if stored != computed {
        return Err(TensorError::Checksum { stored, computed });
    }
    Ok(store)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore, TensorError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
