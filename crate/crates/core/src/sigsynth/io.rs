//! Dataset files.
//!
//! Layout (little-endian): magic `MOEAMCDS`, `u32` version, `u32` header
//! length, UTF-8 JSON header `{spec, split_tag, count}`, then `count`
//! records of `[u16 class][f32 snr_db][u32 L][L × f32 I][L × f32 Q]`, and
//! a trailing CRC32 over the record bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec, IqFrame, LabeledExample, SigError, SplitTag};

pub const DATASET_MAGIC: &[u8; 8] = b"MOEAMCDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: DatasetSpec,
    split_tag: SplitTag,
    count: u64,
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<(), SigError> {
    let header = serde_json::to_vec(&Header {
        spec: ds.spec.clone(),
        split_tag: ds.split_tag,
        count: ds.len() as u64,
    })
    .map_err(|e| SigError::Malformed(e.to_string()))?;
    let header_len = u32::try_from(header.len()).map_err(|_| SigError::Malformed("header too large".into()))?;

    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&header_len.to_le_bytes())?;
    w.write_all(&header)?;

    let mut crc = crc32fast::Hasher::new();
    let mut record = Vec::new();
    for e in &ds.examples {
        record.clear();
        let class = u16::try_from(e.class_idx)
            .map_err(|_| SigError::Malformed(format!("class index {} exceeds u16", e.class_idx)))?;
        let len = u32::try_from(e.frame.len()).map_err(|_| SigError::Malformed("frame too long".into()))?;
        record.extend_from_slice(&class.to_le_bytes());
        record.extend_from_slice(&e.snr_db.to_le_bytes());
        record.extend_from_slice(&len.to_le_bytes());
        for v in e.frame.i().iter().chain(e.frame.q()) {
            record.extend_from_slice(&v.to_le_bytes());
        }
        crc.update(&record);
        w.write_all(&record)?;
    }
    w.write_all(&crc.finalize().to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), SigError> {
    let file = File::create(path)?;
    write_dataset(ds, BufWriter::new(file))
}

/// Reads exactly `buf.len()` bytes, mapping a short read to `Truncated`.
fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), SigError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => SigError::Truncated,
        _ => SigError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, SigError> {
    let mut b = [0u8; 4];
    fill(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset, SigError> {
    let mut magic = [0u8; 8];
    fill(&mut r, &mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(SigError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(SigError::UnsupportedVersion(version));
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; header_len];
    fill(&mut r, &mut header)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| SigError::Malformed(format!("header: {e}")))?;
    header.spec.validate()?;
    let n_classes = header.spec.n_classes();

    let mut crc = crc32fast::Hasher::new();
    let mut examples = Vec::with_capacity(header.count.min(1 << 20) as usize);
    let mut fixed = [0u8; 10];
    let mut samples = Vec::new();
    for _ in 0..header.count {
        fill(&mut r, &mut fixed)?;
        crc.update(&fixed);
        let class_idx = u16::from_le_bytes([fixed[0], fixed[1]]) as usize;
        let snr_db = f32::from_le_bytes([fixed[2], fixed[3], fixed[4], fixed[5]]);
        let len = u32::from_le_bytes([fixed[6], fixed[7], fixed[8], fixed[9]]) as usize;
        samples.resize(len * 8, 0);
        fill(&mut r, &mut samples)?;
        crc.update(&samples);
        if class_idx >= n_classes {
            return Err(SigError::Malformed(format!("class index {class_idx} >= {n_classes}")));
        }
        let mut vals = samples.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let i: Vec<f32> = vals.by_ref().take(len).collect();
        let q: Vec<f32> = vals.collect();
        let frame = IqFrame::new(i, q).map_err(|e| SigError::Malformed(e.to_string()))?;
        examples.push(LabeledExample { frame, class_idx, snr_db });
    }
    let stored = read_u32(&mut r)?;
    let computed = crc.finalize();
    if stored != computed {
        return Err(SigError::Checksum { stored, computed });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(SigError::Malformed("trailing bytes after checksum".into()));
    }
    Ok(Dataset { examples, spec: header.spec, split_tag: header.split_tag })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, SigError> {
    let file = File::open(path)?;
    read_dataset(BufReader::new(file))
}
