//! Channel dataset files.
//!
//! Layout (all integers little-endian):
//!   magic "MIMODS01" (8 bytes)
//!   u32 version (= 1), u32 n_items, u32 rows, u32 cols
//!   u32 metadata length, JSON metadata
//!   payload: n_items * rows * cols complex entries as interleaved f64
//!            (re, im) pairs, row-major within an item, item-major overall
//!   u32 CRC-32 (IEEE) of the payload bytes

use crate::channel::ChannelProfile;
use crate::complex::ComplexMatrix;
use crate::error::FormatError;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 8] = b"MIMODS01";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub profile: ChannelProfile,
    pub seed: u64,
    /// Normalization convention of the stored channels.
    pub normalization: String,
}

impl DatasetMeta {
    pub fn new(profile: ChannelProfile, seed: u64) -> Self {
        Self {
            profile,
            seed,
            normalization: "unit_entry_power".into(),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> FormatError {
    FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_dataset(
    path: &Path,
    channels: &[ComplexMatrix],
    meta: &DatasetMeta,
) -> Result<(), FormatError> {
    let first = channels.first().ok_or_else(|| FormatError::Metadata {
        path: path.display().to_string(),
        reason: "dataset must contain at least one channel".into(),
    })?;
    let (rows, cols) = first.shape();
    for c in channels {
        if c.shape() != (rows, cols) {
            return Err(FormatError::Shape {
                path: path.display().to_string(),
                expected: vec![rows, cols],
                got: vec![c.shape().0, c.shape().1],
            });
        }
    }
    let meta_json = serde_json::to_vec(meta).map_err(|e| FormatError::Metadata {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;

    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    out(DATASET_MAGIC)?;
    out(&DATASET_VERSION.to_le_bytes())?;
    out(&(channels.len() as u32).to_le_bytes())?;
    out(&(rows as u32).to_le_bytes())?;
    out(&(cols as u32).to_le_bytes())?;
    out(&(meta_json.len() as u32).to_le_bytes())?;
    out(&meta_json)?;

    let mut crc = crc32fast::Hasher::new();
    let mut buf = Vec::with_capacity(rows * cols * 16);
    for c in channels {
        buf.clear();
        for z in c.data() {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
        crc.update(&buf);
        w.write_all(&buf).map_err(|e| io_err(path, e))?;
    }
    w.write_all(&crc.finalize().to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_dataset(path: &Path) -> Result<(Vec<ComplexMatrix>, DatasetMeta), FormatError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let pstr = path.display().to_string();
    let mut offset = 0u64;
    let mut take = |r: &mut BufReader<File>, buf: &mut [u8], offset: &mut u64| {
        r.read_exact(buf).map_err(|_| FormatError::Truncated {
            path: pstr.clone(),
            offset: *offset,
        })?;
        *offset += buf.len() as u64;
        Ok::<(), FormatError>(())
    };

    let mut magic = [0u8; 8];
    take(&mut r, &mut magic, &mut offset)?;
    if &magic != DATASET_MAGIC {
        return Err(FormatError::BadMagic {
            path: pstr,
            expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
        });
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>, offset: &mut u64| {
        take(r, &mut u32buf, offset)?;
        Ok::<u32, FormatError>(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r, &mut offset)?;
    if version != DATASET_VERSION {
        return Err(FormatError::BadVersion {
            path: path.display().to_string(),
            version,
        });
    }
    let n_items = read_u32(&mut r, &mut offset)? as usize;
    let rows = read_u32(&mut r, &mut offset)? as usize;
    let cols = read_u32(&mut r, &mut offset)? as usize;
    let meta_len = read_u32(&mut r, &mut offset)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    take(&mut r, &mut meta_bytes, &mut offset)?;
    let meta: DatasetMeta =
        serde_json::from_slice(&meta_bytes).map_err(|e| FormatError::Metadata {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;

    let mut crc = crc32fast::Hasher::new();
    let mut channels = Vec::with_capacity(n_items);
    let mut buf = vec![0u8; rows * cols * 16];
    for _ in 0..n_items {
        take(&mut r, &mut buf, &mut offset)?;
        crc.update(&buf);
        let data: Vec<Complex64> = buf
            .chunks_exact(16)
            .map(|ch| {
                Complex64::new(
                    f64::from_le_bytes(ch[0..8].try_into().unwrap()),
                    f64::from_le_bytes(ch[8..16].try_into().unwrap()),
                )
            })
            .collect();
        channels.push(ComplexMatrix::new(rows, cols, data).map_err(|e| FormatError::Metadata {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?);
    }
    let mut crc_buf = [0u8; 4];
    take(&mut r, &mut crc_buf, &mut offset)?;
    let stored = u32::from_le_bytes(crc_buf);
    let computed = crc.finalize();
    if stored != computed {
        return Err(FormatError::Checksum {
            path: path.display().to_string(),
            stored,
            computed,
        });
    }
    Ok((channels, meta))
}

/// SHA-256 of a file, hex-encoded. Used for provenance records.
pub fn file_sha256(path: &Path) -> Result<String, FormatError> {
    use sha2::{Digest, Sha256};
    let mut f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
