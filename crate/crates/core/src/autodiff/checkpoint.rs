//! Portable checkpoint format for named parameter tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic  b"L2OCKPT1"
//! bytes 8..12   u32    header length H
//! bytes 12..12+H      UTF-8 JSON header:
//!                     { "version": 1,
//!                       "hyperparams": <arbitrary JSON>,
//!                       "tensors": [ { "name": str, "shape": [u64...] }, ... ] }
//! then, for each tensor in listed order: numel IEEE-754 float64 values,
//! little-endian, row-major.
//! ```
//!
//! Values are stored as float64 regardless of the in-memory scalar type, so
//! checkpoints are portable across instantiations and implementations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TensorData;
use crate::error::{Error, Result};
use crate::scalar::{real, Real};

pub const MAGIC: &[u8; 8] = b"L2OCKPT1";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    hyperparams: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

/// Writes named tensors plus a free-form hyperparameter blob.
pub fn save<T: Real>(
    path: &Path,
    hyperparams: &serde_json::Value,
    tensors: &[(String, &TensorData<T>)],
) -> Result<()> {
    let header = Header {
        version: VERSION,
        hyperparams: hyperparams.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorMeta { name: name.clone(), shape: t.shape.clone() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint { detail: format!("header encode: {e}") })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, t) in tensors {
        for &x in &t.data {
            w.write_all(&x.to_f64().unwrap().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back; returns the hyperparameter blob and the tensors
/// in stored order.
pub fn load<T: Real>(path: &Path) -> Result<(serde_json::Value, Vec<(String, TensorData<T>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset: u64 = 0;
    let mut magic = [0u8; 8];
    read_exact_at(&mut r, &mut magic, &mut offset)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint { detail: format!("bad magic {magic:?}") });
    }
    let mut len4 = [0u8; 4];
    read_exact_at(&mut r, &mut len4, &mut offset)?;
    let hlen = u32::from_le_bytes(len4) as usize;
    let mut hbytes = vec![0u8; hlen];
    read_exact_at(&mut r, &mut hbytes, &mut offset)?;
    let header: Header = serde_json::from_slice(&hbytes)
        .map_err(|e| Error::Parse { detail: format!("header json: {e}"), offset: 12 })?;
    if header.version != VERSION {
        return Err(Error::Checkpoint {
            detail: format!("version {} unsupported (expected {VERSION})", header.version),
        });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf8 = [0u8; 8];
    for meta in header.tensors {
        let numel: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            read_exact_at(&mut r, &mut buf8, &mut offset)?;
            data.push(real::<T>(f64::from_le_bytes(buf8)));
        }
        tensors.push((meta.name, TensorData::new(meta.shape, data)?));
    }
    Ok((header.hyperparams, tensors))
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Parse {
        detail: format!("unexpected end of checkpoint: {e}"),
        offset: *offset,
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let a = TensorData::new(vec![2, 2], vec![1.5, -0.25, 3.0e-17, 2.0_f64.powi(-1000)]).unwrap();
        let b = TensorData::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        save(&path, &json!({"l": 8}), &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let (hp, tensors) = load::<f64>(&path).unwrap();
        assert_eq!(hp["l"], 8);
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "a");
        for (x, y) in tensors[0].1.data.iter().zip(a.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(tensors[1].1.shape, vec![3]);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let a = TensorData::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save(&path, &serde_json::Value::Null, &[("a".into(), &a)]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 9]).unwrap();
        match load::<f64>(&path) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 12),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Checkpoint { .. })));
    }
}
