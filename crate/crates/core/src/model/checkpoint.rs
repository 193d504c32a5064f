//! Checkpoint container.
//!
//! Little-endian: `"GCNN"`, `u32` version, `u64` header length, UTF-8 JSON
//! header, then one blob per table row (`u64` value count followed by that
//! many `f32`), then the CRC-32 of everything between the version and the
//! checksum.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::icosphere::IcosphereHierarchy;

const MAGIC: &[u8; 4] = b"GCNN";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    frozen: Vec<bool>,
    map_hashes: Vec<Option<String>>,
}

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        spec: model.spec().clone(),
        frozen: model.frozen().to_vec(),
        map_hashes: model.map_hashes(),
    })?;
    let mut payload = Vec::new();
    payload.extend_from_slice(&(header.len() as u64).to_le_bytes());
    payload.extend_from_slice(&header);
    for row in model.stored_values() {
        payload.extend_from_slice(&(row.len() as u64).to_le_bytes());
        for v in row {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&payload)?;
    out.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(
                self.at as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.at),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint image and rebuilds the model. Geometry is rebuilt
/// (reusing `hierarchy` when it reaches the input level) and every sampler
/// map must hash to the stored value.
pub fn read_checkpoint(bytes: &[u8], hierarchy: Option<Arc<IcosphereHierarchy>>) -> Result<Model> {
    if bytes.len() < 12 {
        return Err(Error::format(0, format!("{} bytes is too short for a checkpoint", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected GCNN"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let end = bytes.len() - 4;
    let stored_crc = u32::from_le_bytes(bytes[end..].try_into().unwrap());
    if crc32fast::hash(&bytes[8..end]) != stored_crc {
        return Err(Error::format(end as u64, "checksum mismatch"));
    }
    let mut cur = Cursor {
        bytes: &bytes[..end],
        at: 8,
    };
    let header_len = cur.u64("header length")?;
    let header_at = cur.at;
    let header_bytes = cur.take(usize::try_from(header_len).unwrap_or(usize::MAX), "header")?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::format(header_at as u64, format!("header JSON: {e}")))?;
    let mut rows = Vec::with_capacity(header.spec.rows.len());
    for i in 0..header.spec.rows.len() {
        let count = cur.u64("row value count")?;
        let at = cur.at;
        let n = usize::try_from(count).ok().and_then(|c| c.checked_mul(4)).unwrap_or(usize::MAX);
        let raw = cur.take(n, "row values")?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                (at + 4 * j) as u64,
                format!("non-finite value in row {}", i + 1),
            ));
        }
        rows.push(values);
    }
    if cur.at != end {
        return Err(Error::format(cur.at as u64, "unexpected bytes after the last row"));
    }
    if header.frozen.len() != rows.len() || header.map_hashes.len() != rows.len() {
        return Err(Error::format(header_at as u64, "header row counts disagree with the spec"));
    }
    let mut model = Model::from_spec(header.spec, hierarchy)?;
    model
        .set_stored_values(&rows)
        .map_err(|e| Error::format(header_at as u64, format!("parameter layout: {e}")))?;
    for (i, (built, stored)) in model.map_hashes().iter().zip(&header.map_hashes).enumerate() {
        if built != stored {
            return Err(Error::Geometry(format!(
                "row {}: rebuilt sampler map does not match the checkpoint",
                i + 1
            )));
        }
    }
    let frozen = header.frozen.iter().take_while(|f| **f).count();
    model.freeze_prefix(frozen)?;
    Ok(model)
}

pub fn load_checkpoint(path: &Path, hierarchy: Option<Arc<IcosphereHierarchy>>) -> Result<Model> {
    read_checkpoint(&std::fs::read(path)?, hierarchy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{NormMode, Tensor};
    use crate::model::{build_gcnn, GcnnConfig};

    fn model() -> Model {
        let cfg = GcnnConfig {
            input_level: 2,
            blocks: 2,
            filters: 3,
            hidden: 5,
            seed: 3,
            ..GcnnConfig::default()
        };
        build_gcnn(None, &cfg).unwrap()
    }

    #[test]
    fn round_trip_reproduces_outputs() {
        let mut m = model();
        m.freeze_prefix(4).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(&buf, m.hierarchy().cloned()).unwrap();
        assert_eq!(back.frozen(), m.frozen());
        let x = Tensor::new(vec![2, 162, 2], (0..648).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let a = m.logits(&x, NormMode::Eval).unwrap();
        let b = back.logits(&x, NormMode::Eval).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5);
    }

    #[test]
    fn damaged_files_are_format_errors() {
        let mut buf = Vec::new();
        write_checkpoint(&model(), &mut buf).unwrap();
        for cut in [0, 3, 11, 40, buf.len() / 2, buf.len() - 1] {
            assert!(matches!(read_checkpoint(&buf[..cut], None), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut flipped = buf.clone();
        flipped[60] ^= 0x10;
        assert!(matches!(read_checkpoint(&flipped, None), Err(Error::Format { .. })));
        let mut magic = buf.clone();
        magic[0] = b'X';
        assert!(matches!(read_checkpoint(&magic, None), Err(Error::Format { offset: 0, .. })));
    }
}
