//! Binary dataset files and CSV import.
//!
//! Node maps (`GSRF`, little-endian): magic, `u32` version 1, `u32` level,
//! `u32` channels, `u32` count; per sample `u32` label (`u32::MAX` = none),
//! `u32` id length, UTF-8 id, mask bitmap of `ceil(N/8)` bytes (bit `n % 8` of
//! byte `n / 8`, set = masked in), then `N * C` `f32` values interleaved per node.
//! A trailing `u32` CRC-32 covers every preceding byte.
//!
//! Projected images (`GIMG`) use the same layout with `u32` height, width and
//! channels in the header and no mask.

use std::io::Write;
use std::path::Path;

use super::{ImageMap, NodeMap};
use crate::error::{Error, Result};
use crate::icosphere::{node_count, MAX_LEVEL};

const GSRF: &[u8; 4] = b"GSRF";
const GIMG: &[u8; 4] = b"GIMG";
const VERSION: u32 = 1;
const NO_LABEL: u32 = u32::MAX;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_label_and_id(out: &mut Vec<u8>, label: Option<usize>, id: &str) -> Result<()> {
    let label = match label {
        None => NO_LABEL,
        Some(l) if l < NO_LABEL as usize => l as u32,
        Some(l) => return Err(Error::Data(format!("label {l} does not fit the file format"))),
    };
    put_u32(out, label);
    put_u32(out, id.len() as u32);
    out.extend_from_slice(id.as_bytes());
    Ok(())
}

fn seal<W: Write>(mut w: W, mut out: Vec<u8>) -> Result<()> {
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    w.write_all(&out)?;
    Ok(())
}

fn put_values(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn write_node_maps<W: Write>(w: W, level: usize, channels: usize, maps: &[NodeMap]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(GSRF);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, level as u32);
    put_u32(&mut out, channels as u32);
    put_u32(&mut out, maps.len() as u32);
    for m in maps {
        if m.level != level || m.channels != channels {
            return Err(Error::Data(format!(
                "sample '{}' is level {} x {}, file is level {level} x {channels}",
                m.sample_id, m.level, m.channels
            )));
        }
        put_label_and_id(&mut out, m.label, &m.sample_id)?;
        let mut bits = vec![0u8; m.nodes().div_ceil(8)];
        for (n, &keep) in m.mask.iter().enumerate() {
            if keep {
                bits[n / 8] |= 1 << (n % 8);
            }
        }
        out.extend_from_slice(&bits);
        put_values(&mut out, &m.values);
    }
    seal(w, out)
}

pub fn save_node_maps(path: &Path, level: usize, channels: usize, maps: &[NodeMap]) -> Result<()> {
    let mut buf = Vec::new();
    write_node_maps(&mut buf, level, channels, maps)?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.at;
        if left < n {
            return Err(Error::format(
                self.at as u64,
                format!("truncated {what}: need {n} bytes, {left} left"),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4, "magic")? != magic {
            return Err(Error::format(0, format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        let v = self.u32("version")?;
        if v != VERSION {
            return Err(Error::format(4, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn label_and_id(&mut self) -> Result<(Option<usize>, String)> {
        let label = self.u32("label")?;
        let len = self.u32("id length")? as usize;
        let at = self.at;
        let id = std::str::from_utf8(self.take(len, "sample id")?)
            .map_err(|_| Error::format(at as u64, "sample id is not UTF-8"))?
            .to_string();
        Ok(((label != NO_LABEL).then_some(label as usize), id))
    }

    fn values(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.at;
        let raw = self.take(count.checked_mul(4).unwrap_or(usize::MAX), what)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format((at + 4 * j) as u64, format!("non-finite value in {what}")));
        }
        Ok(values)
    }

    /// Reads the checksum, which must be the last four bytes.
    fn finish(&mut self) -> Result<()> {
        let body = self.at;
        let stored = self.u32("checksum")?;
        if self.at != self.bytes.len() {
            return Err(Error::format(
                self.at as u64,
                format!("{} unexpected trailing bytes", self.bytes.len() - self.at),
            ));
        }
        let actual = crc32fast::hash(&self.bytes[..body]);
        if stored != actual {
            return Err(Error::format(
                body as u64,
                format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})"),
            ));
        }
        Ok(())
    }
}

/// Parses a node-map file. An empty input is an empty dataset. With
/// `expected_level`, a file at another level is rejected.
pub fn read_node_maps(bytes: &[u8], expected_level: Option<usize>) -> Result<Vec<NodeMap>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut r = Reader { bytes, at: 0 };
    r.header(GSRF)?;
    let level = r.u32("level")? as usize;
    if level > MAX_LEVEL {
        return Err(Error::format(8, format!("level {level} exceeds {MAX_LEVEL}")));
    }
    if let Some(want) = expected_level {
        if want != level {
            return Err(Error::format(8, format!("file is level {level}, expected level {want}")));
        }
    }
    let channels = r.u32("channels")? as usize;
    let count = r.u32("sample count")? as usize;
    let n = node_count(level);
    let mut maps = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let (label, id) = r.label_and_id()?;
        let bits = r.take(n.div_ceil(8), "mask bitmap")?;
        let mask = (0..n).map(|j| bits[j / 8] >> (j % 8) & 1 == 1).collect();
        let what = format!("sample {i} ({n} nodes x {channels} channels expected at level {level})");
        let values = r.values(n * channels, &what)?;
        let map = NodeMap::new(level, channels, values, mask)?.with_label(label).with_id(id);
        maps.push(map);
    }
    r.finish()?;
    Ok(maps)
}

pub fn load_node_maps(path: &Path, expected_level: Option<usize>) -> Result<Vec<NodeMap>> {
    read_node_maps(&std::fs::read(path)?, expected_level)
}

pub fn write_images<W: Write>(w: W, images: &[ImageMap]) -> Result<()> {
    let (h, wd, c) = images.first().map_or((0, 0, 0), |i| (i.height, i.width, i.channels));
    let mut out = Vec::new();
    out.extend_from_slice(GIMG);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, h as u32);
    put_u32(&mut out, wd as u32);
    put_u32(&mut out, c as u32);
    put_u32(&mut out, images.len() as u32);
    for im in images {
        if (im.height, im.width, im.channels) != (h, wd, c) {
            return Err(Error::Data(format!("image '{}' differs in size", im.sample_id)));
        }
        put_label_and_id(&mut out, im.label, &im.sample_id)?;
        put_values(&mut out, &im.values);
    }
    seal(w, out)
}

pub fn save_images(path: &Path, images: &[ImageMap]) -> Result<()> {
    let mut buf = Vec::new();
    write_images(&mut buf, images)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_images(bytes: &[u8]) -> Result<Vec<ImageMap>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut r = Reader { bytes, at: 0 };
    r.header(GIMG)?;
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let channels = r.u32("channels")? as usize;
    let count = r.u32("image count")? as usize;
    let mut images = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let (label, sample_id) = r.label_and_id()?;
        let values = r.values(height * width * channels, &format!("image {i}"))?;
        images.push(ImageMap {
            height,
            width,
            channels,
            values,
            label,
            sample_id,
        });
    }
    r.finish()?;
    Ok(images)
}

pub fn load_images(path: &Path) -> Result<Vec<ImageMap>> {
    read_images(&std::fs::read(path)?)
}

/// One sample from CSV rows `node_index, ch0, ch1, ..., mask` with an
/// optional header row. Every node of `level` must appear exactly once.
pub fn import_csv(path: &Path, level: usize) -> Result<NodeMap> {
    let n = node_count(level);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Option<(Vec<f64>, bool)>> = vec![None; n];
    let mut channels = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("CSV line {}: {e}", line + 1)))?;
        let Ok(node) = rec[0].parse::<usize>() else {
            if line == 0 {
                continue;
            }
            return Err(Error::Data(format!("CSV line {}: bad node index '{}'", line + 1, &rec[0])));
        };
        if rec.len() < 3 {
            return Err(Error::Data(format!("CSV line {}: need node, values and mask", line + 1)));
        }
        let c = rec.len() - 2;
        if *channels.get_or_insert(c) != c {
            return Err(Error::Data(format!("CSV line {}: {c} channels, expected {}", line + 1, channels.unwrap())));
        }
        if node >= n {
            return Err(Error::Data(format!("CSV line {}: node {node} outside level {level} ({n} nodes)", line + 1)));
        }
        let values = (1..=c)
            .map(|j| {
                rec[j]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Data(format!("CSV line {}: bad value '{}'", line + 1, &rec[j])))
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = match &rec[c + 1] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(Error::Data(format!("CSV line {}: bad mask '{other}'", line + 1))),
        };
        if rows[node].replace((values, mask)).is_some() {
            return Err(Error::Data(format!("CSV line {}: node {node} repeated", line + 1)));
        }
    }
    let channels = channels.ok_or_else(|| Error::Data("CSV has no data rows".into()))?;
    let mut values = Vec::with_capacity(n * channels);
    let mut mask = Vec::with_capacity(n);
    for (node, row) in rows.into_iter().enumerate() {
        let (v, m) = row.ok_or_else(|| Error::Data(format!("CSV is missing node {node} of {n}")))?;
        values.extend(v);
        mask.push(m);
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(NodeMap::new(level, channels, values, mask)?.with_id(id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(i: usize) -> NodeMap {
        let values = (0..84).map(|j| ((i * 84 + j) as f64 * 0.37).sin()).collect();
        let mask = (0..42).map(|j| (j + i) % 7 != 0).collect();
        NodeMap::new(1, 2, values, mask)
            .unwrap()
            .with_label(if i == 2 { None } else { Some(i % 2) })
            .with_id(format!("s{i}"))
    }

    #[test]
    fn node_maps_round_trip() {
        let maps: Vec<NodeMap> = (0..3).map(sample).collect();
        let mut buf = Vec::new();
        write_node_maps(&mut buf, 1, 2, &maps).unwrap();
        let back = read_node_maps(&buf, Some(1)).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in maps.iter().zip(&back) {
            assert_eq!((a.label, &a.sample_id, &a.mask), (b.label, &b.sample_id, &b.mask));
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() <= 1e-7 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn empty_and_bad_files() {
        assert!(read_node_maps(&[], None).unwrap().is_empty());
        let mut empty = Vec::new();
        write_node_maps(&mut empty, 3, 2, &[]).unwrap();
        assert!(read_node_maps(&empty, Some(3)).unwrap().is_empty());
        let mut buf = Vec::new();
        write_node_maps(&mut buf, 1, 2, &[sample(0)]).unwrap();
        assert!(matches!(read_node_maps(&buf, Some(2)), Err(Error::Format { .. })));
        // same bytes declared one level up: node count no longer fits
        let mut wrong = buf.clone();
        wrong[8] = 2;
        match read_node_maps(&wrong, None) {
            Err(Error::Format { message, .. }) => assert!(message.contains("162 nodes"), "{message}"),
            other => panic!("{other:?}"),
        }
        for cut in [2, 10, buf.len() - 1] {
            assert!(matches!(read_node_maps(&buf[..cut], None), Err(Error::Format { .. })));
        }
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_node_maps(&extra, None), Err(Error::Format { .. })));
    }

    #[test]
    fn images_round_trip() {
        let im = ImageMap {
            height: 3,
            width: 4,
            channels: 2,
            values: (0..24).map(|i| i as f64 / 8.0).collect(),
            label: Some(1),
            sample_id: "a".into(),
        };
        let mut buf = Vec::new();
        write_images(&mut buf, &[im.clone(), im.clone()]).unwrap();
        assert_eq!(read_images(&buf).unwrap(), vec![im.clone(), im]);
        assert!(matches!(read_images(&buf[..buf.len() - 3]), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("subject.csv");
        let mut text = String::from("node_index,ch0,ch1,mask\n");
        for n in (0..12).rev() {
            text.push_str(&format!("{n},{},{},{}\n", n as f64 * 0.5, -(n as f64), u8::from(n != 3)));
        }
        std::fs::write(&path, &text).unwrap();
        let m = import_csv(&path, 0).unwrap();
        assert_eq!(m.sample_id, "subject");
        assert_eq!(m.value(5, 0), 2.5);
        assert_eq!(m.value(5, 1), -5.0);
        assert!(!m.mask[3]);
        assert_eq!(m.value(3, 0), 0.0);
        std::fs::write(&path, text.replace("7,3.5", "70,3.5")).unwrap();
        assert!(matches!(import_csv(&path, 0), Err(Error::Data(_))));
    }
}
