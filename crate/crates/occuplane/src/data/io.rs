//! Binary sample files.
//!
//! Layout: magic `DPCS`, version `u32` LE, then length-prefixed sections:
//! shape spec (u64 byte length + canonical text), surface points, input
//! cloud, query points (each: u64 count + f32 LE triples), labels (u64 count
//! + packed bits, LSB first).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Result, SampleRecord};
use crate::data::shapes::ShapeSpec;

const MAGIC: &[u8; 4] = b"DPCS";
const VERSION: u32 = 1;

pub fn save_sample(record: &SampleRecord, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let text = record.shape.to_text();
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());

    write_points(&mut buf, &record.surface_points);
    write_points(&mut buf, &record.input_cloud);
    write_points(&mut buf, &record.query_points);

    buf.extend_from_slice(&(record.occupancy_labels.len() as u64).to_le_bytes());
    let mut packed = vec![0u8; record.occupancy_labels.len().div_ceil(8)];
    for (i, &bit) in record.occupancy_labels.iter().enumerate() {
        if bit {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    buf.extend_from_slice(&packed);

    fs::write(path, buf).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_sample(path: &Path) -> Result<SampleRecord> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ctx = path.display().to_string();
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: &ctx,
    };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(DataError::BadMagic { path: ctx.clone() });
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(DataError::UnsupportedVersion {
            path: ctx.clone(),
            version,
            supported: VERSION,
        });
    }

    let text_len = r.take_u64("shape length")? as usize;
    let text_bytes = r.take(text_len, "shape text")?;
    let text = std::str::from_utf8(text_bytes).map_err(|e| DataError::ShapeParse {
        path: ctx.clone(),
        msg: e.to_string(),
    })?;
    let shape = ShapeSpec::from_text(text).map_err(|msg| DataError::ShapeParse {
        path: ctx.clone(),
        msg,
    })?;

    let surface_points = r.take_points("surface points")?;
    let input_cloud = r.take_points("input cloud")?;
    let query_points = r.take_points("query points")?;

    let label_count = r.take_u64("label count")? as usize;
    let packed = r.take(label_count.div_ceil(8), "labels")?;
    let occupancy_labels = (0..label_count)
        .map(|i| packed[i / 8] >> (i % 8) & 1 == 1)
        .collect();

    Ok(SampleRecord {
        shape,
        surface_points,
        input_cloud,
        query_points,
        occupancy_labels,
        split: None,
    })
}

fn write_points(buf: &mut Vec<u8>, points: &[[f32; 3]]) {
    buf.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        for &c in p {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Malformed {
                path: self.path.to_string(),
                what: what.to_string(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn take_u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn take_points(&mut self, what: &str) -> Result<Vec<[f32; 3]>> {
        let count = self.take_u64(what)? as usize;
        let raw = self.take(count * 12, what)?;
        let mut out = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(12) {
            out.push([
                f32::from_le_bytes(chunk[0..4].try_into().unwrap()),
                f32::from_le_bytes(chunk[4..8].try_into().unwrap()),
                f32::from_le_bytes(chunk[8..12].try_into().unwrap()),
            ]);
        }
        Ok(out)
    }
}

/// Writes a small text file, with path context on failure.
pub(crate) fn write_text(path: &Path, content: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(content.as_bytes()).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(s)
}
