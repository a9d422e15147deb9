//! `A3PC` point-cloud files:
//! `"A3PC" | u32 version | u64 N | u16 C | N × (f64 x, f64 y, f64 z, u16 label)`,
//! all little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pointcloud::{CloudMeta, PointCloud, Source};

pub const CLOUD_MAGIC: &[u8; 4] = b"A3PC";
pub const CLOUD_VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8 + 2;
const RECORD: usize = 3 * 8 + 2;

pub fn cloud_to_bytes(cloud: &PointCloud, class_count: u16) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + RECORD * cloud.len());
    out.extend(CLOUD_MAGIC);
    out.extend(CLOUD_VERSION.to_le_bytes());
    out.extend((cloud.len() as u64).to_le_bytes());
    out.extend(class_count.to_le_bytes());
    for (p, l) in cloud.positions().iter().zip(cloud.labels()) {
        for c in p {
            out.extend(c.to_le_bytes());
        }
        out.extend(l.to_le_bytes());
    }
    out
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "A3PC",
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Parses a cloud and its declared class count. The cloud is tagged as
/// ingested with raw labels.
pub fn cloud_from_bytes(buf: &[u8], cloud_id: &str) -> Result<(PointCloud, u16)> {
    if buf.len() < 4 || &buf[..4] != CLOUD_MAGIC {
        return Err(fmt_err(0, "bad magic"));
    }
    if buf.len() < HEADER {
        return Err(fmt_err(buf.len(), "truncated header"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CLOUD_VERSION {
        return Err(fmt_err(4, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let classes = u16::from_le_bytes(buf[16..18].try_into().unwrap());
    let need = n
        .checked_mul(RECORD)
        .and_then(|b| b.checked_add(HEADER))
        .ok_or_else(|| fmt_err(8, "point count overflows"))?;
    if buf.len() < need {
        let complete = (buf.len() - HEADER) / RECORD;
        return Err(fmt_err(
            HEADER + complete * RECORD,
            format!("truncated: header declares {n} points, file holds {complete}"),
        ));
    }
    if buf.len() > need {
        return Err(fmt_err(need, "trailing bytes after last record"));
    }
    let mut positions = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let at = HEADER + i * RECORD;
        let mut p = [0.0; 3];
        for (a, slot) in p.iter_mut().enumerate() {
            let off = at + 8 * a;
            *slot = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
            if !slot.is_finite() {
                return Err(fmt_err(off, "non-finite coordinate"));
            }
        }
        positions.push(p);
        labels.push(u16::from_le_bytes(buf[at + 24..at + 26].try_into().unwrap()));
    }
    let cloud = PointCloud::new(positions, labels, CloudMeta::new(cloud_id, Source::Ingested))?;
    Ok((cloud, classes))
}

pub fn save_cloud(path: &Path, cloud: &PointCloud, class_count: u16) -> Result<()> {
    std::fs::write(path, cloud_to_bytes(cloud, class_count)).map_err(|e| Error::io(path, e))
}

/// Loads a cloud; its id is the file stem.
pub fn load_cloud(path: &Path) -> Result<(PointCloud, u16)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    cloud_from_bytes(&buf, &id)
}
