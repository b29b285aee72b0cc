//! Binary feature-map and feature-set files.
//!
//! Feature map (`.nafm`), little-endian:
//! magic `NAFM`, version u16, height u32, width u32, channels u32, then
//! `height * width * channels` f32 values row-major.
//!
//! Feature set (`.nafs`), little-endian:
//! magic `NAFS`, version u16, dim u32, entry count u32, then per entry:
//! branch u8 (0 global, 1 region, 2 patch), stripe index u16, `dim` f32
//! values. The owner id is not stored; readers bind it from the manifest.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::feature::{Branch, FeatureMap, FeatureSet, FeatureVector, ScaleTag};

pub const MAP_MAGIC: &[u8; 4] = b"NAFM";
pub const SET_MAGIC: &[u8; 4] = b"NAFS";
pub const FORMAT_VERSION: u16 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("{} truncated at byte {}", self.what, self.pos)));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} has {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn check_header(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<()> {
    let found = r.take(4)?;
    if found != magic {
        return Err(Error::Format(format!(
            "{} has bad magic {:?}",
            r.what,
            String::from_utf8_lossy(found)
        )));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("{} has unsupported version {version}", r.what)));
    }
    Ok(())
}

pub fn feature_map_to_bytes(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + map.data().len() * 4);
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    out.extend_from_slice(&(map.channels() as u32).to_le_bytes());
    for v in map.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn feature_map_from_bytes(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader::new(bytes, "feature map file");
    check_header(&mut r, MAP_MAGIC)?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let len = height * width * channels;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.f32()? as f64);
    }
    r.finish()?;
    FeatureMap::new(height, width, channels, data)
}

pub fn write_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    fs::write(path, feature_map_to_bytes(map))?;
    Ok(())
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    feature_map_from_bytes(&fs::read(path)?)
}

pub fn feature_set_to_bytes(set: &FeatureSet) -> Vec<u8> {
    let dim = set.dim();
    let mut out = Vec::with_capacity(14 + set.len() * (3 + dim * 4));
    out.extend_from_slice(SET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (tag, vector) in set.entries() {
        out.push(tag.branch.code());
        out.extend_from_slice(&tag.stripe_index.to_le_bytes());
        for v in vector.values() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn feature_set_from_bytes(bytes: &[u8], owner_id: &str) -> Result<FeatureSet> {
    let mut r = Reader::new(bytes, "feature set file");
    check_header(&mut r, SET_MAGIC)?;
    let dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let branch = Branch::from_code(r.u8()?)?;
        let stripe_index = r.u16()?;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(r.f32()? as f64);
        }
        entries.push((ScaleTag::new(branch, stripe_index), FeatureVector::new(values)?));
    }
    r.finish()?;
    FeatureSet::new(owner_id, entries)
}

pub fn write_feature_set(path: &Path, set: &FeatureSet) -> Result<()> {
    fs::write(path, feature_set_to_bytes(set))?;
    Ok(())
}

pub fn read_feature_set(path: &Path, owner_id: &str) -> Result<FeatureSet> {
    feature_set_from_bytes(&fs::read(path)?, owner_id)
}
