//! Binary bag files, little-endian:
//!
//! ```text
//! magic "MCML"       4
//! version u32        4   (= 1)
//! K u32              4   instances
//! d u32              4   feature dim
//! C u16              2   class count
//! label u16          2
//! survival u8        1   0 | 1
//!   time f64         8   only when survival = 1
//!   event u8         1   only when survival = 1
//! demographics f64   8 x 8
//! mask u8            1   bit i = slot i observed
//! features f32       K*d x 4, row-major
//! crc32 u32          4   over every preceding byte
//! ```
//!
//! The bag id is not stored; it is the file stem.

use std::fs;
use std::path::Path;

use super::{DemographicVector, FeatureBag, FeatureMatrix, Survival, DEMO_DIM};
use crate::error::{Error, Result};

pub const BAG_MAGIC: &[u8; 4] = b"MCML";
pub const BAG_VERSION: u32 = 1;
pub const BAG_EXTENSION: &str = "mcb";

/// Exact file size for a bag of `k` instances of width `d`.
pub fn encoded_len(k: usize, d: usize, with_survival: bool) -> usize {
    let header = 4 + 4 + 4 + 4;
    let fixed = 2 + 2 + 1 + if with_survival { 8 + 1 } else { 0 } + DEMO_DIM * 8 + 1;
    header + fixed + k * d * 4 + 4
}

pub fn encode_bag(bag: &FeatureBag) -> Result<Vec<u8>> {
    bag.validate()?;
    let k = bag.features.rows();
    let d = bag.features.cols();
    let narrow = |v: usize, what: &str, max: usize| -> Result<usize> {
        if v > max {
            Err(Error::Domain(format!(
                "{what} {v} does not fit the bag format"
            )))
        } else {
            Ok(v)
        }
    };
    let mut out = Vec::with_capacity(encoded_len(k, d, bag.survival.is_some()));
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    out.extend_from_slice(&(narrow(k, "instance count", u32::MAX as usize)? as u32).to_le_bytes());
    out.extend_from_slice(&(narrow(d, "feature dim", u32::MAX as usize)? as u32).to_le_bytes());
    out.extend_from_slice(
        &(narrow(bag.class_count, "class count", u16::MAX as usize)? as u16).to_le_bytes(),
    );
    out.extend_from_slice(&(bag.bag_label as u16).to_le_bytes());
    match bag.survival {
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&s.time.to_le_bytes());
            out.push(u8::from(s.event));
        }
        None => out.push(0),
    }
    for v in bag.demographics.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(bag.demographics.mask);
    for v in bag.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_bag(bytes: &[u8], bag_id: &str) -> Result<FeatureBag> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != BAG_MAGIC {
        return Err(Error::format(0, "bad magic, not a bag file"));
    }
    let version = r.u32("version")?;
    if version != BAG_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported bag version {version}"),
        ));
    }
    let k = r.u32("instance count")? as usize;
    let d = r.u32("feature dim")? as usize;
    if k == 0 || d == 0 {
        return Err(Error::format(8, format!("empty bag shape {k}x{d}")));
    }
    let class_count = r.u16("class count")? as usize;
    let label_at = r.pos as u64;
    let bag_label = r.u16("label")? as usize;
    if bag_label >= class_count {
        return Err(Error::format(
            label_at,
            format!("label {bag_label} >= class count {class_count}"),
        ));
    }
    let flag_at = r.pos as u64;
    let survival = match r.u8("survival flag")? {
        0 => None,
        1 => {
            let time_at = r.pos as u64;
            let time = r.f64("survival time")?;
            if !(time > 0.0) || !time.is_finite() {
                return Err(Error::format(
                    time_at,
                    format!("survival time {time} not positive"),
                ));
            }
            let event_at = r.pos as u64;
            let event = match r.u8("event")? {
                0 => false,
                1 => true,
                other => return Err(Error::format(event_at, format!("event flag {other}"))),
            };
            Some(Survival { time, event })
        }
        other => return Err(Error::format(flag_at, format!("survival flag {other}"))),
    };
    let demo_at = r.pos as u64;
    let mut values = [0.0; DEMO_DIM];
    for v in &mut values {
        *v = r.f64("demographics")?;
    }
    let mask = r.u8("mask")?;
    let demographics = DemographicVector { values, mask };
    demographics
        .validate()
        .map_err(|e| Error::format(demo_at, format!("invalid demographics: {e}")))?;

    let n = k
        .checked_mul(d)
        .ok_or_else(|| Error::format(8, "bag shape overflows"))?;
    let feature_at = r.pos;
    let raw = r.take(
        n.checked_mul(4)
            .ok_or_else(|| Error::format(8, "bag shape overflows"))?,
        "features",
    )?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            (feature_at + 4 * i) as u64,
            "non-finite feature",
        ));
    }
    let crc_at = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    let actual = crc32fast::hash(&bytes[..crc_at]);
    if stored != actual {
        return Err(Error::format(
            crc_at as u64,
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    Ok(FeatureBag {
        bag_id: bag_id.to_string(),
        features: FeatureMatrix::new(k, d, data)?,
        bag_label,
        class_count,
        survival,
        demographics,
    })
}

pub fn write_bag(bag: &FeatureBag, path: &Path) -> Result<()> {
    let bytes = encode_bag(bag)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a bag; its id is the file stem.
pub fn read_bag(path: &Path) -> Result<FeatureBag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    decode_bag(&bytes, id)
}
