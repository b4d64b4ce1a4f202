//! Checkpoint files, little-endian:
//!
//! ```text
//! magic "MCCK"        4
//! version u32         4   (= 1)
//! header_len u32      4
//! header              header_len bytes of JSON ModelConfig
//! variant u8          1   graph variant tag, must agree with the header
//! neutral f64         8 x 8
//! n_blocks u32        4
//! per block:
//!   name_len u16, name utf-8, rows u32, cols u32, rows*cols f64, crc32 of the block
//! crc32 u32           4   over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::{CausalMil, ModelConfig};
use crate::bagio::DEMO_DIM;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCCK";
const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &CausalMil) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&model.arch.config)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.push(model.arch.config.variant.tag());
    for v in model.neutral {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, name, value) in model.params.iter() {
        let start = out.len();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(value.cols() as u32).to_le_bytes());
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("checkpoint truncated in {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

/// Decodes a checkpoint. When `expected` is given the stored config must match it.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<CausalMil> {
    if bytes.len() < 8 {
        return Err(Error::format(0, "checkpoint too short"));
    }
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
    let actual = crc32fast::hash(&bytes[..body]);
    if stored != actual {
        return Err(Error::format(
            body as u64,
            format!("checkpoint checksum mismatch: {stored:08x} vs {actual:08x}"),
        ));
    }
    let mut c = Cursor {
        bytes: &bytes[..body],
        pos: 0,
    };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, not a checkpoint"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let header_len = c.u32("header length")? as usize;
    let header_at = c.pos as u64;
    let config: ModelConfig = serde_json::from_slice(c.take(header_len, "header")?)
        .map_err(|e| Error::format(header_at, format!("bad header: {e}")))?;
    let tag_at = c.pos as u64;
    let tag = c.take(1, "variant")?[0];
    if tag != config.variant.tag() {
        return Err(Error::format(
            tag_at,
            format!("variant tag {tag} disagrees with header {}", config.variant),
        ));
    }
    if let Some(want) = expected {
        if want.variant != config.variant {
            return Err(Error::Config(format!(
                "checkpoint holds a {} model, expected {}",
                config.variant, want.variant
            )));
        }
        if want != &config {
            return Err(Error::Config(
                "checkpoint hyperparameters differ from the requested config".into(),
            ));
        }
    }
    let mut neutral = [0.0; DEMO_DIM];
    for v in &mut neutral {
        *v = c.f64("neutral")?;
    }

    let mut template = CausalMil::new(&config, 0)?;
    let blocks_at = c.pos as u64;
    let n_blocks = c.u32("block count")? as usize;
    if n_blocks != template.params.len() {
        return Err(Error::format(
            blocks_at,
            format!(
                "{n_blocks} parameter blocks, the {} layout has {}",
                config.variant,
                template.params.len()
            ),
        ));
    }
    let ids: Vec<_> = template.params.ids().collect();
    for id in ids {
        let start = c.pos;
        let name_len = c.u16("block name")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "block name")?)
            .map_err(|_| Error::format(start as u64, "block name is not utf-8"))?
            .to_string();
        let rows = c.u32("block rows")? as usize;
        let cols = c.u32("block cols")? as usize;
        let want = template.params.get(id);
        if name != template.params.name(id) || (rows, cols) != want.shape() {
            return Err(Error::format(
                start as u64,
                format!(
                    "block {name} {rows}x{cols} does not match expected {} {}x{}",
                    template.params.name(id),
                    want.rows(),
                    want.cols()
                ),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(c.f64("block data")?);
        }
        let crc_at = c.pos;
        let crc = c.u32("block checksum")?;
        if crc != crc32fast::hash(&bytes[start..crc_at]) {
            return Err(Error::format(
                crc_at as u64,
                format!("checksum mismatch in block {name}"),
            ));
        }
        template
            .params
            .get_mut(id)
            .data_mut()
            .copy_from_slice(&data);
    }
    if c.pos != body {
        return Err(Error::format(
            c.pos as u64,
            "trailing bytes after parameter blocks",
        ));
    }
    template.neutral = neutral;
    Ok(template)
}

pub fn save_checkpoint(model: &CausalMil, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<CausalMil> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
