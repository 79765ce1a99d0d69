//! Binary parameter files.
//!
//! Layout: the 8-byte magic `MAPNET01`, then one record per matrix until end
//! of file: `u32` name length, UTF-8 name, `u64` rows, `u64` cols and
//! `rows·cols` `f64` values. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ModelParams;

pub const MAGIC: &[u8; 8] = b"MAPNET01";

pub fn encode(named: &[(String, Matrix)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, m) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format!("truncated at byte {}", self.pos));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Matrix)>, String> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err("missing MAPNET01 header".into());
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_owned();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| format!("`{name}` has an impossible shape {rows}x{cols}"))?;
        let raw = r.take(count.checked_mul(8).ok_or("size overflow")?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Matrix::new(rows, cols, data).map_err(|e| format!("`{name}`: {e}"))?;
        out.push((name, m));
    }
    Ok(out)
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode(&params.named())).map_err(|e| Error::io(path, e))
}

/// Loads into `template`, which fixes the expected names and shapes.
pub fn load_params_into(path: &Path, template: &mut ModelParams) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Format {
        path: path.display().to_string(),
        line: 0,
        message,
    };
    let stored = decode(&bytes).map_err(bad)?;
    let mut slots = template.named_mut();
    if stored.len() != slots.len() {
        return Err(bad(format!(
            "file holds {} matrices, model has {}",
            stored.len(),
            slots.len()
        )));
    }
    for ((name, m), (want, slot)) in stored.into_iter().zip(slots.iter_mut()) {
        if &name != want || m.shape() != slot.shape() {
            return Err(bad(format!(
                "expected `{want}` {:?}, found `{name}` {:?}",
                slot.shape(),
                m.shape()
            )));
        }
        **slot = m;
    }
    template.validate()
}
