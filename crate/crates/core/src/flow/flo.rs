//! Middlebury `.flo`: f32 magic 202021.25, i32 width, i32 height, then
//! row-major interleaved `(u, v)` f32 pairs, all little-endian.

use std::fs;
use std::path::Path;

use super::FlowField;
use crate::error::{Error, Result};

pub const FLO_MAGIC: f32 = 202021.25;
const HEADER_LEN: usize = 12;
const MAX_DIM: i32 = 1 << 16;

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut buf = Vec::with_capacity(HEADER_LEN + h * w * 8);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        buf.extend_from_slice(&(*u as f32).to_le_bytes());
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<FlowField> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    let word = |k: usize| -> [u8; 4] { bytes[k..k + 4].try_into().expect("4-byte slice") };
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic}")));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if !(1..=MAX_DIM).contains(&w) || !(1..=MAX_DIM).contains(&h) {
        return Err(Error::format(path, format!("implausible size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = HEADER_LEN + w * h * 8;
    if bytes.len() < expected {
        return Err(Error::format(
            path,
            format!("truncated: {} of {expected} bytes", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(path, "trailing bytes after flow data"));
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for k in 0..w * h {
        let off = HEADER_LEN + k * 8;
        u.push(f32::from_le_bytes(word(off)) as f64);
        v.push(f32::from_le_bytes(word(off + 4)) as f64);
    }
    FlowField::from_uv(h, w, u, v).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_flo(flow))?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_flo(&bytes, path)
}
