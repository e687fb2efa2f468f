//! Binary checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! | offset      | size       | content                                      |
//! |-------------|------------|----------------------------------------------|
//! | 0           | 8          | magic `XMETACK1`                              |
//! | 8           | 4          | format version, `u32` = 1                     |
//! | 12          | 8          | header length `H`, `u64`                      |
//! | 20          | H          | UTF-8 JSON header (see [`Header`])            |
//! | 20 + H      | 8          | parameter count `P`, `u64`                    |
//! | 28 + H      | 8·P        | parameters as IEEE-754 `f64`, flat order      |
//!
//! The header records the encoder configuration and the heads (tag and class
//! count) in registration order, which fixes the flat parameter ordering
//! documented in [`crate::model`]. Loading rebuilds the model and writes the
//! stored parameters back, so a save/load round trip is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, Model, ParameterVector};
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XMETACK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    encoder: EncoderConfig,
    heads: Vec<HeadEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadEntry {
    tag: String,
    classes: usize,
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> std::io::Result<()> {
    let header = Header {
        encoder: model.config().clone(),
        heads: model
            .heads()
            .map(|(tag, classes)| HeadEntry {
                tag: tag.to_string(),
                classes,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    let params = model.flatten();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.len() * 8);
    for v in params.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Data(format!("corrupt checkpoint: {}", msg.into()))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| corrupt(e.to_string()))?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + n).ok_or_else(|| corrupt("truncated"))?;
        at += n;
        Ok(s)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(hlen)?).map_err(|e| corrupt(format!("header: {e}")))?;
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let raw = take(count.checked_mul(8).ok_or_else(|| corrupt("parameter count overflow"))?)?;
    let params: ParameterVector = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if at != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }

    let mut model = Model::new(header.encoder)?;
    // Head initial values are overwritten below; the rng only sizes them.
    let mut rng = Rng::new(0);
    for h in &header.heads {
        model.register_head(&h.tag, h.classes, &mut rng)?;
    }
    model.unflatten(&params)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
