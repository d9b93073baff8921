//! Checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [u64 header_len][header: JSON, header_len bytes][tensor 0 data][tensor 1 data]…
//! ```
//!
//! The JSON header is
//! `{"format_version":1,"step":N,"meta":{…},"tensors":[{"name":…,"shape":[…]},…]}`
//! and each tensor's payload is its row-major `f64` data in little-endian
//! bytes, concatenated in listing order with no padding. Loading verifies the
//! version, that every payload is complete, and that no trailing bytes remain.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// A named collection of tensors plus a step counter and free-form metadata.
pub struct Checkpoint {
    pub step: u64,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Find a tensor by name.
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        step: ckpt.step,
        meta: ckpt.meta.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let mut buf = Vec::with_capacity(8 * 1024);
    for (_, t) in &ckpt.tensors {
        buf.clear();
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 8];
    read_exact_or_corrupt(&mut r, &mut len_bytes, "header length")?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len > 1 << 30 {
        return Err(Error::CorruptCheckpoint {
            detail: format!("implausible header length {header_len}"),
        });
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    read_exact_or_corrupt(&mut r, &mut header_bytes, "header body")?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| {
        Error::CorruptCheckpoint { detail: format!("header is not valid JSON: {e}") }
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::CorruptCheckpoint {
            detail: format!("unsupported format version {}", header.format_version),
        });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        read_exact_or_corrupt(&mut r, &mut bytes, &format!("data for tensor {:?}", entry.name))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks_exact yields 8 bytes")))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(&entry.shape, data)?));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::CorruptCheckpoint { detail: "trailing bytes after tensor data".into() });
    }
    Ok(Checkpoint { step: header.step, meta: header.meta, tensors })
}

fn read_exact_or_corrupt(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::CorruptCheckpoint { detail: format!("truncated while reading {what}") }
        } else {
            Error::Io(e)
        }
    })
}
