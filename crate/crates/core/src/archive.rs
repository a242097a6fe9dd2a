//! Single-file container for named f64 arrays plus a JSON metadata header.
//!
//! Used for parameter checkpoints and prior-embedding caches. Layout:
//!
//! ```text
//! magic "GSAR" | version u32 LE | header_len u64 LE | header JSON | raw f64 LE data
//! ```
//!
//! The header lists entry names and shapes in storage order; array data is
//! concatenated row-major in that order.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GSAR";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}

pub fn write_archive(
    path: &Path,
    meta: &serde_json::Value,
    arrays: &[(String, ArrayD<f64>)],
) -> Result<()> {
    let header = Header {
        meta: meta.clone(),
        entries: arrays
            .iter()
            .map(|(name, arr)| Entry {
                name: name.clone(),
                shape: arr.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Archive(format!("header encode: {e}")))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    emit(MAGIC)?;
    emit(&VERSION.to_le_bytes())?;
    emit(&(header_bytes.len() as u64).to_le_bytes())?;
    emit(&header_bytes)?;
    for (_, arr) in arrays {
        // standard_layout holds for arrays we build; fall back to a copy otherwise
        let owned;
        let slice = match arr.as_slice() {
            Some(s) => s,
            None => {
                owned = arr.iter().copied().collect::<Vec<f64>>();
                &owned
            }
        };
        for v in slice {
            emit(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Archive("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Archive(format!("unsupported version {version}")));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(u64buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Archive(format!("header decode: {e}")))?;

    let mut arrays = Vec::with_capacity(header.entries.len());
    for entry in header.entries {
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| Error::Archive(format!("entry {}: {e}", entry.name)))?;
        arrays.push((entry.name, arr));
    }
    Ok(Archive {
        meta: header.meta,
        arrays,
    })
}
