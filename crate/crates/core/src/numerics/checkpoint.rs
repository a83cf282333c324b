//! Binary checkpoint: a header line, a JSON manifest, then raw little-endian
//! f64 payloads.
//!
//! ```text
//! TERRAGEN-CKPT-1\n
//! u64 LE manifest byte length
//! manifest JSON {"entries":[{"name","shape","dtype","offset"}], "meta":{..}}
//! payload (offsets are relative to the payload start)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, Result, Tensor};

pub const CHECKPOINT_MAGIC: &str = "TERRAGEN-CKPT-1";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<Entry>,
    meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, &Tensor)], meta: &serde_json::Value) -> Result<()> {
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f64".into(), offset };
            offset += 8 * t.numel() as u64;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest { entries, meta: meta.clone() })
        .map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC.as_bytes())?;
    w.write_all(b"\n")?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = vec![0u8; CHECKPOINT_MAGIC.len() + 1];
    r.read_exact(&mut header)?;
    if &header[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC.as_bytes() || header[CHECKPOINT_MAGIC.len()] != b'\n' {
        return Err(NumericsError::Checkpoint(format!("{} is not a {CHECKPOINT_MAGIC} file", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut manifest = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut manifest)?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest).map_err(|e| NumericsError::Checkpoint(format!("manifest: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        if e.dtype != "f64" {
            return Err(NumericsError::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| NumericsError::Checkpoint(format!("{}: payload truncated", e.name)))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok((out, manifest.meta))
}
