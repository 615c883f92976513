//! Model checkpoints: a small self-describing binary container.
//!
//! Layout, in order:
//! 1. magic bytes `DRCVCKPT`
//! 2. format version, u32 little-endian (currently 1)
//! 3. manifest length in bytes, u64 little-endian
//! 4. the manifest: JSON holding the model config and the name/length of
//!    every parameter group in canonical order
//! 5. the payload: every parameter as f64 little-endian, groups
//!    concatenated in manifest order
//!
//! Loading rebuilds the model from the embedded config and refuses the file
//! unless the rebuilt parameter layout matches the manifest exactly, so a
//! checkpoint can never be poured into a model of the wrong shape. Saving a
//! just-loaded model reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"DRCVCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

/// Serialize `model` into the container format.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut params = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    model.for_each_param(|name, _, v| {
        params.push(ParamEntry { name: name.to_string(), len: v.len() });
        for x in v {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    });
    let manifest = Manifest { config: model.config.clone(), params };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| Error::Format(format!("manifest encoding failed: {e}")))?;

    let mut out = Vec::with_capacity(8 + 4 + 8 + manifest_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Rebuild a model from container bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut v4 = [0u8; 4];
    read_exact(&mut r, &mut v4, "version")?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let mut l8 = [0u8; 8];
    read_exact(&mut r, &mut l8, "manifest length")?;
    let mlen = u64::from_le_bytes(l8) as usize;
    if r.len() < mlen {
        return Err(Error::Format(format!("manifest claims {mlen} bytes, only {} remain", r.len())));
    }
    let (mbytes, mut rest) = r.split_at(mlen);
    let manifest: Manifest =
        serde_json::from_slice(mbytes).map_err(|e| Error::Format(format!("manifest decoding failed: {e}")))?;

    let mut model = Model::init(&manifest.config, 0)?;
    let layout = model.param_layout();
    if layout.len() != manifest.params.len() {
        return Err(Error::Format(format!(
            "manifest lists {} parameter groups, the config produces {}",
            manifest.params.len(),
            layout.len()
        )));
    }
    for ((name, _, len), entry) in layout.iter().zip(&manifest.params) {
        if name != &entry.name || *len != entry.len {
            return Err(Error::Format(format!(
                "parameter group mismatch: manifest has {} ({} values), config produces {} ({} values)",
                entry.name, entry.len, name, len
            )));
        }
    }
    let want: usize = layout.iter().map(|(_, _, l)| l * 8).sum();
    if rest.len() != want {
        return Err(Error::Format(format!("payload holds {} bytes, layout needs {want}", rest.len())));
    }

    let mut failed = false;
    model.for_each_param_mut(|_, _, v| {
        for x in v.iter_mut() {
            let mut b = [0u8; 8];
            if rest.len() < 8 {
                failed = true;
                return;
            }
            b.copy_from_slice(&rest[..8]);
            rest = &rest[8..];
            *x = f64::from_le_bytes(b);
        }
    });
    if failed || !rest.is_empty() {
        return Err(Error::Format("payload length does not match the parameter layout".into()));
    }
    Ok(model)
}

/// Write `model` to `path`.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Read a model back from `path`.
pub fn load(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
    }
    let (head, tail) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = tail;
    Ok(())
}
