//! Single-file checkpoint: magic, format version, JSON header, raw f32 data.
//!
//! ```text
//! b"MMSEGCKP" | u32 LE format version | u64 LE header length | header JSON |
//! parameters then buffers, f32 LE, in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{ModelParams, NetworkConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::preprocess::NormStats;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MMSEGCKP";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    config: NetworkConfig,
    norm: NormStats,
    params: Vec<Entry>,
    buffers: Vec<Entry>,
}

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let entries = |names: &[String], ts: &[Tensor<f32>]| {
        names
            .iter()
            .zip(ts)
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape(),
            })
            .collect()
    };
    let header = Header {
        version: params.version.clone(),
        config: params.config.clone(),
        norm: params.norm,
        params: entries(&params.names, &params.tensors),
        buffers: entries(&params.buffer_names, &params.buffers),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors.iter().chain(&params.buffers) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<ModelParams> {
    let b = &mut bytes;
    if take(b, 8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let found = u32::from_le_bytes(take(b, 4, "format version")?.try_into().unwrap());
    if found != FORMAT_VERSION {
        return Err(Error::Incompatible {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(take(b, 8, "header length")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: Header = serde_json::from_slice(take(b, len, "header")?)
        .map_err(|e| Error::json("checkpoint header", e))?;
    header.config.validate()?;

    let (want_params, want_buffers) = ModelParams::expected_layout(&header.config);
    let matches = |got: &[Entry], want: &[(String, [usize; 4])]| {
        got.len() == want.len()
            && got
                .iter()
                .zip(want)
                .all(|(g, (n, s))| &g.name == n && &g.shape == s)
    };
    if !matches(&header.params, &want_params) || !matches(&header.buffers, &want_buffers) {
        return Err(Error::Checkpoint(
            "parameter layout does not match the embedded network config".into(),
        ));
    }

    let mut read = |entries: &[Entry]| -> Result<Vec<Tensor<f32>>> {
        entries
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let raw = take(b, n * 4, &e.name)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(Tensor::from_vec(e.shape, data))
            })
            .collect()
    };
    let tensors = read(&header.params)?;
    let buffers = read(&header.buffers)?;
    if !b.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", b.len())));
    }
    Ok(ModelParams::assemble(
        header.config,
        header.norm,
        header.version,
        header.params.into_iter().map(|e| e.name).collect(),
        tensors,
        header.buffers.into_iter().map(|e| e.name).collect(),
        buffers,
    ))
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
