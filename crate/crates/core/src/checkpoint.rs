//! Binary checkpoints: magic, JSON header, then every parameter as
//! little-endian f64 in registration order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::FeatureSchema;
use crate::tensor::{Matrix, ParamStore};
use crate::trainer::{Network, NetworkSpec};

const MAGIC: &[u8; 8] = b"MADAPT01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: FeatureSchema,
    spec: NetworkSpec,
    params: Vec<(String, usize, usize)>,
    extra: serde_json::Value,
}

pub fn save(path: &Path, net: &Network, store: &ParamStore, extra: serde_json::Value) -> Result<()> {
    let header = Header {
        schema: net.schema.clone(),
        spec: net.spec.clone(),
        params: store
            .ids()
            .map(|p| {
                let m = store.value(p);
                (store.name(p).to_string(), m.rows(), m.cols())
            })
            .collect(),
        extra,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + 16 + 8 * store.ids().map(|p| store.value(p).len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in store.ids() {
        for v in store.value(p).as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub struct Loaded {
    pub net: Network,
    pub store: ParamStore,
    pub extra: serde_json::Value,
}

/// Restores a network. When `expected` is given, the stored schema must
/// equal it.
pub fn load(path: &Path, expected: Option<&FeatureSchema>) -> Result<Loaded> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
    if let Some(schema) = expected {
        if schema != &header.schema {
            return Err(bad("feature schema differs from the one the checkpoint was trained with"));
        }
    }

    let (net, mut store) = Network::init(&header.schema, &header.spec, 0)?;
    if store.len() != header.params.len() {
        return Err(bad("parameter count differs from the network layout"));
    }
    let mut offset = 16 + len;
    for (name, rows, cols) in &header.params {
        let pid = store.lookup(name).ok_or_else(|| bad(&format!("unknown parameter `{name}`")))?;
        let n = rows * cols;
        let raw = bytes.get(offset..offset + 8 * n).ok_or_else(|| bad("truncated parameters"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let m = Matrix::from_vec(*rows, *cols, data)?;
        store.value(pid).check_same_shape("checkpoint", &m)?;
        *store.value_mut(pid) = m;
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok(Loaded {
        net,
        store,
        extra: header.extra,
    })
}
