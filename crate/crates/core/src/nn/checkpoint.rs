//! Binary checkpoint: magic, format version, JSON header, raw tensors.
//!
//! ```text
//! 8 bytes   magic "RMVCCKPT"
//! u32 LE    format version
//! u64 LE    header length in bytes
//! ...       JSON header (network config, view dims, tensor shapes, metadata)
//! ...       every tensor as row-major f64 LE, in Model::tensors order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{init_networks, Model, NetworkConfig};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RMVCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    view_dims: Vec<usize>,
    shapes: Vec<(usize, usize)>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A model plus free-form metadata (config echo, epoch, dataset name).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, meta: &serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let header = Header {
        network: model.config.clone(),
        view_dims: model.view_dims(),
        shapes: model.tensors().iter().map(|t| t.dim()).collect(),
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(header.len() as u64).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for t in model.tensors() {
        for &x in t.iter() {
            w.write_f64::<LittleEndian>(x).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut r = BufReader::new(File::open(path).map_err(io)?);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated before magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(|_| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| bad(e.to_string()))?;

    let mut model = Model {
        config: header.network.clone(),
        autoencoders: Vec::new(),
        cluster_layers: Vec::new(),
    };
    let (aes, clusters) = init_networks(&header.network, &header.view_dims, 0)?;
    model.autoencoders = aes;
    model.cluster_layers = clusters;

    let tensors = model.tensors_mut();
    if tensors.len() != header.shapes.len() {
        return Err(bad(format!(
            "header lists {} tensors, architecture has {}",
            header.shapes.len(),
            tensors.len()
        )));
    }
    for (t, &shape) in tensors.into_iter().zip(&header.shapes) {
        if t.dim() != shape {
            return Err(bad(format!("tensor shape {shape:?} does not match {:?}", t.dim())));
        }
        let mut data = vec![0.0; shape.0 * shape.1];
        r.read_f64_into::<LittleEndian>(&mut data)
            .map_err(|_| bad("truncated tensor data".into()))?;
        *t = Matrix::from_shape_vec(shape, data).expect("shape checked");
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io)? != 0 {
        return Err(bad("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = NetworkConfig {
            latent_dim: 4,
            hidden: vec![6, 5, 4],
            activation: Activation::Relu,
            n_clusters: 3,
        };
        let model = Model::init(&cfg, &[3, 7], 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let meta = serde_json::json!({"epoch": 3});
        save_checkpoint(&path, &model, &meta).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta, meta);
        for (a, b) in back.model.tensors().iter().zip(model.tensors()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(
            load_checkpoint(dir.path().join("absent")),
            Err(Error::Io { .. })
        ));
    }
}
