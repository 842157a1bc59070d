//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "FGLABCKP"
//! version   u32
//! hdr_len   u64
//! header    hdr_len bytes of JSON (CheckpointHeader)
//! n_blobs   u64
//! n_blobs x { len u64, len elements }
//! ```
//!
//! Blobs are the parameters in declaration order followed by the optimizer
//! velocities in the same order (absent for inference-only files).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, Network, OptimConstants, OptimState, Scalar, TensorBuf};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FGLABCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: ArchSpec,
    pub iteration: u64,
    pub optimizer: OptimConstants,
    pub seed: u64,
    pub precision: String,
    pub has_velocity: bool,
}

/// A network plus, optionally, the optimizer state needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub net: Network<T>,
    pub optim: Option<OptimState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(
        net: Network<T>,
        optim: Option<OptimState<T>>,
        constants: OptimConstants,
        iteration: u64,
        seed: u64,
    ) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                arch: net.arch().clone(),
                iteration,
                optimizer: optim.as_ref().map_or(constants, |o| o.constants),
                seed,
                precision: T::NAME.to_string(),
                has_velocity: optim.is_some(),
            },
            net,
            optim,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let velocity = self.optim.as_ref().map_or(&[][..], |o| o.velocity());
        let blobs: Vec<&TensorBuf<T>> = self.net.params().iter().chain(velocity).collect();
        out.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
        for b in blobs {
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            for &v in b.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hlen = read_u64(&mut r)? as usize;
        if r.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..hlen])?;
        r = &r[hlen..];
        if header.precision != T::NAME {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} values, expected {}",
                header.precision,
                T::NAME
            )));
        }
        let mut net = Network::<T>::zeroed(header.arch.clone())?;
        let n_params = net.params().len();
        let n_blobs = read_u64(&mut r)? as usize;
        let want = if header.has_velocity {
            2 * n_params
        } else {
            n_params
        };
        if n_blobs != want {
            return Err(Error::Checkpoint(format!(
                "expected {want} blobs, found {n_blobs}"
            )));
        }
        let shapes: Vec<Vec<usize>> = net.params().iter().map(|p| p.shape().to_vec()).collect();
        let mut blobs = Vec::with_capacity(n_blobs);
        for i in 0..n_blobs {
            let shape = &shapes[i % n_params];
            let len = read_u64(&mut r)? as usize;
            if len != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "blob {i} has {len} values, expected shape {shape:?}"
                )));
            }
            let nbytes = len * T::BYTES;
            if r.len() < nbytes {
                return Err(bad("truncated blob"));
            }
            let data = r[..nbytes].chunks_exact(T::BYTES).map(T::read_le).collect();
            r = &r[nbytes..];
            blobs.push(TensorBuf::from_vec(shape, data)?);
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let velocity = blobs.split_off(n_params);
        net.set_params(blobs)?;
        let optim = if header.has_velocity {
            Some(OptimState::with_velocity(header.optimizer, velocity)?)
        } else {
            None
        };
        Ok(Self { header, net, optim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated".into()))?;
    Ok(u64::from_le_bytes(b))
}

/// Loads just the network from a checkpoint file.
pub fn load_network(path: &Path) -> Result<Network<f32>> {
    Ok(Checkpoint::<f32>::load(path)?.net)
}
