//! Self-contained network checkpoints.
//!
//! ```text
//! magic        8 bytes  "MFSECKPT"
//! version      u32 LE
//! mode         u8       0 = flow, 1 = meanflow
//! hlen         u32 LE   length of the JSON header
//! header       hlen bytes, UTF-8 JSON: geometry, metadata, array names and shapes
//! nfreq        u32 LE
//! frequencies  nfreq x f64 LE
//! payload      every parameter array in header order, row-major, f64 LE
//! ```

use std::fs;
use std::path::Path;

use mf_autodiff::NdArray;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{param_layout, Mode, NetworkConfig, VelocityNetwork};
use crate::stft::StftConfig;

const MAGIC: &[u8; 8] = b"MFSECKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Maximum interval width of the curriculum stage; `None` outside the curriculum.
    pub curriculum_stage: Option<f64>,
    pub flow_ratio: f64,
    pub sigma: f64,
    pub stft: StftConfig,
    /// Spectrogram scaling applied before the network; always "none".
    pub normalization: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCheckpoint {
    pub network: VelocityNetwork,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    geometry: NetworkConfig,
    meta: CheckpointMeta,
    arrays: Vec<(String, Vec<usize>)>,
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

impl NetworkCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.network;
        let header = Header {
            geometry: net.config().clone(),
            meta: self.meta.clone(),
            arrays: param_layout(net.config(), net.mode()),
        };
        let header = serde_json::to_vec(&header).expect("checkpoint header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match net.mode() {
            Mode::Flow => 0,
            Mode::MeanFlow => 1,
        });
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(net.frequencies().len() as u32).to_le_bytes());
        for f in net.frequencies() {
            out.extend_from_slice(&f.to_le_bytes());
        }
        for p in crate::network::VelocityModel::params(net) {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        if bytes.len() < 17 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint".into()));
        }
        let version = read_u32(bytes, 8).unwrap();
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mode = match bytes[12] {
            0 => Mode::Flow,
            1 => Mode::MeanFlow,
            m => return Err(bad(format!("unknown mode tag {m}"))),
        };
        let hlen = read_u32(bytes, 13).unwrap() as usize;
        let mut at = 17;
        let body = bytes.get(at..at + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        at += hlen;
        if header.arrays != param_layout(&header.geometry, mode) {
            return Err(bad("array table does not match geometry".into()));
        }
        let nfreq = read_u32(bytes, at).ok_or_else(|| bad("truncated frequency table".into()))? as usize;
        at += 4;
        let mut floats = |n: usize| -> Result<Vec<f64>> {
            let chunk = bytes
                .get(at..at + 8 * n)
                .ok_or_else(|| bad("truncated payload".into()))?;
            at += 8 * n;
            Ok(chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let frequencies = floats(nfreq)?;
        let mut params = Vec::with_capacity(header.arrays.len());
        for (_, shape) in &header.arrays {
            let data = floats(shape.iter().product())?;
            params.push(NdArray::new(shape.clone(), data)?);
        }
        if at != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - at)));
        }
        let network = VelocityNetwork::from_parts(header.geometry, mode, frequencies, params)?;
        Ok(Self {
            network,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(mode: Mode) -> NetworkCheckpoint {
        let mut cfg = NetworkConfig::with_bins(5);
        cfg.hidden = 16;
        cfg.time_dim = 8;
        NetworkCheckpoint {
            network: VelocityNetwork::new(cfg, mode, 3).unwrap(),
            meta: CheckpointMeta {
                seed: 3,
                curriculum_stage: Some(0.4),
                flow_ratio: 0.75,
                sigma: 0.5,
                stft: StftConfig::desk(),
                normalization: "none".into(),
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for mode in [Mode::Flow, Mode::MeanFlow] {
            let c = ckpt(mode);
            let bytes = c.to_bytes();
            let back = NetworkCheckpoint::from_bytes(&bytes, Path::new("x")).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("a.ckpt");
        let c = ckpt(Mode::MeanFlow);
        c.save(&path).unwrap();
        assert_eq!(NetworkCheckpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = ckpt(Mode::Flow).to_bytes();
        let p = Path::new("x");
        assert!(NetworkCheckpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut wrong_mode = bytes.clone();
        wrong_mode[12] = 1;
        assert!(NetworkCheckpoint::from_bytes(&wrong_mode, p).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(NetworkCheckpoint::from_bytes(&wrong_version, p).is_err());
        assert!(NetworkCheckpoint::from_bytes(b"garbage", p).is_err());
    }
}
