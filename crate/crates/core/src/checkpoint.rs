//! Binary checkpoint container.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic    8 bytes  "PLZCKPT\0"
//! version  u32
//! meta     u32 length + UTF-8 TOML (architecture, front-end mode, stage, seed)
//! count    u32
//! entries  count × { u16 name length, name, u8 rank, rank × u64 dims }
//! payload  f64 values of every entry, in directory order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{FrontEndMode, FrontEndState};
use crate::model::{ArchConfig, ClassifierParams, Network, CLASSIFIER_PARAM_NAMES, FRONT_END_PARAM_NAME};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PLZCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    /// Front-end mode; `None` for the undefended network.
    pub front_end_mode: Option<FrontEndMode>,
    pub front_end_frozen: bool,
    /// Number of training stages completed (0 = freshly initialized).
    pub stage: u32,
    pub dataset: String,
    pub seed: u64,
    pub config_fingerprint: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl PartialEq for Checkpoint {
    /// Bit-exact comparison of all tensors.
    fn eq(&self, other: &Self) -> bool {
        self.meta == other.meta
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, x), (b, y))| a == b && x.bit_eq(y))
    }
}

impl Checkpoint {
    pub fn from_network(net: &Network, meta: CheckpointMeta) -> Self {
        let tensors = net
            .named_params()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Checkpoint { meta, tensors }
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::format("directory", format!("missing tensor {name:?}")))
    }

    pub fn to_network(&self) -> Result<Network> {
        let front_end = match self.meta.front_end_mode {
            Some(mode) => Some(FrontEndState::from_parts(
                self.tensor(FRONT_END_PARAM_NAME)?,
                self.meta.arch.threshold,
                mode,
                self.meta.front_end_frozen,
            )?),
            None => None,
        };
        let mut tensors = Vec::with_capacity(8);
        for name in CLASSIFIER_PARAM_NAMES {
            tensors.push(self.tensor(name)?);
        }
        let tensors: [Tensor; 8] = tensors.try_into().expect("eight classifier tensors");
        Ok(Network {
            front_end,
            classifier: ClassifierParams::from_tensors(tensors)?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&self.meta).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format("magic", "not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u32("meta length")? as usize;
        let meta = std::str::from_utf8(r.take(meta_len, "meta")?).map_err(|e| Error::format("meta", e.to_string()))?;
        let meta: CheckpointMeta = toml::from_str(meta).map_err(|e| Error::format("meta", e.to_string()))?;
        let count = r.u32("tensor count")? as usize;
        let mut directory = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|e| Error::format("name", e.to_string()))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8, "dims")?.try_into().unwrap()) as usize);
            }
            directory.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in directory {
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8, "payload")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                "payload",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(field, "file truncated")),
        }
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let arch = ArchConfig {
            fc1_width: 16,
            ..ArchConfig::default()
        };
        let net = Network::init(&arch, 11).unwrap();
        Checkpoint::from_network(
            &net,
            CheckpointMeta {
                arch,
                front_end_mode: Some(FrontEndMode::Linear),
                front_end_frozen: false,
                stage: 0,
                dataset: "mnist".into(),
                seed: 11,
                config_fingerprint: "abc".into(),
            },
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_network().unwrap(), ck.to_network().unwrap());
    }

    #[test]
    fn corrupt_header_is_format_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { .. })));
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }
}
