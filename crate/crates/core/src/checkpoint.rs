//! Network checkpoint files.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "ATTCTLNN"
//! version      u32
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (shapes, activation, dims, metadata)
//! count        u64       number of parameters
//! params       count × f64, declaration order
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! The JSON variant carries the same header fields plus a `params` array and
//! is meant for inspection and for porting the network to other runtimes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{Activation, Architecture, MlpActorCritic};

pub const MAGIC: &[u8; 8] = b"ATTCTLNN";
pub const FORMAT_VERSION: u32 = 1;
const JSON_FORMAT_TAG: &str = "attctl-network";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
}

fn format_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

/// Provenance carried alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Identifier of the task the network was trained for, e.g. `none-full`.
    pub task: Option<String>,
    /// Hash of the run configuration that produced the network.
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    obs_dim: usize,
    act_dim: usize,
    activation: Activation,
    hidden: Vec<usize>,
    actor_layers: Vec<[usize; 2]>,
    critic_layers: Vec<[usize; 2]>,
    log_std_len: usize,
    param_count: usize,
    meta: CheckpointMeta,
}

impl Header {
    fn describe(net: &MlpActorCritic, meta: &CheckpointMeta) -> Self {
        let arch = net.architecture();
        Self {
            format_version: FORMAT_VERSION,
            obs_dim: arch.obs_dim,
            act_dim: arch.act_dim,
            activation: arch.activation,
            hidden: arch.hidden.clone(),
            actor_layers: arch.actor_shapes().into_iter().map(|(i, o)| [i, o]).collect(),
            critic_layers: arch.critic_shapes().into_iter().map(|(i, o)| [i, o]).collect(),
            log_std_len: arch.act_dim,
            param_count: net.param_count(),
            meta: meta.clone(),
        }
    }

    fn architecture(&self) -> Result<Architecture, CheckpointError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(self.format_version));
        }
        let arch = Architecture {
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
        };
        let shapes = |s: Vec<(usize, usize)>| s.into_iter().map(|(i, o)| [i, o]).collect::<Vec<_>>();
        if shapes(arch.actor_shapes()) != self.actor_layers
            || shapes(arch.critic_shapes()) != self.critic_layers
            || self.log_std_len != self.act_dim
            || arch.param_count() != self.param_count
        {
            return Err(format_err("layer shapes are inconsistent with the declared architecture"));
        }
        Ok(arch)
    }
}

/// A network plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: MlpActorCritic,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(net: MlpActorCritic, meta: CheckpointMeta) -> Self {
        Self { net, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header::describe(&self.net, &self.meta)).expect("header serializes");
        let params = self.net.params();
        let mut out = Vec::with_capacity(8 + 8 + header.len() + 8 + params.len() * 8 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.first() == Some(&b'{') {
            return Self::from_json(bytes);
        }
        if bytes.len() < 16 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(format_err("missing magic bytes"));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != checksum {
            return Err(format_err("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        let rest = &body[16..];
        if rest.len() < header_len + 8 {
            return Err(format_err("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&rest[..header_len]).map_err(|e| format_err(format!("header: {e}")))?;
        let arch = header.architecture()?;
        let rest = &rest[header_len..];
        let count = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let data = &rest[8..];
        if count != header.param_count || data.len() != count * 8 {
            return Err(format_err(format!("expected {} parameters, found {} bytes", header.param_count, data.len())));
        }
        let params: Vec<f64> =
            data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(format_err("non-finite parameter"));
        }
        let net = MlpActorCritic::from_params(arch, params).map_err(|e| format_err(e.to_string()))?;
        Ok(Self { net, meta: header.meta })
    }

    pub fn to_json(&self) -> String {
        let doc = JsonCheckpoint {
            format: JSON_FORMAT_TAG.to_string(),
            header: Header::describe(&self.net, &self.meta),
            params: self.net.params().to_vec(),
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let doc: JsonCheckpoint = serde_json::from_slice(bytes).map_err(|e| format_err(format!("json: {e}")))?;
        if doc.format != JSON_FORMAT_TAG {
            return Err(format_err(format!("unknown format tag `{}`", doc.format)));
        }
        let arch = doc.header.architecture()?;
        if doc.params.len() != doc.header.param_count {
            return Err(format_err("parameter count does not match header"));
        }
        let net = MlpActorCritic::from_params(arch, doc.params).map_err(|e| format_err(e.to_string()))?;
        Ok(Self { net, meta: doc.header.meta })
    }

    /// Writes the binary form, or the JSON form when the extension is `.json`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = if is_json_path(path) { self.to_json().into_bytes() } else { self.to_bytes() };
        fs::write(path, bytes).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 over the little-endian parameter bytes; identical for both file variants.
    pub fn param_hash(&self) -> String {
        param_hash(self.net.params())
    }
}

pub fn param_hash(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn is_json_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonCheckpoint {
    format: String,
    header: Header,
    params: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sample() -> Checkpoint {
        let net = MlpActorCritic::new(Architecture::default(), &mut seeded(42, &[]));
        Checkpoint::new(net, CheckpointMeta { task: Some("none-full".into()), config_hash: Some("abc".into()) })
    }

    #[test]
    fn binary_round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.to_bytes(), bytes);
        let obs = [0.2; 13];
        let (a, b) = (ck.net.policy_forward(&obs).unwrap(), back.net.policy_forward(&obs).unwrap());
        assert_eq!(a.mean.map(f64::to_bits), b.mean.map(f64::to_bits));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let ck = sample();
        let json = ck.to_json();
        let back = Checkpoint::from_bytes(json.as_bytes()).unwrap();
        assert_eq!(back.net.params(), ck.net.params());
        assert_eq!(back.param_hash(), ck.param_hash());
        assert_eq!(back.to_json(), json);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[20] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(CheckpointError::Format(_))));
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong_magic).is_err());
        assert!(Checkpoint::from_bytes(b"").is_err());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&digest);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Version(7))));
    }

    #[test]
    fn files_pick_variant_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        let bin = dir.path().join("net.ckpt");
        let json = dir.path().join("net.json");
        ck.save(&bin).unwrap();
        ck.save(&json).unwrap();
        assert_eq!(&fs::read(&bin).unwrap()[..8], MAGIC);
        assert_eq!(fs::read(&json).unwrap()[0], b'{');
        assert_eq!(Checkpoint::load(&bin).unwrap().param_hash(), Checkpoint::load(&json).unwrap().param_hash());
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(CheckpointError::Io { .. })));
    }
}
