//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "CFCKPT\0\0" | version u32 | header_len u64 | header (JSON)
//! | payload_len u64 | payload (f64 values) | sha256 of everything before
//! ```
//!
//! The header lists every stored array (group, name, shape) in payload order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, FuseError, Result};
use crate::network::{FusionNet, NetworkSpec};
use crate::params::NamedArray;

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
const MAGIC: &[u8; 8] = b"CFCKPT\0\0";
const DIGEST_LEN: usize = 32;

/// Adam moments keyed like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<NamedArray>,
    pub v: Vec<NamedArray>,
}

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// u128 word position, decimal encoded.
    pub word_pos: String,
}

pub fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: hex::encode(rng.get_seed()),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

pub fn rng_from_state(state: &RngState) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let bad = |what: &str| FuseError::from(CheckpointError::Malformed(format!("rng state: bad {what}")));
    let bytes = hex::decode(&state.seed).map_err(|_| bad("seed"))?;
    let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed length"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos.parse::<u128>().map_err(|_| bad("word position"))?);
    Ok(rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub epoch: usize,
    pub global_step: u64,
    pub config_hash: String,
    pub network: NetworkSpec,
    /// Training configuration at save time, stored for provenance.
    pub train_config: serde_json::Value,
    pub params: Vec<NamedArray>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
}

impl CheckpointMeta {
    /// Parameters of `net` with no optimizer or RNG state attached.
    pub fn from_net(net: &FusionNet, stage: u8, epoch: usize) -> Result<Self> {
        Ok(Self {
            stage,
            epoch,
            global_step: 0,
            config_hash: net.spec().config_hash(),
            network: net.spec().clone(),
            train_config: serde_json::Value::Null,
            params: net.store().snapshot()?,
            optimizer: None,
            rng: None,
        })
    }

    /// Verifies names and shapes against `expected`, then the config hash.
    pub fn check_against(
        &self,
        expected: &BTreeMap<String, Vec<usize>>,
        expected_hash: &str,
    ) -> std::result::Result<(), CheckpointError> {
        let stored: BTreeMap<&str, &NamedArray> = self.params.iter().map(|a| (a.name.as_str(), a)).collect();
        for (name, shape) in expected {
            match stored.get(name.as_str()) {
                None => return Err(CheckpointError::MissingParameter { name: name.clone() }),
                Some(arr) if &arr.shape != shape => {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: arr.shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = stored.keys().find(|k| !expected.contains_key(**k)) {
            return Err(CheckpointError::UnexpectedParameter {
                name: extra.to_string(),
            });
        }
        if self.config_hash != expected_hash {
            return Err(CheckpointError::HashMismatch {
                expected: expected_hash.to_string(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }

    /// Validates against `net` and copies the parameters into it.
    pub fn apply_to(&self, net: &FusionNet) -> Result<()> {
        self.check_against(&net.store().shapes(), &net.spec().config_hash())?;
        net.store().assign(&self.params)
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: u8,
    epoch: usize,
    global_step: u64,
    config_hash: String,
    network: NetworkSpec,
    train_config: serde_json::Value,
    optimizer_step: Option<u64>,
    rng: Option<RngState>,
    dtype: String,
    arrays: Vec<ArrayEntry>,
}

const GROUP_PARAM: &str = "param";
const GROUP_M: &str = "adam_m";
const GROUP_V: &str = "adam_v";

fn encode(meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    let mut push = |group: &str, list: &[NamedArray]| {
        for a in list {
            arrays.push(ArrayEntry {
                group: group.to_string(),
                name: a.name.clone(),
                shape: a.shape.clone(),
            });
            for v in &a.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    };
    push(GROUP_PARAM, &meta.params);
    if let Some(opt) = &meta.optimizer {
        push(GROUP_M, &opt.m);
        push(GROUP_V, &opt.v);
    }
    let header = Header {
        stage: meta.stage,
        epoch: meta.epoch,
        global_step: meta.global_step,
        config_hash: meta.config_hash.clone(),
        network: meta.network.clone(),
        train_config: meta.train_config.clone(),
        optimizer_step: meta.optimizer.as_ref().map(|o| o.step),
        rng: meta.rng.clone(),
        dtype: "f64".into(),
        arrays,
    };
    let header = serde_json::to_vec(&header).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut out = Vec::with_capacity(payload.len() + header.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed("truncated container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<CheckpointMeta, CheckpointError> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::Malformed("not a checkpoint container".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(CheckpointError::Integrity("container too short for checksum".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Integrity("sha256 checksum does not match contents".into()));
    }
    let mut cur = Cursor { buf: body, pos: 12 };
    let header_len = cur.u64()? as usize;
    let header: Header =
        serde_json::from_slice(cur.take(header_len)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let payload_len = cur.u64()? as usize;
    let payload = cur.take(payload_len)?;
    let expected_values: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    if expected_values * 8 != payload_len {
        return Err(CheckpointError::Malformed(format!(
            "header describes {} values, payload holds {} bytes",
            expected_values, payload_len
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let (mut params, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for entry in header.arrays {
        let n = entry.shape.iter().product::<usize>();
        let arr = NamedArray {
            name: entry.name,
            shape: entry.shape,
            data: values.by_ref().take(n).collect(),
        };
        match entry.group.as_str() {
            GROUP_PARAM => params.push(arr),
            GROUP_M => m.push(arr),
            GROUP_V => v.push(arr),
            other => return Err(CheckpointError::Malformed(format!("unknown array group `{other}`"))),
        }
    }
    let optimizer = header.optimizer_step.map(|step| OptimizerState { step, m, v });
    Ok(CheckpointMeta {
        stage: header.stage,
        epoch: header.epoch,
        global_step: header.global_step,
        config_hash: header.config_hash,
        network: header.network,
        train_config: header.train_config,
        params,
        optimizer,
        rng: header.rng,
    })
}

/// Writes `dir/checkpoint.bin` atomically (temp file, then rename).
pub fn save_checkpoint(meta: &CheckpointMeta, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| FuseError::io(dir, e))?;
    let bytes = encode(meta)?;
    let target = dir.join(CHECKPOINT_FILE);
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| FuseError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| FuseError::io(&tmp, e))?;
        f.sync_all().map_err(|e| FuseError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, &target).map_err(|e| FuseError::io(&target, e))?;
    Ok(target)
}

/// Reads a checkpoint from a directory or a container file path.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointMeta> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let bytes = std::fs::read(&file).map_err(|e| FuseError::io(&file, e))?;
    Ok(decode(&bytes)?)
}

/// `root/stage{stage}/epoch_{epoch}`.
pub fn stage_dir(root: &Path, stage: u8, epoch: usize) -> PathBuf {
    root.join(format!("stage{stage}")).join(format!("epoch_{epoch}"))
}

/// Highest-epoch checkpoint directory of a stage, if any.
pub fn latest_checkpoint(root: &Path, stage: u8) -> Option<(usize, PathBuf)> {
    let entries = std::fs::read_dir(root.join(format!("stage{stage}"))).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let epoch = name.strip_prefix("epoch_")?.parse::<usize>().ok()?;
            e.path().join(CHECKPOINT_FILE).is_file().then(|| (epoch, e.path()))
        })
        .max_by_key(|(epoch, _)| *epoch)
}
