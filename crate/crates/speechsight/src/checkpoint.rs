//! Binary checkpoints: magic `S2SK`, a version word, named 32-bit float
//! tensors, and a trailing CRC32. Training state (config snapshot, stage,
//! step counter) rides along as reserved `~meta.*` tensors so the container
//! stays a flat name-to-tensor map.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::config::{Stage, TrainConfig};
use crate::model::GroundingModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"S2SK";
pub const VERSION: u32 = 1;

const META_CONFIG: &str = "~meta.config";
const META_STAGE: &str = "~meta.stage";
const META_STEP: &str = "~meta.step";

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    BadMagic { found: [u8; 4] },
    BadVersion { found: u32 },
    Truncated { reading: &'static str },
    TrailingBytes { extra: usize },
    BadChecksum { stored: u32, computed: u32 },
    DuplicateTensor { name: String },
    BadMeta { reason: String },
    MissingTensor { name: String },
    UnexpectedTensor { name: String },
    ShapeMismatch { name: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::BadMagic { found } => {
                write!(f, "not a checkpoint: bad magic {found:?}")
            }
            CheckpointError::BadVersion { found } => {
                write!(f, "unsupported checkpoint version {found}, expected {VERSION}")
            }
            CheckpointError::Truncated { reading } => {
                write!(f, "checkpoint truncated while reading {reading}")
            }
            CheckpointError::TrailingBytes { extra } => {
                write!(f, "checkpoint has {extra} bytes past its end")
            }
            CheckpointError::BadChecksum { stored, computed } => write!(
                f,
                "checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})"
            ),
            CheckpointError::DuplicateTensor { name } => {
                write!(f, "checkpoint repeats tensor {name}")
            }
            CheckpointError::BadMeta { reason } => write!(f, "checkpoint metadata: {reason}"),
            CheckpointError::MissingTensor { name } => {
                write!(f, "checkpoint is missing tensor {name}")
            }
            CheckpointError::UnexpectedTensor { name } => {
                write!(f, "checkpoint has unexpected tensor {name}")
            }
            CheckpointError::ShapeMismatch { name } => {
                write!(f, "checkpoint tensor {name} has the wrong shape")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> CheckpointError {
        CheckpointError::Io(e)
    }
}

/// A trained model frozen to disk precision, plus everything needed to
/// rebuild and continue or evaluate it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub stage: Stage,
    pub step: u64,
    tensors: BTreeMap<String, Tensor>,
}

fn snap(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::from_vec(t.dims(), data).expect("same shape")
}

fn bytes_tensor(bytes: &[u8]) -> Tensor {
    let data = bytes.iter().map(|&b| b as f64).collect();
    Tensor::from_vec(&[bytes.len()], data).expect("valid dims")
}

fn tensor_bytes(t: &Tensor, what: &str) -> Result<Vec<u8>, CheckpointError> {
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..256.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(CheckpointError::BadMeta {
                    reason: format!("{what} holds a non-byte value {v}"),
                })
            }
        })
        .collect()
}

impl Checkpoint {
    /// Snapshots a parameter store. Values are snapped through `f32` so the
    /// in-memory checkpoint equals what a save/load round trip returns.
    pub fn capture(config: &TrainConfig, step: u64, params: &ParamStore) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (name, p) in params.iter() {
            assert!(
                !name.starts_with('~'),
                "parameter names must not collide with checkpoint metadata"
            );
            tensors.insert(name.to_string(), snap(&p.value));
        }
        Checkpoint {
            config: config.clone(),
            stage: config.stage,
            step,
            tensors,
        }
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config_json = serde_json::to_string(&self.config).expect("config serializes");
        let stage_code = match self.stage {
            Stage::Pretrain => 0.0,
            Stage::Finetune => 1.0,
        };
        let meta = [
            (META_CONFIG, bytes_tensor(config_json.as_bytes())),
            (META_STAGE, Tensor::from_vec(&[1], vec![stage_code]).expect("valid dims")),
            (META_STEP, bytes_tensor(&self.step.to_le_bytes())),
        ];

        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&((self.tensors.len() + meta.len()) as u32).to_le_bytes());
        // Model names never start with '~', so appending the metadata keeps
        // the stream in ascending name order.
        for (name, t) in &self.tensors {
            push_tensor(&mut buf, name, t);
        }
        for (name, t) in &meta {
            push_tensor(&mut buf, name, t);
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic {
                found: [magic[0], magic[1], magic[2], magic[3]],
            });
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion { found: version });
        }
        let count = cur.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = read_tensor(&mut cur)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::DuplicateTensor { name });
            }
        }
        let crc_at = cur.pos;
        let stored = cur.u32("checksum")?;
        if cur.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes {
                extra: bytes.len() - cur.pos,
            });
        }
        let computed = crc32fast::hash(&bytes[..crc_at]);
        if stored != computed {
            return Err(CheckpointError::BadChecksum { stored, computed });
        }

        let meta = |name: &'static str| {
            tensors.get(name).cloned().ok_or(CheckpointError::BadMeta {
                reason: format!("{name} entry absent"),
            })
        };
        let config_json = tensor_bytes(&meta(META_CONFIG)?, META_CONFIG)?;
        let config_json = String::from_utf8(config_json).map_err(|e| CheckpointError::BadMeta {
            reason: format!("config snapshot is not UTF-8: {e}"),
        })?;
        let config: TrainConfig =
            serde_json::from_str(&config_json).map_err(|e| CheckpointError::BadMeta {
                reason: format!("config snapshot does not parse: {e}"),
            })?;
        config.validate().map_err(|e| CheckpointError::BadMeta {
            reason: format!("config snapshot invalid: {e}"),
        })?;
        let stage = match meta(META_STAGE)?.data() {
            [c] if *c == 0.0 => Stage::Pretrain,
            [c] if *c == 1.0 => Stage::Finetune,
            other => {
                return Err(CheckpointError::BadMeta {
                    reason: format!("unknown stage code {other:?}"),
                })
            }
        };
        let step_bytes = tensor_bytes(&meta(META_STEP)?, META_STEP)?;
        let step_bytes: [u8; 8] = step_bytes.try_into().map_err(|_| CheckpointError::BadMeta {
            reason: "step counter must be 8 bytes".to_string(),
        })?;
        let step = u64::from_le_bytes(step_bytes);

        tensors.remove(META_CONFIG);
        tensors.remove(META_STAGE);
        tensors.remove(META_STEP);
        for name in tensors.keys() {
            if name.starts_with('~') {
                return Err(CheckpointError::BadMeta {
                    reason: format!("unknown reserved entry {name}"),
                });
            }
        }
        Ok(Checkpoint {
            config,
            stage,
            step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model this checkpoint was captured from. The tensor set
    /// must match the architecture in the config snapshot exactly; expert
    /// adapters are attached when their tensors are present.
    pub fn restore_model(&self) -> Result<GroundingModel, CheckpointError> {
        let mut model = GroundingModel::new(self.config.model, 0);
        if self.tensors.keys().any(|n| n.starts_with("mole.")) {
            model.attach_mole(self.config.mole, 0);
        }
        let expected = model.params.names();
        for name in &expected {
            let stored = self
                .tensors
                .get(name)
                .ok_or_else(|| CheckpointError::MissingTensor { name: name.clone() })?;
            let p = model.params.get_mut(name).expect("expected name");
            if stored.dims() != p.value.dims() {
                return Err(CheckpointError::ShapeMismatch { name: name.clone() });
            }
            p.value = stored.clone();
        }
        if let Some(name) = self.tensors.keys().find(|n| !expected.contains(n)) {
            return Err(CheckpointError::UnexpectedTensor { name: name.clone() });
        }
        Ok(model)
    }
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.dims().len() as u8);
    for &d in t.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, reading: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated { reading });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, reading: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, reading)?[0])
    }

    fn u16(&mut self, reading: &'static str) -> Result<u16, CheckpointError> {
        let b = self.take(2, reading)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, reading: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, reading)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_tensor(cur: &mut Cursor<'_>) -> Result<(String, Tensor), CheckpointError> {
    let name_len = cur.u16("tensor name length")? as usize;
    let name = cur.take(name_len, "tensor name")?;
    let name = String::from_utf8(name.to_vec()).map_err(|e| CheckpointError::BadMeta {
        reason: format!("tensor name is not UTF-8: {e}"),
    })?;
    let rank = cur.u8("tensor rank")? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(cur.u32("tensor dims")? as usize);
    }
    // Bounds come before allocation so corrupt dims cannot demand gigabytes.
    let len = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or(CheckpointError::Truncated {
            reading: "tensor payload",
        })?;
    let payload = cur.take(len, "tensor payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let t = Tensor::from_vec(&dims, data).map_err(|_| CheckpointError::BadMeta {
        reason: format!("tensor {name} has invalid dims"),
    })?;
    Ok((name, t))
}
