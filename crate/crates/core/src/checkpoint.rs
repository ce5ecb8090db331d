//! Checkpoint file: the magic `VITSVM1\n`, a little-endian `u64` header
//! length, a JSON header, then raw little-endian tensor payloads in header
//! order (parameters, then Adam first and second moments).

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::EpochLog;

pub const MAGIC: &[u8; 8] = b"VITSVM1\n";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// `u128` word position in decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Checkpoint(format!("invalid rng {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("seed"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Param,
    AdamFirst,
    AdamSecond,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub section: Section,
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: DType,
    epoch: usize,
    config: RunConfig,
    spec: ModelSpec,
    rng: RngState,
    schedule: LrSchedule,
    adam_config: AdamConfig,
    adam_step: u64,
    history: Vec<EpochLog>,
    tensors: Vec<TensorEntry>,
}

/// Complete training state after `epoch` finished epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub spec: ModelSpec,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub schedule: LrSchedule,
    pub history: Vec<EpochLog>,
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
}

/// A checkpoint of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn dtype(&self) -> DType {
        match self {
            AnyCheckpoint::F32(_) => DType::F32,
            AnyCheckpoint::F64(_) => DType::F64,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        match self {
            AnyCheckpoint::F32(c) => &c.spec,
            AnyCheckpoint::F64(c) => &c.spec,
        }
    }

    pub fn config(&self) -> &RunConfig {
        match self {
            AnyCheckpoint::F32(c) => &c.config,
            AnyCheckpoint::F64(c) => &c.config,
        }
    }

    pub fn epoch(&self) -> usize {
        match self {
            AnyCheckpoint::F32(c) => c.epoch,
            AnyCheckpoint::F64(c) => c.epoch,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        match self {
            AnyCheckpoint::F32(c) => c.encode(),
            AnyCheckpoint::F64(c) => c.encode(),
        }
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let sections = [
            (Section::Param, self.params.iter().map(|(n, t)| (n, t)).collect::<Vec<_>>()),
            (Section::AdamFirst, self.adam.first.iter().collect()),
            (Section::AdamSecond, self.adam.second.iter().collect()),
        ];
        for (section, items) in sections {
            for (name, t) in items {
                let offset = payload.len() as u64;
                for &v in t.data() {
                    v.write_le(&mut payload);
                }
                tensors.push(TensorEntry {
                    section,
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    nbytes: payload.len() as u64 - offset,
                });
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            dtype: T::DTYPE,
            epoch: self.epoch,
            config: self.config.clone(),
            spec: self.spec.clone(),
            rng: RngState::capture(&self.rng),
            schedule: self.schedule,
            adam_config: self.adam.config,
            adam_step: self.adam.step,
            history: self.history.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    fn from_parts(header: Header, payload: &[u8]) -> Result<Self> {
        let size = T::DTYPE.size();
        let mut params = ParamStore::new();
        let mut adam = AdamState {
            config: header.adam_config,
            step: header.adam_step,
            first: Default::default(),
            second: Default::default(),
        };
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.nbytes != (numel * size) as u64 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}`: shape {:?} does not match its {} payload bytes at offset {}",
                    e.name, e.shape, e.nbytes, e.offset
                )));
            }
            let start = e.offset as usize;
            let bytes = payload.get(start..start + e.nbytes as usize).ok_or_else(|| {
                Error::Checkpoint(format!("truncated payload in tensor `{}`", e.name))
            })?;
            let data = bytes.chunks_exact(size).map(T::read_le).collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| Error::Checkpoint(format!("tensor `{}`: {err}", e.name)))?;
            match e.section {
                Section::Param => params.insert(&e.name, t)?,
                Section::AdamFirst => {
                    adam.first.insert(e.name.clone(), t);
                }
                Section::AdamSecond => {
                    adam.second.insert(e.name.clone(), t);
                }
            }
            expected_offset += e.nbytes;
        }
        if expected_offset != payload.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "payload is {} bytes, header describes {expected_offset}",
                payload.len()
            )));
        }
        for (name, t) in params.iter() {
            let ok = |m: &indexmap::IndexMap<String, Tensor<T>>| {
                m.get(name).is_some_and(|x| x.shape() == t.shape())
            };
            if !ok(&adam.first) || !ok(&adam.second) || adam.first.len() != params.len() || adam.second.len() != params.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state does not match parameter `{name}`"
                )));
            }
        }
        Ok(Checkpoint {
            config: header.config,
            spec: header.spec,
            epoch: header.epoch,
            rng: header.rng.restore()?,
            schedule: header.schedule,
            history: header.history,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AnyCheckpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(if bytes.starts_with(MAGIC) {
            "truncated header".into()
        } else {
            "not a checkpoint file (bad magic)".into()
        }));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let raw: serde_json::Value = serde_json::from_slice(json)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    let version = raw.get("version").and_then(|v| v.as_u64());
    if version != Some(u64::from(FORMAT_VERSION)) {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (this build reads {FORMAT_VERSION})",
            version.map_or("missing".to_string(), |v| v.to_string())
        )));
    }
    let header: Header = serde_json::from_value(raw)
        .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
    let payload = &bytes[16 + len..];
    Ok(match header.dtype {
        DType::F32 => AnyCheckpoint::F32(Checkpoint::from_parts(header, payload)?),
        DType::F64 => AnyCheckpoint::F64(Checkpoint::from_parts(header, payload)?),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<AnyCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn save_checkpoint<T: Scalar>(checkpoint: &Checkpoint<T>, path: &Path) -> Result<()> {
    checkpoint.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::optim::PlateauConfig;
    use crate::vit::VitConfig;
    use rand::RngCore;

    fn sample(seed: u64) -> Checkpoint<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec::new(VitConfig::tiny(), "svm-hinge");
        let model = Model::<f32>::new(spec.clone(), &mut rng).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &model.params);
        adam.step = 3;
        adam.first = model.params.iter().map(|(n, t)| (n.clone(), t.scale(0.5))).collect();
        rng.next_u64();
        Checkpoint {
            config: RunConfig::default(),
            spec,
            epoch: 2,
            rng,
            schedule: LrSchedule::new(PlateauConfig::default(), 1e-4),
            history: vec![EpochLog { epoch: 1, train_loss: 0.3, val_loss: 0.25, val_acc: 0.5, lr: 1e-4 }],
            params: model.params,
            adam,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let ck = sample(1);
        ck.save(&a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, AnyCheckpoint::F32(ck.clone()));
        loaded.encode().map(|bytes| std::fs::write(&b, bytes)).unwrap().unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(&std::fs::read(&a).unwrap()[..8], b"VITSVM1\n");
    }

    #[test]
    fn restored_rng_continues_the_stream() {
        let mut ck = sample(5);
        let bytes = ck.encode().unwrap();
        let AnyCheckpoint::F32(mut back) = decode_checkpoint(&bytes).unwrap() else { panic!() };
        for _ in 0..10 {
            assert_eq!(ck.rng.next_u64(), back.rng.next_u64());
        }
    }

    #[test]
    fn f64_checkpoints_round_trip() {
        let ck = sample(2);
        let c64 = Checkpoint::<f64> {
            params: ck.params.cast(),
            adam: AdamState {
                config: ck.adam.config,
                step: ck.adam.step,
                first: ck.adam.first.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
                second: ck.adam.second.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            },
            config: ck.config,
            spec: ck.spec,
            epoch: ck.epoch,
            rng: ck.rng,
            schedule: ck.schedule,
            history: ck.history,
        };
        let back = decode_checkpoint(&c64.encode().unwrap()).unwrap();
        assert_eq!(back.dtype(), DType::F64);
        assert_eq!(back, AnyCheckpoint::F64(c64));
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let bytes = sample(3).encode().unwrap();
        for cut in [4, 12, 100, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "{cut}: {err}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode_checkpoint(&bad_magic).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let bytes = sample(4).encode().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + len]).unwrap().replacen("\"version\":1", "\"version\":9", 1);
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&bytes[16 + len..]);
        let err = decode_checkpoint(&out).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let bytes = sample(6).encode().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        let broken = header.replacen("\"shape\":[48,16]", "\"shape\":[16,48,2]", 1);
        assert_ne!(broken, header);
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(broken.len() as u64).to_le_bytes());
        out.extend_from_slice(broken.as_bytes());
        out.extend_from_slice(&bytes[16 + len..]);
        let err = decode_checkpoint(&out).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
