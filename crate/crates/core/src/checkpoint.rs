//! Checkpoint directories: `manifest.json` plus `params.bin`, the
//! little-endian f32 payload of every tensor in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{Architecture, Model};
use crate::tensor::{ParamStore, Tensor};
use crate::training::{Method, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT: &str = "fewshot-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    /// BatchNorm running statistic.
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: u64,
    /// Weight-decay flag; parameters only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<bool>,
}

impl TensorEntry {
    pub fn bytes(&self) -> u64 {
        4 * self.shape.iter().product::<usize>() as u64
    }
}

/// Training provenance stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSummary {
    pub method: Method,
    pub train_config_sha256: String,
    /// Epoch (0-based) the weights were taken from.
    pub epoch: usize,
    pub early_stopped: bool,
    pub best_val_acc: Option<f64>,
    pub val_history: Vec<f64>,
    /// Whether the classifier inverse temperature is weight-decayed.
    pub gamma_weight_decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub train: TrainSummary,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
}

impl CheckpointManifest {
    pub fn num_parameters(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.kind == TensorKind::Param)
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }
}

/// A loaded checkpoint and the digest of its files.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: Model<f32>,
    pub sha256: String,
}

pub fn config_digest(config: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("train config serializes");
    format!("{:x}", Sha256::digest(bytes))
}

fn digest(manifest: &[u8], payload: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(manifest);
    h.update(payload);
    format!("{:x}", h.finalize())
}

/// Serialize a model; returns the manifest and the two file contents.
pub fn encode(
    model: &Model<f32>,
    train: TrainSummary,
) -> Result<(CheckpointManifest, Vec<u8>, Vec<u8>)> {
    let store = model.store();
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(4 * store.num_scalars());
    let mut push = |name: &str, kind, decay, value: &Tensor<f32>, payload: &mut Vec<u8>| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: value.shape().to_vec(),
            offset: payload.len() as u64,
            decay,
        });
        for v in value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in store.params() {
        push(
            &p.name,
            TensorKind::Param,
            Some(p.decay),
            &p.value,
            &mut payload,
        );
    }
    for b in store.buffers() {
        push(&b.name, TensorKind::Buffer, None, &b.value, &mut payload);
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        architecture: model.arch().clone(),
        train,
        tensors,
        payload_bytes: payload.len() as u64,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    Ok((manifest, json, payload))
}

/// Write `dir/manifest.json` and `dir/params.bin`, creating `dir`.
/// Returns the checkpoint digest.
pub fn save(dir: impl AsRef<Path>, model: &Model<f32>, train: TrainSummary) -> Result<String> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (_, json, payload) = encode(model, train)?;
    fs::write(dir.join(MANIFEST_FILE), &json)?;
    fs::write(dir.join(PARAMS_FILE), &payload)?;
    Ok(digest(&json, &payload))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let bytes = fs::read(dir.as_ref().join(MANIFEST_FILE))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Compatibility(format!(
            "unsupported checkpoint format {} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

/// Rebuild a model from manifest and payload bytes, checking that the
/// payload has exactly the declared length and that every tensor is laid
/// out contiguously and named once.
pub fn decode(manifest: &CheckpointManifest, payload: &[u8]) -> Result<Model<f32>> {
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(Error::Integrity {
            what: PARAMS_FILE.into(),
            expected: manifest.payload_bytes,
            actual: payload.len() as u64,
        });
    }
    let mut store = ParamStore::new();
    let mut next = 0u64;
    for t in &manifest.tensors {
        if t.offset != next {
            return Err(Error::Integrity {
                what: format!("offset of tensor {}", t.name),
                expected: next,
                actual: t.offset,
            });
        }
        next += t.bytes();
        if next > manifest.payload_bytes {
            return Err(Error::Integrity {
                what: format!("extent of tensor {}", t.name),
                expected: manifest.payload_bytes,
                actual: next,
            });
        }
        let bytes = &payload[t.offset as usize..next as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let value = Tensor::new(&t.shape, data)?;
        let added = match t.kind {
            TensorKind::Param => store
                .add_param(&t.name, value, t.decay.unwrap_or(true))
                .map(|_| ()),
            TensorKind::Buffer => store.add_buffer(&t.name, value).map(|_| ()),
        };
        added.map_err(|_| {
            Error::Compatibility(format!("tensor {} appears more than once", t.name))
        })?;
    }
    if next != manifest.payload_bytes {
        return Err(Error::Integrity {
            what: "sum of tensor sizes".into(),
            expected: manifest.payload_bytes,
            actual: next,
        });
    }
    Model::from_store(manifest.architecture.clone(), store)
}

pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let json = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest = read_manifest(dir)?;
    let payload = fs::read(dir.join(PARAMS_FILE))?;
    let model = decode(&manifest, &payload)?;
    Ok(Checkpoint {
        sha256: digest(&json, &payload),
        manifest,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary() -> TrainSummary {
        TrainSummary {
            method: Method::Cc,
            train_config_sha256: config_digest(&TrainConfig::default()),
            epoch: 3,
            early_stopped: true,
            best_val_acc: Some(0.5),
            val_history: vec![0.25, 0.5],
            gamma_weight_decay: false,
        }
    }

    fn tiny() -> Model<f32> {
        let mut arch = Architecture::extractor([2, 3, 2, 4], 3, 16);
        arch.classifier_classes = Some(5);
        arch.rotation_head = Some([2, 2]);
        Model::new(arch, 9).unwrap()
    }

    #[test]
    fn round_trip_preserves_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny();
        let sha = save(dir.path(), &model, summary()).unwrap();
        let ck = load(dir.path()).unwrap();
        assert_eq!(ck.sha256, sha);
        assert_eq!(ck.manifest.train, summary());
        for (a, b) in model.store().params().iter().zip(ck.model.store().params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.decay, b.decay);
        }
        for (a, b) in model
            .store()
            .buffers()
            .iter()
            .zip(ck.model.store().buffers())
        {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(ck.manifest.num_parameters(), model.arch().num_parameters());
    }

    #[test]
    fn truncated_payload_names_both_lengths() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &tiny(), summary()).unwrap();
        let path = dir.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let full = bytes.len() as u64;
        bytes.truncate(bytes.len() - 6);
        fs::write(&path, &bytes).unwrap();
        match load(dir.path()) {
            Err(Error::Integrity {
                expected, actual, ..
            }) => {
                assert_eq!(expected, full);
                assert_eq!(actual, full - 6);
            }
            other => panic!("expected an integrity error, got {other:?}"),
        }
    }

    #[test]
    fn duplicated_tensor_is_rejected() {
        let (mut manifest, _, payload) = encode(&tiny(), summary()).unwrap();
        let first = manifest.tensors[0].clone();
        manifest.tensors[1].name = first.name;
        assert!(decode(&manifest, &payload).is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let a = encode(&tiny(), summary()).unwrap();
        let b = encode(&tiny(), summary()).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }
}
