//! Checkpoint container: a JSON manifest (specs, group names, trainability,
//! optimizer bookkeeping, step counter) followed by raw little-endian
//! 32-bit float payloads in manifest order. Loading rebuilds the model and
//! optimizer so training resumes bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{AdapterWiring, Model, ModelSpec};
use crate::params::ParamRegistry;
use crate::prompts::PromptSpec;
use crate::protocols::Protocol;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{AdamW, ResumeState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"VOPCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    model_spec: ModelSpec,
    prompt_spec: PromptSpec,
    protocol: Protocol,
    train_config: TrainConfig,
    dataset_hash: String,
    step: u64,
    /// All randomness is derived from the seed and the step counter, so
    /// these two fields are the full RNG state.
    seed: u64,
    groups: Vec<GroupEntry>,
    /// Trainable groups with optimizer moments, in payload order.
    moment_groups: Vec<String>,
    adam_step_count: u64,
}

fn write_payload<S: Scalar, W: Write>(w: &mut W, data: &[S]) -> Result<()> {
    for v in data {
        w.write_all(&v.as_f32().to_le_bytes())?;
    }
    Ok(())
}

fn read_payload<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn save<S: Scalar>(
    path: &Path,
    model: &Model<S>,
    optimizer: &AdamW<S>,
    step: u64,
    train_config: &TrainConfig,
    dataset_hash: &str,
) -> Result<()> {
    let groups: Vec<GroupEntry> = model
        .params
        .iter()
        .map(|g| GroupEntry {
            name: g.name.clone(),
            shape: g.tensor.shape.clone(),
            trainable: g.trainable,
        })
        .collect();
    let manifest = CheckpointManifest {
        format_version: 1,
        model_spec: model.spec.clone(),
        prompt_spec: model.prompts.clone(),
        protocol: model.protocol,
        train_config: train_config.clone(),
        dataset_hash: dataset_hash.to_string(),
        step,
        seed: train_config.seed,
        groups,
        moment_groups: optimizer.moment_names(),
        adam_step_count: optimizer.step_count,
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| CoreError::InvalidConfig(format!("checkpoint manifest: {}", e)))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for g in model.params.iter() {
        write_payload(&mut w, &g.tensor.data)?;
    }
    for name in optimizer.moment_names() {
        let (m, v) = optimizer.moment_data(&name).expect("moment name from optimizer");
        write_payload(&mut w, m)?;
        write_payload(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: Model<f32>,
    pub resume: ResumeState<f32>,
    pub train_config: TrainConfig,
    pub dataset_hash: String,
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::MalformedFile {
            path: path.display().to_string(),
            msg: "bad checkpoint magic".into(),
        });
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let json_len = u64::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&json).map_err(|e| {
        CoreError::MalformedFile { path: path.display().to_string(), msg: e.to_string() }
    })?;

    let mut params = ParamRegistry::<f32>::new();
    for g in &manifest.groups {
        let n: usize = g.shape.iter().product();
        let data = read_payload(&mut r, n)?;
        params.register(&g.name, Tensor::new(g.shape.clone(), data)?, g.trainable)?;
    }
    let adapters = AdapterWiring::from_protocol(&manifest.protocol);
    let model = Model {
        spec: manifest.model_spec,
        prompts: manifest.prompt_spec,
        protocol: manifest.protocol,
        params,
        adapters,
    };

    let mut optimizer = AdamW::new(&model.params, &manifest.train_config);
    if optimizer.moment_names() != manifest.moment_groups {
        return Err(CoreError::MalformedFile {
            path: path.display().to_string(),
            msg: "optimizer moment layout disagrees with registry".into(),
        });
    }
    for name in &manifest.moment_groups {
        let n = model.params.get(name)?.tensor.numel();
        let m = read_payload(&mut r, n)?;
        let v = read_payload(&mut r, n)?;
        optimizer.set_moment_data(name, m, v)?;
    }
    optimizer.step_count = manifest.adam_step_count;

    Ok(LoadedCheckpoint {
        model,
        resume: ResumeState { optimizer, step: manifest.step },
        train_config: manifest.train_config,
        dataset_hash: manifest.dataset_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::{default_prompts_for, ProtocolKind};

    #[test]
    fn roundtrip_is_bitwise() {
        let spec = ModelSpec::toy();
        let prompts = default_prompts_for(ProtocolKind::Vop, &spec);
        let model = Model::<f32>::build(spec, prompts, Protocol::vop(), 99).unwrap();
        let cfg = {
            let mut c = TrainConfig::new(99);
            c.lr = Some(1e-3);
            c
        };
        let opt = AdamW::new(&model.params, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.vckpt");
        save(&path, &model, &opt, 17, &cfg, "hash123").unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.resume.step, 17);
        assert_eq!(loaded.dataset_hash, "hash123");
        assert_eq!(loaded.model.params.len(), model.params.len());
        for g in model.params.iter() {
            let other = loaded.model.params.get(&g.name).unwrap();
            assert!(g.tensor.bits_eq(&other.tensor), "group {} changed", g.name);
            assert_eq!(g.trainable, other.trainable);
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }
}
