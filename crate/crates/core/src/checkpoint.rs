//! Checkpoint archives.
//!
//! A checkpoint is a tar archive holding `metadata.json` followed by one
//! entry per tensor, `tensors/<role>/<param name>`, each a raw array of
//! little-endian `f32` values in the parameter's row-major order. Roles are
//! `model` for single-network runs and `generator` / `discriminator` for
//! adversarial runs. Batch-norm running statistics are stored alongside the
//! learnable parameters.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};
use crate::nn::ParamKind;
use crate::training::TrainHistory;
use crate::volumes::Axis;

pub const FORMAT_VERSION: u32 = 1;
pub const METADATA_ENTRY: &str = "metadata.json";
pub const ROLE_MODEL: &str = "model";
pub const ROLE_GENERATOR: &str = "generator";
pub const ROLE_DISCRIMINATOR: &str = "discriminator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub buffer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub role: String,
    #[serde(flatten)]
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub models: Vec<ModelEntry>,
    pub view: Axis,
    /// Number of completed epochs.
    pub epoch: usize,
    pub run_seed: u64,
    pub history: TrainHistory,
}

/// A loaded checkpoint with its networks rebuilt.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub models: Vec<(String, Model<f32>)>,
}

impl Checkpoint {
    pub fn view(&self) -> Axis {
        self.meta.view
    }

    pub fn model(&self, role: &str) -> Option<&Model<f32>> {
        self.models.iter().find(|(r, _)| r == role).map(|(_, m)| m)
    }

    /// The network that converts slices: the generator of an adversarial
    /// run, otherwise the single model.
    pub fn converter(&self) -> Result<&Model<f32>> {
        self.model(ROLE_GENERATOR)
            .or_else(|| self.model(ROLE_MODEL))
            .ok_or_else(|| Error::Checkpoint("no convertible model in checkpoint".into()))
    }
}

fn tensor_path(role: &str, name: &str) -> String {
    format!("tensors/{role}/{name}")
}

fn append(builder: &mut tar::Builder<impl std::io::Write>, path: &str, bytes: &[u8], at: &Path) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    builder
        .append_data(&mut header, path, bytes)
        .map_err(|e| Error::io(at, e))
}

/// Write `models` (role, network) and the run history to `path`.
pub fn save_checkpoint(path: &Path, models: &[(&str, &Model<f32>)], history: &TrainHistory) -> Result<()> {
    let entries = models
        .iter()
        .map(|(role, m)| ModelEntry {
            role: role.to_string(),
            spec: m.spec(),
            tensors: m
                .named_params()
                .into_iter()
                .map(|(name, p)| TensorEntry {
                    name,
                    shape: p.shape.clone(),
                    buffer: p.kind == ParamKind::Buffer,
                })
                .collect(),
        })
        .collect();
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        models: entries,
        view: history.config.view,
        epoch: history.records.len(),
        run_seed: history.config.seed,
        history: history.clone(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut builder = tar::Builder::new(BufWriter::new(file));
    append(&mut builder, METADATA_ENTRY, &serde_json::to_vec_pretty(&meta)?, path)?;
    for (role, m) in models {
        for (name, p) in m.named_params() {
            let bytes: Vec<u8> = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
            append(&mut builder, &tensor_path(role, &name), &bytes, path)?;
        }
    }
    builder
        .into_inner()
        .and_then(|mut w| std::io::Write::flush(&mut w))
        .map_err(|e| Error::io(path, e))
}

fn read_entries(path: &Path) -> Result<HashMap<String, Vec<u8>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut archive = tar::Archive::new(BufReader::new(file));
    let mut out = HashMap::new();
    let entries = archive
        .entries()
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let name = entry
            .path()
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .to_string_lossy()
            .into_owned();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        out.insert(name, bytes);
    }
    Ok(out)
}

fn parse_meta(entries: &HashMap<String, Vec<u8>>) -> Result<CheckpointMeta> {
    let bytes = entries
        .get(METADATA_ENTRY)
        .ok_or_else(|| Error::Checkpoint(format!("missing {METADATA_ENTRY}")))?;
    let meta: CheckpointMeta = serde_json::from_slice(bytes)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            meta.format_version
        )));
    }
    Ok(meta)
}

/// Copy stored tensors into `model`, which must match `entry` exactly.
fn restore(model: &mut Model<f32>, entry: &ModelEntry, entries: &HashMap<String, Vec<u8>>) -> Result<()> {
    if model.spec() != entry.spec {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint {} holds {} with {:?}, model is {} with {:?}",
            entry.role,
            entry.spec.architecture(),
            entry.spec,
            model.architecture(),
            model.spec()
        )));
    }
    let params = model.named_params_mut();
    if params.len() != entry.tensors.len() {
        return Err(Error::CheckpointMismatch(format!(
            "{} tensors stored, model has {}",
            entry.tensors.len(),
            params.len()
        )));
    }
    for ((name, p), t) in params.into_iter().zip(&entry.tensors) {
        if name != t.name || p.shape != t.shape {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {} {:?} does not match model tensor {name} {:?}",
                t.name, t.shape, p.shape
            )));
        }
        let key = tensor_path(&entry.role, &name);
        let bytes = entries
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor entry {key}")))?;
        if bytes.len() != p.value.len() * 4 {
            return Err(Error::Checkpoint(format!(
                "tensor entry {key} has {} bytes, expected {}",
                bytes.len(),
                p.value.len() * 4
            )));
        }
        for (v, b) in p.value.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    Ok(())
}

/// Read a checkpoint and rebuild every stored network.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let entries = read_entries(path)?;
    let meta = parse_meta(&entries)?;
    let mut models = Vec::with_capacity(meta.models.len());
    for entry in &meta.models {
        let mut model = entry.spec.build::<f32>(meta.run_seed)?;
        restore(&mut model, entry, &entries)?;
        models.push((entry.role.clone(), model));
    }
    Ok(Checkpoint { meta, models })
}

/// Load the network stored under `role` into an existing model, failing
/// with a mismatch error when architecture or configuration differ.
pub fn load_into(path: &Path, role: &str, model: &mut Model<f32>) -> Result<CheckpointMeta> {
    let entries = read_entries(path)?;
    let meta = parse_meta(&entries)?;
    let entry = meta
        .models
        .iter()
        .find(|m| m.role == role)
        .ok_or_else(|| Error::CheckpointMismatch(format!("no '{role}' network in checkpoint")))?;
    restore(model, entry, &entries)?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_espcn, build_srgan, build_uconvertnet, EspcnConfig, SrganConfig, UConvertNetConfig};
    use crate::nn::Tensor;
    use crate::phantoms::SubjectPair;
    use crate::training::{train_gan, train_mse, TrainConfig};
    use crate::volumes::Volume;

    fn tiny() -> UConvertNetConfig {
        UConvertNetConfig {
            levels: 2,
            base_channels: 4,
            ..Default::default()
        }
    }

    fn pairs() -> Vec<SubjectPair> {
        let data = ndarray::Array3::from_shape_fn((3, 8, 8), |(i, j, k)| ((i + j * k) % 5) as f32 / 5.0);
        let v = Volume::new(data, [1.0, 1.0, 2.0], [0.0, 1.0]).unwrap();
        vec![SubjectPair::new(0, v.clone(), v).unwrap()]
    }

    fn input() -> Tensor<f32> {
        Tensor::from_vec([2, 1, 8, 8], (0..128).map(|i| (i % 13) as f32 / 13.0).collect()).unwrap()
    }

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, seed: 3, ..Default::default() }
    }

    #[test]
    fn round_trip_restores_eval_outputs_and_history() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = build_uconvertnet::<f32>(tiny(), 1).unwrap();
        let history = train_mse(&mut model, &pairs(), &config(2)).unwrap();
        save_checkpoint(&path, &[(ROLE_MODEL, &model)], &history).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.meta.history, history);
        assert_eq!(ck.meta.epoch, 2);
        assert_eq!(ck.view(), Axis::Sagittal);
        let restored = ck.converter().unwrap();
        let x = input();
        assert_eq!(restored.infer(&x).unwrap().max_abs_diff(&model.infer(&x).unwrap()), 0.0);
        // Buffers are restored too.
        for ((n1, p1), (n2, p2)) in model.named_params().iter().zip(restored.named_params()) {
            assert_eq!(n1, &n2);
            assert_eq!(p1.value, p2.value);
        }
        let mut fresh = build_uconvertnet::<f32>(tiny(), 99).unwrap();
        load_into(&path, ROLE_MODEL, &mut fresh).unwrap();
        assert_eq!(fresh.infer(&x).unwrap(), model.infer(&x).unwrap());
    }

    #[test]
    fn mismatched_architecture_or_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = build_uconvertnet::<f32>(tiny(), 1).unwrap();
        let history = train_mse(&mut model, &pairs(), &config(1)).unwrap();
        save_checkpoint(&path, &[(ROLE_MODEL, &model)], &history).unwrap();
        let mut espcn = build_espcn::<f32>(EspcnConfig::default(), 0).unwrap();
        let err = load_into(&path, ROLE_MODEL, &mut espcn).unwrap_err();
        assert!(err.to_string().starts_with("checkpoint/config mismatch"), "{err}");
        let mut wider = build_uconvertnet::<f32>(UConvertNetConfig { base_channels: 8, ..tiny() }, 0).unwrap();
        assert!(matches!(load_into(&path, ROLE_MODEL, &mut wider), Err(Error::CheckpointMismatch(_))));
        assert!(matches!(load_into(&path, ROLE_GENERATOR, &mut model), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn gan_checkpoint_holds_both_networks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let cfg = SrganConfig {
            residual_blocks: 1,
            gen_channels: 2,
            disc_base_channels: 2,
            disc_dense_width: 4,
            adversarial_weight: 1e-3,
        };
        let (mut g, mut d) = build_srgan::<f32>(cfg, 2).unwrap();
        let history = train_gan(&mut g, &mut d, &pairs(), &config(1)).unwrap();
        save_checkpoint(&path, &[(ROLE_GENERATOR, &g), (ROLE_DISCRIMINATOR, &d)], &history).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let x = input();
        assert_eq!(ck.converter().unwrap().infer(&x).unwrap(), g.infer(&x).unwrap());
        assert_eq!(ck.model(ROLE_DISCRIMINATOR).unwrap().infer(&x).unwrap(), d.infer(&x).unwrap());
    }

    #[test]
    fn archives_are_deterministic_and_corruption_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_espcn::<f32>(EspcnConfig { shuffle_factor: 2, feature_channels: [4, 4] }, 0).unwrap();
        let mut m = model.clone();
        let history = train_mse(&mut m, &pairs(), &config(1)).unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save_checkpoint(&a, &[(ROLE_MODEL, &model)], &history).unwrap();
        save_checkpoint(&b, &[(ROLE_MODEL, &model)], &history).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let bytes = std::fs::read(&a).unwrap();
        std::fs::write(&b, &bytes[..bytes.len() / 3]).unwrap();
        assert!(load_checkpoint(&b).is_err());
        assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    }
}
