//! Checkpoint directories: `checkpoint.json` (metadata), `weights.bin` and
//! `optimizer.bin` (little-endian f32 tensors in parameter order).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use panfuse_autograd::optim::{Adam, AdamConfig};
use panfuse_autograd::ParamStore;
use panfuse_core::fingerprint::sha256_hex;
use panfuse_core::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "checkpoint.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    ConvMae,
    TokenMae,
    Unfolding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub step: u64,
    pub epoch: u64,
    pub params: Vec<ParamMeta>,
    pub weights_sha256: String,
    pub optimizer_sha256: String,
    pub data_manifest_sha256: String,
    /// Checkpoint hashes of consumed pretrained encoders, keyed by stage.
    pub provenance: BTreeMap<String, String>,
    pub checkpoint_hash: String,
}

/// Everything a checkpoint records besides the tensors.
#[derive(Clone, Debug)]
pub struct CheckpointInfo {
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub step: u64,
    pub epoch: u64,
    pub data_manifest_sha256: String,
    pub provenance: BTreeMap<String, String>,
}

fn push_tensor<T: Scalar>(buf: &mut Vec<u8>, t: &Tensor<T>) {
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

fn read_tensor<T: Scalar>(bytes: &[u8], offset: &mut usize, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let end = *offset + 4 * n;
    let chunk = bytes
        .get(*offset..end)
        .ok_or_else(|| HarnessError::Checkpoint("tensor data is truncated".into()))?;
    *offset = end;
    let data = chunk
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Ok(Tensor::new(shape, data))
}

fn hash_of(meta: &CheckpointMeta) -> String {
    let provenance: String = meta.provenance.iter().map(|(k, v)| format!("{k}={v};")).collect();
    let canonical = format!(
        "v{}|{:?}|{}|{}|{}|{}|{}|{}|{}",
        meta.format_version,
        meta.kind,
        meta.config_hash,
        meta.step,
        meta.epoch,
        meta.weights_sha256,
        meta.optimizer_sha256,
        meta.data_manifest_sha256,
        provenance
    );
    sha256_hex(canonical.as_bytes())
}

/// Writes a checkpoint directory and returns its metadata.
pub fn save<T: Scalar>(dir: &Path, info: CheckpointInfo, store: &ParamStore<T>, opt: &Adam<T>) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir)?;
    let mut weights = Vec::with_capacity(4 * store.num_elements());
    let mut params = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        push_tensor(&mut weights, t);
        params.push(ParamMeta { name: name.to_string(), shape: t.shape().to_vec() });
    }
    let (first, second) = opt.moments();
    let mut optimizer = Vec::with_capacity(8 + 8 * store.num_elements());
    optimizer.extend_from_slice(&opt.steps().to_le_bytes());
    for t in first.iter().chain(second) {
        push_tensor(&mut optimizer, t);
    }
    let mut meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind: info.kind,
        config_hash: info.config_hash,
        config: info.config,
        step: info.step,
        epoch: info.epoch,
        params,
        weights_sha256: sha256_hex(&weights),
        optimizer_sha256: sha256_hex(&optimizer),
        data_manifest_sha256: info.data_manifest_sha256,
        provenance: info.provenance,
        checkpoint_hash: String::new(),
    };
    meta.checkpoint_hash = hash_of(&meta);
    fs::write(dir.join(WEIGHTS_FILE), &weights)?;
    fs::write(dir.join(OPTIMIZER_FILE), &optimizer)?;
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(meta)
}

/// Reads and verifies only the metadata.
pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| HarnessError::Dependency(format!("no checkpoint at {}: {e}", dir.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Checkpoint(format!("{}: {e}", path.display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(HarnessError::Checkpoint(format!("unsupported format version {}", meta.format_version)));
    }
    if hash_of(&meta) != meta.checkpoint_hash {
        return Err(HarnessError::Checkpoint(format!("{}: metadata hash mismatch", path.display())));
    }
    Ok(meta)
}

/// A verified checkpoint ready to be poured into a freshly built model.
pub struct Loaded<T> {
    pub meta: CheckpointMeta,
    pub weights: Vec<Tensor<T>>,
    pub optimizer_steps: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

pub fn load<T: Scalar>(dir: &Path, expected: CheckpointKind) -> Result<Loaded<T>> {
    let meta = read_meta(dir)?;
    if meta.kind != expected {
        return Err(HarnessError::Checkpoint(format!(
            "{} holds a {:?} checkpoint, expected {expected:?}",
            dir.display(),
            meta.kind
        )));
    }
    let weights_bytes = fs::read(dir.join(WEIGHTS_FILE))?;
    let opt_bytes = fs::read(dir.join(OPTIMIZER_FILE))?;
    if sha256_hex(&weights_bytes) != meta.weights_sha256 || sha256_hex(&opt_bytes) != meta.optimizer_sha256 {
        return Err(panfuse_core::Error::Integrity(format!("{}: payload does not match its recorded hash", dir.display())).into());
    }
    let mut offset = 0;
    let weights = meta
        .params
        .iter()
        .map(|p| read_tensor(&weights_bytes, &mut offset, &p.shape))
        .collect::<Result<Vec<_>>>()?;
    if offset != weights_bytes.len() {
        return Err(HarnessError::Checkpoint("weights.bin has trailing bytes".into()));
    }
    let steps_bytes: [u8; 8] = opt_bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| HarnessError::Checkpoint("optimizer.bin is truncated".into()))?;
    let mut offset = 8;
    let mut moments = |_| meta.params.iter().map(|p| read_tensor(&opt_bytes, &mut offset, &p.shape)).collect::<Result<Vec<_>>>();
    let first = moments(0)?;
    let second = moments(1)?;
    Ok(Loaded { optimizer_steps: u64::from_le_bytes(steps_bytes), meta, weights, first, second })
}

impl<T: Scalar> Loaded<T> {
    /// Overwrites `store` after checking names and shapes line up.
    pub fn restore(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.meta.params.len() {
            return Err(HarnessError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.meta.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, (p, w)) in ids.into_iter().zip(self.meta.params.iter().zip(&self.weights)) {
            if store.name(id) != p.name || store.get(id).shape() != p.shape.as_slice() {
                return Err(HarnessError::Checkpoint(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    p.name,
                    p.shape,
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = w.clone();
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Adam<T> {
        Adam::from_state(AdamConfig::default(), self.optimizer_steps, self.first.clone(), self.second.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info() -> CheckpointInfo {
        CheckpointInfo {
            kind: CheckpointKind::ConvMae,
            config_hash: "abc".into(),
            config: BTreeMap::new(),
            step: 3,
            epoch: 1,
            data_manifest_sha256: "d".into(),
            provenance: BTreeMap::new(),
        }
    }

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2));
        s.add("b", Tensor::from_fn(&[4], |i| 1.0 / (i as f32 + 3.0)));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        let mut opt = Adam::new(AdamConfig::default(), &s);
        let mut s2 = s.clone();
        let grads: Vec<_> = s.iter().map(|(_, _, t)| Some(t.map(|v| v * 0.5))).collect();
        opt.step(&mut s2, &grads, 0.01);
        let meta = save(dir.path(), info(), &s2, &opt).unwrap();
        let loaded = load::<f32>(dir.path(), CheckpointKind::ConvMae).unwrap();
        assert_eq!(loaded.meta, meta);
        let mut fresh = s.clone();
        loaded.restore(&mut fresh).unwrap();
        for ((_, _, a), (_, _, b)) in fresh.iter().zip(s2.iter()) {
            assert_eq!(a, b);
        }
        let restored = loaded.optimizer();
        assert_eq!(restored.steps(), 1);
        assert_eq!(restored.moments().0, opt.moments().0);
        assert_eq!(restored.moments().1, opt.moments().1);
        // saving the restored state reproduces the same hash
        let dir2 = tempfile::tempdir().unwrap();
        let again = save(dir2.path(), info(), &fresh, &restored).unwrap();
        assert_eq!(again.checkpoint_hash, meta.checkpoint_hash);
    }

    #[test]
    fn corruption_and_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        let opt = Adam::new(AdamConfig::default(), &s);
        save(dir.path(), info(), &s, &opt).unwrap();
        assert!(matches!(load::<f32>(dir.path(), CheckpointKind::TokenMae), Err(HarnessError::Checkpoint(_))));

        let mut other = ParamStore::<f32>::new();
        other.add("a", Tensor::zeros(&[3, 2]));
        other.add("b", Tensor::zeros(&[4]));
        let loaded = load::<f32>(dir.path(), CheckpointKind::ConvMae).unwrap();
        assert!(loaded.restore(&mut other).is_err());

        let mut bytes = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        bytes[0] ^= 1;
        fs::write(dir.path().join(WEIGHTS_FILE), bytes).unwrap();
        assert!(matches!(
            load::<f32>(dir.path(), CheckpointKind::ConvMae),
            Err(HarnessError::Core(panfuse_core::Error::Integrity(_)))
        ));
        assert!(matches!(read_meta(&dir.path().join("missing")), Err(HarnessError::Dependency(_))));
    }
}
