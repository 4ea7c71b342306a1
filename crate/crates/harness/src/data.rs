//! Dataset layout on disk.
//!
//! ```text
//! <data_dir>/manifest.json        sha256 of every raster file
//! <data_dir>/train/<id>_lrms|_pan|_gt.{bin,json}   reduced-resolution pairs
//! <data_dir>/test/<id>_lrms|_pan|_gt.{bin,json}    held-out pairs
//! <data_dir>/full/<id>_lrms|_pan.{bin,json}        full-resolution inputs
//! ```
//!
//! Ids must not contain dots.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use panfuse_core::fingerprint::sha256_hex;
use panfuse_core::raster::{load_raster, save_ms, save_pan, MsImage, PanImage};
use panfuse_core::wald::{crop_patch_dataset, synth_acquisition, synth_pairs, SamplePair};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN: &str = "train";
pub const TEST: &str = "test";
pub const FULL: &str = "full";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Lrms,
    Pan,
    Gt,
    Fused,
}

impl Role {
    pub fn suffix(self) -> &'static str {
        match self {
            Self::Lrms => "_lrms",
            Self::Pan => "_pan",
            Self::Gt => "_gt",
            Self::Fused => "_fused",
        }
    }
}

/// Base path (no extension) of the raster `id` with `role` in `dir`.
pub fn raster_base(dir: &Path, id: &str, role: Role) -> PathBuf {
    dir.join(format!("{id}{}", role.suffix()))
}

/// Sorted ids of every `<id><suffix>.json` in `dir`.
pub fn list_ids(dir: &Path, role: Role) -> Result<Vec<String>> {
    let tail = format!("{}.json", role.suffix());
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| HarnessError::Dependency(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(&tail)).map(str::to_string))
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn load_ms(path: &Path) -> Result<MsImage<f32>> {
    Ok(load_raster::<f32>(path)?.into_ms()?)
}

pub fn load_pan(path: &Path) -> Result<PanImage<f32>> {
    Ok(load_raster::<f32>(path)?.into_pan()?)
}

/// Reduced-resolution pairs of one split.
pub fn load_pairs(dir: &Path, ratio: usize) -> Result<Vec<(String, SamplePair<f32>)>> {
    let ids = list_ids(dir, Role::Gt)?;
    if ids.is_empty() {
        return Err(HarnessError::Dependency(format!("no pairs in {}", dir.display())));
    }
    ids.into_iter()
        .map(|id| {
            let lrms = load_ms(&raster_base(dir, &id, Role::Lrms))?;
            let pan = load_pan(&raster_base(dir, &id, Role::Pan))?;
            let gt = load_ms(&raster_base(dir, &id, Role::Gt))?;
            Ok((id, SamplePair::new(lrms, pan, gt, ratio)?))
        })
        .collect()
}

/// Full-resolution inputs (no reference).
pub fn load_full(dir: &Path) -> Result<Vec<(String, MsImage<f32>, PanImage<f32>)>> {
    list_ids(dir, Role::Lrms)?
        .into_iter()
        .map(|id| {
            let lrms = load_ms(&raster_base(dir, &id, Role::Lrms))?;
            let pan = load_pan(&raster_base(dir, &id, Role::Pan))?;
            Ok((id, lrms, pan))
        })
        .collect()
}

/// Training patches: the train split tiled at the configured patch side.
pub fn training_patches(cfg: &RunConfig) -> Result<Vec<SamplePair<f32>>> {
    let pairs: Vec<_> = load_pairs(&cfg.data_dir.join(TRAIN), cfg.ratio)?.into_iter().map(|(_, p)| p).collect();
    Ok(crop_patch_dataset(&pairs, cfg.patch, cfg.patch)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
    pub sha256: String,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.strip_prefix(root).map(|p| p != Path::new(MANIFEST_FILE)).unwrap_or(false) {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes every file under `root` except the manifest itself.
pub fn compute_manifest(root: &Path) -> Result<Manifest> {
    let mut paths = Vec::new();
    collect_files(root, root, &mut paths)?;
    let mut files = BTreeMap::new();
    for p in paths {
        let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
        files.insert(rel, sha256_hex(&fs::read(&p)?));
    }
    let listing: String = files.iter().map(|(k, v)| format!("{k} {v}\n")).collect();
    Ok(Manifest { sha256: sha256_hex(listing.as_bytes()), files })
}

/// Recomputes the manifest and, when one is stored, checks it still matches.
pub fn verify_manifest(root: &Path) -> Result<Manifest> {
    let now = compute_manifest(root)?;
    let stored = root.join(MANIFEST_FILE);
    if stored.exists() {
        let saved: Manifest = serde_json::from_str(&fs::read_to_string(&stored)?)?;
        if saved.sha256 != now.sha256 {
            let changed: Vec<_> = now
                .files
                .iter()
                .filter(|(k, v)| saved.files.get(*k) != Some(v))
                .map(|(k, _)| k.as_str())
                .chain(saved.files.keys().filter(|k| !now.files.contains_key(*k)).map(String::as_str))
                .collect();
            return Err(panfuse_core::Error::Integrity(format!(
                "dataset {} differs from its manifest: {}",
                root.display(),
                changed.join(", ")
            ))
            .into());
        }
    }
    Ok(now)
}

/// Writes the synthetic toy dataset described by `cfg` into `cfg.data_dir`.
pub fn make_toy_data(cfg: &RunConfig) -> Result<Manifest> {
    let root = &cfg.data_dir;
    for split in [TRAIN, TEST, FULL] {
        let dir = root.join(split);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
    }
    let degradation = cfg.degradation();
    let size = cfg.toy_scene_size;
    let base = cfg.stage_seed("toy-data");
    let splits = [
        (TRAIN, base, cfg.toy_train_scenes, "t"),
        (TEST, base.wrapping_add(1 << 32), cfg.toy_test_scenes, "e"),
    ];
    for (split, seed, scenes, tag) in splits {
        let pairs = synth_pairs::<f32>(seed, scenes, size, cfg.bands, &degradation)?;
        let patches = crop_patch_dataset(&pairs, cfg.patch, cfg.patch)?;
        let dir = root.join(split);
        for (i, p) in patches.iter().enumerate() {
            let id = format!("{tag}{i:04}");
            save_ms(&p.lrms, &raster_base(&dir, &id, Role::Lrms))?;
            save_pan(&p.pan, &raster_base(&dir, &id, Role::Pan))?;
            save_ms(&p.gt, &raster_base(&dir, &id, Role::Gt))?;
        }
    }
    let dir = root.join(FULL);
    let full_size = size / 2;
    for i in 0..cfg.toy_full_scenes {
        let seed = base.wrapping_add(2 << 32).wrapping_add(i as u64);
        let (lrms, pan) = synth_acquisition::<f32>(seed, full_size, cfg.bands, &degradation)?;
        let id = format!("f{i:04}");
        save_ms(&lrms, &raster_base(&dir, &id, Role::Lrms))?;
        save_pan(&pan, &raster_base(&dir, &id, Role::Pan))?;
    }
    let manifest = compute_manifest(root)?;
    fs::write(root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> RunConfig {
        RunConfig {
            data_dir: dir.to_path_buf(),
            toy_train_scenes: 2,
            toy_test_scenes: 1,
            toy_full_scenes: 1,
            toy_scene_size: 128,
            ..RunConfig::desk()
        }
    }

    #[test]
    fn toy_data_layout_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let m = make_toy_data(&cfg).unwrap();
        assert_eq!(verify_manifest(dir.path()).unwrap(), m);
        let train = load_pairs(&dir.path().join(TRAIN), 4).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(train[0].1.pan.height(), 32);
        assert_eq!(load_full(&dir.path().join(FULL)).unwrap()[0].2.height(), 64);
        assert_eq!(training_patches(&cfg).unwrap().len(), 2);

        // same config, same bytes
        let other = tempfile::tempdir().unwrap();
        let again = make_toy_data(&tiny(other.path())).unwrap();
        assert_eq!(again.sha256, m.sha256);

        fs::write(dir.path().join("test/e0000_gt.bin"), b"x").unwrap();
        assert!(matches!(verify_manifest(dir.path()), Err(HarnessError::Core(panfuse_core::Error::Integrity(_)))));
    }

    #[test]
    fn missing_split_is_a_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_pairs(&dir.path().join(TRAIN), 4), Err(HarnessError::Dependency(_))));
    }
}
