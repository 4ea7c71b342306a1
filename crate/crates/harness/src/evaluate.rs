//! Fusing rasters with a classical method or a trained network, and scoring
//! fused rasters against references.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use panfuse_core::baselines::{fuse_classical, FusionMethod};
use panfuse_core::fingerprint::sha256_hex;
use panfuse_core::metrics::MetricReport;
use panfuse_core::raster::{read_header, save_raster_with_provenance, Image, MsImage, PanImage};
use panfuse_core::unfolding::UnfoldingModel;
use serde::{Deserialize, Serialize};

use crate::data::{list_ids, load_ms, load_pan, raster_base, Role};
use crate::error::{HarnessError, Result};
use crate::pipeline::load_unfolding;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Classical(FusionMethod),
    Unfolding,
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "unfolding" {
            return Ok(Self::Unfolding);
        }
        s.parse()
            .map(Self::Classical)
            .map_err(|_| HarnessError::Usage(format!("unknown method {s:?} (ihs, brovey, gs, sfim, gfpca, unfolding)")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Classical(m) => write!(f, "{m}"),
            Self::Unfolding => f.write_str("unfolding"),
        }
    }
}

/// A ready-to-use fusion operator plus the provenance it stamps on outputs.
pub struct Fuser {
    method: Method,
    ratio: usize,
    model: Option<UnfoldingModel<f32>>,
    provenance: BTreeMap<String, String>,
}

impl Fuser {
    /// Classical methods need only the ratio; `unfolding` needs a checkpoint,
    /// whose ratio wins.
    pub fn new(method: Method, checkpoint: Option<&Path>, ratio: usize) -> Result<Self> {
        let mut provenance = BTreeMap::new();
        provenance.insert("method".to_string(), method.to_string());
        match method {
            Method::Unfolding => {
                let dir = checkpoint
                    .ok_or_else(|| HarnessError::Usage("method unfolding needs --checkpoint".into()))?;
                let (model, meta, _) = load_unfolding(dir)?;
                provenance.insert("config_hash".into(), meta.config_hash);
                provenance.insert("checkpoint_hash".into(), meta.checkpoint_hash);
                let ratio = model.config.ratio;
                Ok(Self { method, ratio, model: Some(model), provenance })
            }
            Method::Classical(m) => {
                // classical methods have no config file; hash their only settings
                provenance.insert("config_hash".into(), sha256_hex(format!("classical:{m}:ratio={ratio}").as_bytes()));
                Ok(Self { method, ratio, model: None, provenance })
            }
        }
    }

    pub fn from_model(model: UnfoldingModel<f32>, config_hash: &str, checkpoint_hash: &str) -> Self {
        let mut provenance = BTreeMap::new();
        provenance.insert("method".to_string(), "unfolding".to_string());
        provenance.insert("config_hash".into(), config_hash.to_string());
        provenance.insert("checkpoint_hash".into(), checkpoint_hash.to_string());
        Self { method: Method::Unfolding, ratio: model.config.ratio, model: Some(model), provenance }
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn config_hash(&self) -> &str {
        &self.provenance["config_hash"]
    }

    pub fn fuse(&self, lrms: &MsImage<f32>, pan: &PanImage<f32>) -> Result<MsImage<f32>> {
        match (&self.method, &self.model) {
            (Method::Unfolding, Some(model)) => Ok(model.fuse(lrms, pan)?),
            (Method::Classical(m), _) => Ok(fuse_classical(*m, lrms, pan, self.ratio)?),
            (Method::Unfolding, None) => unreachable!("unfolding fuser always holds a model"),
        }
    }

    /// Fuses one file pair and writes the result with a provenance sidecar.
    pub fn fuse_files(&self, lrms: &Path, pan: &Path, out: &Path) -> Result<MsImage<f32>> {
        let fused = self.fuse(&load_ms(lrms)?, &load_pan(pan)?)?;
        let mut prov = self.provenance.clone();
        prov.insert("lrms".into(), lrms.display().to_string());
        save_raster_with_provenance(&Image::Ms(fused.clone()), out, Some(&prov))?;
        Ok(fused)
    }

    /// Fuses every `<id>_lrms` / `<id>_pan` pair of `input` into `<out>/<id>_fused`.
    pub fn fuse_dir(&self, input: &Path, out: &Path) -> Result<Vec<String>> {
        let ids = list_ids(input, Role::Lrms)?;
        if ids.is_empty() {
            return Err(HarnessError::Dependency(format!("no *_lrms rasters in {}", input.display())));
        }
        fs::create_dir_all(out)?;
        for id in &ids {
            self.fuse_files(
                &raster_base(input, id, Role::Lrms),
                &raster_base(input, id, Role::Pan),
                &raster_base(out, id, Role::Fused),
            )?;
        }
        Ok(ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Reduced,
    Full,
}

impl FromStr for Mode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reduced" => Ok(Self::Reduced),
            "full" => Ok(Self::Full),
            _ => Err(HarnessError::Usage(format!("unknown mode {s:?} (reduced or full)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub ratio: usize,
    pub config_hashes: Vec<String>,
    pub rows: Vec<MetricReport>,
    pub aggregate: MetricReport,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", MetricReport::CSV_HEADER);
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    /// Writes `<prefix>.json` and `<prefix>.csv`.
    pub fn write(&self, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
        if let Some(dir) = prefix.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let json = prefix.with_extension("json");
        let csv = prefix.with_extension("csv");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n")?;
        fs::write(&csv, self.to_csv())?;
        Ok((json, csv))
    }
}

/// Runs `f` over `items` on up to `available_parallelism` worker threads,
/// keeping input order.
pub(crate) fn par_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<_>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Scores every `<id>_fused` raster in `fused_dir` against `reference_dir`
/// (`<id>_gt` in reduced mode, `<id>_lrms` + `<id>_pan` in full mode).
pub fn evaluate(fused_dir: &Path, reference_dir: &Path, mode: Mode, ratio: usize, allow_mixed_config: bool) -> Result<EvalReport> {
    let fused_ids = list_ids(fused_dir, Role::Fused)?;
    let ref_role = match mode {
        Mode::Reduced => Role::Gt,
        Mode::Full => Role::Lrms,
    };
    let ref_ids = list_ids(reference_dir, ref_role)?;
    let (fs_set, rs_set): (BTreeSet<_>, BTreeSet<_>) = (fused_ids.iter().collect(), ref_ids.iter().collect());
    if fs_set != rs_set {
        let only_fused: Vec<_> = fs_set.difference(&rs_set).map(|s| s.as_str()).collect();
        let only_ref: Vec<_> = rs_set.difference(&fs_set).map(|s| s.as_str()).collect();
        return Err(HarnessError::Usage(format!(
            "unmatched ids: fused only [{}], reference only [{}]",
            only_fused.join(", "),
            only_ref.join(", ")
        )));
    }
    if fused_ids.is_empty() {
        return Err(HarnessError::Dependency(format!("no *_fused rasters in {}", fused_dir.display())));
    }
    let mut hashes = BTreeSet::new();
    for id in &fused_ids {
        let header = read_header(&raster_base(fused_dir, id, Role::Fused))?;
        let h = header
            .provenance
            .as_ref()
            .and_then(|p| p.get("config_hash").cloned())
            .unwrap_or_else(|| "unknown".to_string());
        hashes.insert(h);
    }
    if hashes.len() > 1 && !allow_mixed_config {
        return Err(HarnessError::MixedConfig(format!(
            "fused rasters come from {} configs: {}",
            hashes.len(),
            hashes.iter().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    let rows = par_map(&fused_ids, |id| {
        let fused = load_ms(&raster_base(fused_dir, id, Role::Fused))?;
        let row = match mode {
            Mode::Reduced => {
                let gt = load_ms(&raster_base(reference_dir, id, Role::Gt))?;
                MetricReport::reduced(id.clone(), fused.tensor(), gt.tensor(), ratio)?
            }
            Mode::Full => {
                let lrms = load_ms(&raster_base(reference_dir, id, Role::Lrms))?;
                let pan = load_pan(&raster_base(reference_dir, id, Role::Pan))?;
                MetricReport::full(id.clone(), fused.tensor(), lrms.tensor(), pan.tensor(), ratio)?
            }
        };
        Ok(row)
    })?;
    let aggregate = MetricReport::aggregate(&rows)?;
    Ok(EvalReport { mode, ratio, config_hashes: hashes.into_iter().collect(), rows, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{make_toy_data, TEST};

    #[test]
    fn method_parsing() {
        assert_eq!("unfolding".parse::<Method>().unwrap(), Method::Unfolding);
        assert_eq!("gs".parse::<Method>().unwrap(), Method::Classical(FusionMethod::Gs));
        assert!("pnn".parse::<Method>().is_err());
        assert!(Fuser::new(Method::Unfolding, None, 4).is_err());
    }

    #[test]
    fn reduced_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            data_dir: dir.path().join("data"),
            toy_train_scenes: 1,
            toy_test_scenes: 2,
            toy_full_scenes: 1,
            toy_scene_size: 128,
            ..RunConfig::desk()
        };
        make_toy_data(&cfg).unwrap();
        let test = cfg.data_dir.join(TEST);
        let fused = dir.path().join("fused");
        let fuser = Fuser::new(Method::Classical(FusionMethod::Ihs), None, 4).unwrap();
        let ids = fuser.fuse_dir(&test, &fused).unwrap();
        let report = evaluate(&fused, &test, Mode::Reduced, 4, false).unwrap();
        assert_eq!(report.rows.len(), ids.len());
        assert_eq!(report.config_hashes, vec![fuser.config_hash().to_string()]);
        assert_eq!(report.to_csv().lines().count(), ids.len() + 2);

        // a second method in the same directory mixes config hashes
        let gs = Fuser::new(Method::Classical(FusionMethod::Gs), None, 4).unwrap();
        gs.fuse_files(
            &raster_base(&test, &ids[0], Role::Lrms),
            &raster_base(&test, &ids[0], Role::Pan),
            &raster_base(&fused, &ids[0], Role::Fused),
        )
        .unwrap();
        assert!(matches!(evaluate(&fused, &test, Mode::Reduced, 4, false), Err(HarnessError::MixedConfig(_))));
        evaluate(&fused, &test, Mode::Reduced, 4, true).unwrap();

        fs::remove_file(raster_base(&fused, &ids[1], Role::Fused).with_extension("json")).unwrap();
        let err = evaluate(&fused, &test, Mode::Reduced, 4, true).unwrap_err();
        assert!(err.to_string().contains(&ids[1]), "{err}");
    }
}
