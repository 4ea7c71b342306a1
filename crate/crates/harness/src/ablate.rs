//! Sweeping the number of unfolding stages.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use panfuse_core::metrics::MetricReport;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_pairs, TEST};
use crate::error::{HarnessError, Result};
use crate::evaluate::par_map;
use crate::pipeline::{stage1_dir, stage2_dir, train, TrainOptions};

pub const ABLATE_DIR: &str = "ablate";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRow {
    pub stages: usize,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub train_seconds: f64,
    pub metrics: MetricReport,
}

pub fn stage_dir(cfg: &RunConfig, k: usize) -> PathBuf {
    cfg.run_dir.join(ABLATE_DIR).join(format!("K{k}"))
}

/// Trains one model per entry of `stages` (reusing the run's pretrained
/// checkpoints) and scores each on the test split.
pub fn ablate_stages(cfg: &RunConfig, stages: &[usize]) -> Result<Vec<StageRow>> {
    if stages.is_empty() {
        return Err(HarnessError::Usage("--stages needs at least one value".into()));
    }
    let test = load_pairs(&cfg.data_dir.join(TEST), cfg.ratio)?;
    let mut rows = Vec::with_capacity(stages.len());
    for &k in stages {
        let kcfg = RunConfig { stages: k, ..cfg.clone() };
        kcfg.validate()?;
        let opts = TrainOptions {
            stage1: Some(stage1_dir(cfg)),
            stage2: Some(stage2_dir(cfg)),
            out: Some(stage_dir(cfg, k)),
            // pretrained stages were produced under the base stage count
            allow_mixed_config: true,
            log_name: Some(format!("ablate_K{k}")),
        };
        let t0 = Instant::now();
        let outcome = train(&kcfg, &opts)?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let model = &outcome.model;
        let scored = par_map(&test, |(id, pair)| {
            let fused = model.fuse(&pair.lrms, &pair.pan)?;
            Ok(MetricReport::reduced(id.clone(), fused.tensor(), pair.gt.tensor(), cfg.ratio)?)
        })?;
        let metrics = MetricReport::aggregate(&scored)?;
        log::info!("ablate: K={k} psnr {:.3}", metrics.psnr.unwrap_or(f64::NAN));
        rows.push(StageRow {
            stages: k,
            config_hash: kcfg.hash(),
            checkpoint_hash: outcome.meta.checkpoint_hash,
            train_seconds,
            metrics,
        });
    }
    write_rows(cfg, &rows)?;
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn rows_to_csv(rows: &[StageRow]) -> String {
    let mut out = String::from("stages,psnr,ssim,sam,ergas,train_seconds,config_hash\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{:.1},{}\n",
            r.stages,
            fmt_opt(m.psnr),
            fmt_opt(m.ssim),
            fmt_opt(m.sam),
            fmt_opt(m.ergas),
            r.train_seconds,
            r.config_hash
        ));
    }
    out
}

fn write_rows(cfg: &RunConfig, rows: &[StageRow]) -> Result<()> {
    let dir = cfg.run_dir.join(ABLATE_DIR);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("stages.csv"), rows_to_csv(rows))?;
    fs::write(dir.join("stages.json"), serde_json::to_string_pretty(rows)? + "\n")?;
    Ok(())
}
