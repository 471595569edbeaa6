//! CSV artifacts and the run manifest.
//!
//! | file                | columns                                                        |
//! |---------------------|----------------------------------------------------------------|
//! | `loss_curves.csv`   | `round,domain,loss`                                            |
//! | `param_trace.csv`   | `round,domain_eval_tag,index,value`                            |
//! | `metrics.csv`       | `round,accuracy,precision,recall,f1`                           |
//! | `client_reports.csv`| `round,client_id,domain,participated,flagged,sample_count,`    |
//! |                     | `loss_before,loss_after,epsilon,delta,sigma,clip_applied,`     |
//! |                     | `pre_clip_norm,mechanism`                                      |
//! | `baseline_metrics.csv` | same columns as `metrics.csv`                               |
//!
//! Floats are written in Rust's shortest round-trip form, so identical runs
//! produce identical bytes. `param_trace.csv` holds the global model under
//! the tag `global` and, for every domain, the model one local round of that
//! domain's held-out data would produce from the new global model.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::RunError;
use crate::eval::{MetricsReport, RoundReport};

pub const ARTIFACT_VERSION: u32 = 1;

pub const LOSS_CURVES: &str = "loss_curves.csv";
pub const PARAM_TRACE: &str = "param_trace.csv";
pub const METRICS: &str = "metrics.csv";
pub const CLIENT_REPORTS: &str = "client_reports.csv";
pub const BASELINE_METRICS: &str = "baseline_metrics.csv";
pub const CONFIG_COPY: &str = "config.toml";
pub const MANIFEST: &str = "manifest.json";

/// Create `dir`, refusing a non-empty one unless `force` is set.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<(), RunError> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(RunError::Usage(format!("{} exists and is not a directory", dir.display())));
        }
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(RunError::Usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn writer(dir: &Path, name: &str, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>, RunError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(name))?));
    w.write_record(header)?;
    Ok(w)
}

fn metrics_row(round: u32, m: &MetricsReport) -> [String; 5] {
    [
        round.to_string(),
        m.accuracy.to_string(),
        m.precision.to_string(),
        m.recall.to_string(),
        m.f1.to_string(),
    ]
}

const METRICS_HEADER: [&str; 5] = ["round", "accuracy", "precision", "recall", "f1"];

pub fn write_metrics(dir: &Path, name: &str, rows: &[(u32, MetricsReport)]) -> Result<(), RunError> {
    let mut w = writer(dir, name, &METRICS_HEADER)?;
    for (round, m) in rows {
        w.write_record(metrics_row(*round, m))?;
    }
    w.flush()?;
    Ok(())
}

/// Write the four per-round CSVs. Returns their names.
pub fn write_round_reports(dir: &Path, reports: &[RoundReport]) -> Result<Vec<&'static str>, RunError> {
    let mut loss = writer(dir, LOSS_CURVES, &["round", "domain", "loss"])?;
    let mut trace = writer(dir, PARAM_TRACE, &["round", "domain_eval_tag", "index", "value"])?;
    let mut clients = writer(
        dir,
        CLIENT_REPORTS,
        &[
            "round",
            "client_id",
            "domain",
            "participated",
            "flagged",
            "sample_count",
            "loss_before",
            "loss_after",
            "epsilon",
            "delta",
            "sigma",
            "clip_applied",
            "pre_clip_norm",
            "mechanism",
        ],
    )?;
    for r in reports {
        let round = r.round.to_string();
        for (domain, l) in &r.domain_losses {
            loss.write_record([round.as_str(), domain, &l.to_string()])?;
        }
        for t in &r.param_traces {
            for (idx, v) in r.tracked_indices.iter().zip(&t.values) {
                trace.write_record([round.as_str(), &t.tag, &idx.to_string(), &v.to_string()])?;
            }
        }
        for c in &r.clients {
            let (sigma, clip, pre, mech) = match &c.receipt {
                Some(rc) => (
                    rc.sigma.to_string(),
                    rc.clip_applied.to_string(),
                    rc.pre_clip_norm.to_string(),
                    rc.mechanism.as_str().to_string(),
                ),
                None => (String::new(), String::new(), String::new(), String::new()),
            };
            clients.write_record([
                round.clone(),
                c.client_id.to_string(),
                c.domain.clone(),
                c.participated.to_string(),
                c.flagged.to_string(),
                c.sample_count.to_string(),
                c.loss_before.to_string(),
                c.loss_after.to_string(),
                c.epsilon.to_string(),
                c.delta.to_string(),
                sigma,
                clip,
                pre,
                mech,
            ])?;
        }
    }
    loss.flush()?;
    trace.flush()?;
    clients.flush()?;
    let rows: Vec<(u32, MetricsReport)> = reports.iter().map(|r| (r.round, r.metrics)).collect();
    write_metrics(dir, METRICS, &rows)?;
    Ok(vec![LOSS_CURVES, PARAM_TRACE, METRICS, CLIENT_REPORTS])
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub artifact_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub rounds_completed: u32,
    pub files: Vec<FileEntry>,
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn inventory(dir: &Path, names: &[&str]) -> Result<Vec<FileEntry>, RunError> {
    names
        .iter()
        .map(|name| {
            let bytes = fs::read(dir.join(name))?;
            Ok(FileEntry {
                name: name.to_string(),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect()
}

/// Write `manifest.json` through a temporary file and a rename.
pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf, RunError> {
    let path = dir.join(MANIFEST);
    let tmp = dir.join(format!(".{MANIFEST}.tmp"));
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer_pretty(&mut f, manifest).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, &path)?;
    Ok(path)
}
