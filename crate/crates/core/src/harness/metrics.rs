use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged tokenizer step. Columns that do not apply to a row are left empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_total: f64,
    pub loss_rec: f64,
    pub loss_vq: f64,
    pub loss_align_a: Option<f64>,
    pub loss_align_m: Option<f64>,
    pub sacp_s: Option<f64>,
    pub conflict: Option<u8>,
    pub grad_norm_a: Option<f64>,
    pub grad_norm_m: Option<f64>,
    pub grad_norm: f64,
    pub codebook_usage: f64,
    pub codebook_perplexity: f64,
    pub psnr: Option<f64>,
    pub lr: f64,
}

pub const TOKENIZER_HEADER: &[&str] = &[
    "step",
    "loss_total",
    "loss_rec",
    "loss_vq",
    "loss_align_a",
    "loss_align_m",
    "sacp_s",
    "conflict",
    "grad_norm_a",
    "grad_norm_m",
    "grad_norm",
    "codebook_usage",
    "codebook_perplexity",
    "psnr",
    "lr",
];

/// One logged generator step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArMetricsRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub const AR_HEADER: &[&str] = &["step", "loss", "grad_norm", "lr"];

/// Append-only CSV log with a fixed header. Rows must arrive in increasing step order.
pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<File>,
    last_step: Option<u64>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Invalid(format!("{}: {e}", path.display()))
}

pub fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

impl MetricsLog {
    /// Starts a fresh log, replacing any existing file.
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer.write_record(header).map_err(|e| csv_err(path, e))?;
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), writer, last_step: None })
    }

    /// Reopens a log for a resumed run: rows past `keep_through` are dropped first,
    /// so a crash after the last checkpoint leaves no duplicated steps.
    pub fn resume<R>(path: &Path, header: &[&str], keep_through: u64, step_of: impl Fn(&R) -> u64) -> Result<Self>
    where
        R: Serialize + for<'de> Deserialize<'de>,
    {
        let rows: Vec<R> = if path.exists() { read_rows(path)? } else { Vec::new() };
        let mut log = Self::create(path, header)?;
        for r in rows.iter().filter(|r| step_of(r) <= keep_through) {
            log.append(step_of(r), r)?;
        }
        Ok(log)
    }

    pub fn append<R: Serialize>(&mut self, step: u64, row: &R) -> Result<()> {
        if self.last_step.is_some_and(|s| step <= s) {
            return Err(Error::Invalid(format!("metrics step {step} not after {:?}", self.last_step)));
        }
        self.writer.serialize(row).map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))?;
        self.last_step = Some(step);
        Ok(())
    }
}

/// Paired aligned/baseline curves joined on step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub step: u64,
    pub rec_aligned: f64,
    pub rec_baseline: f64,
    pub total_aligned: f64,
    pub total_baseline: f64,
    pub psnr_aligned: Option<f64>,
    pub psnr_baseline: Option<f64>,
}

pub fn write_comparison(aligned: &[MetricsRow], baseline: &[MetricsRow], out: &Path) -> Result<Vec<ComparisonRow>> {
    let rows: Vec<ComparisonRow> = aligned
        .iter()
        .filter_map(|a| {
            let b = baseline.iter().find(|b| b.step == a.step)?;
            Some(ComparisonRow {
                step: a.step,
                rec_aligned: a.loss_rec,
                rec_baseline: b.loss_rec,
                total_aligned: a.loss_total,
                total_baseline: b.loss_total,
                psnr_aligned: a.psnr,
                psnr_baseline: b.psnr,
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Invalid("the two runs share no logged steps".into()));
    }
    let mut w = csv::Writer::from_path(out).map_err(|e| csv_err(out, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_err(out, e))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(rows)
}

/// Mean of `f` over the last `n` rows.
pub fn tail_mean<R>(rows: &[R], n: usize, f: impl Fn(&R) -> f64) -> Option<f64> {
    let tail = &rows[rows.len().saturating_sub(n.max(1))..];
    (!tail.is_empty()).then(|| tail.iter().map(f).sum::<f64>() / tail.len() as f64)
}
