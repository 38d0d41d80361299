//! CSV and JSONL report writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sgm_core::data::OrganSchema;
use sgm_core::eval::{CellSummary, MetricsRow, TrajectoryRow};
use sgm_core::train::{SaliencySummary, StepStats};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: [&str; 6] = ["task", "protocol", "auroc", "balacc", "probe_seed", "dropout_seed"];

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let body = csv_bytes(
        &METRICS_HEADER,
        rows.iter().map(|r| {
            vec![
                r.task.clone(),
                r.protocol.clone(),
                r.auroc.to_string(),
                r.balacc.to_string(),
                r.probe_seed.to_string(),
                opt(r.dropout_seed),
            ]
        }),
    )?;
    write_atomic(path, &body)
}

pub fn write_summary(path: &Path, cells: &[CellSummary]) -> Result<()> {
    let body = csv_bytes(
        &[
            "task",
            "protocol",
            "n",
            "auroc_mean",
            "auroc_std",
            "balacc_mean",
            "balacc_std",
        ],
        cells.iter().map(|c| {
            vec![
                c.task.clone(),
                c.protocol.clone(),
                c.n.to_string(),
                c.auroc_mean.to_string(),
                c.auroc_std.to_string(),
                c.balacc_mean.to_string(),
                c.balacc_std.to_string(),
            ]
        }),
    )?;
    write_atomic(path, &body)
}

/// Lower-triangular pairwise cells; the diagonal is single-organ removal.
pub fn write_heatmap(path: &Path, schema: &OrganSchema, per_task: &[(String, Vec<Vec<Option<f64>>>)]) -> Result<()> {
    let mut rows = Vec::new();
    for (task, m) in per_task {
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    rows.push(vec![
                        task.clone(),
                        schema.organ(i).name.clone(),
                        schema.organ(j).name.clone(),
                        v.to_string(),
                    ]);
                }
            }
        }
    }
    write_atomic(path, &csv_bytes(&["task", "row_organ", "col_organ", "auroc"], rows)?)
}

pub fn write_importance(
    path: &Path,
    schema: &OrganSchema,
    tasks: &[String],
    deltas: &[Vec<Option<f64>>],
) -> Result<()> {
    let mut rows = Vec::new();
    for (o, row) in deltas.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            rows.push(vec![schema.organ(o).name.clone(), tasks[t].clone(), opt(*v)]);
        }
    }
    write_atomic(path, &csv_bytes(&["organ", "task", "delta_auroc_x100"], rows)?)
}

pub fn write_trajectory(path: &Path, schema: &OrganSchema, rows: &[TrajectoryRow]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        for (o, s) in r.organ_shares.iter().enumerate() {
            out.push(vec![r.step.to_string(), schema.organ(o).name.clone(), s.to_string()]);
        }
        out.push(vec![r.step.to_string(), "CLS".into(), r.cls_share.to_string()]);
    }
    write_atomic(path, &csv_bytes(&["step", "organ", "share"], out)?)
}

/// Streams `loss_log.csv` and `saliency_log.jsonl` during training.
pub struct TrainLogs {
    loss: csv::Writer<BufWriter<File>>,
    saliency: BufWriter<File>,
    saliency_path: PathBuf,
    organs: Vec<String>,
}

#[derive(Serialize)]
struct OrganSaliency {
    organ: String,
    score: Option<f64>,
    prob: Option<f64>,
}

#[derive(Serialize)]
struct SaliencyLine {
    step: usize,
    epoch: usize,
    organs: Vec<OrganSaliency>,
    cls_self_mass: f64,
}

impl TrainLogs {
    pub const LOSS_HEADER: [&'static str; 9] = ["step", "epoch", "loss", "l_g", "l_k", "lr", "wd", "m", "tau_t"];

    pub fn create(dir: &Path, schema: &OrganSchema) -> Result<Self> {
        let loss_path = dir.join("loss_log.csv");
        let f = File::create(&loss_path).map_err(Error::io(&loss_path))?;
        let mut loss = csv::Writer::from_writer(BufWriter::new(f));
        loss.write_record(Self::LOSS_HEADER)?;
        let saliency_path = dir.join("saliency_log.jsonl");
        let f = File::create(&saliency_path).map_err(Error::io(&saliency_path))?;
        Ok(Self {
            loss,
            saliency: BufWriter::new(f),
            saliency_path,
            organs: schema.names().map(str::to_string).collect(),
        })
    }

    pub fn step(&mut self, s: &StepStats) -> Result<()> {
        self.loss.write_record([
            s.step.to_string(),
            s.epoch.to_string(),
            s.loss.to_string(),
            s.main.to_string(),
            s.koleo.to_string(),
            s.lr.to_string(),
            s.wd.to_string(),
            s.momentum.to_string(),
            s.teacher_temp.to_string(),
        ])?;
        Ok(())
    }

    pub fn saliency(&mut self, s: &SaliencySummary) -> Result<()> {
        let line = SaliencyLine {
            step: s.step,
            epoch: s.epoch,
            organs: self
                .organs
                .iter()
                .enumerate()
                .map(|(o, n)| OrganSaliency {
                    organ: n.clone(),
                    score: s.scores[o],
                    prob: s.probs[o],
                })
                .collect(),
            cls_self_mass: s.cls_self_mass,
        };
        let text = serde_json::to_string(&line).expect("finite saliency");
        writeln!(self.saliency, "{text}").map_err(Error::io(&self.saliency_path))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.loss.flush().map_err(Error::io("loss_log.csv"))?;
        self.saliency.flush().map_err(Error::io(&self.saliency_path))
    }
}
