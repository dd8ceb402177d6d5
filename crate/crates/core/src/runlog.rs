//! Training run log: per-step loss rows and per-evaluation metric rows, stored
//! in one CSV file, and the per-epoch diagnostic series derived from it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::{RetrievalReport, SpaceReport};
use crate::sampler::BatchKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub epoch: usize,
    pub step: usize,
    pub kind: BatchKind,
    pub report: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub epoch: usize,
    pub t2v: RetrievalReport,
    pub v2t: RetrievalReport,
    pub space: SpaceReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRow>,
    pub evals: Vec<EvalRow>,
    /// Serialized configuration the run was started with.
    pub config_snapshot: String,
    pub checkpoint: Option<String>,
}

/// One CSV line. Step rows leave the metric columns empty and vice versa.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Record {
    row_type: String,
    epoch: usize,
    step: Option<usize>,
    batch_kind: Option<BatchKind>,
    skp_loss: Option<f64>,
    kcl_loss: Option<f64>,
    t2v_terms: Option<usize>,
    v2t_terms: Option<usize>,
    align: Option<f64>,
    unif_txt: Option<f64>,
    unif_vis: Option<f64>,
    r1: Option<f64>,
    r5: Option<f64>,
    r10: Option<f64>,
    medr: Option<usize>,
}

impl RunLog {
    pub fn last_eval(&self) -> Option<&EvalRow> {
        self.evals.last()
    }

    /// Writes step and eval rows ordered by epoch; within an epoch, steps come
    /// before its evaluation.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut evals = self.evals.iter().peekable();
        let mut flush_evals = |w: &mut csv::Writer<_>, upto: Option<usize>| -> Result<()> {
            while let Some(e) = evals.next_if(|e| upto.is_none_or(|u| e.epoch < u)) {
                w.serialize(Record {
                    row_type: "eval".into(),
                    epoch: e.epoch,
                    align: Some(e.space.align),
                    unif_txt: Some(e.space.unif_txt),
                    unif_vis: Some(e.space.unif_vis),
                    r1: Some(e.t2v.r1),
                    r5: Some(e.t2v.r5),
                    r10: Some(e.t2v.r10),
                    medr: Some(e.t2v.med_r),
                    ..Default::default()
                })?;
            }
            Ok(())
        };
        for s in &self.steps {
            flush_evals(&mut w, Some(s.epoch))?;
            w.serialize(Record {
                row_type: "step".into(),
                epoch: s.epoch,
                step: Some(s.step),
                batch_kind: Some(s.kind),
                skp_loss: Some(s.report.skp_loss),
                kcl_loss: Some(s.report.kcl_loss),
                t2v_terms: Some(s.report.t2v_terms),
                v2t_terms: Some(s.report.v2t_terms),
                ..Default::default()
            })?;
        }
        flush_evals(&mut w, None)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    }
}

/// Per-epoch series: mean step losses joined with that epoch's evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub epoch: usize,
    pub skp_loss: Option<f64>,
    pub kcl_loss: Option<f64>,
    pub align: Option<f64>,
    pub unif_txt: Option<f64>,
    pub unif_vis: Option<f64>,
    pub r1: Option<f64>,
    pub r5: Option<f64>,
    pub r10: Option<f64>,
    pub medr: Option<usize>,
}

pub fn diagnose(log_path: impl AsRef<Path>) -> Result<Vec<DiagnosticRow>> {
    let path = log_path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let headers = reader.headers().map_err(|e| csv_io(path, e))?;
    for column in ["row_type", "epoch"] {
        if !headers.iter().any(|h| h == column) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing column {column:?}; not a run log"),
            });
        }
    }
    let mut rows: BTreeMap<usize, (f64, f64, usize, Option<Record>)> = BTreeMap::new();
    for (i, rec) in reader.deserialize::<Record>().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?;
        let entry = rows.entry(rec.epoch).or_insert((0.0, 0.0, 0, None));
        match rec.row_type.as_str() {
            "step" => {
                entry.0 += rec.skp_loss.unwrap_or(0.0);
                entry.1 += rec.kcl_loss.unwrap_or(0.0);
                entry.2 += 1;
            }
            "eval" => entry.3 = Some(rec),
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 2,
                    message: format!("unknown row type {other:?}"),
                })
            }
        }
    }
    Ok(rows
        .into_iter()
        .map(|(epoch, (skp, kcl, n, eval))| {
            let mean = |total: f64| (n > 0).then(|| total / n as f64);
            let eval = eval.unwrap_or_default();
            DiagnosticRow {
                epoch,
                skp_loss: mean(skp),
                kcl_loss: mean(kcl),
                align: eval.align,
                unif_txt: eval.unif_txt,
                unif_vis: eval.unif_vis,
                r1: eval.r1,
                r5: eval.r5,
                r10: eval.r10,
                medr: eval.medr,
            }
        })
        .collect())
}

pub fn write_diagnostics<W: std::io::Write>(rows: &[DiagnosticRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<diagnostics>", e))
}
