use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CaptionRecord, Evaluation, MetricsReport, ProbeRecord, Task};
use crate::engine::{write_trace_jsonl, EngineConfig};
use crate::error::EvrbError;
use crate::toy::{DistractorPolicy, Knobs};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRecords<R> {
    pub label: String,
    pub records: Vec<R>,
}

/// Everything needed to reproduce and compare a run, minus wall-clock
/// timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub task: Task,
    pub model_seed: u64,
    pub knobs: Knobs,
    pub suite_seed: u64,
    pub scenes: usize,
    pub rho: f64,
    pub distractors: DistractorPolicy,
    pub probe_config: Option<EngineConfig>,
    pub caption_config: Option<EngineConfig>,
    pub rows: Vec<MetricsReport>,
    pub probe_records: Vec<ModeRecords<ProbeRecord>>,
    pub caption_records: Vec<ModeRecords<CaptionRecord>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub report_json: PathBuf,
    pub metrics_csv: PathBuf,
    pub probes_csv: Option<PathBuf>,
    pub captions_csv: Option<PathBuf>,
    pub timing_json: PathBuf,
    pub traces_jsonl: Option<PathBuf>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvrbError> {
    let file = std::fs::File::create(path).map_err(EvrbError::io(path))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(EvrbError::json(path))?;
    w.write_all(b"\n").map_err(EvrbError::io(path))?;
    w.flush().map_err(EvrbError::io(path))
}

fn write_metrics_csv(path: &Path, rows: &[MetricsReport]) -> Result<(), EvrbError> {
    let mut w = csv::Writer::from_path(path).map_err(EvrbError::csv(path))?;
    w.write_record([
        "label",
        "components",
        "accuracy",
        "precision",
        "recall",
        "f1",
        "yes_ratio",
        "flagged",
        "chair_s",
        "chair_i",
        "caption_recall",
        "mean_length",
    ])
    .map_err(EvrbError::csv(path))?;
    for r in rows {
        let p = r.probe.as_ref();
        let c = r.caption.as_ref();
        w.write_record([
            r.label.clone(),
            r.components.to_string(),
            opt(p.map(|m| m.accuracy)),
            opt(p.map(|m| m.precision)),
            opt(p.map(|m| m.recall)),
            opt(p.map(|m| m.f1)),
            opt(p.map(|m| m.yes_ratio)),
            p.map(|m| m.flagged.to_string()).unwrap_or_default(),
            opt(c.map(|m| m.chair_s)),
            opt(c.map(|m| m.chair_i)),
            opt(c.map(|m| m.recall)),
            opt(c.map(|m| m.mean_length)),
        ])
        .map_err(EvrbError::csv(path))?;
    }
    w.flush().map_err(EvrbError::io(path))
}

fn write_probes_csv(path: &Path, modes: &[ModeRecords<ProbeRecord>]) -> Result<(), EvrbError> {
    let mut w = csv::Writer::from_path(path).map_err(EvrbError::csv(path))?;
    w.write_record([
        "label",
        "scene_id",
        "word",
        "expected",
        "answer",
        "first_word",
        "correct",
        "flagged",
    ])
    .map_err(EvrbError::csv(path))?;
    let yes_no = |a: super::Answer| match a {
        super::Answer::Yes => "yes",
        super::Answer::No => "no",
    };
    for mode in modes {
        for r in &mode.records {
            w.write_record([
                mode.label.as_str(),
                &r.scene_id.to_string(),
                &r.word,
                yes_no(r.expected),
                r.answer.map(yes_no).unwrap_or(""),
                &r.first_word,
                &r.correct.to_string(),
                &r.flagged.to_string(),
            ])
            .map_err(EvrbError::csv(path))?;
        }
    }
    w.flush().map_err(EvrbError::io(path))
}

fn write_captions_csv(path: &Path, modes: &[ModeRecords<CaptionRecord>]) -> Result<(), EvrbError> {
    let mut w = csv::Writer::from_path(path).map_err(EvrbError::csv(path))?;
    w.write_record([
        "label",
        "scene_id",
        "length",
        "mentioned",
        "hallucinated",
        "ground_truth",
        "caption",
    ])
    .map_err(EvrbError::csv(path))?;
    let join = |s: &std::collections::BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join(" ");
    for mode in modes {
        for r in &mode.records {
            w.write_record([
                mode.label.clone(),
                r.scene_id.to_string(),
                r.length.to_string(),
                join(&r.mentioned),
                join(&r.hallucinated),
                join(&r.ground_truth),
                r.caption.clone(),
            ])
            .map_err(EvrbError::csv(path))?;
        }
    }
    w.flush().map_err(EvrbError::io(path))
}

/// Writes `report.json`, `metrics.csv`, per-sample `probes.csv` /
/// `captions.csv`, `timing.json` and, when `traces` is set and traces were
/// kept, `traces.jsonl` into `dir`, creating it if needed.
pub fn emit_report(eval: &Evaluation, dir: &Path, traces: bool) -> Result<ReportFiles, EvrbError> {
    std::fs::create_dir_all(dir).map_err(EvrbError::io(dir))?;
    let report = &eval.report;
    let files = ReportFiles {
        report_json: dir.join("report.json"),
        metrics_csv: dir.join("metrics.csv"),
        probes_csv: (!report.probe_records.is_empty()).then(|| dir.join("probes.csv")),
        captions_csv: (!report.caption_records.is_empty()).then(|| dir.join("captions.csv")),
        timing_json: dir.join("timing.json"),
        traces_jsonl: (traces && !eval.traces.is_empty()).then(|| dir.join("traces.jsonl")),
    };
    write_json(&files.report_json, report)?;
    write_metrics_csv(&files.metrics_csv, &report.rows)?;
    if let Some(p) = &files.probes_csv {
        write_probes_csv(p, &report.probe_records)?;
    }
    if let Some(p) = &files.captions_csv {
        write_captions_csv(p, &report.caption_records)?;
    }
    write_json(&files.timing_json, &eval.timings)?;
    if let Some(p) = &files.traces_jsonl {
        write_trace_jsonl(p, eval.traces.iter().map(|(name, r)| (name.as_str(), r)))?;
    }
    Ok(files)
}
