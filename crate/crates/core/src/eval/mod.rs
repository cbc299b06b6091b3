//! Probe and caption evaluations over the toy world, comparing plain greedy
//! decoding against the full pipeline and its component ablations.

mod metrics;
mod report;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{audit_prefill, Threshold, VisualAuditReport};
use crate::engine::{Components, Engine, EngineConfig, GenerationResult};
use crate::error::EvrbError;
use crate::model::{split_prompt, LanguageBackend};
use crate::toy::{caption_prompt, probe_prompt, SceneSuite, ToyLvlm};

pub use metrics::{
    caption_metrics, probe_metrics, Answer, CaptionMetrics, CaptionRecord, ProbeMetrics, ProbeRecord,
};
pub use report::{emit_report, ModeRecords, Report, ReportFiles, REPORT_SCHEMA_VERSION};

pub const DEFAULT_SCENES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pope,
    Chair,
    Ablation,
}

impl Task {
    fn runs_probes(self) -> bool {
        matches!(self, Task::Pope | Task::Ablation)
    }

    fn runs_captions(self) -> bool {
        matches!(self, Task::Chair | Task::Ablation)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Pope => "pope",
            Task::Chair => "chair",
            Task::Ablation => "ablation",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pope" => Ok(Task::Pope),
            "chair" => Ok(Task::Chair),
            "ablation" => Ok(Task::Ablation),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// A named set of enabled stages. Every mode is derived from one base
/// configuration through [`EngineConfig::ablate`], so plain decoding shares
/// all backend code with the full pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mode {
    pub label: String,
    pub components: Components,
}

impl Mode {
    pub fn vanilla() -> Self {
        Self {
            label: "vanilla".into(),
            components: Components::NONE,
        }
    }

    pub fn evrb() -> Self {
        Self {
            label: "evrb".into(),
            components: Components::ALL,
        }
    }

    /// One mode per ablation row, labelled `none`, `P`, ... `P+R+S`.
    pub fn ablation_rows() -> Vec<Self> {
        Components::ablation_rows()
            .into_iter()
            .map(|components| Self {
                label: components.to_string(),
                components,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Evaluate samples on the rayon pool. Results do not depend on this;
    /// the per-sample timers do.
    pub parallel: bool,
    pub keep_traces: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            parallel: true,
            keep_traces: false,
        }
    }
}

/// Timers summed over the samples of one mode and task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTiming {
    pub label: String,
    pub task: Task,
    pub samples: usize,
    pub generated_tokens: usize,
    pub prefill_secs: f64,
    pub decode_secs: f64,
    pub wall_secs: f64,
}

impl ModeTiming {
    pub fn total_secs(&self) -> f64 {
        self.prefill_secs + self.decode_secs
    }

    fn collect<'r>(
        label: &str,
        task: Task,
        results: impl IntoIterator<Item = &'r GenerationResult>,
        wall_secs: f64,
    ) -> Self {
        let mut t = ModeTiming {
            label: label.to_string(),
            task,
            samples: 0,
            generated_tokens: 0,
            prefill_secs: 0.0,
            decode_secs: 0.0,
            wall_secs,
        };
        for r in results {
            t.samples += 1;
            t.generated_tokens += r.tokens.len();
            t.prefill_secs += r.timing.prefill_secs;
            t.decode_secs += r.timing.token_secs.iter().sum::<f64>();
        }
        t
    }
}

pub struct SuiteRun<R> {
    pub label: String,
    pub records: Vec<R>,
    pub timing: ModeTiming,
    /// `(sample name, result)` pairs, filled only with `keep_traces`.
    pub traces: Vec<(String, GenerationResult)>,
}

fn map_samples<T, R, F>(jobs: &[T], parallel: bool, f: F) -> Result<Vec<R>, EvrbError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, EvrbError> + Sync + Send,
{
    if parallel {
        jobs.par_iter().map(f).collect()
    } else {
        jobs.iter().map(f).collect()
    }
}

fn nonempty(suite: &SceneSuite) -> Result<(), EvrbError> {
    if suite.items.is_empty() {
        return Err(EvrbError::Config("the scene suite is empty".into()));
    }
    Ok(())
}

/// Asks every probe of every scene, one generation per probe. The answer is
/// the first generated token.
pub fn run_probe_suite(
    model: &ToyLvlm,
    suite: &SceneSuite,
    config: &EngineConfig,
    label: &str,
    options: EvalOptions,
) -> Result<SuiteRun<ProbeRecord>, EvrbError> {
    nonempty(suite)?;
    let engine = Engine::new(model, config.clone())?;
    let vocab = model.vocab();
    let jobs: Vec<_> = suite
        .items
        .iter()
        .flat_map(|item| item.probes.iter().map(move |p| (item, *p)))
        .collect();
    let start = Instant::now();
    let outputs = map_samples(&jobs, options.parallel, |(item, probe)| {
        let prompt = probe_prompt(model, &item.scene, probe.word)?;
        let result = engine.generate(&prompt)?;
        let word = vocab.word(probe.word);
        let record = ProbeRecord::new(item.id, word, Answer::from_present(probe.present), &result);
        Ok((record, result))
    })?;
    let wall = start.elapsed().as_secs_f64();
    let timing = ModeTiming::collect(label, Task::Pope, outputs.iter().map(|o| &o.1), wall);
    let mut records = Vec::with_capacity(outputs.len());
    let mut traces = Vec::new();
    for (record, result) in outputs {
        if options.keep_traces {
            traces.push((
                format!("{label}/pope/{}/{}", record.scene_id, record.word),
                result,
            ));
        }
        records.push(record);
    }
    Ok(SuiteRun {
        label: label.to_string(),
        records,
        timing,
        traces,
    })
}

/// Captions every scene with the detailed-description prompt.
pub fn run_caption_suite(
    model: &ToyLvlm,
    suite: &SceneSuite,
    config: &EngineConfig,
    label: &str,
    options: EvalOptions,
) -> Result<SuiteRun<CaptionRecord>, EvrbError> {
    nonempty(suite)?;
    let engine = Engine::new(model, config.clone())?;
    let vocab = model.vocab();
    let start = Instant::now();
    let outputs = map_samples(&suite.items, options.parallel, |item| {
        let prompt = caption_prompt(model, &item.scene)?;
        let result = engine.generate(&prompt)?;
        let record = CaptionRecord::new(item.id, vocab, &item.ground_truth, &result);
        Ok((record, result))
    })?;
    let wall = start.elapsed().as_secs_f64();
    let timing = ModeTiming::collect(label, Task::Chair, outputs.iter().map(|o| &o.1), wall);
    let mut records = Vec::with_capacity(outputs.len());
    let mut traces = Vec::new();
    for (record, result) in outputs {
        if options.keep_traces {
            traces.push((format!("{label}/chair/{}", record.scene_id), result));
        }
        records.push(record);
    }
    Ok(SuiteRun {
        label: label.to_string(),
        records,
        timing,
        traces,
    })
}

/// Metrics of one mode. Timing lives in [`Evaluation::timings`] so that
/// reports of identical runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub components: Components,
    pub probe: Option<ProbeMetrics>,
    pub caption: Option<CaptionMetrics>,
}

#[derive(Debug, Clone)]
pub struct EvalPlan {
    pub task: Task,
    pub modes: Vec<Mode>,
    /// Base configuration for yes/no probes.
    pub probe_config: EngineConfig,
    /// Base configuration for captions.
    pub caption_config: EngineConfig,
    pub options: EvalOptions,
}

impl EvalPlan {
    /// The default per-task configurations and the modes the task implies:
    /// the six ablation rows, or plain versus full pipeline.
    pub fn new(task: Task) -> Self {
        use crate::rectify::{CAPTION_MU, PROBE_MU};
        Self {
            task,
            modes: match task {
                Task::Ablation => Mode::ablation_rows(),
                _ => vec![Mode::vanilla(), Mode::evrb()],
            },
            probe_config: EngineConfig::evrb(PROBE_MU),
            caption_config: EngineConfig::evrb(CAPTION_MU),
            options: EvalOptions::default(),
        }
    }
}

pub struct Evaluation {
    pub report: Report,
    pub timings: Vec<ModeTiming>,
    pub traces: Vec<(String, GenerationResult)>,
}

impl Evaluation {
    pub fn row(&self, label: &str) -> Option<&MetricsReport> {
        self.report.rows.iter().find(|r| r.label == label)
    }

    pub fn timing(&self, label: &str, task: Task) -> Option<&ModeTiming> {
        self.timings.iter().find(|t| t.label == label && t.task == task)
    }
}

pub fn evaluate(model: &ToyLvlm, suite: &SceneSuite, plan: &EvalPlan) -> Result<Evaluation, EvrbError> {
    if plan.modes.is_empty() {
        return Err(EvrbError::Config("no modes to evaluate".into()));
    }
    plan.probe_config.validate()?;
    plan.caption_config.validate()?;
    let mut rows = Vec::new();
    let mut probe_records = Vec::new();
    let mut caption_records = Vec::new();
    let mut timings = Vec::new();
    let mut traces = Vec::new();
    for mode in &plan.modes {
        let mut row = MetricsReport {
            label: mode.label.clone(),
            components: mode.components,
            probe: None,
            caption: None,
        };
        if plan.task.runs_probes() {
            let config = plan.probe_config.ablate(mode.components);
            let run = run_probe_suite(model, suite, &config, &mode.label, plan.options)?;
            row.probe = Some(probe_metrics(&run.records));
            probe_records.push(ModeRecords {
                label: mode.label.clone(),
                records: run.records,
            });
            timings.push(run.timing);
            traces.extend(run.traces);
        }
        if plan.task.runs_captions() {
            let config = plan.caption_config.ablate(mode.components);
            let run = run_caption_suite(model, suite, &config, &mode.label, plan.options)?;
            row.caption = Some(caption_metrics(&run.records));
            caption_records.push(ModeRecords {
                label: mode.label.clone(),
                records: run.records,
            });
            timings.push(run.timing);
            traces.extend(run.traces);
        }
        rows.push(row);
    }
    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        task: plan.task,
        model_seed: model.config().seed,
        knobs: model.config().knobs,
        suite_seed: suite.seed,
        scenes: suite.items.len(),
        rho: suite.rho,
        distractors: suite.distractors,
        probe_config: plan.task.runs_probes().then(|| plan.probe_config.clone()),
        caption_config: plan.task.runs_captions().then(|| plan.caption_config.clone()),
        rows,
        probe_records,
        caption_records,
    };
    Ok(Evaluation {
        report,
        timings,
        traces,
    })
}

/// Every component mask on both tasks.
pub fn run_ablation_matrix(
    model: &ToyLvlm,
    suite: &SceneSuite,
    options: EvalOptions,
) -> Result<Evaluation, EvrbError> {
    let plan = EvalPlan {
        options,
        ..EvalPlan::new(Task::Ablation)
    };
    evaluate(model, suite, &plan)
}

/// Audits the caption prompt of every scene with threshold `tau`.
pub fn audit_suite(
    model: &ToyLvlm,
    suite: &SceneSuite,
    tau: Threshold,
) -> Result<Vec<VisualAuditReport>, EvrbError> {
    nonempty(suite)?;
    let tau = tau.resolve(model.vocab().len());
    suite
        .items
        .par_iter()
        .map(|item| {
            let prompt = caption_prompt(model, &item.scene)?;
            let (head, roles, _, _) = split_prompt(&prompt.inputs, &prompt.roles)?;
            let prefill = model.prefill(head, roles)?;
            Ok(audit_prefill(model, &prefill, tau)?)
        })
        .collect()
}
