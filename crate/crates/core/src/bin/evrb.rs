use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use evrb::audit::{build_histogram, entropy_mass, Threshold};
use evrb::engine::EngineConfig;
use evrb::eval::{self, emit_report, EvalPlan, Evaluation, Mode, Task, DEFAULT_SCENES};
use evrb::model::LanguageBackend;
use evrb::toy::{generate_scene_suite, Knobs, SceneSuite, SuiteFile, SuiteSpec, ToyConfig, ToyLvlm};
use evrb::EvrbError;

#[derive(Parser)]
#[command(
    name = "evrb",
    version,
    about = "Hallucination-mitigating decoding over a toy vision-language model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate probes, captions or the component ablation on a generated suite.
    Run(RunArgs),
    /// Audit visual-token entropies and write the histogram data.
    Audit(AuditArgs),
    /// Evaluate a suite stored as JSON.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Pope,
    Chair,
    Ablation,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Pope => Task::Pope,
            TaskArg::Chair => Task::Chair,
            TaskArg::Ablation => Task::Ablation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Vanilla,
    Evrb,
    Both,
}

#[derive(Args)]
struct EngineArgs {
    /// Entropy threshold in nats, `inf`, or `rel:<fraction of ln|vocab|>`.
    #[arg(long)]
    tau: Option<Threshold>,
    /// Plausibility cutoff; defaults to 0.1 for probes and 0.9 for captions.
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Comma-separated overrides, e.g. `beta_p=3,gamma=0.95`.
    #[arg(long, default_value = "")]
    knobs: String,
    /// Evaluate samples one at a time.
    #[arg(long)]
    serial: bool,
}

impl EngineArgs {
    fn apply(&self, mut c: EngineConfig) -> EngineConfig {
        if let Some(t) = self.tau {
            c.threshold = t;
        }
        if let Some(v) = self.mu {
            c.mu = v;
        }
        if let Some(v) = self.delta {
            c.delta = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.epsilon {
            c.epsilon = v;
        }
        if let Some(v) = self.max_new_tokens {
            c.max_new_tokens = v;
        }
        c
    }

    fn knobs(&self) -> Result<Knobs, EvrbError> {
        Ok(self.knobs.parse::<Knobs>()?)
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory.
    #[arg(long, env = "EVRB_REPORT_DIR", default_value = "evrb-report")]
    report: PathBuf,
    /// Also write per-token traces as JSON lines.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Ignored by the ablation task, which runs every component mask.
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SCENES)]
    scenes: usize,
    #[command(flatten)]
    engine: EngineArgs,
    #[command(flatten)]
    out: ReportArgs,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SCENES)]
    scenes: usize,
    #[arg(long)]
    hist_csv: PathBuf,
    #[arg(long, default_value = "rel:0.721")]
    tau: Threshold,
    #[arg(long, default_value_t = 0.25)]
    bin_width: f64,
    #[arg(long, default_value = "")]
    knobs: String,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long, value_enum, default_value = "ablation")]
    task: TaskArg,
    #[command(flatten)]
    engine: EngineArgs,
    #[command(flatten)]
    out: ReportArgs,
}

fn build_model(seed: u64, knobs: Knobs) -> Result<ToyLvlm, EvrbError> {
    Ok(ToyLvlm::new(ToyConfig::with_seed(seed).with_knobs(knobs))?)
}

fn plan(task: Task, mode: ModeArg, engine: &EngineArgs) -> EvalPlan {
    let mut plan = EvalPlan::new(task);
    if task != Task::Ablation {
        plan.modes = match mode {
            ModeArg::Vanilla => vec![Mode::vanilla()],
            ModeArg::Evrb => vec![Mode::evrb()],
            ModeArg::Both => vec![Mode::vanilla(), Mode::evrb()],
        };
    }
    plan.probe_config = engine.apply(plan.probe_config);
    plan.caption_config = engine.apply(plan.caption_config);
    plan.options.parallel = !engine.serial;
    plan
}

fn print_summary(eval: &Evaluation) {
    let r = &eval.report;
    println!(
        "task {} | model seed {} | suite seed {} | {} scenes",
        r.task, r.model_seed, r.suite_seed, r.scenes
    );
    println!(
        "{:<8} {:>8} {:>9} {:>7} {:>7} {:>8} {:>8} {:>8} {:>8}",
        "mode", "accuracy", "precision", "recall", "f1", "chair_s", "chair_i", "c_recall", "length"
    );
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    for row in &r.rows {
        let p = row.probe.as_ref();
        let c = row.caption.as_ref();
        println!(
            "{:<8} {:>8} {:>9} {:>7} {:>7} {:>8} {:>8} {:>8} {:>8}",
            row.label,
            cell(p.map(|m| m.accuracy)),
            cell(p.map(|m| m.precision)),
            cell(p.map(|m| m.recall)),
            cell(p.map(|m| m.f1)),
            cell(c.map(|m| m.chair_s)),
            cell(c.map(|m| m.chair_i)),
            cell(c.map(|m| m.recall)),
            c.map(|m| format!("{:.2}", m.mean_length))
                .unwrap_or_else(|| "-".into()),
        );
    }
}

fn finish(eval: &Evaluation, out: &ReportArgs) -> Result<(), EvrbError> {
    print_summary(eval);
    let files = emit_report(eval, &out.report, out.trace)?;
    println!("report written to {}", files.report_json.display());
    Ok(())
}

fn run(args: RunArgs) -> Result<(), EvrbError> {
    let model = build_model(args.seed, args.engine.knobs()?)?;
    let spec = SuiteSpec::new(args.seed, args.scenes, model.config().knobs.rho);
    let suite = generate_scene_suite(model.vocab(), model.pathology().popularity(), spec)?;
    let mut plan = plan(args.task.into(), args.mode, &args.engine);
    plan.options.keep_traces = args.out.trace;
    info!("evaluating {} scenes", suite.items.len());
    let eval = eval::evaluate(&model, &suite, &plan)?;
    finish(&eval, &args.out)
}

fn audit(args: AuditArgs) -> Result<(), EvrbError> {
    let knobs: Knobs = args.knobs.parse()?;
    let model = build_model(args.seed, knobs)?;
    let spec = SuiteSpec::new(args.seed, args.scenes, knobs.rho);
    let suite = generate_scene_suite(model.vocab(), model.pathology().popularity(), spec)?;
    let reports = eval::audit_suite(&model, &suite, args.tau)?;
    let ln_v = (model.vocab().len() as f64).ln();
    let hist = build_histogram(&reports, args.bin_width, ln_v)?;
    if let Some(parent) = args.hist_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| EvrbError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    hist.write_csv(&args.hist_csv)?;
    let (low, high) = entropy_mass(&reports, 0.5 * ln_v, 0.8 * ln_v);
    let clear: usize = reports.iter().map(|r| r.clear_positions.len()).sum();
    let total: usize = reports.iter().map(|r| r.entropies.len()).sum();
    println!(
        "{} visual tokens over {} scenes; threshold {}",
        total,
        reports.len(),
        args.tau
    );
    println!("clear {clear} ({:.3})", clear as f64 / total.max(1) as f64);
    println!("mass below 0.5 ln|V|: {low:.3}; above 0.8 ln|V|: {high:.3}");
    println!("{}", hist.summary_json());
    println!("histogram written to {}", args.hist_csv.display());
    Ok(())
}

fn load_suite(path: &Path) -> Result<SuiteFile, EvrbError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvrbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| EvrbError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn replay(args: ReplayArgs) -> Result<(), EvrbError> {
    let file = load_suite(&args.suite)?;
    let model = build_model(file.seed, args.engine.knobs()?)?;
    let suite = SceneSuite::from_file(&file, model.vocab())?;
    let mut plan = plan(args.task.into(), ModeArg::Both, &args.engine);
    plan.options.keep_traces = args.out.trace;
    let eval = eval::evaluate(&model, &suite, &plan)?;
    finish(&eval, &args.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::Audit(a) => audit(a),
        Command::Replay(a) => replay(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
