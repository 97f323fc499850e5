//! The `rtgrasp` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rtgrasp_core::augment::AugmentationConfig;
use rtgrasp_core::client::{ClientError, ModelClient};
use rtgrasp_core::cornell::{load_dataset, split_folds, CategoryMap, FoldAssignment, IngestError, SplitMode};
use rtgrasp_core::dataset::{build_dataset, eval_samples, fold_records, read_jsonl, BuildOptions, DatasetError};
use rtgrasp_core::eval::{aggregate, evaluate_fold, format_table, ConfigFingerprint, EvalSummary, FoldReport, MockModel};
use rtgrasp_core::geometry::{rect_to_pose, GraspPose, MetricThresholds};
use rtgrasp_core::parser::parse_pose;
use rtgrasp_core::session::RefinementSession;
use rtgrasp_core::templates::{author_templates, lint_bank, load_template_bank, AnswerVariant, TemplateBank, TemplateError};
use rtgrasp_core::training::{Strategy, TrainingConfig};

use crate::endpoint::{ConfigError, EndpointConfig, HttpModelClient, ENV_IMAGE_ROOT};
use crate::server::{router, AppState, DisplayDims, ImageIndex, ServiceConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input: flags, files, configuration. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// I/O or endpoint failure. Exit code 2.
    #[error("{0}")]
    Infra(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Infra(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io(_) => Self::Infra(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<TemplateError> for CliError {
    fn from(e: TemplateError) -> Self {
        match e {
            TemplateError::Io(_) => Self::Infra(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(_) | DatasetError::Image { .. } => Self::Infra(e.to_string()),
            DatasetError::Template(t) => t.into(),
            DatasetError::Split(s) => s.into(),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Contract(_) | ClientError::ImageTooLarge { .. } => Self::Validation(e.to_string()),
            _ => Self::Infra(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Infra(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "rtgrasp", version, about = "Grasp dataset building, evaluation and refinement tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Augment a Cornell root and write dataset.jsonl plus images/.
    BuildDataset(BuildArgs),
    /// Print a k-fold assignment of a Cornell root as JSON.
    Split(SplitArgs),
    /// Evaluate the configured model endpoint on a built dataset.
    Eval(EvalArgs),
    /// Evaluate a built-in test double on a built dataset.
    MockEval(MockEvalArgs),
    /// Author or check reasoning template banks.
    #[command(subcommand)]
    Templates(TemplatesCommand),
    /// Write fine-tuning hyperparameters as JSON.
    ExportTrainConfig(TrainConfigArgs),
    /// Run the prediction and refinement service.
    Serve(ServeArgs),
    /// Interactive refinement chat in the terminal.
    Refine(RefineArgs),
}

#[derive(Debug, Args)]
struct RootArgs {
    /// Cornell dataset root (defaults to $RTG_IMAGE_ROOT).
    #[arg(long)]
    root: Option<PathBuf>,
    /// Object id to category map (JSON); the bundled map is used otherwise.
    #[arg(long)]
    categories: Option<PathBuf>,
}

impl RootArgs {
    fn root(&self) -> Result<PathBuf, CliError> {
        self.root
            .clone()
            .or_else(|| std::env::var_os(ENV_IMAGE_ROOT).map(PathBuf::from))
            .ok_or_else(|| CliError::Validation(format!("no --root given and {ENV_IMAGE_ROOT} is not set")))
    }

    fn category_map(&self) -> Result<CategoryMap, CliError> {
        Ok(match &self.categories {
            Some(p) => CategoryMap::load(p)?,
            None => CategoryMap::seed(),
        })
    }
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[command(flatten)]
    root: RootArgs,
    #[arg(long)]
    out: PathBuf,
    /// Template bank JSON; the bundled bank is used otherwise.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = 86)]
    per_image: usize,
    #[arg(long, default_value_t = 224)]
    output_size: u32,
    /// Square crop side before resizing; 0 crops the shorter image side.
    #[arg(long, default_value_t = 300)]
    crop_size: u32,
    #[arg(long, default_value = "full")]
    variant: AnswerVariant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Accept templates that have not been reviewed.
    #[arg(long)]
    allow_unreviewed: bool,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[command(flatten)]
    root: RootArgs,
    #[arg(long, default_value = "image-wise")]
    mode: SplitMode,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the assignment here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitChoice {
    ImageWise,
    ObjectWise,
    Both,
}

impl SplitChoice {
    fn modes(self) -> Vec<SplitMode> {
        match self {
            Self::ImageWise => vec![SplitMode::ImageWise],
            Self::ObjectWise => vec![SplitMode::ObjectWise],
            Self::Both => vec![SplitMode::ImageWise, SplitMode::ObjectWise],
        }
    }
}

#[derive(Debug, Args)]
struct EvalOptions {
    /// dataset.jsonl produced by build-dataset.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "image-wise")]
    split: SplitChoice,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[arg(long, default_value_t = 0.25)]
    min_iou: f64,
    #[arg(long, default_value_t = 30.0)]
    max_angle: f64,
    /// Directory for per-fold reports and the summary.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    eval: EvalOptions,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MockKind {
    Oracle,
    Gibberish,
    Constant,
}

#[derive(Debug, Args)]
struct MockEvalArgs {
    #[arg(long, value_enum)]
    mode: MockKind,
    /// Pose answered by the constant double, as "x,y,theta".
    #[arg(long, default_value = "0.5,0.5,0")]
    pose: String,
    #[command(flatten)]
    eval: EvalOptions,
}

#[derive(Debug, Subcommand)]
enum TemplatesCommand {
    /// Draft and refine reasoning templates with the configured endpoint.
    Generate(GenerateArgs),
    /// Validate a bank and list review findings.
    Lint(LintArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Category to author; repeat for several. Defaults to every category
    /// in the category map.
    #[arg(long = "category")]
    categories: Vec<String>,
    #[arg(long = "categories")]
    category_map: Option<PathBuf>,
    /// Bank to extend.
    #[arg(long)]
    existing: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    per_category: usize,
    #[arg(long)]
    out: PathBuf,
    /// Review checklist output (JSON).
    #[arg(long)]
    checklist: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LintArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    categories: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainConfigArgs {
    #[arg(long)]
    strategy: Strategy,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[command(flatten)]
    root: RootArgs,
    /// Serve the records of a built dataset instead of a Cornell root.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Fold assignment JSON from `split`.
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Directory for session files.
    #[arg(long)]
    sessions: Option<PathBuf>,
    #[arg(long, default_value_t = 150.0)]
    display_w: f64,
    #[arg(long, default_value_t = 60.0)]
    display_plate: f64,
    /// Answer with a test double instead of the configured endpoint.
    #[arg(long, value_enum)]
    mock: Option<MockKind>,
}

#[derive(Debug, Args)]
struct RefineArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = crate::server::DEFAULT_INSTRUCTION)]
    instruction: String,
    /// Save the finished session here.
    #[arg(long)]
    session_out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::BuildDataset(a) => cmd_build(a),
        Command::Split(a) => cmd_split(a),
        Command::Eval(a) => {
            let client = HttpModelClient::new(EndpointConfig::from_env()?)?;
            cmd_eval(&client, &a.eval)
        }
        Command::MockEval(a) => {
            let client = mock_for_dataset(&a)?;
            cmd_eval(&client, &a.eval)
        }
        Command::Templates(TemplatesCommand::Generate(a)) => cmd_generate(a),
        Command::Templates(TemplatesCommand::Lint(a)) => cmd_lint(a),
        Command::ExportTrainConfig(a) => cmd_train_config(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Refine(a) => cmd_refine(a),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, format!("{text}\n")).map_err(io_err(p)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_build(a: BuildArgs) -> Result<(), CliError> {
    let cmap = a.root.category_map()?;
    let loaded = load_dataset(&a.root.root()?, &cmap)?;
    let bank = match &a.templates {
        Some(p) => load_template_bank(p, &cmap)?.0,
        None => TemplateBank::seed(),
    };
    let opts = BuildOptions {
        augmentation: AugmentationConfig {
            per_image_count: a.per_image,
            output_size: a.output_size,
            crop_size: (a.crop_size > 0).then_some(a.crop_size),
            seed: a.seed,
            ..AugmentationConfig::default()
        },
        variant: a.variant,
        allow_unreviewed: a.allow_unreviewed,
    };
    let report = build_dataset(&loaded.samples, &bank, &opts, &a.out)?;
    let summary = serde_json::json!({
        "samples": loaded.samples.len(),
        "records": report.records,
        "dropped_variants": report.dropped_variants,
        "dropped_rectangles": loaded.report.dropped_invalid + loaded.report.dropped_nonfinite,
        "warnings": loaded.report.warnings,
        "dataset": report.dataset_path,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<(), CliError> {
    let loaded = load_dataset(&a.root.root()?, &a.root.category_map()?)?;
    let folds = split_folds(&loaded.samples, a.mode, a.k, a.seed)?;
    write_or_print(a.out.as_deref(), &folds.to_json())
}

fn parse_pose_arg(s: &str) -> Result<GraspPose, CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Validation(format!("--pose {s:?}: {e}")))?;
    match parts[..] {
        [x, y, t] => GraspPose::new(x, y, t).map_err(|e| CliError::Validation(format!("--pose: {e}"))),
        _ => Err(CliError::Validation(format!("--pose {s:?} needs three numbers"))),
    }
}

fn mock_for_dataset(a: &MockEvalArgs) -> Result<MockModel, CliError> {
    Ok(match a.mode {
        MockKind::Oracle => {
            let records = read_jsonl(&a.eval.dataset)?;
            MockModel::oracle(records.into_iter().map(|r| (r.id, r.pose)).collect())
        }
        MockKind::Gibberish => MockModel::gibberish(),
        MockKind::Constant => MockModel::constant(parse_pose_arg(&a.pose)?),
    })
}

fn mode_key(mode: SplitMode) -> String {
    mode.to_string()
}

fn cmd_eval(client: &dyn ModelClient, o: &EvalOptions) -> Result<(), CliError> {
    let th = MetricThresholds::new(o.min_iou, o.max_angle).map_err(|e| CliError::Validation(e.to_string()))?;
    if o.parallelism == 0 {
        return Err(CliError::Validation("--parallelism must be positive".into()));
    }
    let records = read_jsonl(&o.dataset)?;
    let dir = o.dataset.parent().unwrap_or(Path::new("."));
    let mut summaries: BTreeMap<String, EvalSummary> = BTreeMap::new();
    let mut infra = 0;
    for mode in o.split.modes() {
        let folds = fold_records(&records, mode, o.k, o.seed)?;
        let mut reports: Vec<FoldReport> = Vec::with_capacity(o.k);
        for (i, fold) in folds.iter().enumerate() {
            let r = evaluate_fold(client, i, &eval_samples(fold, dir), &th, o.parallelism)
                .map_err(|e| CliError::Validation(e.to_string()))?;
            log::info!("{mode} fold {i}: accuracy {:.4} ({} infra errors)", r.accuracy, r.infra_errors);
            infra += r.infra_errors;
            reports.push(r);
        }
        let fingerprint = ConfigFingerprint {
            min_iou: th.min_iou,
            max_angle_deg: th.max_angle_deg,
            seed: o.seed,
            model_id: client.model_id(),
            k: o.k,
        };
        let summary = aggregate(&reports, mode, fingerprint).map_err(|e| CliError::Validation(e.to_string()))?;
        if let Some(out) = &o.out {
            std::fs::create_dir_all(out).map_err(io_err(out))?;
            for r in &reports {
                let p = out.join(format!("{}-fold{}.json", mode_key(mode), r.fold_index));
                std::fs::write(&p, r.to_json()).map_err(io_err(&p))?;
            }
        }
        summaries.insert(mode_key(mode), summary);
    }
    let text = serde_json::to_string_pretty(&summaries).expect("json");
    if let Some(out) = &o.out {
        let p = out.join("summary.json");
        std::fs::write(&p, &text).map_err(io_err(&p))?;
    }
    let row = (
        client.model_id(),
        summaries.get(&mode_key(SplitMode::ImageWise)).cloned(),
        summaries.get(&mode_key(SplitMode::ObjectWise)).cloned(),
    );
    eprint!("{}", format_table(&[row]));
    println!("{text}");
    if infra > 0 && infra == records.len() * summaries.len() {
        return Err(CliError::Infra(format!("every request failed ({infra} infra errors)")));
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<(), CliError> {
    let client = HttpModelClient::new(EndpointConfig::from_env()?)?;
    let cmap = match &a.category_map {
        Some(p) => CategoryMap::load(p)?,
        None => CategoryMap::seed(),
    };
    let categories = if a.categories.is_empty() {
        cmap.categories().into_iter().map(str::to_string).collect()
    } else {
        a.categories.clone()
    };
    let existing = match &a.existing {
        Some(p) => TemplateBank::from_json(&std::fs::read_to_string(p).map_err(io_err(p))?)?,
        None => TemplateBank {
            reasoning: BTreeMap::new(),
            ..TemplateBank::seed()
        },
    };
    let outcome = author_templates(&client, &categories, &existing, a.per_category);
    std::fs::write(&a.out, outcome.bank.to_json()).map_err(io_err(&a.out))?;
    if let Some(p) = &a.checklist {
        let text = serde_json::to_string_pretty(&outcome.checklist).expect("json");
        std::fs::write(p, text).map_err(io_err(p))?;
    }
    println!("{}", serde_json::to_string_pretty(&outcome.status).expect("json"));
    let failed = outcome
        .status
        .values()
        .filter(|s| !matches!(s, rtgrasp_core::templates::AuthoringStatus::Refined))
        .count();
    if failed > 0 {
        return Err(CliError::Infra(format!("{failed} categories did not complete; partial bank written")));
    }
    eprintln!("bank written to {}; every new template is UNREVIEWED", a.out.display());
    Ok(())
}

fn cmd_lint(a: LintArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.bank).map_err(io_err(&a.bank))?;
    let bank = TemplateBank::from_json(&text)?;
    let mut findings = lint_bank(&bank);
    if let Some(p) = &a.categories {
        match bank.coverage(&CategoryMap::load(p)?) {
            Ok(report) => findings.extend(report.warnings),
            Err(e) => findings.push(e.to_string()),
        }
    }
    for f in &findings {
        println!("{f}");
    }
    if findings.is_empty() {
        println!("ok");
        Ok(())
    } else {
        Err(CliError::Validation(format!("{} finding(s)", findings.len())))
    }
}

fn cmd_train_config(a: TrainConfigArgs) -> Result<(), CliError> {
    write_or_print(a.out.as_deref(), &TrainingConfig::for_strategy(a.strategy).to_json())
}

fn load_folds(path: Option<&Path>) -> Result<Option<FoldAssignment>, CliError> {
    path.map(|p| {
        let text = std::fs::read_to_string(p).map_err(io_err(p))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))
    })
    .transpose()
}

fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let folds = load_folds(a.folds.as_deref())?;
    let index = match &a.dataset {
        Some(d) => {
            let records = read_jsonl(d)?;
            ImageIndex::from_records(&records, d.parent().unwrap_or(Path::new(".")), folds.as_ref())
        }
        None => {
            let loaded = load_dataset(&a.root.root()?, &a.root.category_map()?)?;
            ImageIndex::from_cornell(&loaded.samples, folds.as_ref())
        }
    };
    let client: Arc<dyn ModelClient> = match a.mock {
        None => Arc::new(HttpModelClient::new(EndpointConfig::from_env()?)?),
        Some(MockKind::Oracle) => {
            let poses = index
                .ids()
                .filter_map(|id| {
                    let e = index.get(id)?;
                    let p = rect_to_pose(e.gt_rects.first()?, e.width as f64, e.height as f64).ok()?;
                    Some((id.to_string(), p))
                })
                .collect();
            Arc::new(MockModel::oracle(poses))
        }
        Some(MockKind::Gibberish) => Arc::new(MockModel::gibberish()),
        Some(MockKind::Constant) => Arc::new(MockModel::constant(GraspPose::new(0.5, 0.5, 0.0).expect("valid"))),
    };
    let config = ServiceConfig {
        display: DisplayDims {
            w: a.display_w,
            plate_len: a.display_plate,
        },
        session_dir: a.sessions.clone(),
        ..ServiceConfig::default()
    };
    let state = AppState::new(index, client, config).map_err(|e| CliError::Infra(e.to_string()))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Infra(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| CliError::Infra(format!("binding {}: {e}", a.addr)))?;
        log::info!("serving {} images on http://{}", state.index.len(), a.addr);
        eprintln!("listening on http://{}", a.addr);
        axum::serve(listener, router(Arc::new(state)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Infra(e.to_string()))
    })
}

fn cmd_refine(a: RefineArgs) -> Result<(), CliError> {
    let client = HttpModelClient::new(EndpointConfig::from_env()?)?;
    let image = std::fs::read(&a.image).map_err(io_err(&a.image))?;
    let image_id = a.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let (reply, mut session) = RefinementSession::start(&client, "terminal", image_id, image.clone(), &a.instruction, now)?;
    show_reply(&reply);
    let stdin = std::io::stdin();
    loop {
        print!("> ");
        let _ = std::io::stdout().flush();
        let mut line = String::new();
        if stdin.lock().read_line(&mut line).map_err(|e| CliError::Infra(e.to_string()))? == 0 {
            break;
        }
        let line = line.trim();
        if line.is_empty() {
            break;
        }
        match session.refine(&client, image.clone(), line) {
            Ok((reply, next)) => {
                show_reply(&reply);
                session = next;
            }
            Err(e) => eprintln!("refinement failed, history kept: {e}"),
        }
    }
    if let Some(p) = &a.session_out {
        let text = serde_json::to_string_pretty(&session).expect("json");
        std::fs::write(p, text).map_err(io_err(p))?;
    }
    Ok(())
}

fn show_reply(reply: &str) {
    println!("{reply}");
    match parse_pose(reply).pose {
        Some(p) => println!("[pose x={:.3} y={:.3} theta={:.3}]", p.x, p.y, p.theta),
        None => println!("[no pose found]"),
    }
}
