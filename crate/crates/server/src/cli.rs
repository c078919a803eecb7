//! Command line entry points for the whole pipeline.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use medcode::analysis::{
    attach_attributions, code_occurrences, code_profiles, gold_precision, mine_disagreements, per_group_f1,
    read_adjudications, recall_by_role, sample_cases, scaling_curve, validated_precision, DEFAULT_MIN_DEPARTMENT_SIZE,
};
use medcode::codesystem::{Code, CodeRange, CodeSystem};
use medcode::corpusgen::{
    default_profiles, generate_corpus, inject_undercoding, read_corpus, write_corpus, GeneratorConfig, PatientCourse,
    ProfileSet, UndercodingPolicy,
};
use medcode::explain::{explain_text, top_features};
use medcode::metrics::{calibrate_per_code, write_per_code_csv, EvalReport, ThresholdSearch, ZeroSupport};
use medcode::model::Checkpoint;
use medcode::pipeline::{apply_filters, assemble_document, split_corpus, subsample_training, FilterConfig};
use medcode::trainer::prepare_documents;
use medcode::workflow::{evaluate_checkpoint, fit, predictions, Evaluation, FitConfig, ThresholdChoice};

use crate::http::{self, AppState, ServerConfig, DEFAULT_BOUNDARY};

#[derive(Debug, Parser)]
#[command(name = "medcode", version, about = "Diagnosis coding from clinical text")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus as JSON Lines.
    Generate(GenerateArgs),
    /// Apply the cohort filters and report removals per stage.
    Preprocess(PreprocessArgs),
    /// Patient-level train/validation/test split.
    Split(SplitArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test corpus.
    Evaluate(EvaluateArgs),
    /// Detection against gold labels as the decision boundary moves.
    Calibrate(CalibrateArgs),
    /// Post-hoc analyses of a trained model.
    Analyze(AnalyzeArgs),
    /// Token attributions for one code on one text.
    Explain(ExplainArgs),
    /// Run the HTTP review service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Profile set JSON; the built-in profiles when omitted.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// Generator configuration JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_chars: Option<usize>,
    #[arg(long)]
    pub max_chars: Option<usize>,
    /// Drop secondary occurrences of a code from the recorded labels, e.g. `X60=0.6`.
    #[arg(long, value_parser = parse_undercode)]
    pub undercode: Vec<(Code, f64)>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub filter_config: Option<PathBuf>,
    /// Code-system TSV, or `builtin`; enables the invalid-code stage.
    #[arg(long)]
    pub code_system: Option<String>,
    /// Where to write the filter report; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write nested training subsets of these sizes.
    #[arg(long, value_delimiter = ',')]
    pub subsample: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Fit configuration JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Where to write the training history; stdout when omitted.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ZeroSupportArg {
    Exclude,
    Zero,
}

impl From<ZeroSupportArg> for ZeroSupport {
    fn from(z: ZeroSupportArg) -> Self {
        match z {
            ZeroSupportArg::Exclude => ZeroSupport::Exclude,
            ZeroSupportArg::Zero => ZeroSupport::CountAsZero,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelEvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Validation corpus, used to tune the threshold.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value = "5", value_parser = ["3", "5"])]
    pub level: String,
    /// `auto` tunes on the validation corpus; otherwise a value in (0, 1].
    #[arg(long, default_value = "auto", value_parser = parse_threshold)]
    pub threshold: ThresholdChoice,
    #[arg(long, value_enum, default_value_t = ZeroSupportArg::Exclude)]
    pub zero_support: ZeroSupportArg,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub eval: ModelEvalArgs,
    /// Training corpus for the per-code secondary share; the test corpus when omitted.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub per_code_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// A code or code range such as `X60-X84`.
    #[arg(long, value_parser = parse_range)]
    pub range: CodeRange,
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5])]
    pub boundaries: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Analysis {
    Specialty,
    Profiles,
    Roles,
    Disagreements,
    Scaling,
    Adjudications,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, value_enum)]
    pub what: Analysis,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value = "auto", value_parser = parse_threshold)]
    pub threshold: ThresholdChoice,
    #[arg(long, default_value_t = DEFAULT_MIN_DEPARTMENT_SIZE)]
    pub min_department_size: usize,
    /// Cut-off for recall by diagnosis role.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, value_parser = parse_range)]
    pub range: Option<CodeRange>,
    #[arg(long, default_value_t = DEFAULT_BOUNDARY)]
    pub boundary: f64,
    /// Draw this many mined cases for review.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluation report per training size, e.g. `500=reports/500.json`.
    #[arg(long = "report", value_parser = parse_sized_path)]
    pub reports: Vec<(usize, PathBuf)>,
    #[arg(long, default_value_t = 0.02)]
    pub epsilon: f64,
    /// Adjudication log (JSON Lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Long-format CSV for the specialty, profiles and scaling analyses.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub code: Code,
    #[arg(long, conflicts_with_all = ["text_file", "patient"])]
    pub text: Option<String>,
    #[arg(long, conflicts_with = "patient")]
    pub text_file: Option<PathBuf>,
    /// Explain a patient from `--corpus`.
    #[arg(long, requires = "corpus")]
    pub patient: Option<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Print only the strongest tokens.
    #[arg(long)]
    pub top: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Patients for the review queue and adjudication.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Code-system TSV, or `builtin`.
    #[arg(long, default_value = "builtin")]
    pub code_system: String,
    #[arg(long, default_value = "adjudications.jsonl")]
    pub log: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "MEDCODE_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Code ranges mined for the queue; every code separately when omitted.
    #[arg(long = "queue-range", value_parser = parse_range)]
    pub queue_ranges: Vec<CodeRange>,
    #[arg(long, default_value_t = DEFAULT_BOUNDARY)]
    pub boundary: f64,
}

fn parse_threshold(s: &str) -> Result<ThresholdChoice, String> {
    if s == "auto" {
        return Ok(ThresholdChoice::Auto(ThresholdSearch::default()));
    }
    let t: f64 = s.parse().map_err(|_| format!("expected `auto` or a number, got `{s}`"))?;
    if !(t > 0.0 && t <= 1.0) {
        return Err(format!("threshold {t} outside (0, 1]"));
    }
    Ok(ThresholdChoice::Fixed(t))
}

fn parse_range(s: &str) -> Result<CodeRange, String> {
    s.parse::<CodeRange>().map_err(|e| e.to_string())
}

fn parse_undercode(s: &str) -> Result<(Code, f64), String> {
    let (code, p) = s.split_once('=').ok_or("expected CODE=PROBABILITY")?;
    let code = Code::parse(code).map_err(|e| e.to_string())?;
    let p: f64 = p.parse().map_err(|_| format!("bad probability `{p}`"))?;
    Ok((code, p))
}

fn parse_sized_path(s: &str) -> Result<(usize, PathBuf), String> {
    let (n, path) = s.split_once('=').ok_or("expected SIZE=PATH")?;
    let n = n.parse().map_err(|_| format!("bad size `{n}`"))?;
    Ok((n, PathBuf::from(path)))
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Pretty JSON to `path`, or to stdout.
fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut out = io::stdout().lock();
            writeln!(out, "{text}")?;
        }
    }
    Ok(())
}

fn corpus(path: &Path) -> Result<Vec<PatientCourse>> {
    read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn code_system(arg: &str) -> Result<CodeSystem> {
    if arg == "builtin" {
        return Ok(CodeSystem::builtin());
    }
    CodeSystem::load(arg).with_context(|| format!("loading code system {arg}"))
}

fn required<'a>(opt: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    opt.as_deref().ok_or_else(|| anyhow!("--{flag} is required for this analysis"))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Analyze(a) => analyze(a),
        Command::Explain(a) => explain(a),
        Command::Serve(a) => serve(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let profiles = match &a.profiles {
        Some(p) => ProfileSet::load(p).with_context(|| format!("loading profiles {}", p.display()))?.profiles,
        None => default_profiles(),
    };
    let mut cfg: GeneratorConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(n) = a.n {
        cfg.n_patients = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(c) = a.min_chars {
        cfg.min_chars = c;
    }
    if let Some(c) = a.max_chars {
        cfg.max_chars = c;
    }
    let mut corpus = generate_corpus(&profiles, &cfg)?;
    if !a.undercode.is_empty() {
        let policy = UndercodingPolicy {
            per_code_drop: a.undercode.into_iter().collect(),
            never_drop_primary: true,
        };
        corpus = inject_undercoding(corpus, &policy, cfg.seed)?;
    }
    write_corpus(&corpus, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    tracing::info!(patients = corpus.len(), out = %a.out.display(), "corpus written");
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let cfg: FilterConfig = match &a.filter_config {
        Some(p) => read_json(p)?,
        None => FilterConfig::default(),
    };
    let cs = a.code_system.as_deref().map(code_system).transpose()?;
    let (survivors, report) = apply_filters(corpus(&a.input)?, &cfg, cs.as_ref())?;
    write_corpus(&survivors, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    emit(&report, a.report.as_deref())
}

fn split(a: SplitArgs) -> Result<()> {
    let fractions = (a.fractions[0], a.fractions[1], a.fractions[2]);
    let [train, val, test] = split_corpus(corpus(&a.input)?, fractions, a.seed)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        write_corpus(part, a.out_dir.join(format!("{name}.jsonl")))?;
    }
    for (size, subset) in a.subsample.iter().zip(subsample_training(&train, &a.subsample, a.seed)?) {
        write_corpus(&subset, a.out_dir.join(format!("train_{size}.jsonl")))?;
    }
    emit(
        &serde_json::json!({"train": train.len(), "val": val.len(), "test": test.len(), "subsets": a.subsample}),
        None,
    )
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: FitConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => FitConfig::default(),
    };
    let t = &mut cfg.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.learning_rate = a.lr.unwrap_or(t.learning_rate);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.early_stop_patience = a.patience.unwrap_or(t.early_stop_patience);
    t.seed = a.seed.unwrap_or(t.seed);
    let arch = &mut cfg.architecture;
    arch.embed_dim = a.embed_dim.unwrap_or(arch.embed_dim);
    arch.encoder_layers = a.layers.unwrap_or(arch.encoder_layers);
    arch.attention_heads = a.heads.unwrap_or(arch.attention_heads);
    let (train, val) = (corpus(&a.train)?, corpus(&a.val)?);
    let (ck, history) = fit(&train, &val, &cfg, |e| {
        tracing::info!(
            epoch = e.epoch,
            train_loss = e.train_loss,
            validation_map = e.validation_map,
            improved = e.improved,
            "epoch finished"
        );
    })?;
    ck.save(&a.out).with_context(|| format!("writing checkpoint {}", a.out.display()))?;
    emit(&history, a.history.as_deref())
}

fn run_evaluation(e: &ModelEvalArgs) -> Result<(Checkpoint, Vec<PatientCourse>, Evaluation)> {
    let ck = checkpoint(&e.checkpoint)?;
    let val = match (&e.val, e.threshold) {
        (Some(p), _) => corpus(p)?,
        (None, ThresholdChoice::Fixed(_)) => Vec::new(),
        (None, ThresholdChoice::Auto(_)) => bail!("--threshold auto needs --val"),
    };
    let test = corpus(&e.test)?;
    let level = if e.level == "3" { 3 } else { 5 };
    let eval = evaluate_checkpoint(&ck, &val, &test, e.threshold, level, e.zero_support.into())?;
    if eval.kept.len() < test.len() {
        tracing::warn!(
            skipped = test.len() - eval.kept.len(),
            "test cases without any code of the label space were left out"
        );
    }
    Ok((ck, test, eval))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (_, test, eval) = run_evaluation(&a.eval)?;
    if let Some(path) = &a.per_code_csv {
        let reference = match &a.train {
            Some(p) => corpus(p)?,
            None => test,
        };
        let occ = code_occurrences(&reference);
        let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
        write_per_code_csv(
            &eval.report,
            |code| {
                let code = Code::parse(code).ok()?;
                let matching: Vec<_> = occ
                    .iter()
                    .filter(|(c, _)| c.category() == code || **c == code)
                    .map(|(_, o)| *o)
                    .collect();
                let count: usize = matching.iter().map(|o| o.count).sum();
                let secondary: usize = matching.iter().map(|o| o.secondary).sum();
                (count > 0).then(|| secondary as f64 / count as f64)
            },
            BufWriter::new(file),
        )?;
    }
    emit(&eval.report, a.out.as_deref())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let ck = checkpoint(&a.checkpoint)?;
    let set = predictions(&ck, &corpus(&a.test)?)?;
    let curve = calibrate_per_code(&set, &ck.labels, &a.range, &a.boundaries)?;
    emit(&curve, a.out.as_deref())
}

fn eval_args(a: &AnalyzeArgs) -> Result<ModelEvalArgs> {
    Ok(ModelEvalArgs {
        checkpoint: required(&a.checkpoint, "checkpoint")?.to_path_buf(),
        val: a.val.clone(),
        test: required(&a.test, "test")?.to_path_buf(),
        level: "5".into(),
        threshold: a.threshold,
        zero_support: ZeroSupportArg::Exclude,
    })
}

fn write_csv<R: Serialize>(rows: &[R], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct DepartmentRow<'a> {
    specialty: &'a str,
    department: &'a str,
    examples: usize,
    f1_micro: f64,
    specialty_median_f1: f64,
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let out = a.out.as_deref();
    match a.what {
        Analysis::Specialty => {
            let (_, test, eval) = run_evaluation(&eval_args(&a)?)?;
            let groups: Vec<(String, String)> = eval
                .kept
                .iter()
                .map(|&i| (test[i].specialty.clone(), test[i].department()))
                .collect();
            let result = per_group_f1(&eval.test, &groups, eval.threshold, a.min_department_size)?;
            if let Some(path) = &a.csv {
                let rows: Vec<DepartmentRow> = result
                    .iter()
                    .flat_map(|s| {
                        s.departments.iter().map(move |d| DepartmentRow {
                            specialty: &s.specialty,
                            department: &d.department,
                            examples: d.examples,
                            f1_micro: d.f1_micro,
                            specialty_median_f1: s.median_f1,
                        })
                    })
                    .collect();
                write_csv(&rows, path)?;
            }
            emit(&serde_json::json!({"threshold": eval.threshold, "specialties": result}), out)
        }
        Analysis::Profiles => {
            let train = corpus(required(&a.train, "train")?)?;
            let (_, _, eval) = run_evaluation(&eval_args(&a)?)?;
            let profiles = code_profiles(&train, &eval.report)?;
            if let Some(path) = &a.csv {
                write_csv(&profiles.profiles, path)?;
            }
            emit(&profiles, out)
        }
        Analysis::Roles => {
            let ck = checkpoint(required(&a.checkpoint, "checkpoint")?)?;
            let mut set = predictions(&ck, &corpus(required(&a.test, "test")?)?)?;
            set.examples.retain(|ex| !ex.labels.is_empty());
            emit(&recall_by_role(&set, a.k), out)
        }
        Analysis::Disagreements => {
            let ck = checkpoint(required(&a.checkpoint, "checkpoint")?)?;
            let range = a.range.as_ref().ok_or_else(|| anyhow!("--range is required for this analysis"))?;
            let test = corpus(required(&a.test, "test")?)?;
            let docs = prepare_documents(&test, &ck.vocabulary, &ck.labels, ck.tokenizer);
            let set = predictions(&ck, &test)?;
            let ids: Vec<String> = test.iter().map(|p| p.id.clone()).collect();
            let mined = mine_disagreements(&set, &ids, &ck.labels, range, a.boundary)?;
            let mut cases = match a.sample {
                Some(n) => sample_cases(&mined, n, a.seed),
                None => mined.clone(),
            };
            attach_attributions(&mut cases, &ck.model, &docs, &ck.labels)?;
            emit(
                &serde_json::json!({
                    "range": range.to_string(),
                    "boundary": a.boundary,
                    "mined": mined.len(),
                    "gold_precision": gold_precision(&mined),
                    "cases": cases,
                }),
                out,
            )
        }
        Analysis::Scaling => {
            if a.reports.is_empty() {
                bail!("--report SIZE=PATH is required for this analysis");
            }
            let entries = a
                .reports
                .iter()
                .map(|(n, p)| Ok((*n, read_json::<EvalReport>(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let curve = scaling_curve(&entries, a.epsilon);
            if let Some(path) = &a.csv {
                let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
                curve.write_long_csv(BufWriter::new(file))?;
            }
            emit(&curve, out)
        }
        Analysis::Adjudications => {
            let log = read_adjudications(required(&a.log, "log")?)?;
            emit(&validated_precision(&log), out)
        }
    }
}

fn explain(a: ExplainArgs) -> Result<()> {
    let ck = checkpoint(&a.checkpoint)?;
    let text = match (&a.text, &a.text_file, &a.patient) {
        (Some(t), _, _) => t.clone(),
        (_, Some(p), _) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        (_, _, Some(id)) => {
            let corpus = corpus(a.corpus.as_deref().expect("clap enforces --corpus"))?;
            let patient = corpus
                .iter()
                .find(|p| &p.id == id)
                .ok_or_else(|| anyhow!("patient {id} not found"))?;
            assemble_document(patient).text
        }
        _ => bail!("one of --text, --text-file or --patient is required"),
    };
    let map = explain_text(&ck, &text, &a.code)?;
    match a.top {
        Some(k) => emit(&serde_json::json!({"code": map.code, "tokens": top_features(&map, k)}), None),
        None => emit(&map, None),
    }
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = ServerConfig {
        checkpoint: a.checkpoint.as_deref().map(checkpoint).transpose()?,
        code_system: Some(code_system(&a.code_system)?),
        corpus: a.corpus.as_deref().map(corpus).transpose()?.unwrap_or_default(),
        queue_ranges: a.queue_ranges,
        boundary: a.boundary,
        log_path: a.log,
    };
    let state = Arc::new(AppState::new(cfg)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        tracing::info!(addr = %listener.local_addr()?, queue = state.queue_len(), "serving");
        http::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
