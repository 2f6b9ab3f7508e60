//! `caiforge` — run the critique/revision pipelines, the preference-data
//! builder, the collapse cleaner, DPO training, and evaluation from one
//! binary.
//!
//! Exit codes: 0 success, 2 config/validation, 3 transport, 4 numeric.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use caiforge::collapse::{self, CleanAction};
use caiforge::config::{
    require_existing, require_seed, resolve_timestamp, ConfigError, FileConfig,
};
use caiforge::constitution::{self, ConstitutionError, ConstitutionSet};
use caiforge::datastore::{
    self, read_dataset, read_jsonl, write_dataset, write_json_doc, DatasetHeader, DatastoreError,
    SCHEMA_DPO_METRICS, SCHEMA_PREFERENCE_PAIRS, SCHEMA_SFT_EXPORT, SCHEMA_SFT_RECORDS,
};
use caiforge::dpo::{self, DpoError, MetricsRow, TinyPolicy, Vocab};
use caiforge::eval::{self, Candidate, EvalError, EvalQuestion, EvalReport};
use caiforge::gateway::{EndpointConfig, Gateway, GatewayError, GenParams, MockScript};
use caiforge::stage1::{self, PipelineError, RedTeamPrompt, SftRecord, Stage1Config};
use caiforge::stage2::{self, PreferencePair, Stage2Config};

#[derive(Parser)]
#[command(
    name = "caiforge",
    version,
    about = "Constitutional critique/revision data pipelines with a verifiable DPO kernel"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate critique-revision SFT records from a red-team corpus
    GenSft(GenSftArgs),
    /// Build an AI-feedback preference dataset from pairwise judgements
    GenPrefs(GenPrefsArgs),
    /// Scan (and optionally clean) revisions for degeneration signatures
    Clean(CleanArgs),
    /// Train the tiny tabular policy on a preference dataset
    TrainDpo(TrainDpoArgs),
    /// Evaluate attack success rate and helpfulness, with optional baseline deltas
    Eval(EvalArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file (flags override file values)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; mandatory here or in the config file
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fixed RFC 3339 run timestamp (default: SOURCE_DATE_EPOCH, then wall clock)
    #[arg(long)]
    timestamp: Option<String>,
    /// Swap every endpoint for the deterministic mock backend driven by this script
    #[arg(long)]
    mock_script: Option<PathBuf>,
}

#[derive(Args)]
struct GenSftArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Red-team prompt corpus: line-delimited JSON {id, text, source}
    #[arg(long)]
    corpus: PathBuf,
    /// Constitution file (default: config path, then the bundled set)
    #[arg(long)]
    constitution: Option<PathBuf>,
}

#[derive(Args)]
struct GenPrefsArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    constitution: Option<PathBuf>,
    /// Override the student endpoint base URL
    #[arg(long)]
    student_endpoint: Option<String>,
    /// Override the judge endpoint base URL
    #[arg(long)]
    judge_endpoint: Option<String>,
    /// Pin every pair to this preference principle instead of sampling
    #[arg(long)]
    principle_id: Option<String>,
}

#[derive(Args)]
struct CleanArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Stage-1 output dataset to scan
    #[arg(long)]
    input: PathBuf,
    /// Cleaned dataset path (ignored under flag_only)
    #[arg(long)]
    output: Option<PathBuf>,
    /// flag_only | strip_tail | drop (default: config, then strip_tail)
    #[arg(long)]
    action: Option<String>,
}

#[derive(Args)]
struct TrainDpoArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Preference-pair dataset (stage-2 output)
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Red-team question file: line-delimited JSON {id, turns:[...]}
    #[arg(long)]
    red_team: Option<PathBuf>,
    /// Helpfulness question file: line-delimited JSON {id, turns:[...]}
    #[arg(long)]
    helpfulness: Option<PathBuf>,
    /// Evaluate a trained tiny-policy checkpoint instead of an endpoint
    #[arg(long)]
    candidate_policy: Option<PathBuf>,
    /// Previous eval report to compute relative deltas against
    #[arg(long)]
    baseline_report: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Transport(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Transport(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Transport(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}
impl From<ConstitutionError> for CliError {
    fn from(e: ConstitutionError) -> Self {
        CliError::Config(e.to_string())
    }
}
impl From<DatastoreError> for CliError {
    fn from(e: DatastoreError) -> Self {
        CliError::Config(e.to_string())
    }
}
impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Precondition(_) => CliError::Config(e.to_string()),
            _ => CliError::Transport(e.to_string()),
        }
    }
}
impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Gateway { .. } | PipelineError::TooManyFailures { .. } => {
                CliError::Transport(e.to_string())
            }
            PipelineError::Constitution(inner) => CliError::Config(inner.to_string()),
            PipelineError::Datastore(inner) => CliError::Config(inner.to_string()),
            PipelineError::Precondition(_) => CliError::Config(e.to_string()),
        }
    }
}
impl From<DpoError> for CliError {
    fn from(e: DpoError) -> Self {
        match e {
            DpoError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}
impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Generation { .. } => CliError::Transport(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSft(args) => cmd_gen_sft(args),
        Command::GenPrefs(args) => cmd_gen_prefs(args),
        Command::Clean(args) => cmd_clean(args),
        Command::TrainDpo(args) => cmd_train_dpo(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}

struct Ctx {
    file: FileConfig,
    seed: u64,
    out_dir: PathBuf,
    timestamp: String,
    mock_script: Option<MockScript>,
}

fn context(common: &CommonArgs) -> Result<Ctx, CliError> {
    if let Some(path) = &common.config {
        require_existing("config", path)?;
    }
    let file = FileConfig::load_optional(common.config.as_deref())?;
    let seed = require_seed(&file, common.seed)?;
    let out_dir = common
        .out
        .clone()
        .or_else(|| file.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out_dir.display())))?;
    let mock_script = match &common.mock_script {
        Some(path) => {
            require_existing("mock script", path)?;
            Some(MockScript::from_file(path)?)
        }
        None => None,
    };
    Ok(Ctx {
        file,
        seed,
        out_dir,
        timestamp: resolve_timestamp(common.timestamp.as_deref()),
        mock_script,
    })
}

fn load_constitution(
    flag: Option<&Path>,
    ctx: &Ctx,
) -> Result<ConstitutionSet, CliError> {
    let path = flag.map(Path::to_path_buf).or_else(|| ctx.file.constitution.clone());
    match path {
        Some(p) => {
            require_existing("constitution", &p)?;
            Ok(constitution::load_constitution(&p)?)
        }
        None => Ok(ConstitutionSet::bundled_default()),
    }
}

fn student_gateway(ctx: &Ctx, concurrency: usize, url_override: Option<&str>) -> Result<Gateway, CliError> {
    endpoint_gateway(
        ctx,
        ctx.file.endpoints.student.clone(),
        url_override,
        "endpoints.student",
        "mock-student",
        concurrency,
    )
}

fn judge_gateway(ctx: &Ctx, concurrency: usize, url_override: Option<&str>) -> Result<Gateway, CliError> {
    endpoint_gateway(
        ctx,
        ctx.file.endpoints.judge.clone(),
        url_override,
        "endpoints.judge",
        "mock-judge",
        concurrency,
    )
}

fn endpoint_gateway(
    ctx: &Ctx,
    endpoint: Option<EndpointConfig>,
    url_override: Option<&str>,
    field: &str,
    mock_name: &str,
    concurrency: usize,
) -> Result<Gateway, CliError> {
    if let Some(script) = &ctx.mock_script {
        return Ok(Gateway::for_mock(script.clone(), mock_name, concurrency));
    }
    let mut endpoint = endpoint.ok_or_else(|| ConfigError::MissingField(field.to_string()))?;
    if let Some(url) = url_override {
        endpoint.base_url = url.to_string();
    }
    Ok(Gateway::for_endpoint(&endpoint)?)
}

fn read_corpus(path: &Path) -> Result<Vec<RedTeamPrompt>, CliError> {
    require_existing("corpus", path)?;
    let corpus: Vec<RedTeamPrompt> = read_jsonl(path)?;
    if corpus.is_empty() {
        return Err(CliError::Config(format!("corpus {} is empty", path.display())));
    }
    Ok(corpus)
}

fn config_digest<T: serde::Serialize>(value: &T) -> String {
    let json = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
    datastore::sha256_hex(datastore::canonical_json(&json).as_bytes())
}

fn cmd_gen_sft(args: GenSftArgs) -> Result<(), CliError> {
    let ctx = context(&args.common)?;
    let constitution = load_constitution(args.constitution.as_deref(), &ctx)?;
    let corpus = read_corpus(&args.corpus)?;

    let section = &ctx.file.stage1;
    let gateway = student_gateway(&ctx, section.concurrency, None)?;
    let mut config = Stage1Config::new(ctx.seed);
    config.gen_params = GenParams::new(section.temperature, section.max_tokens);
    config.rounds = section.rounds;
    config.linked_pairs = section.linked_pairs;
    config.concurrency = section.concurrency;
    config.started_at = ctx.timestamp.clone();
    config.max_failure_fraction = section.max_failure_fraction;
    config.partial_output_path = Some(ctx.out_dir.join("sft_records.partial.jsonl"));

    let (records, report) = stage1::run_stage1(&corpus, &constitution, &gateway, &config)?;
    let digest = config_digest(&(ctx.seed, section));

    let header = |schema| DatasetHeader::new(schema, &ctx.timestamp, "stage1_pipeline", &digest);
    let hash = write_dataset(
        &ctx.out_dir.join("sft_records.jsonl"),
        header(&SCHEMA_SFT_RECORDS),
        &records,
    )?;

    let split = stage1::split_dataset(&records, ctx.seed, section.train_ratio)?;
    write_dataset(&ctx.out_dir.join("sft_train.jsonl"), header(&SCHEMA_SFT_RECORDS), &split.train)?;
    write_dataset(&ctx.out_dir.join("sft_test.jsonl"), header(&SCHEMA_SFT_RECORDS), &split.test)?;
    let export = stage1::export_sft(&records);
    write_dataset(&ctx.out_dir.join("sft_export.jsonl"), header(&SCHEMA_SFT_EXPORT), &export)?;
    write_json_doc(&ctx.out_dir.join("stage1_report.json"), &report)?;

    println!(
        "gen-sft: {} records ({} failed) split {}/{}; content_hash {hash}",
        report.succeeded,
        report.failed,
        split.train.len(),
        split.test.len(),
    );
    Ok(())
}

fn cmd_gen_prefs(args: GenPrefsArgs) -> Result<(), CliError> {
    let ctx = context(&args.common)?;
    let constitution = load_constitution(args.constitution.as_deref(), &ctx)?;
    let corpus = read_corpus(&args.corpus)?;

    let section = &ctx.file.stage2;
    let student = student_gateway(&ctx, section.concurrency, args.student_endpoint.as_deref())?;
    let judge = judge_gateway(&ctx, section.concurrency, args.judge_endpoint.as_deref())?;

    let mut config = Stage2Config::new(ctx.seed);
    config.gen_params = GenParams::new(section.temperature, section.max_tokens);
    config.judge_params = GenParams::new(0.0, section.judge_max_tokens);
    config.concurrency = section.concurrency;
    config.principle_pin = args.principle_id.clone().or_else(|| section.principle_id.clone());
    config.split_ratio = section.train_ratio;
    config.split_seed = ctx.seed;
    config.started_at = ctx.timestamp.clone();
    config.max_failure_fraction = section.max_failure_fraction;

    let (pairs, report) = stage2::run_stage2(&corpus, &constitution, &student, &judge, &config)?;
    if pairs.is_empty() {
        eprintln!("warning: every pair was excluded as uncertain; writing an empty dataset");
    }

    let digest = config_digest(&(ctx.seed, section));
    let header = || DatasetHeader::new(&SCHEMA_PREFERENCE_PAIRS, &ctx.timestamp, "stage2_pipeline", &digest);
    let hash = write_dataset(&ctx.out_dir.join("preference_pairs.jsonl"), header(), &pairs)?;
    if !pairs.is_empty() {
        let split = stage1::split_dataset(&pairs, config.split_seed, config.split_ratio)?;
        write_dataset(&ctx.out_dir.join("pref_train.jsonl"), header(), &split.train)?;
        write_dataset(&ctx.out_dir.join("pref_test.jsonl"), header(), &split.test)?;
    }
    write_json_doc(&ctx.out_dir.join("stage2_report.json"), &report)?;

    println!(
        "gen-prefs: kept {} of {} ({} uncertain, fraction {:.4}) split {}/{}; content_hash {hash}",
        report.kept,
        report.total_pairs,
        report.uncertain_excluded,
        report.uncertain_fraction,
        report.train_size,
        report.test_size,
    );
    Ok(())
}

fn parse_action(raw: &str) -> Result<CleanAction, CliError> {
    match raw {
        "flag_only" => Ok(CleanAction::FlagOnly),
        "strip_tail" => Ok(CleanAction::StripTail),
        "drop" => Ok(CleanAction::Drop),
        other => Err(CliError::Config(format!(
            "unknown action {other:?}; expected flag_only | strip_tail | drop"
        ))),
    }
}

fn cmd_clean(args: CleanArgs) -> Result<(), CliError> {
    let ctx = context(&args.common)?;
    require_existing("input dataset", &args.input)?;
    let mut policy = ctx.file.clean.to_policy()?;
    if let Some(action) = &args.action {
        policy.action = parse_action(action)?;
    }

    let (_, mut records): (_, Vec<SftRecord>) = read_dataset(&args.input, SCHEMA_SFT_RECORDS)?;
    let report = collapse::scan_dataset(&mut records, &policy);

    if policy.action != CleanAction::FlagOnly {
        let output = args
            .output
            .clone()
            .unwrap_or_else(|| ctx.out_dir.join("sft_cleaned.jsonl"));
        let kept: Vec<SftRecord> = match policy.action {
            CleanAction::Drop => records
                .iter()
                .filter(|r| !report.dropped_ids.contains(&r.prompt.id))
                .cloned()
                .collect(),
            _ => records.clone(),
        };
        let digest = config_digest(&policy);
        let header = DatasetHeader::new(&SCHEMA_SFT_RECORDS, &ctx.timestamp, "collapse_guard", &digest);
        write_dataset(&output, header, &kept)?;
        // refresh the export alongside the cleaned records
        let export = stage1::export_sft(&kept);
        let export_header =
            DatasetHeader::new(&SCHEMA_SFT_EXPORT, &ctx.timestamp, "collapse_guard", &digest);
        write_dataset(&output.with_extension("export.jsonl"), export_header, &export)?;
    }
    write_json_doc(&ctx.out_dir.join("clean_report.json"), &report)?;

    println!(
        "clean: {} of {} flagged (rate {:.4}); cleaned {}, unresolved {}, dropped {}",
        report.flagged,
        report.total,
        report.flag_rate,
        report.cleaned,
        report.unresolved,
        report.dropped_ids.len(),
    );
    Ok(())
}

fn cmd_train_dpo(args: TrainDpoArgs) -> Result<(), CliError> {
    let ctx = context(&args.common)?;
    require_existing("input dataset", &args.input)?;
    let (_, pairs): (_, Vec<PreferencePair>) = read_dataset(&args.input, SCHEMA_PREFERENCE_PAIRS)?;
    if pairs.is_empty() {
        return Err(CliError::Config("preference dataset is empty".into()));
    }

    let section = &ctx.file.dpo;
    let texts: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.prompt.text.as_str(), p.chosen.as_str(), p.rejected.as_str()])
        .collect();
    let vocab = Vocab::new(dpo::build_vocab(texts, section.vocab_cap))?;
    let policy_init = if section.init_scale > 0.0 {
        TinyPolicy::seeded(vocab, ctx.seed, section.init_scale)
    } else {
        TinyPolicy::uniform(vocab)
    };

    let tokenized = dpo::tokenize_pairs(policy_init.vocab(), &pairs)?;
    let dpo_config = section.to_dpo_config();
    let (policy_final, metrics) = dpo::train_dpo(&policy_init, &tokenized, &dpo_config)?;

    policy_init.save(&ctx.out_dir.join("policy_init.json"))?;
    policy_final.save(&ctx.out_dir.join("policy_final.json"))?;
    let rows: Vec<MetricsRow> = metrics.iter().map(MetricsRow::from).collect();
    let digest = config_digest(&(ctx.seed, section));
    let header = DatasetHeader::new(&SCHEMA_DPO_METRICS, &ctx.timestamp, "dpo_kernel", &digest);
    write_dataset(&ctx.out_dir.join("dpo_metrics.jsonl"), header, &rows)?;

    let last = metrics.last().expect("at least one step");
    println!(
        "train-dpo: {} steps; final loss {:.6}, reward_accuracy {:.4}, grad_norm {:.6}",
        last.step, last.loss, last.reward_accuracy, last.grad_norm,
    );
    Ok(())
}

fn read_questions(path: Option<&Path>, what: &str) -> Result<Vec<EvalQuestion>, CliError> {
    match path {
        None => Ok(Vec::new()),
        Some(p) => {
            require_existing(what, p)?;
            let questions: Vec<EvalQuestion> = read_jsonl(p)?;
            if questions.is_empty() {
                return Err(CliError::Config(format!("{what} file {} is empty", p.display())));
            }
            Ok(questions)
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let ctx = context(&args.common)?;
    let red_team = read_questions(args.red_team.as_deref(), "red-team questions")?;
    let helpfulness = read_questions(args.helpfulness.as_deref(), "helpfulness questions")?;
    if red_team.is_empty() && helpfulness.is_empty() {
        return Err(CliError::Config(
            "nothing to evaluate: pass --red-team and/or --helpfulness".into(),
        ));
    }

    let section = &ctx.file.eval;
    let judge = judge_gateway(&ctx, section.concurrency, None)?;
    let mut config = eval::EvalConfig::new(ctx.seed);
    config.judge_params = GenParams::new(0.0, section.judge_max_tokens);
    config.concurrency = section.concurrency;

    let policy;
    let endpoint_gateway_holder;
    let candidate = match &args.candidate_policy {
        Some(path) => {
            require_existing("policy checkpoint", path)?;
            policy = TinyPolicy::load(path)?;
            Candidate::Policy {
                policy: &policy,
                seed: ctx.seed,
                max_tokens: section.policy_max_tokens,
            }
        }
        None => {
            endpoint_gateway_holder = student_gateway(&ctx, section.concurrency, None)?;
            Candidate::Endpoint {
                gateway: &endpoint_gateway_holder,
                params: GenParams::new(section.gen_temperature, section.gen_max_tokens),
            }
        }
    };

    let baseline = match &args.baseline_report {
        Some(path) => {
            require_existing("baseline report", path)?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let report: EvalReport =
                serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
            Some(report)
        }
        None => None,
    };

    let report = eval::run_eval(
        &red_team,
        &helpfulness,
        &candidate,
        &judge,
        &config,
        baseline.as_ref(),
    )?;
    write_json_doc(&ctx.out_dir.join("eval_report.json"), &report)?;
    print!("{}", eval::render_table(&report));
    Ok(())
}
