//! Supervised-stage data generation: red-team prompt → initial response →
//! self-critique → revision, one auditable record per prompt.
//!
//! Each record derives its own RNG seed from the run seed and the prompt id,
//! so content is independent of processing order and corpus subsets reproduce
//! identical records.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constitution::{ConstitutionError, ConstitutionSet, Principle, Stage};
use crate::datastore::{derive_seed, DatastoreError};
use crate::gateway::{Conversation, Gateway, GatewayError, GenParams, Message, Role};
use crate::parallel::map_ordered;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("prompt {prompt_id}: {source}")]
    Gateway {
        prompt_id: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Constitution(#[from] ConstitutionError),
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("{failed} of {total} prompts failed (>{limit_pct}%){}", partial_note(.partial_output))]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit_pct: u32,
        partial_output: Option<PathBuf>,
    },
}

fn partial_note(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!("; partial output at {}", p.display()),
        None => String::new(),
    }
}

/// One adversarial question from a red-team corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedTeamPrompt {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub model_name: String,
    pub started_at: String,
}

/// Full provenance for one critique–revision round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: RedTeamPrompt,
    pub initial_response: String,
    pub critique_principle_id: String,
    pub critique: String,
    pub revision_principle_id: String,
    pub revision: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cleaned_revision: Option<String>,
    pub run_meta: RunMeta,
}

#[derive(Debug, Clone)]
pub struct Stage1Config {
    pub seed: u64,
    pub gen_params: GenParams,
    /// Critique–revision rounds per prompt.
    pub rounds: usize,
    /// Use the revision rule linked to the sampled critique rule when one
    /// exists; otherwise sample revisions independently.
    pub linked_pairs: bool,
    pub concurrency: usize,
    pub started_at: String,
    /// Abort when more than this fraction of prompts fail.
    pub max_failure_fraction: f64,
    /// Where to dump completed records if the run aborts.
    pub partial_output_path: Option<PathBuf>,
}

impl Stage1Config {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            gen_params: GenParams::new(0.7, 512),
            rounds: 1,
            linked_pairs: true,
            concurrency: 4,
            started_at: "1970-01-01T00:00:00Z".to_string(),
            max_failure_fraction: 0.10,
            partial_output_path: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub failures: Vec<FailureEntry>,
    pub principle_usage: BTreeMap<String, usize>,
    pub empty_critiques: usize,
    pub noop_revisions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub prompt_id: String,
    pub error: String,
}

/// Ask the model the red-team question as a fresh single-turn conversation.
/// Returns the conversation grown with the assistant's answer.
pub fn generate_initial_response(
    prompt: &RedTeamPrompt,
    gateway: &Gateway,
    params: &GenParams,
) -> Result<(Conversation, String), PipelineError> {
    if prompt.text.trim().is_empty() {
        return Err(PipelineError::Precondition(format!(
            "prompt {} has empty text",
            prompt.id
        )));
    }
    let mut conv = Conversation::single_user(prompt.text.clone());
    let completion = gateway
        .complete_chat(&conv, params)
        .map_err(|source| PipelineError::Gateway { prompt_id: prompt.id.clone(), source })?;
    conv.push(Message::assistant(completion.text.clone()));
    Ok((conv, completion.text))
}

/// Continue the conversation with a critique instruction and return the
/// model's self-critique. Appends two messages to `conv`.
pub fn critique_response(
    conv: &mut Conversation,
    principle: &Principle,
    gateway: &Gateway,
    params: &GenParams,
) -> Result<String, PipelineError> {
    if principle.stage != Stage::Critique {
        return Err(PipelineError::Precondition(format!(
            "principle {} is not a critique rule",
            principle.id
        )));
    }
    if conv.last_role() != Some(Role::Assistant) {
        return Err(PipelineError::Precondition(
            "critique requires a conversation ending in an assistant message".into(),
        ));
    }
    continue_with_instruction(conv, principle, gateway, params)
}

/// Continue the conversation with a revision instruction and return the
/// revised answer. Appends two messages to `conv`.
pub fn revise_response(
    conv: &mut Conversation,
    principle: &Principle,
    gateway: &Gateway,
    params: &GenParams,
) -> Result<String, PipelineError> {
    if principle.stage != Stage::Revision {
        return Err(PipelineError::Precondition(format!(
            "principle {} is not a revision rule",
            principle.id
        )));
    }
    if conv.messages.len() < 4 {
        return Err(PipelineError::Precondition(
            "revision requires an initial response and a critique in the conversation".into(),
        ));
    }
    continue_with_instruction(conv, principle, gateway, params)
}

fn continue_with_instruction(
    conv: &mut Conversation,
    principle: &Principle,
    gateway: &Gateway,
    params: &GenParams,
) -> Result<String, PipelineError> {
    conv.push(Message::user(principle.text.clone()));
    let completion = gateway.complete_chat(conv, params).map_err(|source| {
        conv.messages.pop();
        PipelineError::Gateway { prompt_id: String::new(), source }
    })?;
    conv.push(Message::assistant(if completion.text.is_empty() {
        // keep the transcript well-formed; the record still stores the
        // empty critique verbatim
        " ".to_string()
    } else {
        completion.text.clone()
    }));
    Ok(completion.text)
}

struct RecordOutcome {
    record: Option<SftRecord>,
    error: Option<String>,
    empty_critique: bool,
    noop_revision: bool,
    principles_used: Vec<String>,
}

fn run_one_prompt(
    prompt: &RedTeamPrompt,
    constitution: &ConstitutionSet,
    gateway: &Gateway,
    config: &Stage1Config,
) -> Result<(SftRecord, Vec<String>, bool, bool), PipelineError> {
    let mut rng = ChaCha8Rng::from_seed(derive_seed(config.seed, &prompt.id));
    let (mut conv, initial_response) = generate_initial_response(prompt, gateway, &config.gen_params)?;

    let mut used = Vec::new();
    let mut critique_id = String::new();
    let mut revision_id = String::new();
    let mut critique_text = String::new();
    let mut revision_text = String::new();
    let mut empty_critique = false;

    for _ in 0..config.rounds.max(1) {
        let critique_rule = constitution.sample_principle(Stage::Critique, &mut rng)?.clone();
        let critique = critique_response(&mut conv, &critique_rule, gateway, &config.gen_params)
            .map_err(|e| attach_prompt(e, &prompt.id))?;
        if critique.trim().is_empty() {
            empty_critique = true;
        }

        let revision_rule = if config.linked_pairs {
            constitution.paired_revision_for(&critique_rule, &mut rng)?.clone()
        } else {
            constitution.sample_principle(Stage::Revision, &mut rng)?.clone()
        };
        let revision = revise_response(&mut conv, &revision_rule, gateway, &config.gen_params)
            .map_err(|e| attach_prompt(e, &prompt.id))?;

        used.push(critique_rule.id.clone());
        used.push(revision_rule.id.clone());
        critique_id = critique_rule.id;
        revision_id = revision_rule.id;
        critique_text = critique;
        revision_text = revision;
    }

    if revision_text.trim().is_empty() {
        return Err(PipelineError::Precondition(format!(
            "prompt {}: revision came back empty",
            prompt.id
        )));
    }

    let noop_revision = revision_text == initial_response;
    let record = SftRecord {
        prompt: prompt.clone(),
        initial_response,
        critique_principle_id: critique_id,
        critique: critique_text,
        revision_principle_id: revision_id,
        revision: revision_text,
        cleaned_revision: None,
        run_meta: RunMeta {
            seed: config.seed,
            model_name: gateway.model_name().to_string(),
            started_at: config.started_at.clone(),
        },
    };
    Ok((record, used, empty_critique, noop_revision))
}

fn attach_prompt(err: PipelineError, prompt_id: &str) -> PipelineError {
    match err {
        PipelineError::Gateway { source, .. } => {
            PipelineError::Gateway { prompt_id: prompt_id.to_string(), source }
        }
        other => other,
    }
}

/// Run the full supervised stage over a corpus. Failed prompts become report
/// entries, never silent drops; too many failures abort the run.
pub fn run_stage1(
    corpus: &[RedTeamPrompt],
    constitution: &ConstitutionSet,
    gateway: &Gateway,
    config: &Stage1Config,
) -> Result<(Vec<SftRecord>, Stage1Report), PipelineError> {
    if corpus.is_empty() {
        return Err(PipelineError::Precondition("empty prompt corpus".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for prompt in corpus {
        if !seen.insert(prompt.id.as_str()) {
            return Err(PipelineError::Precondition(format!(
                "duplicate prompt id {:?} in corpus",
                prompt.id
            )));
        }
    }

    let outcomes = map_ordered(corpus, config.concurrency, |_, prompt| {
        match run_one_prompt(prompt, constitution, gateway, config) {
            Ok((record, principles_used, empty_critique, noop_revision)) => RecordOutcome {
                record: Some(record),
                error: None,
                empty_critique,
                noop_revision,
                principles_used,
            },
            Err(err) => RecordOutcome {
                record: None,
                error: Some(err.to_string()),
                empty_critique: false,
                noop_revision: false,
                principles_used: Vec::new(),
            },
        }
    });

    let mut records = Vec::new();
    let mut report = Stage1Report { total: corpus.len(), ..Default::default() };
    for (prompt, outcome) in corpus.iter().zip(outcomes) {
        match outcome.record {
            Some(record) => {
                records.push(record);
                report.succeeded += 1;
                for id in outcome.principles_used {
                    *report.principle_usage.entry(id).or_default() += 1;
                }
                report.empty_critiques += usize::from(outcome.empty_critique);
                report.noop_revisions += usize::from(outcome.noop_revision);
            }
            None => {
                report.failed += 1;
                report.failures.push(FailureEntry {
                    prompt_id: prompt.id.clone(),
                    error: outcome.error.unwrap_or_default(),
                });
            }
        }
    }

    records.sort_by(|a, b| a.prompt.id.cmp(&b.prompt.id));

    if report.failed as f64 > config.max_failure_fraction * report.total as f64 {
        let partial_output = config.partial_output_path.clone().and_then(|path| {
            let header = crate::datastore::DatasetHeader::new(
                &crate::datastore::SCHEMA_SFT_RECORDS,
                &config.started_at,
                "stage1_pipeline",
                "partial",
            );
            crate::datastore::write_dataset(&path, header, &records).ok().map(|_| path)
        });
        return Err(PipelineError::TooManyFailures {
            failed: report.failed,
            total: report.total,
            limit_pct: (config.max_failure_fraction * 100.0).round() as u32,
            partial_output,
        });
    }

    Ok((records, report))
}

/// Seeded shuffle followed by a prefix split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
    pub ratio: f64,
}

pub fn split_dataset<T: Clone>(
    records: &[T],
    seed: u64,
    ratio: f64,
) -> Result<DatasetSplit<T>, PipelineError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(PipelineError::Precondition(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    let mut indices: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    indices.shuffle(&mut rng);
    let train_size = ((ratio * records.len() as f64).round() as usize).min(records.len());
    let train = indices[..train_size].iter().map(|&i| records[i].clone()).collect();
    let test = indices[train_size..].iter().map(|&i| records[i].clone()).collect();
    Ok(DatasetSplit { train, test, seed, ratio })
}

/// Training-pair export row: prompt as the user turn, the final (cleaned when
/// available) revision as the assistant turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExportRow {
    pub messages: Vec<Message>,
}

pub fn export_sft(records: &[SftRecord]) -> Vec<SftExportRow> {
    records
        .iter()
        .map(|record| SftExportRow {
            messages: vec![
                Message::user(record.prompt.text.clone()),
                Message::assistant(
                    record.cleaned_revision.clone().unwrap_or_else(|| record.revision.clone()),
                ),
            ],
        })
        .collect()
}
