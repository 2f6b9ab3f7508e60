//! Preference-data construction: sample two responses per prompt, ask a
//! judge to pick the more harmless one through a fixed multiple-choice
//! layout, and keep only confidently-labelled pairs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constitution::{ConstitutionSet, Principle, PromptTemplate, Stage};
use crate::datastore::derive_seed;
use crate::gateway::{Conversation, Gateway, GenParams};
use crate::parallel::map_ordered;
use crate::stage1::{split_dataset, PipelineError, RedTeamPrompt};

/// Two sampled responses for one prompt, with the A/B slots assigned by the
/// recorded order seed (even seed: the first-sampled response is A).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsePair {
    pub prompt: RedTeamPrompt,
    pub response_a: String,
    pub response_b: String,
    pub order_seed: u64,
}

impl ResponsePair {
    pub fn first_sampled_is_a(&self) -> bool {
        self.order_seed % 2 == 0
    }

    /// Identical responses carry no preference signal.
    pub fn is_degenerate(&self) -> bool {
        self.response_a == self.response_b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JudgeChoice {
    A,
    B,
    Uncertain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgement {
    pub choice: JudgeChoice,
    pub raw_text: String,
    pub principle_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeMeta {
    pub raw_text: String,
    pub model_name: String,
    pub order_seed: u64,
}

/// A judged pair ready for preference optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: RedTeamPrompt,
    pub chosen: String,
    pub rejected: String,
    pub principle_id: String,
    pub judge_meta: JudgeMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDatasetReport {
    pub total_pairs: usize,
    pub kept: usize,
    pub uncertain_excluded: usize,
    pub uncertain_fraction: f64,
    /// Identical-response pairs, auto-excluded as uncertain.
    pub identical_pairs: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub failed: usize,
    pub failures: Vec<crate::stage1::FailureEntry>,
    pub principle_usage: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct Stage2Config {
    pub seed: u64,
    /// Sampling params for the two student responses; stochastic by default.
    pub gen_params: GenParams,
    /// Judge decoding; temperature 0 for label stability.
    pub judge_params: GenParams,
    pub concurrency: usize,
    /// Pin every pair to one preference principle instead of sampling.
    pub principle_pin: Option<String>,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub started_at: String,
    pub max_failure_fraction: f64,
    pub partial_output_path: Option<PathBuf>,
}

impl Stage2Config {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            gen_params: GenParams::new(1.0, 512),
            judge_params: GenParams::new(0.0, 16),
            concurrency: 4,
            principle_pin: None,
            split_ratio: 5.0 / 6.0,
            split_seed: seed,
            started_at: "1970-01-01T00:00:00Z".to_string(),
            max_failure_fraction: 0.10,
            partial_output_path: None,
        }
    }
}

/// Sample two completions for the identical single-turn conversation and
/// assign A/B slots from the order seed.
pub fn sample_response_pair<R: Rng>(
    prompt: &RedTeamPrompt,
    gateway: &Gateway,
    params: &GenParams,
    rng: &mut R,
) -> Result<ResponsePair, PipelineError> {
    if prompt.text.trim().is_empty() {
        return Err(PipelineError::Precondition(format!("prompt {} has empty text", prompt.id)));
    }
    let conv = Conversation::single_user(prompt.text.clone());
    let completion = || -> Result<String, PipelineError> {
        let out = gateway
            .complete_chat(&conv, params)
            .map_err(|source| PipelineError::Gateway { prompt_id: prompt.id.clone(), source })?;
        if out.text.trim().is_empty() {
            return Err(PipelineError::Precondition(format!(
                "prompt {}: sampled response came back empty",
                prompt.id
            )));
        }
        Ok(out.text)
    };
    let first = completion()?;
    let second = completion()?;
    let order_seed: u64 = rng.random();
    let (response_a, response_b) =
        if order_seed % 2 == 0 { (first, second) } else { (second, first) };
    Ok(ResponsePair { prompt: prompt.clone(), response_a, response_b, order_seed })
}

fn judge_template() -> PromptTemplate {
    PromptTemplate::new(
        "judge_multiple_choice",
        "Consider the following conversation between a human and an assistant:\n\n\
         Human: {{question}}\n\n\
         {{principle}}\n\n\
         Options:\n\
         (A) {{response_a}}\n\
         (B) {{response_b}}\n\n\
         The answer is:",
        &["question", "principle", "response_a", "response_b"],
    )
    .expect("judge template is well-formed")
}

/// Render the multiple-choice judge prompt. Pure: the same pair and principle
/// always produce identical bytes.
pub fn build_judge_prompt(pair: &ResponsePair, principle: &Principle) -> Result<String, PipelineError> {
    if principle.stage != Stage::Preference {
        return Err(PipelineError::Precondition(format!(
            "principle {} is not a preference rule",
            principle.id
        )));
    }
    let mut bindings = BTreeMap::new();
    bindings.insert("question".to_string(), pair.prompt.text.clone());
    bindings.insert("principle".to_string(), principle.text.clone());
    bindings.insert("response_a".to_string(), single_line(&pair.response_a));
    bindings.insert("response_b".to_string(), single_line(&pair.response_b));
    Ok(judge_template().render(&bindings)?)
}

/// Option lines must stay single lines so the (A)/(B) layout is unambiguous
/// even when responses contain literal "(B)" substrings.
fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Strict-then-lenient parse of a judge reply.
///
/// 1. the whole trimmed reply is exactly "A" or "B";
/// 2. the trimmed reply starts with "(A)" or "(B)";
/// 3. the first line contains exactly one option-letter token ("A", "(b)",
///    "B.", ...; bare letters must be uppercase so articles don't match).
///
/// Anything else is Uncertain — a value, not an error.
pub fn parse_judgement(raw: &str) -> JudgeChoice {
    let trimmed = raw.trim();
    match trimmed {
        "A" => return JudgeChoice::A,
        "B" => return JudgeChoice::B,
        _ => {}
    }
    if trimmed.starts_with("(A)") {
        return JudgeChoice::A;
    }
    if trimmed.starts_with("(B)") {
        return JudgeChoice::B;
    }
    let first_line = trimmed.lines().next().unwrap_or("");
    let mut found: Vec<JudgeChoice> = Vec::new();
    for token in first_line.split_whitespace() {
        let parenthesized = token.starts_with('(');
        let stripped = token
            .trim_start_matches('(')
            .trim_end_matches(|c: char| matches!(c, ')' | '.' | ',' | ':' | ';' | '!' | '?'));
        let choice = match stripped {
            "A" => Some(JudgeChoice::A),
            "B" => Some(JudgeChoice::B),
            "a" | "b" if parenthesized => {
                Some(if stripped == "a" { JudgeChoice::A } else { JudgeChoice::B })
            }
            _ => None,
        };
        if let Some(c) = choice {
            found.push(c);
        }
    }
    match found.as_slice() {
        [single] => *single,
        _ => JudgeChoice::Uncertain,
    }
}

struct PairOutcome {
    kept: Option<PreferencePair>,
    uncertain: bool,
    identical: bool,
    principle_id: Option<String>,
    error: Option<String>,
}

fn judge_one_prompt(
    prompt: &RedTeamPrompt,
    constitution: &ConstitutionSet,
    student: &Gateway,
    judge: &Gateway,
    config: &Stage2Config,
) -> Result<PairOutcome, PipelineError> {
    let mut rng = ChaCha8Rng::from_seed(derive_seed(config.seed, &prompt.id));
    let pair = sample_response_pair(prompt, student, &config.gen_params, &mut rng)?;

    if pair.is_degenerate() {
        return Ok(PairOutcome {
            kept: None,
            uncertain: true,
            identical: true,
            principle_id: None,
            error: None,
        });
    }

    let principle = match &config.principle_pin {
        Some(id) => constitution
            .get(id)
            .ok_or_else(|| {
                PipelineError::Precondition(format!("pinned principle {id:?} not in constitution"))
            })?
            .clone(),
        None => constitution.sample_principle(Stage::Preference, &mut rng)?.clone(),
    };

    let judge_prompt = build_judge_prompt(&pair, &principle)?;
    let reply = judge
        .complete_chat(&Conversation::single_user(judge_prompt), &config.judge_params)
        .map_err(|source| PipelineError::Gateway { prompt_id: prompt.id.clone(), source })?;

    let choice = parse_judgement(&reply.text);
    let (chosen, rejected) = match choice {
        JudgeChoice::A => (pair.response_a.clone(), pair.response_b.clone()),
        JudgeChoice::B => (pair.response_b.clone(), pair.response_a.clone()),
        JudgeChoice::Uncertain => {
            return Ok(PairOutcome {
                kept: None,
                uncertain: true,
                identical: false,
                principle_id: Some(principle.id.clone()),
                error: None,
            })
        }
    };

    Ok(PairOutcome {
        kept: Some(PreferencePair {
            prompt: prompt.clone(),
            chosen,
            rejected,
            principle_id: principle.id.clone(),
            judge_meta: JudgeMeta {
                raw_text: reply.text,
                model_name: judge.model_name().to_string(),
                order_seed: pair.order_seed,
            },
        }),
        uncertain: false,
        identical: false,
        principle_id: Some(principle.id),
        error: None,
    })
}

/// Build the preference dataset: one judged pair per prompt, uncertain pairs
/// excluded but counted, exact accounting in the report.
pub fn run_stage2(
    corpus: &[RedTeamPrompt],
    constitution: &ConstitutionSet,
    student: &Gateway,
    judge: &Gateway,
    config: &Stage2Config,
) -> Result<(Vec<PreferencePair>, PreferenceDatasetReport), PipelineError> {
    if corpus.is_empty() {
        return Err(PipelineError::Precondition("empty prompt corpus".into()));
    }

    let outcomes = map_ordered(corpus, config.concurrency, |_, prompt| {
        match judge_one_prompt(prompt, constitution, student, judge, config) {
            Ok(outcome) => outcome,
            Err(err) => PairOutcome {
                kept: None,
                uncertain: false,
                identical: false,
                principle_id: None,
                error: Some(err.to_string()),
            },
        }
    });

    let mut pairs = Vec::new();
    let mut report = PreferenceDatasetReport::default();
    for (prompt, outcome) in corpus.iter().zip(outcomes) {
        if let Some(error) = outcome.error {
            report.failed += 1;
            report
                .failures
                .push(crate::stage1::FailureEntry { prompt_id: prompt.id.clone(), error });
            continue;
        }
        report.total_pairs += 1;
        if let Some(id) = outcome.principle_id {
            *report.principle_usage.entry(id).or_default() += 1;
        }
        report.identical_pairs += usize::from(outcome.identical);
        match outcome.kept {
            Some(pair) => {
                pairs.push(pair);
                report.kept += 1;
            }
            None => {
                debug_assert!(outcome.uncertain);
                report.uncertain_excluded += 1;
            }
        }
    }

    if report.failed as f64 > config.max_failure_fraction * corpus.len() as f64 {
        return Err(PipelineError::TooManyFailures {
            failed: report.failed,
            total: corpus.len(),
            limit_pct: (config.max_failure_fraction * 100.0).round() as u32,
            partial_output: config.partial_output_path.clone(),
        });
    }

    pairs.sort_by(|a, b| a.prompt.id.cmp(&b.prompt.id));
    if report.total_pairs > 0 {
        report.uncertain_fraction = report.uncertain_excluded as f64 / report.total_pairs as f64;
    }
    if !pairs.is_empty() {
        let split = split_dataset(&pairs, config.split_seed, config.split_ratio)?;
        report.train_size = split.train.len();
        report.test_size = split.test.len();
    }
    Ok((pairs, report))
}

/// Re-render the judge prompt a stored pair was labelled with, byte for byte.
pub fn regenerate_judge_prompt(
    pair: &PreferencePair,
    constitution: &ConstitutionSet,
) -> Result<String, PipelineError> {
    let principle = constitution.get(&pair.principle_id).ok_or_else(|| {
        PipelineError::Precondition(format!(
            "principle {:?} not in constitution",
            pair.principle_id
        ))
    })?;
    let (response_a, response_b) = match parse_judgement(&pair.judge_meta.raw_text) {
        JudgeChoice::A => (pair.chosen.clone(), pair.rejected.clone()),
        JudgeChoice::B => (pair.rejected.clone(), pair.chosen.clone()),
        JudgeChoice::Uncertain => {
            return Err(PipelineError::Precondition(
                "stored pair has an uncertain judge reply".into(),
            ))
        }
    };
    let response_pair = ResponsePair {
        prompt: pair.prompt.clone(),
        response_a,
        response_b,
        order_seed: pair.judge_meta.order_seed,
    };
    build_judge_prompt(&response_pair, principle)
}
