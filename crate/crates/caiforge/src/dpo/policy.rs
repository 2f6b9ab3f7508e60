//! Tiny trainable policy: a first-order (bigram) conditional categorical
//! model over a capped vocabulary. Sequence log-probabilities are exact sums
//! of `log softmax` terms, which makes every gradient verifiable by finite
//! differences.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DpoError;

pub const MAX_VOCAB: usize = 64;
pub const OOV_TOKEN: &str = "<unk>";
/// Context used for the first token when the prompt is empty.
pub const START_CONTEXT: &str = "<s>";

/// Lowercased whitespace tokens.
pub fn whitespace_tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Frequency-ranked vocabulary over a corpus, capped to `cap` entries with the
/// out-of-vocab bucket always reserved. Ties break alphabetically so the
/// result is deterministic.
pub fn build_vocab<'a, I: IntoIterator<Item = &'a str>>(corpus: I, cap: usize) -> Vec<String> {
    let cap = cap.min(MAX_VOCAB).max(1);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for token in whitespace_tokenize(text) {
            if token != OOV_TOKEN {
                *counts.entry(token).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut vocab: Vec<String> = vec![OOV_TOKEN.to_string()];
    vocab.extend(ranked.into_iter().take(cap - 1).map(|(t, _)| t));
    vocab
}

/// Token list plus reverse index; encoding maps unknown tokens to the bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self, DpoError> {
        if tokens.is_empty() || tokens.len() > MAX_VOCAB {
            return Err(DpoError::InvalidConfig(format!(
                "vocabulary must have 1..={MAX_VOCAB} tokens, got {}",
                tokens.len()
            )));
        }
        if !tokens.iter().any(|t| t == OOV_TOKEN) {
            return Err(DpoError::InvalidConfig(format!(
                "vocabulary must include the {OOV_TOKEN} bucket"
            )));
        }
        let mut index = HashMap::new();
        for (i, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), i).is_some() {
                return Err(DpoError::InvalidConfig(format!("duplicate vocab token {token:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn oov_id(&self) -> usize {
        self.index[OOV_TOKEN]
    }

    /// Tokenize and map to ids; unseen words land in the bucket.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        whitespace_tokenize(text)
            .into_iter()
            .map(|t| self.id(&t).unwrap_or_else(|| self.oov_id()))
            .collect()
    }

    /// Strict id lookup for pre-tokenized input; names the offending token.
    pub fn require_ids(&self, tokens: &[String]) -> Result<Vec<usize>, DpoError> {
        tokens
            .iter()
            .enumerate()
            .map(|(position, token)| {
                self.id(token).ok_or_else(|| DpoError::OutOfVocab {
                    token: token.clone(),
                    position,
                })
            })
            .collect()
    }
}

/// Tabular conditional model: one logits row per context (every vocabulary
/// token plus the start context), one column per next token.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyPolicy {
    vocab: Vocab,
    /// (V + 1) rows of V logits; row V is the start context.
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_name: String,
    schema_version: u32,
    vocab: Vec<String>,
    logits: Vec<Vec<f64>>,
}

const CHECKPOINT_SCHEMA: &str = "tiny_policy";
const CHECKPOINT_VERSION: u32 = 1;

impl TinyPolicy {
    /// All-zero logits: uniform next-token distribution in every context.
    pub fn uniform(vocab: Vocab) -> Self {
        let rows = vocab.len() + 1;
        let cols = vocab.len();
        Self { vocab, logits: vec![0.0; rows * cols] }
    }

    /// Small random logits, reproducible from the seed.
    pub fn seeded(vocab: Vocab, seed: u64, scale: f64) -> Self {
        let mut policy = Self::uniform(vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for logit in &mut policy.logits {
            *logit = rng.random_range(-scale..=scale);
        }
        policy
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Context rows: one per token plus the start context.
    pub fn context_count(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn start_context(&self) -> usize {
        self.vocab.len()
    }

    pub fn logit(&self, context: usize, token: usize) -> f64 {
        self.logits[context * self.vocab.len() + token]
    }

    pub fn logit_mut(&mut self, context: usize, token: usize) -> &mut f64 {
        &mut self.logits[context * self.vocab.len() + token]
    }

    pub fn row(&self, context: usize) -> &[f64] {
        let v = self.vocab.len();
        &self.logits[context * v..(context + 1) * v]
    }

    pub fn log_softmax_row(&self, context: usize) -> Vec<f64> {
        let row = self.row(context);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
        row.iter().map(|l| l - log_sum).collect()
    }

    pub fn softmax_row(&self, context: usize) -> Vec<f64> {
        self.log_softmax_row(context).into_iter().map(f64::exp).collect()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), DpoError> {
        for (position, &id) in ids.iter().enumerate() {
            if id >= self.vocab.len() {
                return Err(DpoError::OutOfVocab {
                    token: format!("#{id}"),
                    position,
                });
            }
        }
        Ok(())
    }

    /// Sum of `log P(token | previous token)` over the completion, with the
    /// prompt supplying the first context (or the start context when empty).
    pub fn sequence_logprob_ids(
        &self,
        prompt: &[usize],
        completion: &[usize],
    ) -> Result<f64, DpoError> {
        if completion.is_empty() {
            return Err(DpoError::EmptyCompletion("completion token list".into()));
        }
        self.check_ids(prompt)?;
        self.check_ids(completion)?;
        let mut context = prompt.last().copied().unwrap_or(self.start_context());
        let mut total = 0.0;
        for &token in completion {
            total += self.log_softmax_row(context)[token];
            context = token;
        }
        Ok(total)
    }

    /// String-token wrapper with strict vocabulary lookup.
    pub fn sequence_logprob(
        &self,
        prompt_tokens: &[String],
        completion_tokens: &[String],
    ) -> Result<f64, DpoError> {
        let prompt = self.vocab.require_ids(prompt_tokens)?;
        let completion = self.vocab.require_ids(completion_tokens)?;
        self.sequence_logprob_ids(&prompt, &completion)
    }

    /// Sample a continuation token by token at temperature 1.
    pub fn sample<R: Rng>(&self, prompt: &[usize], max_len: usize, rng: &mut R) -> Vec<usize> {
        let mut context = prompt.last().copied().unwrap_or(self.start_context());
        let mut out = Vec::with_capacity(max_len);
        for _ in 0..max_len {
            let probs = self.softmax_row(context);
            let draw: f64 = rng.random();
            let mut cumulative = 0.0;
            let mut token = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                cumulative += p;
                if draw < cumulative {
                    token = i;
                    break;
                }
            }
            out.push(token);
            context = token;
        }
        out
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.vocab.tokens()[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<(), DpoError> {
        let v = self.vocab.len();
        let checkpoint = Checkpoint {
            schema_name: CHECKPOINT_SCHEMA.to_string(),
            schema_version: CHECKPOINT_VERSION,
            vocab: self.vocab.tokens().to_vec(),
            logits: (0..self.context_count())
                .map(|c| self.logits[c * v..(c + 1) * v].to_vec())
                .collect(),
        };
        let json = serde_json::to_string_pretty(&checkpoint)
            .map_err(|e| DpoError::InvalidCheckpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| DpoError::InvalidCheckpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DpoError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| DpoError::InvalidCheckpoint(e.to_string()))?;
        let checkpoint: Checkpoint =
            serde_json::from_str(&text).map_err(|e| DpoError::InvalidCheckpoint(e.to_string()))?;
        if checkpoint.schema_name != CHECKPOINT_SCHEMA {
            return Err(DpoError::InvalidCheckpoint(format!(
                "expected schema {CHECKPOINT_SCHEMA}, got {}",
                checkpoint.schema_name
            )));
        }
        if checkpoint.schema_version > CHECKPOINT_VERSION {
            return Err(DpoError::InvalidCheckpoint(format!(
                "checkpoint version {} is newer than supported {CHECKPOINT_VERSION}",
                checkpoint.schema_version
            )));
        }
        let vocab = Vocab::new(checkpoint.vocab)?;
        let v = vocab.len();
        if checkpoint.logits.len() != v + 1 {
            return Err(DpoError::InvalidCheckpoint(format!(
                "expected {} logit rows, got {}",
                v + 1,
                checkpoint.logits.len()
            )));
        }
        let mut logits = Vec::with_capacity((v + 1) * v);
        for row in &checkpoint.logits {
            if row.len() != v {
                return Err(DpoError::InvalidCheckpoint(format!(
                    "expected {v} logits per row, got {}",
                    row.len()
                )));
            }
            for &value in row {
                if !value.is_finite() {
                    return Err(DpoError::InvalidCheckpoint("non-finite logit".into()));
                }
                logits.push(value);
            }
        }
        Ok(Self { vocab, logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab4() -> Vocab {
        Vocab::new(vec!["<unk>".into(), "a".into(), "b".into(), "c".into()]).unwrap()
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(whitespace_tokenize("Hello hello WORLD"), vec!["hello", "hello", "world"]);
        assert_eq!(whitespace_tokenize(""), Vec::<String>::new());
        assert_eq!(whitespace_tokenize("  spaced\tout \n"), vec!["spaced", "out"]);
    }

    #[test]
    fn vocab_builder_ranks_by_frequency_then_alpha() {
        let vocab = build_vocab(["b b b a a c", "a d"], 4);
        // bucket first, then a(3), b(3) alpha-tied ... a < b
        assert_eq!(vocab, vec!["<unk>", "a", "b", "c"]);
    }

    #[test]
    fn unseen_words_hit_the_bucket() {
        let vocab = vocab4();
        let ids = vocab.encode("a zebra b");
        assert_eq!(ids, vec![1, vocab.oov_id(), 2]);
    }

    #[test]
    fn uniform_policy_logprob_is_analytic() {
        let policy = TinyPolicy::uniform(vocab4());
        // completion length 3 over |V| = 4: 3 * ln(1/4)
        let lp = policy.sequence_logprob_ids(&[1], &[2, 3, 1]).unwrap();
        assert!((lp - (-4.1588830833596715)).abs() < 1e-12);
    }

    #[test]
    fn hand_softmax_single_token() {
        let mut policy = TinyPolicy::uniform(vocab4());
        // context row for token 1: logits [0, 0, ln 3, 0]
        *policy.logit_mut(1, 2) = 3.0f64.ln();
        let lp = policy.sequence_logprob_ids(&[1], &[2]).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn near_deterministic_policy_saturates() {
        let mut policy = TinyPolicy::uniform(vocab4());
        *policy.logit_mut(0, 3) = 20.0;
        let lp = policy.sequence_logprob_ids(&[0], &[3]).unwrap();
        assert!(lp.abs() < 1e-8);
    }

    #[test]
    fn empty_prompt_uses_start_context() {
        let mut policy = TinyPolicy::uniform(vocab4());
        let start = policy.start_context();
        *policy.logit_mut(start, 1) = 5.0;
        let with_start = policy.sequence_logprob_ids(&[], &[1]).unwrap();
        let with_token = policy.sequence_logprob_ids(&[2], &[1]).unwrap();
        assert!(with_start > with_token);
    }

    #[test]
    fn out_of_vocab_names_token_and_position() {
        let policy = TinyPolicy::uniform(vocab4());
        let err = policy
            .sequence_logprob(
                &["a".to_string()],
                &["b".to_string(), "zebra".to_string()],
            )
            .unwrap_err();
        assert!(matches!(err, DpoError::OutOfVocab { token, position: 1 } if token == "zebra"));
    }

    #[test]
    fn empty_completion_is_rejected() {
        let policy = TinyPolicy::uniform(vocab4());
        assert!(matches!(
            policy.sequence_logprob_ids(&[1], &[]),
            Err(DpoError::EmptyCompletion(_))
        ));
    }

    #[test]
    fn logprobs_are_never_positive() {
        let policy = TinyPolicy::seeded(vocab4(), 11, 2.0);
        for prompt in [vec![], vec![0], vec![3, 2]] {
            for completion in [vec![1], vec![2, 2, 0], vec![3, 1, 0, 2]] {
                let lp = policy.sequence_logprob_ids(&prompt, &completion).unwrap();
                assert!(lp <= 0.0, "logprob {lp} > 0");
            }
        }
    }

    #[test]
    fn shift_invariance_of_softmax_rows() {
        let mut policy = TinyPolicy::seeded(vocab4(), 5, 1.0);
        let before: Vec<f64> = (0..policy.context_count())
            .flat_map(|c| policy.log_softmax_row(c))
            .collect();
        // uniform additive shift of one context's logit row
        for t in 0..policy.vocab_size() {
            *policy.logit_mut(2, t) += 3.7;
        }
        let after: Vec<f64> = (0..policy.context_count())
            .flat_map(|c| policy.log_softmax_row(c))
            .collect();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        let policy = TinyPolicy::seeded(vocab4(), 3, 1.5);
        policy.save(&path).unwrap();
        let loaded = TinyPolicy::load(&path).unwrap();
        assert_eq!(loaded, policy);
    }

    #[test]
    fn checkpoint_rejects_bad_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        std::fs::write(
            &path,
            r#"{"schema_name":"tiny_policy","schema_version":1,"vocab":["<unk>","a"],"logits":[[0.0,0.0]]}"#,
        )
        .unwrap();
        assert!(matches!(TinyPolicy::load(&path), Err(DpoError::InvalidCheckpoint(_))));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let policy = TinyPolicy::seeded(vocab4(), 9, 1.0);
        let mut rng_a = ChaCha8Rng::seed_from_u64(1);
        let mut rng_b = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(policy.sample(&[1], 10, &mut rng_a), policy.sample(&[1], 10, &mut rng_b));
    }
}
