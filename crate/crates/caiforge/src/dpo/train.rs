//! Gradient-descent training on the preference loss, plus the finite
//! difference gradient checker that validates the whole chain rule path.

use serde::{Deserialize, Serialize};

use super::policy::{TinyPolicy, Vocab};
use super::{dpo_loss, reward_accuracy, reward_margin, sigmoid, DpoConfig, DpoError, PairLogProbs, RefSync};
use crate::stage2::PreferencePair;

/// One preference pair encoded against a policy vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPair {
    pub id: String,
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

/// Encode a preference dataset. Unknown words map to the out-of-vocab bucket;
/// completions that tokenize to nothing are rejected.
pub fn tokenize_pairs(
    vocab: &Vocab,
    pairs: &[PreferencePair],
) -> Result<Vec<TokenizedPair>, DpoError> {
    pairs
        .iter()
        .map(|pair| {
            let chosen = vocab.encode(&pair.chosen);
            let rejected = vocab.encode(&pair.rejected);
            if chosen.is_empty() {
                return Err(DpoError::EmptyCompletion(format!(
                    "chosen response of pair {}",
                    pair.prompt.id
                )));
            }
            if rejected.is_empty() {
                return Err(DpoError::EmptyCompletion(format!(
                    "rejected response of pair {}",
                    pair.prompt.id
                )));
            }
            Ok(TokenizedPair {
                id: pair.prompt.id.clone(),
                prompt: vocab.encode(&pair.prompt.text),
                chosen,
                rejected,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub reward_accuracy: f64,
    pub mean_logp_chosen: f64,
    pub mean_logp_rejected: f64,
    /// Mean implicit reward margin over the step's batch.
    pub reward_margin: f64,
}

pub type TrainingMetrics = Vec<StepMetrics>;

/// The metrics-file row: step index plus the four tracked quantities
/// (log-probabilities split into chosen/rejected).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub reward_accuracy: f64,
    pub mean_logp_chosen: f64,
    pub mean_logp_rejected: f64,
}

impl From<&StepMetrics> for MetricsRow {
    fn from(m: &StepMetrics) -> Self {
        Self {
            step: m.step,
            loss: m.loss,
            grad_norm: m.grad_norm,
            reward_accuracy: m.reward_accuracy,
            mean_logp_chosen: m.mean_logp_chosen,
            mean_logp_rejected: m.mean_logp_rejected,
        }
    }
}

fn pair_logprobs(
    policy: &TinyPolicy,
    reference: &TinyPolicy,
    pair: &TokenizedPair,
) -> Result<PairLogProbs, DpoError> {
    Ok(PairLogProbs {
        logp_policy_chosen: policy.sequence_logprob_ids(&pair.prompt, &pair.chosen)?,
        logp_policy_rejected: policy.sequence_logprob_ids(&pair.prompt, &pair.rejected)?,
        logp_ref_chosen: reference.sequence_logprob_ids(&pair.prompt, &pair.chosen)?,
        logp_ref_rejected: reference.sequence_logprob_ids(&pair.prompt, &pair.rejected)?,
    })
}

/// Add `weight * d(sequence logprob)/d(logits)` for one completion path.
fn accumulate_path(
    policy: &TinyPolicy,
    prompt: &[usize],
    completion: &[usize],
    weight: f64,
    grad: &mut [f64],
) {
    let v = policy.vocab_size();
    let mut context = prompt.last().copied().unwrap_or(policy.start_context());
    for &token in completion {
        let probs = policy.softmax_row(context);
        let row = &mut grad[context * v..(context + 1) * v];
        for (i, p) in probs.iter().enumerate() {
            row[i] += weight * (f64::from(i == token) - p);
        }
        context = token;
    }
}

/// Mean-loss gradient with respect to every policy logit, dense.
fn batch_gradient(
    policy: &TinyPolicy,
    batch: &[TokenizedPair],
    logps: &[PairLogProbs],
    beta: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; policy.context_count() * policy.vocab_size()];
    let scale = 1.0 / batch.len() as f64;
    for (pair, lp) in batch.iter().zip(logps) {
        let z = reward_margin(lp, beta);
        let w_chosen = beta * (sigmoid(z) - 1.0) * scale;
        accumulate_path(policy, &pair.prompt, &pair.chosen, w_chosen, &mut grad);
        accumulate_path(policy, &pair.prompt, &pair.rejected, -w_chosen, &mut grad);
    }
    grad
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Gradient descent on the preference loss. The reference starts as a copy of
/// the initial policy and, under `PeriodicEvery(k)`, is re-copied from the
/// policy every k steps. Batches walk the dataset in order, so identical
/// inputs and config produce bit-identical metrics.
pub fn train_dpo(
    policy_init: &TinyPolicy,
    dataset: &[TokenizedPair],
    config: &DpoConfig,
) -> Result<(TinyPolicy, TrainingMetrics), DpoError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let mut policy = policy_init.clone();
    let mut reference = policy_init.clone();
    let mut metrics = Vec::new();
    let batch_size = config.batch_size.min(dataset.len());
    let mut step = 0usize;

    for _epoch in 0..config.epochs {
        for batch in dataset.chunks(batch_size) {
            step += 1;
            let logps = batch
                .iter()
                .map(|pair| pair_logprobs(&policy, &reference, pair))
                .collect::<Result<Vec<_>, _>>()?;
            let loss = dpo_loss(&logps, config.beta)?;
            if !loss.is_finite() {
                return Err(DpoError::NonFiniteLoss {
                    step,
                    pair_ids: batch.iter().map(|p| p.id.clone()).collect(),
                });
            }
            let grad = batch_gradient(&policy, batch, &logps, config.beta);
            let n = batch.len() as f64;
            metrics.push(StepMetrics {
                step,
                loss,
                grad_norm: l2_norm(&grad),
                reward_accuracy: reward_accuracy(&logps, config.beta)?,
                mean_logp_chosen: logps.iter().map(|l| l.logp_policy_chosen).sum::<f64>() / n,
                mean_logp_rejected: logps.iter().map(|l| l.logp_policy_rejected).sum::<f64>() / n,
                reward_margin: logps.iter().map(|l| reward_margin(l, config.beta)).sum::<f64>() / n,
            });

            let v = policy.vocab_size();
            for c in 0..policy.context_count() {
                for t in 0..v {
                    *policy.logit_mut(c, t) -= config.learning_rate * grad[c * v + t];
                }
            }

            if let RefSync::PeriodicEvery(k) = config.ref_sync {
                if step % k == 0 {
                    reference = policy.clone();
                }
            }
        }
    }
    Ok((policy, metrics))
}

/// Contexts whose logit rows influence any sequence in the batch.
fn touched_contexts(policy: &TinyPolicy, batch: &[TokenizedPair]) -> Vec<usize> {
    let mut touched = vec![false; policy.context_count()];
    for pair in batch {
        for completion in [&pair.chosen, &pair.rejected] {
            let mut context = pair.prompt.last().copied().unwrap_or(policy.start_context());
            for &token in completion.iter() {
                touched[context] = true;
                context = token;
            }
        }
    }
    (0..policy.context_count()).filter(|&c| touched[c]).collect()
}

/// Scale floor below which gradient comparisons are effectively absolute.
const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compare the analytic batch gradient against central finite differences of
/// the batch loss, over every parameter in a touched context row. Returns the
/// maximum relative error, where magnitudes below `1e-4` are compared on an
/// absolute scale.
pub fn grad_check(
    policy: &TinyPolicy,
    reference: &TinyPolicy,
    batch: &[TokenizedPair],
    beta: f64,
    h: f64,
) -> Result<f64, DpoError> {
    if !(1e-8..=1e-3).contains(&h) {
        return Err(DpoError::InvalidConfig(format!("h must be within [1e-8, 1e-3], got {h}")));
    }
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }

    let batch_loss = |p: &TinyPolicy| -> Result<f64, DpoError> {
        let logps = batch
            .iter()
            .map(|pair| pair_logprobs(p, reference, pair))
            .collect::<Result<Vec<_>, _>>()?;
        dpo_loss(&logps, beta)
    };

    let logps = batch
        .iter()
        .map(|pair| pair_logprobs(policy, reference, pair))
        .collect::<Result<Vec<_>, _>>()?;
    let analytic = batch_gradient(policy, batch, &logps, beta);

    let mut probe = policy.clone();
    let mut max_rel = 0.0f64;
    for context in touched_contexts(policy, batch) {
        for token in 0..policy.vocab_size() {
            let original = probe.logit(context, token);
            *probe.logit_mut(context, token) = original + h;
            let plus = batch_loss(&probe)?;
            *probe.logit_mut(context, token) = original - h;
            let minus = batch_loss(&probe)?;
            *probe.logit_mut(context, token) = original;

            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[context * policy.vocab_size() + token];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpo::policy::{build_vocab, Vocab};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab8() -> Vocab {
        Vocab::new(
            ["<unk>", "q", "a1", "a2", "a3", "b1", "b2", "b3"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
    }

    fn random_pair(rng: &mut ChaCha8Rng, v: usize) -> TokenizedPair {
        let len = |rng: &mut ChaCha8Rng| rng.random_range(1..=5usize);
        let seq = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> {
            (0..n).map(|_| rng.random_range(0..v)).collect()
        };
        let prompt_len = rng.random_range(0..=3usize);
        let chosen_len = len(rng);
        let rejected_len = len(rng);
        TokenizedPair {
            id: format!("pair-{}", rng.random_range(0..1_000_000u32)),
            prompt: seq(rng, prompt_len),
            chosen: seq(rng, chosen_len),
            rejected: seq(rng, rejected_len),
        }
    }

    /// Chosen completions draw from one half of the vocabulary, rejected from
    /// the other, so the preference signal is separable.
    fn separable_dataset(n: usize, seed: u64) -> (Vocab, Vec<TokenizedPair>) {
        let vocab = vocab8();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = (0..n)
            .map(|i| {
                let pick = |rng: &mut ChaCha8Rng, base: usize| -> Vec<usize> {
                    (0..rng.random_range(2..=4usize))
                        .map(|_| base + rng.random_range(0..3usize))
                        .collect()
                };
                TokenizedPair {
                    id: format!("p{i}"),
                    prompt: vec![1],
                    chosen: pick(&mut rng, 2),   // a1..a3
                    rejected: pick(&mut rng, 5), // b1..b3
                }
            })
            .collect();
        (vocab, pairs)
    }

    #[test]
    fn zero_learning_rate_keeps_policy_and_loss_constant() {
        let (vocab, data) = separable_dataset(20, 1);
        let init = TinyPolicy::seeded(vocab, 2, 0.5);
        let config = DpoConfig {
            learning_rate: 0.0,
            epochs: 5,
            ..DpoConfig::default()
        };
        let (trained, metrics) = train_dpo(&init, &data, &config).unwrap();
        assert_eq!(trained, init);
        assert_eq!(metrics.len(), 5);
        for window in metrics.windows(2) {
            assert_eq!(window[0].loss, window[1].loss);
        }
    }

    #[test]
    fn training_on_separable_data_reaches_high_accuracy() {
        let (vocab, data) = separable_dataset(200, 7);
        let init = TinyPolicy::uniform(vocab);
        let config = DpoConfig {
            beta: 0.1,
            learning_rate: 1.0,
            epochs: 300,
            batch_size: usize::MAX,
            ref_sync: RefSync::Frozen,
        };
        let (_, metrics) = train_dpo(&init, &data, &config).unwrap();
        assert_eq!(metrics.len(), 300);
        let first = &metrics[0];
        let last = metrics.last().unwrap();
        assert!((first.loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(last.reward_accuracy >= 0.95, "accuracy {}", last.reward_accuracy);
        assert!(last.loss < 0.3, "loss {}", last.loss);
        assert!(last.loss < first.loss);
    }

    #[test]
    fn frozen_and_periodic_reference_both_converge() {
        let (vocab, data) = separable_dataset(60, 3);
        let init = TinyPolicy::uniform(vocab);
        for ref_sync in [RefSync::Frozen, RefSync::PeriodicEvery(50)] {
            let config = DpoConfig {
                beta: 0.1,
                learning_rate: 1.0,
                epochs: 200,
                batch_size: usize::MAX,
                ref_sync,
            };
            let (_, metrics) = train_dpo(&init, &data, &config).unwrap();
            let last = metrics.last().unwrap();
            assert!(
                last.reward_accuracy >= 0.9,
                "{ref_sync:?} accuracy {}",
                last.reward_accuracy
            );
        }
    }

    #[test]
    fn metrics_stream_is_bit_identical_across_runs() {
        let (vocab, data) = separable_dataset(40, 11);
        let init = TinyPolicy::seeded(vocab, 4, 0.3);
        let config = DpoConfig { epochs: 20, batch_size: 16, ..DpoConfig::default() };
        let (pa, ma) = train_dpo(&init, &data, &config).unwrap();
        let (pb, mb) = train_dpo(&init, &data, &config).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ma, mb);
    }

    #[test]
    fn metric_invariants_hold_per_step() {
        let (vocab, data) = separable_dataset(30, 5);
        let init = TinyPolicy::uniform(vocab);
        let config = DpoConfig { epochs: 10, batch_size: 8, ..DpoConfig::default() };
        let (_, metrics) = train_dpo(&init, &data, &config).unwrap();
        for m in &metrics {
            assert!((0.0..=1.0).contains(&m.reward_accuracy));
            assert!(m.grad_norm >= 0.0);
            assert!(m.loss > 0.0);
            assert!(m.mean_logp_chosen <= 0.0);
            assert!(m.mean_logp_rejected <= 0.0);
        }
    }

    #[test]
    fn grad_check_on_fifty_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let vocab = vocab8();
            let v = vocab.len();
            let policy = TinyPolicy::seeded(vocab.clone(), rng.random(), 1.0);
            let reference = TinyPolicy::seeded(vocab, rng.random(), 1.0);
            let batch: Vec<TokenizedPair> =
                (0..rng.random_range(1..=4usize)).map(|_| random_pair(&mut rng, v)).collect();
            let beta = rng.random_range(0.05..=0.5);
            let err = grad_check(&policy, &reference, &batch, beta, 1e-5).unwrap();
            worst = worst.max(err);
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    #[test]
    fn grad_check_zero_gradient_case_is_measured() {
        // chosen and rejected paths coincide: z = 0 everywhere and the
        // parameter gradient vanishes, but the check still runs on values
        let vocab = vocab8();
        let policy = TinyPolicy::seeded(vocab, 99, 0.8);
        let pair = TokenizedPair {
            id: "tie".into(),
            prompt: vec![1],
            chosen: vec![2, 3],
            rejected: vec![2, 3],
        };
        let err = grad_check(&policy, &policy.clone(), &[pair], 0.1, 1e-5).unwrap();
        assert!(err < 1e-9, "tie case error {err}");
    }

    #[test]
    fn untouched_contexts_have_zero_analytic_and_fd_gradient() {
        let vocab = vocab8();
        let policy = TinyPolicy::seeded(vocab, 21, 0.5);
        let reference = policy.clone();
        // single pair referencing context 1 (prompt) and tokens 2, 5
        let pair = TokenizedPair {
            id: "local".into(),
            prompt: vec![1],
            chosen: vec![2],
            rejected: vec![5],
        };
        let batch = vec![pair];
        let logps = vec![pair_logprobs(&policy, &reference, &batch[0]).unwrap()];
        let analytic = batch_gradient(&policy, &batch, &logps, 0.1);
        let touched = touched_contexts(&policy, &batch);
        assert_eq!(touched, vec![1]);

        let v = policy.vocab_size();
        let h = 1e-5;
        for context in 0..policy.context_count() {
            if touched.contains(&context) {
                continue;
            }
            for token in 0..v {
                assert_eq!(analytic[context * v + token], 0.0);
            }
            // spot-check finite differences on the first column
            let mut probe = policy.clone();
            let original = probe.logit(context, 0);
            *probe.logit_mut(context, 0) = original + h;
            let plus = {
                let lp = pair_logprobs(&probe, &reference, &batch[0]).unwrap();
                dpo_loss(&[lp], 0.1).unwrap()
            };
            *probe.logit_mut(context, 0) = original - h;
            let minus = {
                let lp = pair_logprobs(&probe, &reference, &batch[0]).unwrap();
                dpo_loss(&[lp], 0.1).unwrap()
            };
            let fd = (plus - minus) / (2.0 * h);
            assert!(fd.abs() < 1e-9, "context {context} fd {fd}");
        }
    }

    #[test]
    fn tokenize_rejects_empty_completions() {
        use crate::stage1::RedTeamPrompt;
        use crate::stage2::{JudgeMeta, PreferencePair};
        let vocab = build_vocab(["some words here"], 8);
        let vocab = Vocab::new(vocab).unwrap();
        let pair = PreferencePair {
            prompt: RedTeamPrompt { id: "x".into(), text: "q".into(), source: String::new() },
            chosen: "   ".into(),
            rejected: "words".into(),
            principle_id: "p".into(),
            judge_meta: JudgeMeta {
                raw_text: "A".into(),
                model_name: "m".into(),
                order_seed: 0,
            },
        };
        assert!(matches!(
            tokenize_pairs(&vocab, &[pair]),
            Err(DpoError::EmptyCompletion(_))
        ));
    }
}
