//! Direct preference optimization kernel: the logistic loss over policy and
//! reference sequence log-probabilities, its analytic gradients, reward
//! accuracy, and a training loop over a tiny tabular policy so the whole
//! optimization path is verifiable end to end.

mod policy;
mod train;

pub use policy::{
    build_vocab, whitespace_tokenize, TinyPolicy, Vocab, MAX_VOCAB, OOV_TOKEN, START_CONTEXT,
};
pub use train::{
    grad_check, tokenize_pairs, train_dpo, MetricsRow, StepMetrics, TokenizedPair,
    TrainingMetrics,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DpoError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("token {token:?} at position {position} is not in the vocabulary")]
    OutOfVocab { token: String, position: usize },
    #[error("completion is empty for {0}")]
    EmptyCompletion(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step} (pair ids: {pair_ids:?})")]
    NonFiniteLoss { step: usize, pair_ids: Vec<String> },
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
}

/// The four sequence log-probabilities behind one preference pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogProbs {
    pub logp_policy_chosen: f64,
    pub logp_policy_rejected: f64,
    pub logp_ref_chosen: f64,
    pub logp_ref_rejected: f64,
}

impl PairLogProbs {
    pub fn values(&self) -> [f64; 4] {
        [
            self.logp_policy_chosen,
            self.logp_policy_rejected,
            self.logp_ref_chosen,
            self.logp_ref_rejected,
        ]
    }

    fn check_finite(&self) -> Result<(), DpoError> {
        for v in self.values() {
            if !v.is_finite() {
                return Err(DpoError::NonFinite(format!("pair log-probability {v}")));
            }
        }
        Ok(())
    }

    /// Sum per-token log-probabilities reported by an API backend into the
    /// four sequence terms. Each token log-probability must be finite and
    /// non-positive. This path supports loss/accuracy evaluation of remote
    /// models; it never feeds training.
    pub fn from_token_logprobs(
        policy_chosen: &[(String, f64)],
        policy_rejected: &[(String, f64)],
        ref_chosen: &[(String, f64)],
        ref_rejected: &[(String, f64)],
    ) -> Result<Self, DpoError> {
        fn total(tokens: &[(String, f64)]) -> Result<f64, DpoError> {
            let mut sum = 0.0;
            for (token, lp) in tokens {
                if !lp.is_finite() || *lp > 0.0 {
                    return Err(DpoError::NonFinite(format!(
                        "token {token:?} log-probability {lp}"
                    )));
                }
                sum += lp;
            }
            Ok(sum)
        }
        Ok(Self {
            logp_policy_chosen: total(policy_chosen)?,
            logp_policy_rejected: total(policy_rejected)?,
            logp_ref_chosen: total(ref_chosen)?,
            logp_ref_rejected: total(ref_rejected)?,
        })
    }

    /// Swap chosen and rejected on both models; maps the margin z to -z.
    pub fn swapped(&self) -> Self {
        Self {
            logp_policy_chosen: self.logp_policy_rejected,
            logp_policy_rejected: self.logp_policy_chosen,
            logp_ref_chosen: self.logp_ref_rejected,
            logp_ref_rejected: self.logp_ref_chosen,
        }
    }
}

/// How the reference model tracks the policy during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefSync {
    Frozen,
    PeriodicEvery(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ref_sync: RefSync,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 1.0,
            epochs: 300,
            batch_size: usize::MAX,
            ref_sync: RefSync::Frozen,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(DpoError::InvalidConfig(format!("beta must be > 0, got {}", self.beta)));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(DpoError::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(DpoError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(DpoError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if let RefSync::PeriodicEvery(k) = self.ref_sync {
            if k == 0 {
                return Err(DpoError::InvalidConfig("PeriodicEvery requires k >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Numerically stable `ln(1 + e^x)`; exact down to the representable floor
/// and safe for |x| up to at least 1e4.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The implicit reward margin: `beta * ((lpc - lrc) - (lpr - lrr))`.
pub fn reward_margin(pair: &PairLogProbs, beta: f64) -> f64 {
    beta * ((pair.logp_policy_chosen - pair.logp_ref_chosen)
        - (pair.logp_policy_rejected - pair.logp_ref_rejected))
}

/// Mean logistic loss over the batch: `mean(softplus(-z))`.
pub fn dpo_loss(batch: &[PairLogProbs], beta: f64) -> Result<f64, DpoError> {
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    if !(beta > 0.0) {
        return Err(DpoError::InvalidConfig(format!("beta must be > 0, got {beta}")));
    }
    let mut sum = 0.0;
    for pair in batch {
        pair.check_finite()?;
        sum += softplus(-reward_margin(pair, beta));
    }
    Ok(sum / batch.len() as f64)
}

/// The loss partials with respect to the four log-probability inputs of one
/// pair. Reference partials are reported for completeness; the reference
/// model is never updated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGrads {
    pub d_logp_policy_chosen: f64,
    pub d_logp_policy_rejected: f64,
    pub d_logp_ref_chosen: f64,
    pub d_logp_ref_rejected: f64,
}

pub fn dpo_grad_logps(pair: &PairLogProbs, beta: f64) -> Result<PairGrads, DpoError> {
    pair.check_finite()?;
    let z = reward_margin(pair, beta);
    let s = sigmoid(z);
    Ok(PairGrads {
        d_logp_policy_chosen: beta * (s - 1.0),
        d_logp_policy_rejected: beta * (1.0 - s),
        d_logp_ref_chosen: beta * (1.0 - s),
        d_logp_ref_rejected: beta * (s - 1.0),
    })
}

/// Fraction of pairs whose implicit reward favors the chosen response;
/// exact ties count one half.
pub fn reward_accuracy(batch: &[PairLogProbs], beta: f64) -> Result<f64, DpoError> {
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let mut score = 0.0;
    for pair in batch {
        pair.check_finite()?;
        let z = reward_margin(pair, beta);
        score += if z > 0.0 {
            1.0
        } else if z == 0.0 {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn pair(lpc: f64, lpr: f64, lrc: f64, lrr: f64) -> PairLogProbs {
        PairLogProbs {
            logp_policy_chosen: lpc,
            logp_policy_rejected: lpr,
            logp_ref_chosen: lrc,
            logp_ref_rejected: lrr,
        }
    }

    #[test]
    fn identity_case_is_ln_two() {
        // policy == reference on every pair
        let batch = vec![pair(-1.0, -2.0, -1.0, -2.0), pair(-0.5, -0.5, -0.5, -0.5)];
        let loss = dpo_loss(&batch, 0.1).unwrap();
        assert!((loss - LN_2).abs() < 1e-12);
        assert_eq!(reward_accuracy(&batch, 0.1).unwrap(), 0.5);
    }

    #[test]
    fn scalar_oracle_case() {
        // chosen log-ratio +1, rejected log-ratio -1, beta 0.1 => z = 0.2
        let p = pair(-1.0, -3.0, -2.0, -2.0);
        assert!((reward_margin(&p, 0.1) - 0.2).abs() < 1e-15);
        let loss = dpo_loss(&[p], 0.1).unwrap();
        assert!((loss - 0.5981388693815918).abs() < 1e-12);
    }

    #[test]
    fn extreme_margin_does_not_overflow() {
        // z = -10_000 => loss = softplus(10_000) = 10_000 within 1e-9
        let p = pair(-100_000.0, 0.0, 0.0, 0.0); // z = 0.1 * (-100000) = -10000
        let loss = dpo_loss(&[p], 0.1).unwrap();
        assert!((loss - 10_000.0).abs() < 1e-9);
        assert!(loss.is_finite());
        // and the symmetric side saturates to ~0
        let q = pair(0.0, -100_000.0, 0.0, 0.0);
        assert!(dpo_loss(&[q], 0.1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_empty_and_non_finite() {
        assert!(matches!(dpo_loss(&[], 0.1), Err(DpoError::EmptyBatch)));
        let p = pair(f64::NAN, 0.0, 0.0, 0.0);
        assert!(matches!(dpo_loss(&[p], 0.1), Err(DpoError::NonFinite(_))));
    }

    #[test]
    fn grads_at_zero_margin() {
        let p = pair(-1.0, -1.0, -1.0, -1.0);
        let g = dpo_grad_logps(&p, 0.1).unwrap();
        assert!((g.d_logp_policy_chosen + 0.05).abs() < 1e-15);
        assert!((g.d_logp_policy_rejected - 0.05).abs() < 1e-15);
    }

    #[test]
    fn grad_matches_finite_difference_on_loss() {
        let p = pair(-1.0, -3.0, -2.0, -2.0); // z = 0.2 at beta 0.1
        let g = dpo_grad_logps(&p, 0.1).unwrap();
        assert!((g.d_logp_policy_chosen - (-0.045016600268752205)).abs() < 1e-12);

        let h = 1e-6;
        let mut plus = p;
        plus.logp_policy_chosen += h;
        let mut minus = p;
        minus.logp_policy_chosen -= h;
        let fd =
            (dpo_loss(&[plus], 0.1).unwrap() - dpo_loss(&[minus], 0.1).unwrap()) / (2.0 * h);
        assert!((g.d_logp_policy_chosen - fd).abs() < 1e-9);
    }

    #[test]
    fn chosen_and_rejected_partials_cancel() {
        for (lpc, lpr) in [(-1.0, -2.0), (-0.3, -0.1), (-5.0, -5.0)] {
            let g = dpo_grad_logps(&pair(lpc, lpr, -1.0, -1.0), 0.25).unwrap();
            assert!((g.d_logp_policy_chosen + g.d_logp_policy_rejected).abs() < 1e-15);
            assert!((g.d_logp_ref_chosen + g.d_logp_ref_rejected).abs() < 1e-15);
        }
    }

    #[test]
    fn accuracy_counts_ties_as_half() {
        let batch = vec![
            pair(-1.0, -2.0, -1.5, -1.5), // z = beta * 1.5... > 0
            pair(-1.0, -3.0, -1.5, -1.5), // > 0
            pair(-3.0, -1.0, -1.5, -1.5), // < 0
            pair(-2.0, -2.0, -2.0, -2.0), // tie
        ];
        assert!((reward_accuracy(&batch, 1.0).unwrap() - 0.625).abs() < 1e-15);
    }

    #[test]
    fn swap_antisymmetry_identity() {
        let cases = [
            pair(-1.0, -3.0, -2.0, -2.2),
            pair(-0.1, -0.2, -0.3, -0.4),
            pair(-4.0, -4.0, -4.0, -4.0),
        ];
        for p in cases {
            let z = reward_margin(&p, 0.3);
            let zs = reward_margin(&p.swapped(), 0.3);
            assert!((z + zs).abs() < 1e-12);
            // softplus(-z) + softplus(z) = |z| + 2 softplus(-|z|)
            let lhs = softplus(-z) + softplus(z);
            let rhs = z.abs() + 2.0 * softplus(-z.abs());
            assert!((lhs - rhs).abs() < 1e-12);
        }
        // accuracy maps a -> 1 - a (ties stay at 0.5)
        let batch = [
            pair(-1.0, -2.0, -1.5, -1.5),
            pair(-3.0, -1.0, -1.5, -1.5),
            pair(-1.0, -2.0, -1.1, -1.9),
        ];
        let swapped: Vec<_> = batch.iter().map(PairLogProbs::swapped).collect();
        let a = reward_accuracy(&batch, 0.7).unwrap();
        let b = reward_accuracy(&swapped, 0.7).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_pair_loss_is_ln_two_only_at_zero_margin() {
        assert!((dpo_loss(&[pair(-1.0, -1.0, -1.0, -1.0)], 0.5).unwrap() - LN_2).abs() < 1e-15);
        for z_sign in [-1.0, 1.0] {
            let p = pair(-1.0 + 0.01 * z_sign, -1.0, -1.0, -1.0);
            let loss = dpo_loss(&[p], 0.5).unwrap();
            assert!((loss - LN_2).abs() > 1e-4);
            assert!(loss > 0.0);
        }
    }

    #[test]
    fn token_logprob_ingestion_sums_and_validates() {
        let chosen = vec![("a".to_string(), -0.5), ("b".to_string(), -0.25)];
        let rejected = vec![("c".to_string(), -1.0)];
        let p = PairLogProbs::from_token_logprobs(&chosen, &rejected, &chosen, &rejected).unwrap();
        assert!((p.logp_policy_chosen + 0.75).abs() < 1e-15);
        assert!((p.logp_ref_rejected + 1.0).abs() < 1e-15);

        let bad = vec![("x".to_string(), 0.5)];
        assert!(PairLogProbs::from_token_logprobs(&bad, &rejected, &chosen, &rejected).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DpoConfig::default().validate().is_ok());
        assert!(DpoConfig { beta: 0.0, ..DpoConfig::default() }.validate().is_err());
        assert!(DpoConfig { epochs: 0, ..DpoConfig::default() }.validate().is_err());
        assert!(
            DpoConfig { ref_sync: RefSync::PeriodicEvery(0), ..DpoConfig::default() }
                .validate()
                .is_err()
        );
    }
}
