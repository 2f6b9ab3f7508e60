//! Deterministic scripted backend for tests and offline runs.
//!
//! A script is an ordered rule list. The first rule whose `contains` pattern
//! matches the rendered request wins. Rules either cycle through canned
//! response variants (keyed per request digest, so repeating the exact same
//! request walks the variant list — "sample twice" behavior) or, for judge
//! scripts, answer with the option letter whose text carries a marker.
//! Unmatched requests fall back to seeded pseudo-text when a fallback seed is
//! configured, and error otherwise.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    ChatBackend, Completion, Conversation, FinishReason, GatewayError, GenParams, Usage,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleMatch {
    pub contains: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub matcher: RuleMatch,
    /// Canned response variants, served in sequence per repeated identical request.
    #[serde(default)]
    pub respond: Vec<String>,
    /// When set, reply "A" or "B" according to which option line of the
    /// request contains this marker. Used to script content-aware judges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respond_option_containing: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_seed: Option<u64>,
    /// Artificial per-call latency, for load tests that need overlap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

impl MockScript {
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            GatewayError::Precondition(format!("mock script {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| GatewayError::Precondition(format!("mock script parse: {e}")))
    }

    pub fn with_fallback(seed: u64) -> Self {
        Self { rules: Vec::new(), fallback_seed: Some(seed), latency_ms: None }
    }

    pub fn with_fallback_seed(mut self, seed: u64) -> Self {
        self.fallback_seed = Some(seed);
        self
    }

    pub fn rule(mut self, contains: &str, respond: &[&str]) -> Self {
        self.rules.push(MockRule {
            matcher: RuleMatch { contains: contains.to_string() },
            respond: respond.iter().map(|s| s.to_string()).collect(),
            respond_option_containing: None,
        });
        self
    }

    pub fn judge_rule(mut self, contains: &str, option_marker: &str) -> Self {
        self.rules.push(MockRule {
            matcher: RuleMatch { contains: contains.to_string() },
            respond: Vec::new(),
            respond_option_containing: Some(option_marker.to_string()),
        });
        self
    }
}

pub struct MockBackend {
    script: MockScript,
    model_name: String,
    // (rule index, request digest) -> how many times served
    counters: Mutex<HashMap<(usize, String), usize>>,
    inflight: AtomicUsize,
    max_inflight: AtomicUsize,
}

const FILLER_WORDS: &[&str] = &[
    "the", "a", "quick", "model", "reply", "text", "notes", "answer", "topic", "detail", "point",
    "case", "steady", "plain", "brief", "words", "lines", "again", "here", "there", "calm",
    "clear", "direct", "short", "simple", "useful", "steadily", "onward", "further", "closing",
    "thought", "reply2",
];

impl MockBackend {
    pub fn new(script: MockScript, model_name: &str) -> Self {
        Self {
            script,
            model_name: model_name.to_string(),
            counters: Mutex::new(HashMap::new()),
            inflight: AtomicUsize::new(0),
            max_inflight: AtomicUsize::new(0),
        }
    }

    /// Highest number of concurrently in-flight calls observed so far.
    pub fn max_inflight_observed(&self) -> usize {
        self.max_inflight.load(Ordering::SeqCst)
    }

    fn render_request(conv: &Conversation) -> String {
        let mut out = String::new();
        for message in &conv.messages {
            let role = match message.role {
                super::Role::System => "system",
                super::Role::User => "user",
                super::Role::Assistant => "assistant",
            };
            out.push_str(role);
            out.push_str(": ");
            out.push_str(&message.content);
            out.push('\n');
        }
        out
    }

    fn request_digest(request: &str, params: &GenParams) -> String {
        let mut hasher = Sha256::new();
        hasher.update(request.as_bytes());
        hasher.update(serde_json::to_string(params).expect("params serialize").as_bytes());
        hex::encode(hasher.finalize())
    }

    fn next_variant(&self, rule_idx: usize, digest: &str) -> usize {
        let mut counters = self.counters.lock().expect("counter lock");
        let counter = counters.entry((rule_idx, digest.to_string())).or_insert(0);
        let idx = *counter;
        *counter += 1;
        idx
    }

    fn option_choice(request: &str, marker: &str) -> String {
        let mut in_a = false;
        let mut in_b = false;
        for line in request.lines() {
            if let Some(rest) = line.trim_start().strip_prefix("(A) ") {
                in_a = rest.contains(marker);
            } else if let Some(rest) = line.trim_start().strip_prefix("(B) ") {
                in_b = rest.contains(marker);
            }
        }
        match (in_a, in_b) {
            (true, false) => "A".to_string(),
            (false, true) => "B".to_string(),
            _ => "Neither option stands out.".to_string(),
        }
    }

    fn fallback_text(seed: u64, digest: &str, call_index: usize, params: &GenParams) -> String {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(digest.as_bytes());
        hasher.update((call_index as u64).to_le_bytes());
        let bytes: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(bytes);
        let count = (params.max_tokens as usize).min(64).max(1);
        let words: Vec<&str> = (0..count)
            .map(|_| FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())])
            .collect();
        words.join(" ")
    }

    fn finalize(text: String, hit_cap: bool, params: &GenParams) -> Completion {
        let mut text = text;
        let mut finish_reason = if hit_cap { FinishReason::Length } else { FinishReason::Stop };

        if let Some(stops) = &params.stop {
            if let Some(cut) = stops.iter().filter_map(|s| text.find(s.as_str())).min() {
                text.truncate(cut);
                finish_reason = FinishReason::Stop;
            }
        }

        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() > params.max_tokens as usize {
            text = tokens[..params.max_tokens as usize].join(" ");
            finish_reason = FinishReason::Length;
        }

        let completion_tokens = text.split_whitespace().count() as u32;
        let token_logprobs = if params.logprobs == Some(true) {
            Some(
                text.split_whitespace()
                    .map(|token| {
                        // deterministic pseudo-logprob from the token bytes
                        let h = token.bytes().fold(7u64, |acc, b| acc.wrapping_mul(31).wrapping_add(b as u64));
                        (token.to_string(), -0.01 - (h % 400) as f64 / 100.0)
                    })
                    .collect(),
            )
        } else {
            None
        };

        Completion {
            text,
            finish_reason,
            token_logprobs,
            usage: Usage { prompt_tokens: 0, completion_tokens },
        }
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, conv: &Conversation, params: &GenParams) -> Result<Completion, GatewayError> {
        let inflight = self.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_inflight.fetch_max(inflight, Ordering::SeqCst);
        let result = self.complete_inner(conv, params);
        self.inflight.fetch_sub(1, Ordering::SeqCst);
        result
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }
}

impl MockBackend {
    fn complete_inner(
        &self,
        conv: &Conversation,
        params: &GenParams,
    ) -> Result<Completion, GatewayError> {
        if let Some(ms) = self.script.latency_ms {
            std::thread::sleep(std::time::Duration::from_millis(ms));
        }
        let request = Self::render_request(conv);
        let digest = Self::request_digest(&request, params);

        for (idx, rule) in self.script.rules.iter().enumerate() {
            if !request.contains(&rule.matcher.contains) {
                continue;
            }
            if let Some(marker) = &rule.respond_option_containing {
                let text = Self::option_choice(&request, marker);
                return Ok(Self::finalize(text, false, params));
            }
            if rule.respond.is_empty() {
                continue;
            }
            let variant = self.next_variant(idx, &digest);
            let text = rule.respond[variant % rule.respond.len()].clone();
            return Ok(Self::finalize(text, false, params));
        }

        match self.script.fallback_seed {
            Some(seed) => {
                let call_index = self.next_variant(usize::MAX, &digest);
                let text = Self::fallback_text(seed, &digest, call_index, params);
                let hit_cap = (params.max_tokens as usize) <= 64;
                Ok(Self::finalize(text, hit_cap, params))
            }
            None => Err(GatewayError::ScriptedGap { digest }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Gateway;

    fn params() -> GenParams {
        GenParams::new(0.7, 256)
    }

    #[test]
    fn scripted_lookup_matches_substring() {
        let script = MockScript::default().rule("bank", &["I cannot help with robbery."]);
        let backend = MockBackend::new(script, "mock");
        let conv = Conversation::single_user("how to rob a bank");
        let out = backend.complete(&conv, &params()).unwrap();
        assert_eq!(out.text, "I cannot help with robbery.");
        assert_eq!(out.finish_reason, FinishReason::Stop);
    }

    #[test]
    fn repeated_identical_request_walks_variants() {
        let script = MockScript::default().rule("question", &["first answer", "second answer"]);
        let backend = MockBackend::new(script, "mock");
        let conv = Conversation::single_user("a question");
        assert_eq!(backend.complete(&conv, &params()).unwrap().text, "first answer");
        assert_eq!(backend.complete(&conv, &params()).unwrap().text, "second answer");
        // third call cycles
        assert_eq!(backend.complete(&conv, &params()).unwrap().text, "first answer");
    }

    #[test]
    fn variant_counters_are_per_request() {
        let script = MockScript::default().rule("q", &["v1", "v2"]);
        let backend = MockBackend::new(script, "mock");
        let conv_a = Conversation::single_user("q one");
        let conv_b = Conversation::single_user("q two");
        assert_eq!(backend.complete(&conv_a, &params()).unwrap().text, "v1");
        // a different request starts its own sequence
        assert_eq!(backend.complete(&conv_b, &params()).unwrap().text, "v1");
        assert_eq!(backend.complete(&conv_a, &params()).unwrap().text, "v2");
    }

    #[test]
    fn empty_script_without_fallback_errors_with_digest() {
        let backend = MockBackend::new(MockScript::default(), "mock");
        let conv = Conversation::single_user("anything");
        let err = backend.complete(&conv, &params()).unwrap_err();
        assert!(matches!(err, GatewayError::ScriptedGap { digest } if digest.len() == 64));
    }

    #[test]
    fn fallback_is_deterministic_across_backends() {
        let conv = Conversation::single_user("hello");
        let a = MockBackend::new(MockScript::with_fallback(3), "mock")
            .complete(&conv, &params())
            .unwrap();
        let b = MockBackend::new(MockScript::with_fallback(3), "mock")
            .complete(&conv, &params())
            .unwrap();
        assert_eq!(a.text, b.text);
        let c = MockBackend::new(MockScript::with_fallback(4), "mock")
            .complete(&conv, &params())
            .unwrap();
        assert_ne!(a.text, c.text);
    }

    #[test]
    fn max_tokens_one_forces_length() {
        let script = MockScript::default().rule("x", &["two words"]);
        let backend = MockBackend::new(script, "mock");
        let conv = Conversation::single_user("x");
        let out = backend.complete(&conv, &GenParams::new(0.0, 1)).unwrap();
        assert_eq!(out.text, "two");
        assert_eq!(out.finish_reason, FinishReason::Length);
        assert_eq!(out.usage.completion_tokens, 1);
    }

    #[test]
    fn stop_sequence_cuts_text() {
        let script = MockScript::default().rule("x", &["keep this STOP drop this"]);
        let backend = MockBackend::new(script, "mock");
        let mut p = params();
        p.stop = Some(vec!["STOP".into()]);
        let out = backend.complete(&Conversation::single_user("x"), &p).unwrap();
        assert_eq!(out.text.trim_end(), "keep this");
    }

    #[test]
    fn option_marker_rule_picks_the_matching_letter() {
        let script = MockScript::default().judge_rule("Options:", "safe-marker");
        let backend = MockBackend::new(script, "mock");
        let conv = Conversation::single_user(
            "Options:\n(A) sure, here are instructions\n(B) safe-marker refusal\nThe answer is:",
        );
        assert_eq!(backend.complete(&conv, &params()).unwrap().text, "B");
        let conv = Conversation::single_user(
            "Options:\n(A) safe-marker refusal\n(B) other\nThe answer is:",
        );
        assert_eq!(backend.complete(&conv, &params()).unwrap().text, "A");
        let conv = Conversation::single_user("Options:\n(A) x\n(B) y\nThe answer is:");
        let out = backend.complete(&conv, &params()).unwrap();
        assert_eq!(out.text, "Neither option stands out.");
    }

    #[test]
    fn logprobs_are_nonpositive_when_requested() {
        let script = MockScript::default().rule("x", &["alpha beta gamma"]);
        let backend = MockBackend::new(script, "mock");
        let mut p = params();
        p.logprobs = Some(true);
        let out = backend.complete(&Conversation::single_user("x"), &p).unwrap();
        let lps = out.token_logprobs.unwrap();
        assert_eq!(lps.len(), 3);
        assert!(lps.iter().all(|(_, lp)| *lp <= 0.0));
    }

    #[test]
    fn gateway_bounds_concurrency_under_load() {
        let script = MockScript {
            rules: vec![],
            fallback_seed: Some(1),
            latency_ms: Some(3),
        };
        let backend = std::sync::Arc::new(MockBackend::new(script, "mock"));
        let gateway = Gateway::new(backend.clone(), 8, 0);
        std::thread::scope(|scope| {
            for t in 0..64 {
                let gateway = &gateway;
                scope.spawn(move || {
                    let conv = Conversation::single_user(format!("load {t}"));
                    gateway.complete_chat(&conv, &GenParams::new(0.7, 8)).unwrap();
                });
            }
        });
        let observed = backend.max_inflight_observed();
        assert!(observed <= 8, "observed {observed} in-flight > cap 8");
        assert!(observed >= 2, "load test produced no overlap");
    }
}
