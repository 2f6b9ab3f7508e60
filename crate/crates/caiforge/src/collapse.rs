//! Detection and clean-up of degenerate generation patterns in revisions:
//! trailing near-duplicate sentences, emoji runs, and n-gram repetition.
//!
//! All detectors are pure functions. Cleaning under `StripTail` only ever
//! truncates, so the cleaned text is a prefix of the input (minus trailing
//! whitespace) and re-cleaning is a no-op.

use serde::{Deserialize, Serialize};

use crate::stage1::SftRecord;

/// ASCII emoticons treated as emoji tokens.
const EMOTICONS: &[&str] = &[":)", ":(", ":D", ";)", ":P"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CollapseReason {
    TrailingRepeat,
    EmojiRun,
    NGramRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub trailing_repeat_count: usize,
    pub max_emoji_run: usize,
    pub ngram_repetition_ratio: f64,
    pub flagged: bool,
    pub reasons: Vec<CollapseReason>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanAction {
    FlagOnly,
    StripTail,
    Drop,
}

/// Thresholds are inclusive: a metric at or above its threshold flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanPolicy {
    pub trailing_repeat_threshold: usize,
    pub emoji_run_threshold: usize,
    pub ngram_ratio_threshold: f64,
    pub similarity_threshold: f64,
    pub ngram_n: usize,
    pub action: CleanAction,
}

impl Default for CleanPolicy {
    fn default() -> Self {
        Self {
            trailing_repeat_threshold: 3,
            emoji_run_threshold: 3,
            ngram_ratio_threshold: 0.5,
            similarity_threshold: 0.8,
            ngram_n: 2,
            action: CleanAction::FlagOnly,
        }
    }
}

impl CleanPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.trailing_repeat_threshold < 2 {
            return Err("trailing_repeat_threshold must be >= 2".into());
        }
        if self.emoji_run_threshold < 2 {
            return Err("emoji_run_threshold must be >= 2".into());
        }
        if !(self.ngram_ratio_threshold > 0.0 && self.ngram_ratio_threshold <= 1.0) {
            return Err("ngram_ratio_threshold must be in (0, 1]".into());
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold <= 1.0) {
            return Err("similarity_threshold must be in (0, 1]".into());
        }
        if self.ngram_n < 1 {
            return Err("ngram_n must be >= 1".into());
        }
        Ok(())
    }

    pub fn with_action(mut self, action: CleanAction) -> Self {
        self.action = action;
        self
    }
}

/// Byte ranges that tile the text, cut after terminal punctuation runs
/// (`.`, `!`, `?`) and at newlines.
fn sentence_ranges(text: &str) -> Vec<std::ops::Range<usize>> {
    let mut ranges = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((idx, ch)) = chars.next() {
        let end_of_sentence = match ch {
            '\n' => true,
            '.' | '!' | '?' => {
                // consume the whole punctuation run ("..." is one boundary)
                !matches!(chars.peek(), Some((_, '.' | '!' | '?')))
            }
            _ => false,
        };
        if end_of_sentence {
            let end = idx + ch.len_utf8();
            ranges.push(start..end);
            start = end;
        }
    }
    if start < text.len() {
        ranges.push(start..text.len());
    }
    ranges
}

/// Trimmed, non-empty sentence spans. Emoji-only lines come out as their own
/// spans because newlines are hard boundaries.
pub fn split_sentences(text: &str) -> Vec<String> {
    sentence_ranges(text)
        .into_iter()
        .map(|r| text[r].trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn levenshtein(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut prev = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cur = row[j + 1];
            row[j + 1] = (row[j + 1] + 1)
                .min(row[j] + 1)
                .min(prev + usize::from(ca != cb));
            prev = cur;
        }
    }
    row[b.len()]
}

/// Length-sum-normalized Levenshtein similarity over lowercased characters:
/// `1 - d(a, b) / (|a| + |b|)`. Identical strings score 1, and two fully
/// dissimilar equal-length strings score 0.5.
pub fn normalized_similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.to_lowercase().chars().collect();
    let b: Vec<char> = b.to_lowercase().chars().collect();
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&a, &b) as f64 / total as f64
}

/// Longest trailing window whose members are all similar to the window's
/// first element.
fn trailing_run(units: &[String], similarity_threshold: f64) -> usize {
    let n = units.len();
    if n == 0 {
        return 1;
    }
    let mut best = 1;
    for k in 2..=n {
        let anchor = &units[n - k];
        let all_similar = units[n - k..]
            .iter()
            .all(|u| normalized_similarity(anchor, u) >= similarity_threshold);
        if all_similar {
            best = k;
        }
    }
    best
}

fn nonempty_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

/// Count the trailing near-duplicate sentence run. Sentences are measured at
/// two granularities — punctuation-split spans and whole lines — and the
/// longer run wins, so both single-line stutter and repeated closing lines
/// register. Returns 1 when nothing repeats.
pub fn detect_trailing_repetition(text: &str, similarity_threshold: f64) -> usize {
    let spans = split_sentences(text);
    let lines = nonempty_lines(text);
    trailing_run(&spans, similarity_threshold).max(trailing_run(&lines, similarity_threshold))
}

fn is_emoji_char(ch: char) -> bool {
    matches!(u32::from(ch),
        0x1F300..=0x1F5FF   // symbols & pictographs
        | 0x1F600..=0x1F64F // emoticons
        | 0x1F680..=0x1F6FF // transport & map
        | 0x1F900..=0x1F9FF // supplemental symbols
        | 0x1FA70..=0x1FAFF // extended symbols
        | 0x2600..=0x27BF   // misc symbols & dingbats
        | 0x1F1E6..=0x1F1FF // regional indicators
    )
}

/// Emoji tokens in reading order, as (byte offset, byte length) pairs. A token
/// is one emoji codepoint or one ASCII emoticon; variation selectors and
/// zero-width joiners glue onto the previous token.
fn emoji_tokens(text: &str) -> Vec<(usize, usize)> {
    let mut tokens: Vec<(usize, usize)> = Vec::new();
    let bytes = text.as_bytes();
    let mut idx = 0;
    while idx < text.len() {
        if let Some(emoticon) = EMOTICONS.iter().find(|e| text[idx..].starts_with(**e)) {
            tokens.push((idx, emoticon.len()));
            idx += emoticon.len();
            continue;
        }
        let ch = text[idx..].chars().next().expect("in-bounds char");
        let len = ch.len_utf8();
        if matches!(ch, '\u{FE0F}' | '\u{200D}') {
            if let Some(last) = tokens.last_mut() {
                if last.0 + last.1 == idx {
                    last.1 += len;
                    idx += len;
                    continue;
                }
            }
        } else if is_emoji_char(ch) {
            tokens.push((idx, len));
            idx += len;
            continue;
        }
        let _ = bytes;
        idx += len;
    }
    tokens
}

/// Longest run of consecutive emoji tokens, where only whitespace may sit
/// between members of a run.
pub fn emoji_run_stats(text: &str) -> usize {
    let tokens = emoji_tokens(text);
    let mut max_run = 0;
    let mut run = 0;
    let mut prev_end: Option<usize> = None;
    for (start, len) in tokens {
        let contiguous = match prev_end {
            Some(end) => text[end..start].chars().all(char::is_whitespace),
            None => true,
        };
        run = if contiguous && prev_end.is_some() { run + 1 } else { 1 };
        max_run = max_run.max(run);
        prev_end = Some(start + len);
    }
    max_run
}

/// `1 - distinct/total` over lowercased word n-grams; 0 when there is at most
/// one n-gram.
pub fn ngram_repetition_ratio(text: &str, n: usize) -> f64 {
    assert!(n >= 1, "n must be >= 1");
    let tokens: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    if tokens.len() < n {
        return 0.0;
    }
    let grams: Vec<&[String]> = tokens.windows(n).collect();
    if grams.len() <= 1 {
        return 0.0;
    }
    let distinct: std::collections::HashSet<&[String]> = grams.iter().copied().collect();
    1.0 - distinct.len() as f64 / grams.len() as f64
}

/// Run all detectors against a policy's thresholds.
pub fn analyze(text: &str, policy: &CleanPolicy) -> CollapseReport {
    let trailing_repeat_count = detect_trailing_repetition(text, policy.similarity_threshold);
    let max_emoji_run = emoji_run_stats(text);
    let ratio = ngram_repetition_ratio(text, policy.ngram_n);

    let mut reasons = Vec::new();
    if trailing_repeat_count >= policy.trailing_repeat_threshold {
        reasons.push(CollapseReason::TrailingRepeat);
    }
    if max_emoji_run >= policy.emoji_run_threshold {
        reasons.push(CollapseReason::EmojiRun);
    }
    if ratio >= policy.ngram_ratio_threshold {
        reasons.push(CollapseReason::NGramRatio);
    }
    CollapseReport {
        trailing_repeat_count,
        max_emoji_run,
        ngram_repetition_ratio: ratio,
        flagged: !reasons.is_empty(),
        reasons,
    }
}

/// Byte offset of the end of the `keep`-th unit (1-based) among either
/// sentence spans or non-empty lines.
fn offset_after_unit(text: &str, keep: usize, by_lines: bool) -> usize {
    if by_lines {
        let mut seen = 0;
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let end = offset + line.len();
            if !line.trim().is_empty() {
                seen += 1;
                if seen == keep {
                    return offset + line.trim_end_matches(['\n', '\r']).len();
                }
            }
            offset = end;
        }
        text.len()
    } else {
        let ranges = sentence_ranges(text);
        let mut seen = 0;
        for range in ranges {
            if !text[range.clone()].trim().is_empty() {
                seen += 1;
                if seen == keep {
                    return range.end;
                }
            }
        }
        text.len()
    }
}

/// Truncate the trailing near-duplicate run down to its first instance.
/// Returns the text unchanged when the run is below the policy threshold.
fn strip_trailing_run(text: &str, policy: &CleanPolicy) -> String {
    let spans = split_sentences(text);
    let lines = nonempty_lines(text);
    let span_run = trailing_run(&spans, policy.similarity_threshold);
    let line_run = trailing_run(&lines, policy.similarity_threshold);
    let count = span_run.max(line_run);
    if count < policy.trailing_repeat_threshold {
        return text.to_string();
    }
    let by_lines = line_run >= span_run;
    let total = if by_lines { lines.len() } else { spans.len() };
    let run = if by_lines { line_run } else { span_run };
    let keep = total - run + 1;
    let offset = offset_after_unit(text, keep, by_lines);
    text[..offset].trim_end().to_string()
}

/// Reduce a trailing emoji run (at the very end of the text) to one token.
fn strip_trailing_emoji_run(text: &str) -> String {
    let tokens = emoji_tokens(text);
    if tokens.is_empty() {
        return text.to_string();
    }
    // walk backwards over the trailing whitespace-separated emoji run
    let (last_start, last_len) = *tokens.last().expect("non-empty");
    if !text[last_start + last_len..].trim().is_empty() {
        return text.to_string(); // run is not trailing
    }
    let mut run_first = tokens.len() - 1;
    while run_first > 0 {
        let (prev_start, prev_len) = tokens[run_first - 1];
        let (cur_start, _) = tokens[run_first];
        if text[prev_start + prev_len..cur_start].chars().all(char::is_whitespace) {
            run_first -= 1;
        } else {
            break;
        }
    }
    if tokens.len() - run_first < 2 {
        return text.to_string();
    }
    let (first_start, first_len) = tokens[run_first];
    text[..first_start + first_len].trim_end().to_string()
}

/// Clean one revision under a policy. The report always describes the input
/// text; the returned string is the cleaned text (empty under `Drop` when
/// flagged, signalling exclusion).
pub fn clean_revision(text: &str, policy: &CleanPolicy) -> (String, CollapseReport) {
    let report = analyze(text, policy);
    match policy.action {
        CleanAction::FlagOnly => (text.to_string(), report),
        CleanAction::Drop => {
            if report.flagged {
                (String::new(), report)
            } else {
                (text.to_string(), report)
            }
        }
        CleanAction::StripTail => {
            let mut current = text.to_string();
            loop {
                let r = analyze(&current, policy);
                let next = if r.reasons.contains(&CollapseReason::TrailingRepeat) {
                    strip_trailing_run(&current, policy)
                } else if r.reasons.contains(&CollapseReason::EmojiRun) {
                    strip_trailing_emoji_run(&current)
                } else {
                    break;
                };
                if next == current {
                    break;
                }
                current = next;
            }
            (current, report)
        }
    }
}

/// Corpus-level scan summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScanReport {
    pub total: usize,
    pub flagged: usize,
    pub flag_rate: f64,
    pub reason_histogram: std::collections::BTreeMap<String, usize>,
    /// Records whose revision was rewritten into `cleaned_revision`.
    pub cleaned: usize,
    /// Flagged records StripTail could not bring under thresholds.
    pub unresolved: usize,
    /// Record ids to exclude under `Drop`.
    pub dropped_ids: Vec<String>,
    pub per_record: Vec<RecordScan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScan {
    pub id: String,
    pub report: CollapseReport,
}

/// Scan stage-1 output records, writing `cleaned_revision` where `StripTail`
/// produced a text that passes the thresholds. Already-clean records are left
/// untouched, so a rescan of cleaned output changes nothing.
pub fn scan_dataset(records: &mut [SftRecord], policy: &CleanPolicy) -> CorpusScanReport {
    let mut report = CorpusScanReport {
        total: records.len(),
        flagged: 0,
        flag_rate: 0.0,
        reason_histogram: Default::default(),
        cleaned: 0,
        unresolved: 0,
        dropped_ids: Vec::new(),
        per_record: Vec::new(),
    };

    for record in records.iter_mut() {
        let text = record.cleaned_revision.as_deref().unwrap_or(&record.revision);
        let (cleaned, rec_report) = clean_revision(text, policy);
        if rec_report.flagged {
            report.flagged += 1;
            for reason in &rec_report.reasons {
                *report
                    .reason_histogram
                    .entry(format!("{reason:?}"))
                    .or_default() += 1;
            }
            match policy.action {
                CleanAction::StripTail => {
                    if analyze(&cleaned, policy).flagged {
                        report.unresolved += 1;
                    } else {
                        record.cleaned_revision = Some(cleaned);
                        report.cleaned += 1;
                    }
                }
                CleanAction::Drop => report.dropped_ids.push(record.prompt.id.clone()),
                CleanAction::FlagOnly => {}
            }
        }
        report.per_record.push(RecordScan { id: record.prompt.id.clone(), report: rec_report });
    }
    if report.total > 0 {
        report.flag_rate = report.flagged as f64 / report.total as f64;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The repeated-closing exhibit: three near-duplicate sign-off lines.
    pub const REPEATED_CLOSINGS: &str = "Please let me know if you have any further questions. Thank you for using the chatbot! :) Have a great day! :)\nPlease let me know if you have any further inquiries. I am here to help! Have a great day! :)\nPlease let me know if you have any further questions. I am here to help! Have a great day! :)";

    /// A healthy two-sentence revision that must not flag.
    pub const DISTINCT_REVISION: &str = "It's important to recognize the severity of criminal activities and their impact on society, whether it's a robbery or any other crime. While some bank robbers may have used schemes that made them successful in the short term, it never justified their harmful actions.";

    #[test]
    fn split_basic() {
        assert_eq!(split_sentences("Hi. Bye!"), vec!["Hi.", "Bye!"]);
        assert_eq!(split_sentences(""), Vec::<String>::new());
    }

    #[test]
    fn split_exhibit_one_span_per_line_at_least() {
        let spans = split_sentences(REPEATED_CLOSINGS);
        assert!(spans.len() >= 3);
        let starts = spans
            .iter()
            .filter(|s| s.starts_with("Please let me know"))
            .count();
        assert_eq!(starts, 3);
    }

    #[test]
    fn sentence_ranges_tile_the_text() {
        for text in ["Hi. Bye!", "a\n\nb", REPEATED_CLOSINGS, "no punctuation at all"] {
            let ranges = sentence_ranges(text);
            let mut cursor = 0;
            for r in &ranges {
                assert_eq!(r.start, cursor);
                cursor = r.end;
            }
            assert_eq!(cursor, text.len());
        }
    }

    #[test]
    fn emoji_only_lines_are_own_spans() {
        let spans = split_sentences("Some text\n:)\nMore text");
        assert_eq!(spans, vec!["Some text", ":)", "More text"]);
    }

    #[test]
    fn exhibit_trailing_run_is_three() {
        assert_eq!(detect_trailing_repetition(REPEATED_CLOSINGS, 0.8), 3);
    }

    #[test]
    fn distinct_sentences_do_not_run() {
        assert_eq!(detect_trailing_repetition("A. B. C.", 0.8), 1);
    }

    #[test]
    fn run_must_be_trailing() {
        // brute-force expectation: five identical sentences followed by one
        // distinct final sentence leave no trailing run
        let text = "Same sentence here. Same sentence here. Same sentence here. \
                    Same sentence here. Same sentence here. Completely different closing words now!";
        assert_eq!(detect_trailing_repetition(text, 0.8), 1);
    }

    #[test]
    fn single_line_stutter_is_caught_at_span_level() {
        let text = "Intro words. I am here to help! I am here to help! I am here to help!";
        assert_eq!(detect_trailing_repetition(text, 0.8), 3);
    }

    #[test]
    fn emoji_runs_count_across_whitespace_only() {
        assert_eq!(emoji_run_stats("Have a great day! :) :) :)"), 3);
        assert_eq!(emoji_run_stats("no emoticons here."), 0);
        assert_eq!(emoji_run_stats(":) text :) :)"), 2);
    }

    #[test]
    fn emoji_codepoints_and_emoticons_mix() {
        assert_eq!(emoji_run_stats("nice \u{1F600} :) \u{2764}\u{FE0F} end"), 3);
        assert_eq!(emoji_run_stats("a\u{1F600}b"), 1);
    }

    #[test]
    fn ngram_ratio_matches_hand_counts() {
        assert!((ngram_repetition_ratio("a b a b a b", 2) - 0.6).abs() < 1e-12);
        assert_eq!(ngram_repetition_ratio("all distinct words here", 2), 0.0);
        assert_eq!(ngram_repetition_ratio("word", 2), 0.0);
        assert_eq!(ngram_repetition_ratio("", 1), 0.0);
    }

    #[test]
    fn exhibit_flags_and_clean_text_does_not() {
        let policy = CleanPolicy::default();
        let report = analyze(REPEATED_CLOSINGS, &policy);
        assert!(report.flagged);
        assert!(report.reasons.contains(&CollapseReason::TrailingRepeat));
        assert_eq!(report.trailing_repeat_count, 3);

        let clean = analyze(DISTINCT_REVISION, &policy);
        assert!(!clean.flagged, "clean revision flagged: {clean:?}");
    }

    #[test]
    fn strip_tail_keeps_first_closing_only() {
        let policy = CleanPolicy::default().with_action(CleanAction::StripTail);
        let (cleaned, report) = clean_revision(REPEATED_CLOSINGS, &policy);
        assert!(report.flagged);
        assert_eq!(
            cleaned,
            "Please let me know if you have any further questions. Thank you for using the chatbot! :) Have a great day! :)"
        );
        // idempotent and unflagged afterwards
        let (again, second) = clean_revision(&cleaned, &policy);
        assert_eq!(again, cleaned);
        assert!(!second.flagged);
    }

    #[test]
    fn strip_tail_leaves_clean_text_unchanged() {
        for action in [CleanAction::FlagOnly, CleanAction::StripTail, CleanAction::Drop] {
            let policy = CleanPolicy::default().with_action(action);
            let (out, report) = clean_revision(DISTINCT_REVISION, &policy);
            assert_eq!(out, DISTINCT_REVISION);
            assert!(!report.flagged);
        }
    }

    #[test]
    fn strip_tail_reduces_trailing_emoji_run() {
        let policy = CleanPolicy::default().with_action(CleanAction::StripTail);
        let text = "Stay safe out there. :) :) :) :)";
        let (cleaned, report) = clean_revision(text, &policy);
        assert!(report.reasons.contains(&CollapseReason::EmojiRun));
        assert_eq!(cleaned, "Stay safe out there. :)");
        assert!(!analyze(&cleaned, &policy).flagged);
    }

    #[test]
    fn drop_at_threshold_boundary_empties_result() {
        let mut policy = CleanPolicy::default().with_action(CleanAction::Drop);
        policy.emoji_run_threshold = 4;
        let text = "One two three four five six. :) :) :) :)";
        let (cleaned, report) = clean_revision(text, &policy);
        assert_eq!(cleaned, "");
        assert_eq!(report.max_emoji_run, 4);
        assert_eq!(report.reasons, vec![CollapseReason::EmojiRun]);
        // one token below the threshold survives
        let shorter = "One two three four five six. :) :) :)";
        let (kept, report) = clean_revision(shorter, &policy);
        assert_eq!(kept, shorter);
        assert!(!report.flagged);
    }

    #[test]
    fn monotone_in_appended_final_line() {
        let texts = [
            REPEATED_CLOSINGS.to_string(),
            "One. Two. Three.".to_string(),
            "Same here. Same here.".to_string(),
        ];
        for text in texts {
            let before = detect_trailing_repetition(&text, 0.8);
            let last_line = text.lines().last().unwrap().to_string();
            let appended = format!("{text}\n{last_line}");
            let after = detect_trailing_repetition(&appended, 0.8);
            assert!(after >= before, "{before} -> {after} for {text:?}");
        }
    }

    #[test]
    fn conservation_cleaned_is_prefix() {
        let policy = CleanPolicy::default().with_action(CleanAction::StripTail);
        let (cleaned, _) = clean_revision(REPEATED_CLOSINGS, &policy);
        assert!(REPEATED_CLOSINGS.starts_with(&cleaned));
    }

    #[test]
    fn similarity_is_symmetric_and_bounded() {
        let pairs = [("abc", "abd"), ("", ""), ("x", ""), ("hello there", "hello theer")];
        for (a, b) in pairs {
            let s = normalized_similarity(a, b);
            assert!((0.0..=1.0).contains(&s));
            assert!((s - normalized_similarity(b, a)).abs() < 1e-12);
        }
        assert_eq!(normalized_similarity("same", "same"), 1.0);
    }

    #[test]
    fn policy_validation() {
        assert!(CleanPolicy::default().validate().is_ok());
        let mut p = CleanPolicy::default();
        p.trailing_repeat_threshold = 1;
        assert!(p.validate().is_err());
        let mut p = CleanPolicy::default();
        p.ngram_ratio_threshold = 0.0;
        assert!(p.validate().is_err());
    }
}
