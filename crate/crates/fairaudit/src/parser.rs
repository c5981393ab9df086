//! Extraction of structured predictions from free-form model output.
//!
//! Parsing never fails with an error: malformed output becomes a
//! `ParseStatus::Failed` value with a diagnostic reason, because failures are
//! counted and reported rather than allowed to crash long runs.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::LabelValue;
use crate::prompt::{normalize, TaskKind, TaskShape};

/// Outcome of parsing one response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Failed { reason: String },
}

/// Labels extracted from model output, or a structured parse failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    /// Label index for binary / multiclass tasks.
    pub class_index: Option<usize>,
    /// Per-label 0/1 assignments for multilabel tasks, keyed by canonical
    /// label name.
    pub labels: Option<BTreeMap<String, u8>>,
    /// Extracted REASONING text, when present.
    pub reasoning: Option<String>,
    pub status: ParseStatus,
}

impl ParsedPrediction {
    fn ok_class(index: usize, reasoning: Option<String>) -> Self {
        ParsedPrediction {
            class_index: Some(index),
            labels: None,
            reasoning,
            status: ParseStatus::Ok,
        }
    }

    fn ok_labels(labels: BTreeMap<String, u8>, reasoning: Option<String>) -> Self {
        ParsedPrediction {
            class_index: None,
            labels: Some(labels),
            reasoning,
            status: ParseStatus::Ok,
        }
    }

    fn failed(reason: impl Into<String>) -> Self {
        ParsedPrediction {
            class_index: None,
            labels: None,
            reasoning: None,
            status: ParseStatus::Failed {
                reason: reason.into(),
            },
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ParseStatus::Ok
    }

    pub fn failure_reason(&self) -> Option<&str> {
        match &self.status {
            ParseStatus::Ok => None,
            ParseStatus::Failed { reason } => Some(reason),
        }
    }

    /// The prediction as a `LabelValue`, when parsing succeeded.
    pub fn to_label_value(&self) -> Option<LabelValue> {
        match &self.status {
            ParseStatus::Ok => match (&self.class_index, &self.labels) {
                (Some(idx), None) => Some(LabelValue::Class(*idx)),
                (None, Some(map)) => Some(LabelValue::Multi(map.clone())),
                _ => None,
            },
            ParseStatus::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ParserError {
    #[error("empty prediction list")]
    EmptyInput,
}

/// One line of the parse-failure log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParseFailureRecord {
    pub dataset: String,
    pub model: String,
    pub strategy: String,
    pub run: u32,
    pub sample_id: String,
    pub variant: String,
    pub reason: String,
    /// SHA-256 of the raw response text, so raw output need not be stored.
    pub raw_digest: String,
}

fn output_token() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\boutput\s*:").unwrap())
}

fn reasoning_token() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\breasoning\s*:").unwrap())
}

/// Precompiled parser for one task; prefer this over the free function when
/// parsing many responses.
pub struct ResponseParser {
    task: TaskKind,
    /// Per label: patterns matching "Name:" for the display and canonical
    /// forms (multilabel only).
    label_patterns: Vec<Vec<Regex>>,
}

impl ResponseParser {
    pub fn new(task: &TaskKind) -> Self {
        let label_patterns = match task.shape {
            TaskShape::Multilabel => task
                .labels
                .iter()
                .map(|def| {
                    let mut names = vec![def.display_name()];
                    if def.display.is_some() {
                        names.push(def.name.as_str());
                    }
                    names
                        .iter()
                        .map(|name| {
                            let parts = name
                                .split_whitespace()
                                .map(regex::escape)
                                .collect::<Vec<_>>()
                                .join(r"\s+");
                            Regex::new(&format!(r"(?i)\b{parts}\s*:")).unwrap()
                        })
                        .collect()
                })
                .collect(),
            _ => Vec::new(),
        };
        ResponseParser {
            task: task.clone(),
            label_patterns,
        }
    }

    /// Parses `text` into a prediction for the parser's task.
    pub fn parse(&self, text: &str) -> ParsedPrediction {
        match self.task.shape {
            TaskShape::Binary | TaskShape::Multiclass => self.parse_single_label(text),
            TaskShape::Multilabel => self.parse_multilabel(text),
        }
    }

    /// Like [`parse`](Self::parse), but first strips an echoed prompt prefix,
    /// so the query answer is matched rather than echoed exemplar answers.
    pub fn parse_after_echo(&self, text: &str, prompt: &str) -> ParsedPrediction {
        let body = text.trim_start();
        let prompt = prompt.trim();
        if !prompt.is_empty() {
            if let Some(stripped) = body.strip_prefix(prompt) {
                return self.parse(stripped);
            }
        }
        self.parse(text)
    }

    fn parse_single_label(&self, text: &str) -> ParsedPrediction {
        let Some(m) = output_token().find(text) else {
            return ParsedPrediction::failed("no OUTPUT token");
        };
        let rest = &text[m.end()..];
        let reasoning = extract_reasoning(rest);

        // Integer answer: the first non-whitespace characters after OUTPUT:.
        let value_start = rest.trim_start();
        if value_start.starts_with(|c: char| c.is_ascii_digit()) {
            let digits: String = value_start
                .chars()
                .take_while(|c| c.is_ascii_digit())
                .collect();
            let Ok(index) = digits.parse::<usize>() else {
                return ParsedPrediction::failed(format!("unparsable integer '{digits}'"));
            };
            if index >= self.task.labels.len() {
                return ParsedPrediction::failed(format!(
                    "label index {index} out of range (task has {} labels)",
                    self.task.labels.len()
                ));
            }
            // A parenthesized name that resolves to a different label is a
            // contradiction, not a tiebreak.
            let after_digits = value_start[digits.len()..].trim_start();
            if let Some(inner) = after_digits.strip_prefix('(') {
                if let Some(end) = inner.find(')') {
                    let name = &inner[..end];
                    if let Some(named) = self.task.resolve_label(name) {
                        if named != index {
                            return ParsedPrediction::failed(format!(
                                "index {index} conflicts with label name '{}'",
                                name.trim()
                            ));
                        }
                    }
                }
            }
            return ParsedPrediction::ok_class(index, reasoning);
        }

        // No integer: resolve by a unique label name on the OUTPUT line.
        let line = rest.lines().next().unwrap_or("");
        match unique_label_match(line, &self.task) {
            LabelMatch::One(index) => ParsedPrediction::ok_class(index, reasoning),
            LabelMatch::None => ParsedPrediction::failed("no parsable label after OUTPUT"),
            LabelMatch::Ambiguous => {
                ParsedPrediction::failed("ambiguous label names after OUTPUT")
            }
        }
    }

    fn parse_multilabel(&self, text: &str) -> ParsedPrediction {
        let mut labels = BTreeMap::new();
        for (def, patterns) in self.task.labels.iter().zip(&self.label_patterns) {
            // First match wins; the display form is tried before the
            // canonical abbreviation and the earlier occurrence is used.
            let m = patterns
                .iter()
                .filter_map(|re| re.find(text))
                .min_by_key(|m| m.start());
            let Some(m) = m else {
                return ParsedPrediction::failed(format!("label '{}' not found", def.name));
            };
            let rest = &text[m.end()..];
            let (digit, word) = parse_label_value(rest);
            let value = match (digit, word) {
                (Some(d), Some(w)) if d != w => {
                    return ParsedPrediction::failed(format!(
                        "contradictory value for label '{}'",
                        def.name
                    ))
                }
                (Some(d), _) => d,
                (None, Some(w)) => w,
                (None, None) => {
                    return ParsedPrediction::failed(format!(
                        "no value for label '{}'",
                        def.name
                    ))
                }
            };
            labels.insert(def.name.clone(), value);
        }
        let reasoning = extract_reasoning(text);
        ParsedPrediction::ok_labels(labels, reasoning)
    }
}

/// Parses `text` for `task`. Convenience wrapper over [`ResponseParser`].
pub fn parse_response(text: &str, task: &TaskKind) -> ParsedPrediction {
    ResponseParser::new(task).parse(text)
}

/// Parses with an echoed prompt prefix stripped first.
pub fn parse_response_after_echo(text: &str, prompt: &str, task: &TaskKind) -> ParsedPrediction {
    ResponseParser::new(task).parse_after_echo(text, prompt)
}

/// Fraction of predictions whose status is failed.
pub fn failure_rate(predictions: &[ParsedPrediction]) -> Result<f64, ParserError> {
    if predictions.is_empty() {
        return Err(ParserError::EmptyInput);
    }
    let failed = predictions.iter().filter(|p| !p.is_ok()).count();
    Ok(failed as f64 / predictions.len() as f64)
}

fn extract_reasoning(text: &str) -> Option<String> {
    let m = reasoning_token().find(text)?;
    let body = text[m.end()..].trim();
    if body.is_empty() {
        None
    } else {
        Some(body.to_string())
    }
}

enum LabelMatch {
    None,
    One(usize),
    Ambiguous,
}

/// Finds label names on a line with word boundaries, case-insensitively and
/// whitespace-normalized. A match nested inside a longer match is discarded,
/// so "Non-stress" does not also count as "Stress".
fn unique_label_match(line: &str, task: &TaskKind) -> LabelMatch {
    let haystack = normalize(line);
    let mut matches: Vec<(usize, usize, usize)> = Vec::new(); // (start, end, label)
    for (index, def) in task.labels.iter().enumerate() {
        let mut needles = vec![normalize(&def.name)];
        if let Some(d) = &def.display {
            needles.push(normalize(d));
        }
        for needle in needles {
            if needle.is_empty() {
                continue;
            }
            let mut from = 0;
            while let Some(pos) = haystack[from..].find(&needle) {
                let start = from + pos;
                let end = start + needle.len();
                let before_ok = start == 0
                    || !haystack[..start]
                        .chars()
                        .next_back()
                        .is_some_and(|c| c.is_alphanumeric());
                let after_ok = end == haystack.len()
                    || !haystack[end..]
                        .chars()
                        .next()
                        .is_some_and(|c| c.is_alphanumeric());
                if before_ok && after_ok {
                    matches.push((start, end, index));
                }
                from = end;
            }
        }
    }
    // Drop matches strictly contained in another match.
    let surviving: Vec<usize> = matches
        .iter()
        .filter(|(s, e, _)| {
            !matches
                .iter()
                .any(|(s2, e2, _)| (s2 < s || e2 > e) && s2 <= s && e <= e2)
        })
        .map(|(_, _, idx)| *idx)
        .collect();
    let mut distinct = surviving.clone();
    distinct.sort_unstable();
    distinct.dedup();
    match distinct.len() {
        0 => LabelMatch::None,
        1 => LabelMatch::One(distinct[0]),
        _ => LabelMatch::Ambiguous,
    }
}

/// Parses a multilabel value after "Name:": an optional 0/1 digit and an
/// optional Yes/No word (possibly parenthesized).
fn parse_label_value(rest: &str) -> (Option<u8>, Option<u8>) {
    let s = rest.trim_start();
    let mut digit = None;
    let mut after = s;
    if let Some(c) = s.chars().next() {
        if (c == '0' || c == '1')
            && !s[1..].chars().next().is_some_and(|n| n.is_ascii_digit())
        {
            digit = Some(if c == '1' { 1 } else { 0 });
            after = &s[1..];
        }
    }
    let t = after.trim_start();
    let t = t.strip_prefix('(').map(str::trim_start).unwrap_or(t);
    let word = if starts_with_word_ci(t, "yes") {
        Some(1)
    } else if starts_with_word_ci(t, "no") {
        Some(0)
    } else {
        None
    };
    (digit, word)
}

fn starts_with_word_ci(text: &str, word: &str) -> bool {
    if text.len() < word.len() {
        return false;
    }
    let Some(prefix) = text.get(..word.len()) else {
        return false;
    };
    prefix.eq_ignore_ascii_case(word)
        && !text[word.len()..]
            .chars()
            .next()
            .is_some_and(|c| c.is_alphanumeric())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::LabelDef;

    fn dreaddit() -> TaskKind {
        TaskKind::new(
            TaskShape::Binary,
            vec![LabelDef::new("Non-stress"), LabelDef::new("Stress")],
        )
    }

    fn cams() -> TaskKind {
        TaskKind::new(
            TaskShape::Multiclass,
            vec![
                LabelDef::new("No Reason"),
                LabelDef::new("Bias or Abuse"),
                LabelDef::new("Jobs and Careers"),
                LabelDef::new("Medication"),
                LabelDef::new("Relationship"),
                LabelDef::new("Alienation"),
            ],
        )
    }

    fn irf() -> TaskKind {
        TaskKind::new(
            TaskShape::Multilabel,
            vec![
                LabelDef::with_display("TBe", "Thwarted Belongingness"),
                LabelDef::with_display("PBu", "Perceived Burdensomeness"),
            ],
        )
    }

    #[test]
    fn parses_binary_output_with_reasoning() {
        let parsed = parse_response(
            "OUTPUT: 1 (Stress)\nREASONING: The post mentions ongoing family drama.",
            &dreaddit(),
        );
        assert!(parsed.is_ok());
        assert_eq!(parsed.class_index, Some(1));
        assert_eq!(
            parsed.reasoning.as_deref(),
            Some("The post mentions ongoing family drama.")
        );
    }

    #[test]
    fn parses_multiclass_with_double_spacing() {
        let parsed = parse_response("OUTPUT: 2  (Jobs and Careers)\nREASONING: ...", &cams());
        assert!(parsed.is_ok());
        assert_eq!(parsed.class_index, Some(2));
    }

    #[test]
    fn parses_multilabel_lines() {
        let text = "Thwarted Belongingness: 1 (Yes)\nREASONING: feels alone.\n\
                    Perceived Burdensomeness: 0 (No)\nREASONING: no burden expressed.";
        let parsed = parse_response(text, &irf());
        assert!(parsed.is_ok());
        let labels = parsed.labels.unwrap();
        assert_eq!(labels["TBe"], 1);
        assert_eq!(labels["PBu"], 0);
    }

    #[test]
    fn multilabel_accepts_canonical_names_and_bare_words() {
        let parsed = parse_response("TBe: Yes\nPBu: no", &irf());
        assert!(parsed.is_ok());
        let labels = parsed.labels.unwrap();
        assert_eq!(labels["TBe"], 1);
        assert_eq!(labels["PBu"], 0);
    }

    #[test]
    fn refusal_text_fails_with_reason() {
        let parsed = parse_response("I cannot help with that request.", &dreaddit());
        assert_eq!(
            parsed.status,
            ParseStatus::Failed {
                reason: "no OUTPUT token".into()
            }
        );
        let parsed = parse_response("I cannot help with that request.", &irf());
        assert!(!parsed.is_ok());
        assert!(!parsed.failure_reason().unwrap().is_empty());
    }

    #[test]
    fn resolves_unique_label_name_without_integer() {
        let parsed = parse_response("OUTPUT: Stress\nREASONING: tense wording.", &dreaddit());
        assert_eq!(parsed.class_index, Some(1));
        // "Non-stress" contains "stress"; the longer match wins.
        let parsed = parse_response("OUTPUT: Non-stress", &dreaddit());
        assert_eq!(parsed.class_index, Some(0));
        let parsed = parse_response("OUTPUT: Relationship", &cams());
        assert_eq!(parsed.class_index, Some(4));
    }

    #[test]
    fn ambiguous_or_absent_labels_fail() {
        let parsed = parse_response("OUTPUT: Medication or Alienation", &cams());
        assert_eq!(
            parsed.failure_reason(),
            Some("ambiguous label names after OUTPUT")
        );
        let parsed = parse_response("OUTPUT: unclear", &cams());
        assert_eq!(
            parsed.failure_reason(),
            Some("no parsable label after OUTPUT")
        );
    }

    #[test]
    fn out_of_range_index_fails() {
        let parsed = parse_response("OUTPUT: 9 (Stress)", &dreaddit());
        assert!(!parsed.is_ok());
        assert!(parsed.failure_reason().unwrap().contains("out of range"));
    }

    #[test]
    fn conflicting_index_and_name_fail() {
        let parsed = parse_response("OUTPUT: 1 (Non-stress)", &dreaddit());
        assert!(!parsed.is_ok());
        assert!(parsed.failure_reason().unwrap().contains("conflicts"));
        // Unknown parenthetical text is ignored.
        let parsed = parse_response("OUTPUT: 1 (Condition)", &dreaddit());
        assert_eq!(parsed.class_index, Some(1));
    }

    #[test]
    fn contradictory_multilabel_value_fails() {
        let parsed = parse_response("TBe: 1 (No)\nPBu: 0 (No)", &irf());
        assert!(!parsed.is_ok());
        assert!(parsed.failure_reason().unwrap().contains("contradictory"));
    }

    #[test]
    fn first_output_match_wins() {
        let text = "OUTPUT: 0 (Non-stress)\nREASONING: calm.\nOUTPUT: 1 (Stress)";
        let parsed = parse_response(text, &dreaddit());
        assert_eq!(parsed.class_index, Some(0));
    }

    #[test]
    fn echoed_prompt_prefix_is_stripped() {
        let prompt = "The post is from a female.\nDecide.\nReturn OUTPUT: 0 (Non-stress) or 1 \
                      (Stress).\nPost: some text\nOUTPUT:\nREASONING:";
        let response = format!("{prompt}\nOUTPUT: 1 (Stress)\nREASONING: tense.");
        // Plain parsing would bind to the format line "OUTPUT: 0 (Non-stress)".
        let naive = parse_response(&response, &dreaddit());
        assert_eq!(naive.class_index, Some(0));
        let parsed = parse_response_after_echo(&response, prompt, &dreaddit());
        assert_eq!(parsed.class_index, Some(1));
        // Responses without an echo parse unchanged.
        let parsed = parse_response_after_echo("OUTPUT: 1 (Stress)", prompt, &dreaddit());
        assert_eq!(parsed.class_index, Some(1));
    }

    #[test]
    fn parsing_is_idempotent() {
        let texts = [
            "OUTPUT: 1 (Stress)\nREASONING: x",
            "no structure here",
            "TBe: 1\nPBu: 0",
        ];
        for text in texts {
            for task in [dreaddit(), irf()] {
                assert_eq!(parse_response(text, &task), parse_response(text, &task));
            }
        }
    }

    #[test]
    fn failure_rate_arithmetic() {
        let ok = parse_response("OUTPUT: 1 (Stress)", &dreaddit());
        let bad = parse_response("nope", &dreaddit());
        assert_eq!(failure_rate(&[ok.clone(), ok.clone()]).unwrap(), 0.0);
        assert_eq!(failure_rate(&[bad.clone(), bad.clone()]).unwrap(), 1.0);
        assert_eq!(
            failure_rate(&[ok.clone(), ok.clone(), ok, bad]).unwrap(),
            0.25
        );
        assert!(matches!(failure_rate(&[]), Err(ParserError::EmptyInput)));
    }

    #[test]
    fn reasoning_is_optional() {
        let parsed = parse_response("OUTPUT: 0", &dreaddit());
        assert!(parsed.is_ok());
        assert_eq!(parsed.reasoning, None);
        let parsed = parse_response("OUTPUT: 0\nREASONING:   ", &dreaddit());
        assert_eq!(parsed.reasoning, None);
    }

    proptest::proptest! {
        #[test]
        fn never_returns_out_of_range_index(text in "\\PC*") {
            let task = dreaddit();
            let parsed = parse_response(&text, &task);
            if let Some(idx) = parsed.class_index {
                proptest::prop_assert!(idx < task.labels.len());
            }
        }

        #[test]
        fn multilabel_ok_always_covers_every_label(text in "\\PC*") {
            let task = irf();
            let parsed = parse_response(&text, &task);
            if parsed.is_ok() {
                let labels = parsed.labels.as_ref().unwrap();
                proptest::prop_assert_eq!(labels.len(), task.labels.len());
                proptest::prop_assert!(labels.values().all(|v| *v <= 1));
            }
        }
    }
}
