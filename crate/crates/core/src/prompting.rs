//! Prompt rendering for a candidate group and parsing of the model's answer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::label_space::LabelSet;

/// The null answer the model is told to give when no candidate is present.
pub const NONE_TOKEN: &str = "None";

pub const MAX_RETRIES_LIMIT: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("cannot build a prompt for an empty candidate group")]
    EmptyGroup,
    #[error("template layout is missing the {0} slot")]
    MissingSlot(&'static str),
    #[error("template layout repeats the {0} slot")]
    RepeatedSlot(&'static str),
    #[error("rendered template never mentions the {NONE_TOKEN:?} answer")]
    MissingNoneToken,
    #[error("max_retries {0} exceeds the limit of {MAX_RETRIES_LIMIT}")]
    TooManyRetries(u32),
}

const SLOT_RULES: &str = "{RULES}";
const SLOT_CANDIDATES: &str = "{CANDIDATES}";
const SLOT_NONE: &str = "{NONE_INSTRUCTION}";
const SLOT_ANTI_LAZINESS: &str = "{ANTI_LAZINESS}";
const SLOT_FORMAT: &str = "{FORMAT}";
const SLOT_EXEMPLAR: &str = "{EXEMPLAR}";

const DEFAULT_LAYOUT: &str =
    "{RULES}\n\n{CANDIDATES}\n\n{NONE_INSTRUCTION}\n{ANTI_LAZINESS}\n\n{FORMAT}\n\n{EXEMPLAR}\n";

// Shipped wording, version 1. Avoid words that embed common label strings.
const DEFAULT_RULES: &str = "You are an image recognition assistant. Look at the image and decide which \
of the candidate names below best describes the main object shown.\n\
Candidate names:";
const DEFAULT_NONE_INSTRUCTION: &str =
    "If the object in the image matches none of the candidate names, answer exactly: None";
const DEFAULT_ANTI_LAZINESS: &str = "Do not give up easily: if one of the candidate names is a \
plausible match for the object, choose the most probable candidate instead of the null answer.";
const DEFAULT_FORMAT: &str = "Output format: reply with exactly one line containing a single \
candidate name copied character for character from the list, keeping its casing and plurality, \
or the null answer. Do not add explanations, numbering, quotes or punctuation.";
const DEFAULT_EXEMPLAR: &str = "Example:\n\
Candidate names:\n\
1. sports car\n\
2. pickup truck\n\
3. school bus\n\
Image: a yellow vehicle carrying children\n\
Answer: school bus";

/// Conquer-phase prompt template.
///
/// `layout` positions the five text blocks plus the candidate list through
/// the slots `{RULES}`, `{CANDIDATES}`, `{NONE_INSTRUCTION}`,
/// `{ANTI_LAZINESS}`, `{FORMAT}` and `{EXEMPLAR}`. `{CANDIDATES}` and
/// `{EXEMPLAR}` are required.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub rules_preamble: String,
    pub none_instruction: String,
    pub anti_laziness_clause: String,
    pub format_constraints: String,
    pub one_shot_exemplar: String,
    pub layout: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            rules_preamble: DEFAULT_RULES.into(),
            none_instruction: DEFAULT_NONE_INSTRUCTION.into(),
            anti_laziness_clause: DEFAULT_ANTI_LAZINESS.into(),
            format_constraints: DEFAULT_FORMAT.into(),
            one_shot_exemplar: DEFAULT_EXEMPLAR.into(),
            layout: DEFAULT_LAYOUT.into(),
        }
    }
}

impl PromptTemplate {
    /// Default text blocks with a caller-supplied layout, e.g. read from a file.
    pub fn with_layout(layout: impl Into<String>) -> Result<Self, PromptError> {
        let t = Self {
            layout: layout.into(),
            ..Self::default()
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for slot in [SLOT_CANDIDATES, SLOT_EXEMPLAR] {
            match self.layout.matches(slot).count() {
                0 => return Err(PromptError::MissingSlot(slot)),
                1 => {}
                _ => return Err(PromptError::RepeatedSlot(slot)),
            }
        }
        let probe = self.render_unchecked(&["x".to_string()]);
        if !probe.contains(NONE_TOKEN) {
            return Err(PromptError::MissingNoneToken);
        }
        Ok(())
    }

    fn render_unchecked(&self, group: &[String]) -> String {
        let mut candidates = String::new();
        for (i, label) in group.iter().enumerate() {
            if i > 0 {
                candidates.push('\n');
            }
            let _ = write!(candidates, "{}. {label}", i + 1);
        }
        let slots: [(&str, &str); 6] = [
            (SLOT_RULES, &self.rules_preamble),
            (SLOT_CANDIDATES, &candidates),
            (SLOT_NONE, &self.none_instruction),
            (SLOT_ANTI_LAZINESS, &self.anti_laziness_clause),
            (SLOT_FORMAT, &self.format_constraints),
            (SLOT_EXEMPLAR, &self.one_shot_exemplar),
        ];

        // Single pass so that label text is never re-scanned for slots.
        let mut out = String::with_capacity(self.layout.len() + candidates.len() + 1024);
        let mut rest = self.layout.as_str();
        'scan: while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let tail = &rest[open..];
            for (slot, value) in slots {
                if let Some(after) = tail.strip_prefix(slot) {
                    out.push_str(value);
                    rest = after;
                    continue 'scan;
                }
            }
            out.push('{');
            rest = &tail[1..];
        }
        out.push_str(rest);
        out
    }
}

/// Renders the prompt for one candidate group.
pub fn build_prompt(t: &PromptTemplate, group: &LabelSet) -> Result<String, PromptError> {
    if group.is_empty() {
        return Err(PromptError::EmptyGroup);
    }
    Ok(t.render_unchecked(group.as_slice()))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum InferenceOutcome {
    Match(String),
    NoneAnswer,
    Invalid(String),
}

impl InferenceOutcome {
    pub fn label(&self) -> Option<&str> {
        match self {
            Self::Match(l) => Some(l),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    #[default]
    Strict,
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawParsePolicy")]
pub struct ParsePolicy {
    mode: ParseMode,
    max_retries: u32,
}

#[derive(Deserialize)]
struct RawParsePolicy {
    #[serde(default)]
    mode: ParseMode,
    #[serde(default)]
    max_retries: u32,
}

impl TryFrom<RawParsePolicy> for ParsePolicy {
    type Error = PromptError;

    fn try_from(raw: RawParsePolicy) -> Result<Self, Self::Error> {
        Self::new(raw.mode, raw.max_retries)
    }
}

impl Default for ParsePolicy {
    fn default() -> Self {
        Self {
            mode: ParseMode::Strict,
            max_retries: 2,
        }
    }
}

impl ParsePolicy {
    pub fn new(mode: ParseMode, max_retries: u32) -> Result<Self, PromptError> {
        if max_retries > MAX_RETRIES_LIMIT {
            return Err(PromptError::TooManyRetries(max_retries));
        }
        Ok(Self { mode, max_retries })
    }

    pub fn mode(&self) -> ParseMode {
        self.mode
    }

    pub fn max_retries(&self) -> u32 {
        self.max_retries
    }
}

/// Lowercases, collapses whitespace runs and strips trailing punctuation.
fn normalize(s: &str) -> String {
    let collapsed = s
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_owned()
}

/// Maps raw model text onto the group's output space: a member label, the
/// null answer, or `Invalid`.
pub fn parse_response(raw: &str, group: &LabelSet, policy: &ParsePolicy) -> InferenceOutcome {
    let trimmed = raw.trim();
    match policy.mode {
        ParseMode::Strict => {
            if let Some(label) = group.iter().find(|l| l.as_str() == trimmed) {
                InferenceOutcome::Match(label.clone())
            } else if trimmed.eq_ignore_ascii_case(NONE_TOKEN) {
                InferenceOutcome::NoneAnswer
            } else {
                InferenceOutcome::Invalid(raw.to_owned())
            }
        }
        ParseMode::Normalized => {
            let norm = normalize(trimmed);
            let mut hits = group.iter().filter(|l| normalize(l) == norm);
            match (hits.next(), hits.next()) {
                (Some(label), None) => InferenceOutcome::Match(label.clone()),
                (Some(_), Some(_)) => InferenceOutcome::Invalid(raw.to_owned()),
                (None, _) if norm == "none" => InferenceOutcome::NoneAnswer,
                (None, _) => InferenceOutcome::Invalid(raw.to_owned()),
            }
        }
    }
}
