//! Prompt rendering and reply parsing for the assessment dialogue.
//!
//! Wording lives in a versioned TOML template (`templates/default.toml`
//! is compiled in; a file can override it). Rendering only ever reads a
//! sample's code, never its label, except for few-shot exemplars drawn
//! from the training split.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{Message, Transcript};
use crate::corpus::CodeSample;
use crate::error::{Error, Result};
use crate::Verdict;

const DEFAULT_TEMPLATE: &str = include_str!("../templates/default.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub version: String,
    pub intro: String,
    pub answer_instruction: String,
    pub reasoning_instruction: String,
    pub code_prefix: String,
    pub recheck: String,
    pub finding_vulnerable: String,
    pub finding_clean: String,
    pub example_block: String,
    pub answer_vulnerable: String,
    pub answer_clean: String,
    pub marker_yes: String,
    pub marker_no: String,
    pub marker_description_only: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::from_toml(DEFAULT_TEMPLATE).expect("built-in template parses")
    }
}

impl PromptTemplate {
    pub fn from_toml(text: &str) -> Result<Self> {
        let tpl: Self = toml::from_str(text).map_err(|e| Error::Template(e.to_string()))?;
        tpl.check()?;
        Ok(tpl)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    fn check(&self) -> Result<()> {
        let need = [
            ("recheck", &self.recheck, "{finding}"),
            ("example_block", &self.example_block, "{code}"),
            ("example_block", &self.example_block, "{answer}"),
            ("marker_yes", &self.marker_yes, "{description}"),
            (
                "marker_description_only",
                &self.marker_description_only,
                "{description}",
            ),
        ];
        for (field, text, placeholder) in need {
            if !text.contains(placeholder) {
                return Err(Error::Template(format!("`{field}` lacks {placeholder}")));
            }
        }
        if self.version.trim().is_empty() {
            return Err(Error::Template("empty version".into()));
        }
        Ok(())
    }

    pub fn finding(&self, verdict: Verdict) -> &str {
        match verdict {
            Verdict::Vulnerable => &self.finding_vulnerable,
            Verdict::Clean => &self.finding_clean,
        }
    }

    fn answer_word(&self, verdict: Verdict) -> &str {
        match verdict {
            Verdict::Vulnerable => &self.answer_vulnerable,
            Verdict::Clean => &self.answer_clean,
        }
    }

    fn phase1_text(&self, code: &str, reasoning: bool) -> String {
        let mut text = self.intro.clone();
        if reasoning {
            text.push(' ');
            text.push_str(&self.reasoning_instruction);
        }
        text.push(' ');
        text.push_str(&self.answer_instruction);
        text.push_str("\n\n");
        text.push_str(&self.code_prefix);
        text.push_str(code);
        text
    }
}

/// How the Phase I question is posed.
///
/// Serialized in its string form (`plain`, `cot`, `fewshot(2,1)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PromptVariant {
    #[default]
    Plain,
    /// Adds a step-by-step reasoning instruction.
    Cot,
    /// Prepends labeled training exemplars.
    FewShot { vulnerable: usize, clean: usize },
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptVariant::Plain => f.write_str("plain"),
            PromptVariant::Cot => f.write_str("cot"),
            PromptVariant::FewShot { vulnerable, clean } => {
                write!(f, "fewshot({vulnerable},{clean})")
            }
        }
    }
}

impl FromStr for PromptVariant {
    type Err = String;

    /// `plain`, `cot`, `fewshot` (2 vulnerable + 1 clean) or `fewshot(k_pos,k_neg)`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "plain" => return Ok(PromptVariant::Plain),
            "cot" => return Ok(PromptVariant::Cot),
            "fewshot" => {
                return Ok(PromptVariant::FewShot {
                    vulnerable: 2,
                    clean: 1,
                })
            }
            _ => {}
        }
        let inner = s
            .strip_prefix("fewshot(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| format!("unknown prompt variant `{s}`"))?;
        let (a, b) = inner
            .split_once(',')
            .ok_or_else(|| format!("expected fewshot(k_pos,k_neg), got `{s}`"))?;
        let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
        Ok(PromptVariant::FewShot {
            vulnerable: parse(a)?,
            clean: parse(b)?,
        })
    }
}

impl TryFrom<String> for PromptVariant {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<PromptVariant> for String {
    fn from(v: PromptVariant) -> String {
        v.to_string()
    }
}

/// Phase I transcript: one user message ending with the verbatim code.
pub fn build_phase1_prompt(
    template: &PromptTemplate,
    sample: &CodeSample,
    reasoning: bool,
) -> Transcript {
    vec![Message::user(template.phase1_text(&sample.code, reasoning))]
}

/// Phase II transcript: the Phase I exchange followed by the recheck request
/// stating `finding` as another expert's verdict.
pub fn build_phase2_prompt(
    template: &PromptTemplate,
    phase1: &[Message],
    phase1_reply: &str,
    finding: Verdict,
) -> Transcript {
    let mut transcript = phase1.to_vec();
    transcript.push(Message::assistant(phase1_reply));
    transcript.push(Message::user(
        template
            .recheck
            .replace("{finding}", template.finding(finding)),
    ));
    transcript
}

/// Draws `vulnerable` + `clean` exemplars from `pool`, never the query itself.
///
/// The draw is seeded by `seed` and the query id, so each query gets its own
/// reproducible selection. Exemplars come back in shuffled order.
pub fn select_exemplars<'a>(
    pool: &'a [CodeSample],
    query: &CodeSample,
    vulnerable: usize,
    clean: usize,
    seed: u64,
) -> Result<Vec<&'a CodeSample>> {
    let of = |label: Verdict| -> Vec<&CodeSample> {
        pool.iter()
            .filter(|s| s.label == label && s.id != query.id)
            .collect()
    };
    let (pos, neg) = (of(Verdict::Vulnerable), of(Verdict::Clean));
    if pos.len() < vulnerable || neg.len() < clean {
        return Err(Error::ExemplarPool {
            need_vulnerable: vulnerable,
            need_clean: clean,
            have_vulnerable: pos.len(),
            have_clean: neg.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(query.id);
    let mut chosen: Vec<&CodeSample> = pos.choose_multiple(&mut rng, vulnerable).copied().collect();
    chosen.extend(neg.choose_multiple(&mut rng, clean).copied());
    chosen.shuffle(&mut rng);
    Ok(chosen)
}

/// Phase I transcript preceded by worked examples with their label words.
pub fn build_fewshot_prompt(
    template: &PromptTemplate,
    sample: &CodeSample,
    exemplars: &[&CodeSample],
    reasoning: bool,
) -> Transcript {
    let mut text = String::new();
    for (n, ex) in exemplars.iter().enumerate() {
        text.push_str(
            &template
                .example_block
                .replace("{n}", &(n + 1).to_string())
                .replace("{answer}", template.answer_word(ex.label))
                .replace("{code}", &ex.code),
        );
    }
    text.push_str(&template.phase1_text(&sample.code, reasoning));
    vec![Message::user(text)]
}

/// The LLM's verdict; `Unknown` when the reply does not open with yes/no.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmVerdict {
    Vulnerable,
    Clean,
    Unknown,
}

impl LlmVerdict {
    pub fn verdict(self) -> Option<Verdict> {
        match self {
            LlmVerdict::Vulnerable => Some(Verdict::Vulnerable),
            LlmVerdict::Clean => Some(Verdict::Clean),
            LlmVerdict::Unknown => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LlmVerdict::Vulnerable => "vulnerable",
            LlmVerdict::Clean => "clean",
            LlmVerdict::Unknown => "unknown",
        }
    }
}

impl From<Verdict> for LlmVerdict {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Vulnerable => LlmVerdict::Vulnerable,
            Verdict::Clean => LlmVerdict::Clean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedReply {
    pub verdict: LlmVerdict,
    /// Present iff the verdict is Vulnerable.
    pub description: Option<String>,
}

impl ParsedReply {
    pub fn vulnerable(description: impl Into<String>) -> Self {
        Self {
            verdict: LlmVerdict::Vulnerable,
            description: Some(description.into()),
        }
    }

    pub fn clean() -> Self {
        Self {
            verdict: LlmVerdict::Clean,
            description: None,
        }
    }

    pub fn unknown() -> Self {
        Self {
            verdict: LlmVerdict::Unknown,
            description: None,
        }
    }
}

fn is_leading_noise(c: char) -> bool {
    c.is_whitespace()
        || matches!(
            c,
            '[' | ']'
                | '('
                | '{'
                | '<'
                | '"'
                | '\''
                | '`'
                | '*'
                | '_'
                | '#'
                | '>'
                | '.'
                | ','
                | ':'
                | ';'
                | '!'
                | '-'
        )
}

fn is_separator(c: char) -> bool {
    c.is_whitespace()
        || matches!(
            c,
            '[' | ']' | '"' | '\'' | '`' | '*' | '.' | ',' | ':' | ';' | '!' | '-' | '—' | '–'
        )
}

fn is_trailing_noise(c: char) -> bool {
    c.is_whitespace() || matches!(c, ']' | '*')
}

/// Strips `token` (case-insensitively) from the start of `s` when it forms a whole word.
fn strip_word<'a>(s: &'a str, token: &str) -> Option<&'a str> {
    let head = s.get(..token.len())?;
    if !head.eq_ignore_ascii_case(token) {
        return None;
    }
    let rest = &s[token.len()..];
    match rest.chars().next() {
        Some(c) if c.is_alphanumeric() => None,
        _ => Some(rest),
    }
}

/// Parses a reply of the form `Yes <description>` / `No ...`.
///
/// Leading whitespace, brackets, quotes and punctuation are skipped before
/// matching. Any other opening yields `Unknown`.
pub fn parse_reply(text: &str) -> ParsedReply {
    let body = text.trim_start_matches(is_leading_noise);
    if let Some(rest) = strip_word(body, "yes") {
        let description = rest
            .trim_start_matches(is_separator)
            .trim_end_matches(is_trailing_noise);
        return ParsedReply::vulnerable(description);
    }
    if strip_word(body, "no").is_some() {
        return ParsedReply::clean();
    }
    ParsedReply::unknown()
}
