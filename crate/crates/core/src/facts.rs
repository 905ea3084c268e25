//! Edit requests and the line-oriented fact file format.
//!
//! Tokens are plain integer ids (there is no tokenizer). One JSON object per
//! line:
//!
//! ```text
//! {"id": 7, "subject": [31, 4], "prompt": "{} 17 42", "old": [9], "new": [200],
//!  "paraphrases": ["88 {} 17 42"],
//!  "neighborhood": [{"prompt": "5 6 17 42", "object": [9]}]}
//! ```
//!
//! Prompt templates are whitespace-separated token ids with exactly one
//! `{}` subject slot. Neighborhood prompts are complete token sequences.
//! Blank lines and lines starting with `#` are ignored.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUBJECT_SLOT: &str = "{}";

/// A token template with exactly one subject slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptTemplate {
    pub before: Vec<u32>,
    pub after: Vec<u32>,
}

impl PromptTemplate {
    pub fn new(before: Vec<u32>, after: Vec<u32>) -> Self {
        Self { before, after }
    }

    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let mut before = Vec::new();
        let mut after = Vec::new();
        let mut slots = 0;
        for tok in s.split_whitespace() {
            if tok == SUBJECT_SLOT {
                slots += 1;
                continue;
            }
            let id: u32 = tok.parse().map_err(|_| format!("bad token `{tok}` in template `{s}`"))?;
            if slots == 0 {
                before.push(id);
            } else {
                after.push(id);
            }
        }
        if slots != 1 {
            return Err(format!("template `{s}` must contain exactly one `{{}}` slot, found {slots}"));
        }
        Ok(Self { before, after })
    }

    /// Renders the prompt and returns the position of the subject's last token.
    pub fn render(&self, subject: &[u32]) -> (Vec<u32>, usize) {
        let mut tokens = Vec::with_capacity(self.before.len() + subject.len() + self.after.len());
        tokens.extend_from_slice(&self.before);
        tokens.extend_from_slice(subject);
        tokens.extend_from_slice(&self.after);
        (tokens, self.before.len() + subject.len() - 1)
    }

    /// Same template with extra tokens in front.
    pub fn with_prefix(&self, prefix: &[u32]) -> Self {
        let mut before = prefix.to_vec();
        before.extend_from_slice(&self.before);
        Self {
            before,
            after: self.after.clone(),
        }
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .before
            .iter()
            .map(u32::to_string)
            .chain(std::iter::once(SUBJECT_SLOT.to_string()))
            .chain(self.after.iter().map(u32::to_string))
            .collect();
        f.write_str(&parts.join(" "))
    }
}

impl Serialize for PromptTemplate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PromptTemplate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PromptTemplate::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodPrompt {
    #[serde(with = "token_string")]
    pub prompt: Vec<u32>,
    /// The correct object, which an edit must not disturb.
    pub object: Vec<u32>,
}

/// One edit request `(s, r, o → ô)` with its evaluation prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: u64,
    pub subject: Vec<u32>,
    pub prompt: PromptTemplate,
    #[serde(rename = "old")]
    pub old_object: Vec<u32>,
    #[serde(rename = "new")]
    pub new_object: Vec<u32>,
    #[serde(default)]
    pub paraphrases: Vec<PromptTemplate>,
    #[serde(default)]
    pub neighborhood: Vec<NeighborhoodPrompt>,
}

impl Fact {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.subject.is_empty() {
            return Err("field `subject` must be non-empty".into());
        }
        if self.old_object.is_empty() {
            return Err("field `old` must be non-empty".into());
        }
        if self.new_object.is_empty() {
            return Err("field `new` must be non-empty".into());
        }
        if self.new_object == self.old_object {
            return Err("field `new` must differ from `old`".into());
        }
        if let Some(n) = self.neighborhood.iter().find(|n| n.prompt.is_empty() || n.object.is_empty()) {
            return Err(format!("neighborhood entry {:?} has an empty prompt or object", n.prompt));
        }
        Ok(())
    }

    /// The edit prompt and the position of the subject's last token.
    pub fn rendered_prompt(&self) -> (Vec<u32>, usize) {
        self.prompt.render(&self.subject)
    }

    pub fn rendered_paraphrases(&self) -> Vec<(Vec<u32>, usize)> {
        self.paraphrases.iter().map(|p| p.render(&self.subject)).collect()
    }

    /// Largest token id mentioned anywhere in the record.
    pub fn max_token(&self) -> u32 {
        let templates = std::iter::once(&self.prompt).chain(&self.paraphrases);
        let t = templates.flat_map(|p| p.before.iter().chain(&p.after));
        let n = self.neighborhood.iter().flat_map(|n| n.prompt.iter().chain(&n.object));
        self.subject
            .iter()
            .chain(&self.old_object)
            .chain(&self.new_object)
            .chain(t)
            .chain(n)
            .copied()
            .max()
            .unwrap_or(0)
    }
}

mod token_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(tokens: &[u32], s: S) -> Result<S::Ok, S::Error> {
        let parts: Vec<String> = tokens.iter().map(u32::to_string).collect();
        s.serialize_str(&parts.join(" "))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u32>, D::Error> {
        let s = String::deserialize(d)?;
        s.split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|_| serde::de::Error::custom(format!("bad token `{t}`"))))
            .collect()
    }
}

/// Parses a fact file; see the module docs for the format.
pub fn parse_facts(text: &str) -> Result<Vec<Fact>> {
    let mut facts = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fact: Fact = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        fact.validate().map_err(|message| Error::Parse { line: line_no, message })?;
        if !seen.insert(fact.id) {
            return Err(Error::DuplicateId(fact.id));
        }
        facts.push(fact);
    }
    Ok(facts)
}

pub fn load_facts(path: &Path) -> Result<Vec<Fact>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_facts(&text)
}

/// Serialises facts in the same one-record-per-line format.
pub fn facts_to_jsonl(facts: &[Fact]) -> String {
    let mut out = String::new();
    for f in facts {
        out.push_str(&serde_json::to_string(f).expect("facts serialise"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{"id": 7, "subject": [31, 4], "prompt": "{} 17 42", "old": [9], "new": [200], "paraphrases": ["88 {} 17 42"], "neighborhood": [{"prompt": "5 6 17 42", "object": [9]}]}"#;

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_facts("").unwrap().is_empty());
        assert!(parse_facts("\n# comment\n\n").unwrap().is_empty());
    }

    #[test]
    fn parses_one_record() {
        let facts = parse_facts(ONE).unwrap();
        assert_eq!(facts.len(), 1);
        let f = &facts[0];
        assert_eq!(f.paraphrases.len(), 1);
        assert_eq!(f.neighborhood[0].prompt, vec![5, 6, 17, 42]);
        let (tokens, last) = f.rendered_prompt();
        assert_eq!(tokens, vec![31, 4, 17, 42]);
        assert_eq!(last, 1);
        let (p, plast) = &f.rendered_paraphrases()[0];
        assert_eq!(p, &vec![88, 31, 4, 17, 42]);
        assert_eq!(*plast, 2);
        assert_eq!(f.max_token(), 200);
    }

    #[test]
    fn missing_new_names_field_and_line() {
        let text = format!("{ONE}\n{}", r#"{"id": 8, "subject": [1], "prompt": "{} 2", "old": [3]}"#);
        match parse_facts(&text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("new"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_records() {
        let dup = format!("{ONE}\n{ONE}");
        assert!(matches!(parse_facts(&dup), Err(Error::DuplicateId(7))));
        let same = ONE.replace("\"new\": [200]", "\"new\": [9]");
        assert!(matches!(parse_facts(&same), Err(Error::Parse { line: 1, .. })));
        let two_slots = ONE.replace("\"{} 17 42\"", "\"{} 17 {}\"");
        assert!(matches!(parse_facts(&two_slots), Err(Error::Parse { line: 1, .. })));
        let no_slot = ONE.replace("\"{} 17 42\"", "\"17 42\"");
        assert!(parse_facts(&no_slot).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let facts = parse_facts(ONE).unwrap();
        assert_eq!(parse_facts(&facts_to_jsonl(&facts)).unwrap(), facts);
    }
}
