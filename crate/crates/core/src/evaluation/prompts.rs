//! `{s1, s2, ...} in style.` prompt-set lines.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::PromptSpec;

/// The published 100-line evaluation set.
pub const PUBLISHED_PROMPT_SET: &str = include_str!("../../data/eval_prompts.txt");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSetEntry {
    pub subjects: Vec<String>,
    /// Style text without the leading "in" and the final period.
    pub style: String,
    /// 1-based source line.
    pub line: usize,
}

impl PromptSetEntry {
    pub fn render(&self) -> String {
        format!("{{{}}} in {}.", self.subjects.join(", "), self.style)
    }

    /// Single-subject prompt for subject `i`.
    pub fn prompt(&self, i: usize, tokenize: impl Fn(&str) -> Vec<String>) -> Result<PromptSpec> {
        let subject = self.subjects.get(i).ok_or_else(|| {
            Error::Config(format!("entry on line {} has no subject {i}", self.line))
        })?;
        PromptSpec::resolve(&[subject.as_str()], &self.style, tokenize)
    }
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn parse_prompt_line(line: &str, lineno: usize) -> Result<PromptSetEntry> {
    let err = |message: &str| Error::Parse {
        line: lineno,
        message: message.to_string(),
    };
    let line = line.trim();
    let body = line
        .strip_prefix('{')
        .ok_or_else(|| err("expected `{` at the start of the line"))?;
    let close = body.find('}').ok_or_else(|| err("missing closing `}`"))?;
    let subjects: Vec<String> = body[..close].split(',').map(collapse).collect();
    if subjects.iter().any(String::is_empty) {
        return Err(err("empty subject"));
    }
    let rest = body[close + 1..].trim_start();
    let rest = rest
        .strip_prefix("in")
        .filter(|r| r.starts_with(char::is_whitespace))
        .ok_or_else(|| err("expected `in` after the subject list"))?;
    let style = rest
        .trim()
        .strip_suffix('.')
        .ok_or_else(|| err("missing final `.`"))?;
    let style = collapse(style);
    if style.is_empty() {
        return Err(err("empty style"));
    }
    Ok(PromptSetEntry {
        subjects,
        style,
        line: lineno,
    })
}

/// Parses every non-blank line; `#` starts a comment line.
pub fn parse_prompt_set(text: &str) -> Result<Vec<PromptSetEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| parse_prompt_line(l, i + 1))
        .collect()
}

pub fn load_prompt_set(path: &Path) -> Result<Vec<PromptSetEntry>> {
    parse_prompt_set(&std::fs::read_to_string(path)?)
}
