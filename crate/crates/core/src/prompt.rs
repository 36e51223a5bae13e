//! Structured `{subject} in {style}` prompts with resolved subject tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercased alphanumeric words of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// The single content word of a minimal subject descriptor ("A dog" → "dog").
pub fn subject_word(subject: &str) -> Result<String> {
    let content: Vec<String> = words(subject)
        .into_iter()
        .filter(|w| !ARTICLES.contains(&w.as_str()))
        .collect();
    match content.as_slice() {
        [w] => Ok(w.clone()),
        [] => Err(Error::SubjectNotFound(subject.to_string())),
        _ => Err(Error::MultiTokenSubject(subject.to_string())),
    }
}

/// Subject descriptor with the index of its token in the tokenized prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub text: String,
    pub token_index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub subjects: Vec<Subject>,
    /// Style descriptor without the leading "in", e.g. "stickers style".
    pub style: String,
    pub full_prompt: String,
}

impl PromptSpec {
    /// Renders `"{s1} and {s2} in {style}"` and locates each subject token
    /// with `tokenize`.
    pub fn resolve<S: AsRef<str>>(
        subjects: &[S],
        style: &str,
        tokenize: impl Fn(&str) -> Vec<String>,
    ) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Config("a prompt needs at least one subject".into()));
        }
        let joined = subjects
            .iter()
            .map(|s| s.as_ref().trim())
            .collect::<Vec<_>>()
            .join(" and ");
        let style = style.trim().trim_end_matches('.').trim();
        let style = style.strip_prefix("in ").unwrap_or(style).to_string();
        let full_prompt = if style.is_empty() {
            joined
        } else {
            format!("{joined} in {style}")
        };
        let tokens = tokenize(&full_prompt);
        let mut resolved = Vec::with_capacity(subjects.len());
        let mut cursor = 0;
        for s in subjects {
            let word = subject_word(s.as_ref())?;
            let offset = tokens[cursor..]
                .iter()
                .position(|t| *t == word)
                .ok_or_else(|| Error::SubjectNotFound(s.as_ref().to_string()))?;
            resolved.push(Subject {
                text: s.as_ref().trim().to_string(),
                token_index: cursor + offset,
            });
            cursor += offset + 1;
        }
        Ok(Self {
            subjects: resolved,
            style,
            full_prompt,
        })
    }

    pub fn primary(&self) -> &Subject {
        &self.subjects[0]
    }

    /// Checks that every subject token index falls inside `token_count`.
    pub fn validate_tokens(&self, token_count: usize) -> Result<()> {
        for s in &self.subjects {
            if s.token_index >= token_count {
                return Err(Error::TokenIndex {
                    index: s.token_index,
                    len: token_count,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(text: &str) -> Vec<String> {
        let mut t = vec!["<start>".to_string()];
        t.extend(words(text));
        t
    }

    #[test]
    fn resolves_single_subject() {
        let p = PromptSpec::resolve(&["A dog"], "stickers style", tok).unwrap();
        assert_eq!(p.full_prompt, "A dog in stickers style");
        assert_eq!(p.subjects[0].token_index, 2);
    }

    #[test]
    fn resolves_two_subjects_in_order() {
        let p = PromptSpec::resolve(&["A cat", "a tree"], "in wooden sculpture.", tok).unwrap();
        assert_eq!(p.full_prompt, "A cat and a tree in wooden sculpture");
        assert_eq!(p.subjects[0].token_index, 2);
        assert_eq!(p.subjects[1].token_index, 5);
    }

    #[test]
    fn rejects_multi_token_subject() {
        assert!(matches!(
            PromptSpec::resolve(&["A stop sign"], "neon graffiti style", tok),
            Err(Error::MultiTokenSubject(_))
        ));
    }

    #[test]
    fn subject_word_strips_article() {
        assert_eq!(subject_word("An eye").unwrap(), "eye");
        assert_eq!(subject_word("Godzilla").unwrap(), "godzilla");
    }
}
