//! Three yes/no questions posed to a vision-language model.

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::embed::ConceptEmbedder;
use crate::backbone::MockSpec;
use crate::error::{Error, Result};
use crate::prompt::words;

pub const ANSWER_SUFFIX: &str = "Choose one: Yes or No";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Question {
    /// Reference-subject visual features in the target image.
    Q1,
    /// Reference subject present.
    Q2,
    /// Target subject present.
    Q3,
}

impl Question {
    pub const ALL: [Question; 3] = [Question::Q1, Question::Q2, Question::Q3];

    pub fn expected(self) -> Answer {
        match self {
            Question::Q1 | Question::Q2 => Answer::No,
            Question::Q3 => Answer::Yes,
        }
    }
}

impl fmt::Display for Question {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Question {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "q1" => Ok(Self::Q1),
            "q2" => Ok(Self::Q2),
            "q3" => Ok(Self::Q3),
            other => Err(Error::Config(format!("unknown question `{other}`"))),
        }
    }
}

/// Subject text without a leading article ("A dog" → "dog").
pub fn bare_subject(subject: &str) -> String {
    let t = subject.trim();
    for article in ["a ", "an ", "the "] {
        if t.len() > article.len() && t[..article.len()].eq_ignore_ascii_case(article) {
            return t[article.len()..].trim().to_string();
        }
    }
    t.to_string()
}

pub fn render_question(q: Question, s_ref: &str, s_tgt: &str) -> String {
    let (r, t) = (bare_subject(s_ref), bare_subject(s_tgt));
    match q {
        Question::Q1 => format!("Are there any {r} visual features in this {t} image?"),
        Question::Q2 => format!("Is there any {r} in this image?"),
        Question::Q3 => format!("Is there any {t} in this image?"),
    }
}

/// Question text followed by the answer constraint.
pub fn request_text(q: Question, s_ref: &str, s_tgt: &str) -> String {
    format!("{} {ANSWER_SUFFIX}", render_question(q, s_ref, s_tgt))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
    Unparseable,
}

/// First standalone "yes" or "no", case-insensitive.
pub fn parse_answer(reply: &str) -> Answer {
    for w in words(reply) {
        match w.as_str() {
            "yes" => return Answer::Yes,
            "no" => return Answer::No,
            _ => {}
        }
    }
    Answer::Unparseable
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    Indeterminate,
}

pub fn outcome(q: Question, answer: Answer) -> Outcome {
    match answer {
        Answer::Unparseable => Outcome::Indeterminate,
        a if a == q.expected() => Outcome::Success,
        _ => Outcome::Failure,
    }
}

/// One image and one text in, one text out.
pub trait VisionChat: Sync {
    fn ask(&self, image: &RgbImage, text: &str) -> Result<String>;
}

/// Chat client backed by a closure.
pub struct FnChat<F>(pub F);

impl<F> VisionChat for FnChat<F>
where
    F: Fn(&RgbImage, &str) -> Result<String> + Sync,
{
    fn ask(&self, image: &RgbImage, text: &str) -> Result<String> {
        (self.0)(image, text)
    }
}

/// Answers presence questions from the content of mock-backbone images:
/// the first vocabulary word in the question is looked up in the image.
pub struct MockLvlm {
    embedder: ConceptEmbedder,
    vocabulary: Vec<String>,
    /// Minimum histogram mass for a concept to count as present.
    pub presence: f64,
}

impl MockLvlm {
    pub fn new(spec: &MockSpec) -> Self {
        Self {
            embedder: ConceptEmbedder::new(spec),
            vocabulary: spec.concepts.iter().map(|c| c.word.clone()).collect(),
            presence: 0.5,
        }
    }
}

impl VisionChat for MockLvlm {
    fn ask(&self, image: &RgbImage, text: &str) -> Result<String> {
        let h = self.embedder.histogram(image);
        let asked = words(text)
            .into_iter()
            .find_map(|w| self.vocabulary.iter().position(|v| *v == w));
        Ok(match asked {
            Some(i) if h[i + 1] >= self.presence => "Yes.".to_string(),
            Some(_) => "No.".to_string(),
            None => "I cannot tell.".to_string(),
        })
    }
}

/// Asks one question, retrying transport failures up to `retries` extra
/// times; persistent failure counts as indeterminate.
pub fn lvlm_protocol(
    image: &RgbImage,
    s_ref: &str,
    s_tgt: &str,
    q: Question,
    client: &dyn VisionChat,
    retries: usize,
) -> Outcome {
    let text = request_text(q, s_ref, s_tgt);
    for attempt in 0..=retries {
        match client.ask(image, &text) {
            Ok(reply) => return outcome(q, parse_answer(&reply)),
            Err(e) => log::warn!("vision chat attempt {} failed: {e}", attempt + 1),
        }
    }
    Outcome::Indeterminate
}
