//! Quantitative evaluation: leakage and alignment metrics, yes/no
//! questioning of a vision-language model, and report emission.

pub mod embed;
pub mod http;
pub mod lvlm;
pub mod metrics;
pub mod prompts;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{run_generation, Backbone, GenerationOptions};
use crate::error::{Error, Result};
use crate::prompt::PromptSpec;
use crate::scalar::Scalar;

pub use embed::{cosine_f64, ConceptEmbedder, ImageEmbedder, MeanColorEmbedder, TextEmbedder};
pub use http::{HttpEmbedder, HttpVisionChat};
pub use lvlm::{
    bare_subject, lvlm_protocol, outcome, parse_answer, render_question, request_text, Answer,
    FnChat, MockLvlm, Outcome, Question, VisionChat, ANSWER_SUFFIX,
};
pub use metrics::{cl_metric, lvlm_rate, set_consistency, text_alignment, MeanScore, RateSummary};
pub use prompts::{
    load_prompt_set, parse_prompt_line, parse_prompt_set, PromptSetEntry, PUBLISHED_PROMPT_SET,
};

/// Caveat attached to every report.
pub const SET_CONSISTENCY_CAVEAT: &str =
    "set consistency is favored by semantic content leakage; read it together with the leakage scores";

/// File name of the per-entry document written by the pipeline.
pub const ENTRY_MANIFEST: &str = "entry.json";
/// File name of an external CSV manifest inside an outputs directory.
pub const CSV_MANIFEST: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cl,
    TextAlignment,
    SetConsistency,
    Q1,
    Q2,
    Q3,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Cl,
        Metric::TextAlignment,
        Metric::SetConsistency,
        Metric::Q1,
        Metric::Q2,
        Metric::Q3,
    ];

    fn question(self) -> Option<Question> {
        match self {
            Metric::Q1 => Some(Question::Q1),
            Metric::Q2 => Some(Question::Q2),
            Metric::Q3 => Some(Question::Q3),
            _ => None,
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "cl" => Ok(Self::Cl),
            "text_alignment" | "text" => Ok(Self::TextAlignment),
            "set_consistency" | "consistency" => Ok(Self::SetConsistency),
            "q1" => Ok(Self::Q1),
            "q2" => Ok(Self::Q2),
            "q3" => Ok(Self::Q3),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// One reference/target pair to score.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub entry_id: String,
    pub reference_path: PathBuf,
    pub target_path: PathBuf,
    pub ref_subject: String,
    pub tgt_subject: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryImage {
    pub path: PathBuf,
    pub subject: String,
}

/// Per-entry document written next to the pipeline's images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryManifest {
    pub entry_id: String,
    pub style: String,
    pub reference: EntryImage,
    pub targets: Vec<EntryImage>,
}

impl EntryManifest {
    /// Rows with paths resolved against `dir`.
    pub fn rows(&self, dir: &Path) -> Vec<ManifestEntry> {
        self.targets
            .iter()
            .map(|t| ManifestEntry {
                entry_id: self.entry_id.clone(),
                reference_path: dir.join(&self.reference.path),
                target_path: dir.join(&t.path),
                ref_subject: self.reference.subject.clone(),
                tgt_subject: t.subject.clone(),
            })
            .collect()
    }
}

/// Reads a CSV manifest; relative paths resolve against the file's directory.
pub fn read_csv_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Evaluation(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<ManifestEntry>().enumerate() {
        let mut row = rec.map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        row.reference_path = base.join(&row.reference_path);
        row.target_path = base.join(&row.target_path);
        rows.push(row);
    }
    Ok(rows)
}

/// Collects rows from `dir/manifest.csv` if present, otherwise from every
/// `entry_*/entry.json` below `dir`.
pub fn load_outputs(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let csv_path = dir.join(CSV_MANIFEST);
    if csv_path.is_file() {
        return read_csv_manifest(&csv_path);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(ENTRY_MANIFEST).is_file())
        .collect();
    dirs.sort();
    let mut rows = Vec::new();
    for d in dirs {
        let m: EntryManifest = serde_json::from_str(&std::fs::read_to_string(d.join(ENTRY_MANIFEST))?)?;
        rows.extend(m.rows(&d));
    }
    Ok(rows)
}

/// External services used by `evaluate_method`; each metric needs its own.
#[derive(Clone, Copy, Default)]
pub struct Clients<'a> {
    pub image: Option<&'a dyn ImageEmbedder>,
    pub text: Option<&'a dyn TextEmbedder>,
    pub chat: Option<&'a dyn VisionChat>,
    /// Extra attempts after a transport failure.
    pub retries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub entry_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub instances: usize,
    pub processed: usize,
    pub skipped: Vec<SkippedEntry>,
    pub cl: Option<MeanScore>,
    pub text_alignment: Option<MeanScore>,
    pub set_consistency: Option<MeanScore>,
    pub q1: Option<RateSummary>,
    pub q2: Option<RateSummary>,
    pub q3: Option<RateSummary>,
    pub caveats: Vec<String>,
}

impl MetricReport {
    /// `(text alignment, set consistency)` for scatter plots.
    pub fn scatter_point(&self) -> Option<(f64, f64)> {
        Some((self.text_alignment.as_ref()?.mean, self.set_consistency.as_ref()?.mean))
    }
}

fn fmt_score(s: &Option<MeanScore>) -> String {
    s.as_ref()
        .map(|s| format!("{:.4} ± {:.4} (n={})", s.mean, s.std, s.count))
        .unwrap_or_else(|| "-".into())
}

fn fmt_rate(r: &Option<RateSummary>) -> String {
    match r {
        Some(RateSummary { rate: Some(v), successes, failures, indeterminate }) => format!(
            "{:.1}% ({}/{}, ?{})",
            v * 100.0,
            successes,
            successes + failures,
            indeterminate
        ),
        Some(r) => format!("n/a (?{})", r.indeterminate),
        None => "-".into(),
    }
}

/// Plain-text table with one row per method.
pub fn render_table(reports: &[MetricReport]) -> String {
    let header = ["method", "CL", "text", "consistency", "Q1", "Q2", "Q3", "skipped"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                fmt_score(&r.cl),
                fmt_score(&r.text_alignment),
                fmt_score(&r.set_consistency),
                fmt_rate(&r.q1),
                fmt_rate(&r.q2),
                fmt_rate(&r.q3),
                r.skipped.len().to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "| {} |", padded.join(" | "));
    };
    line(header.to_vec(), &mut out);
    let _ = writeln!(
        out,
        "|{}|",
        widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")
    );
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    for c in reports.iter().flat_map(|r| &r.caveats).collect::<BTreeSet<_>>() {
        let _ = writeln!(out, "note: {c}");
    }
    out
}

struct Loaded {
    entry: ManifestEntry,
    reference: RgbImage,
    target: RgbImage,
}

fn load_image(path: &Path) -> Result<RgbImage> {
    crate::io::load_rgb(path)
}

#[derive(Default)]
struct EntryScores {
    cl: Option<Result<f64>>,
    text: Option<Result<f64>>,
    consistency: Option<Result<f64>>,
    questions: BTreeMap<Question, Outcome>,
}

fn score_entry(l: &Loaded, metrics: &[Metric], clients: &Clients<'_>) -> EntryScores {
    let image_text = |text: &str| -> Result<f64> {
        let (ie, te) = (clients.image.expect("checked"), clients.text.expect("checked"));
        cosine_f64(&ie.embed_image(&l.target)?, &te.embed_text(text)?)
    };
    let mut s = EntryScores::default();
    for &m in metrics {
        match m {
            Metric::Cl => s.cl = Some(image_text(&l.entry.ref_subject)),
            Metric::TextAlignment => s.text = Some(image_text(&l.entry.tgt_subject)),
            Metric::SetConsistency => {
                let ie = clients.image.expect("checked");
                s.consistency = Some(
                    ie.embed_image(&l.target)
                        .and_then(|t| cosine_f64(&t, &ie.embed_image(&l.reference)?)),
                );
            }
            _ => {
                let q = m.question().expect("question metric");
                let o = lvlm_protocol(
                    &l.target,
                    &l.entry.ref_subject,
                    &l.entry.tgt_subject,
                    q,
                    clients.chat.expect("checked"),
                    clients.retries,
                );
                s.questions.insert(q, o);
            }
        }
    }
    s
}

/// Scores every entry under the selected metrics.
pub fn evaluate_method(
    method: &str,
    entries: &[ManifestEntry],
    metrics: &[Metric],
    clients: &Clients<'_>,
) -> Result<MetricReport> {
    if metrics.is_empty() {
        return Err(Error::Evaluation("no metric selected".into()));
    }
    for &m in metrics {
        let ok = match m {
            Metric::Cl | Metric::TextAlignment => clients.image.is_some() && clients.text.is_some(),
            Metric::SetConsistency => clients.image.is_some(),
            _ => clients.chat.is_some(),
        };
        if !ok {
            return Err(Error::Evaluation(format!("metric {m:?} has no client configured")));
        }
    }
    let mut skipped = Vec::new();
    let mut loaded = Vec::new();
    for e in entries {
        match load_image(&e.reference_path).and_then(|r| Ok((r, load_image(&e.target_path)?))) {
            Ok((reference, target)) => loaded.push(Loaded {
                entry: e.clone(),
                reference,
                target,
            }),
            Err(err) => skipped.push(SkippedEntry {
                entry_id: e.entry_id.clone(),
                reason: err.to_string(),
            }),
        }
    }
    let scores: Vec<EntryScores> = loaded
        .par_iter()
        .map(|l| score_entry(l, metrics, clients))
        .collect();

    let mean_of = |pick: fn(&EntryScores) -> &Option<Result<f64>>| -> Result<Option<MeanScore>> {
        let items: Vec<Result<f64>> = scores
            .iter()
            .filter_map(|s| pick(s).as_ref())
            .map(|r| r.as_ref().copied().map_err(|e| Error::Evaluation(e.to_string())))
            .collect();
        if items.is_empty() {
            return Ok(None);
        }
        MeanScore::collect(items).map(Some)
    };
    let rate_of = |q: Question| -> Option<RateSummary> {
        metrics
            .iter()
            .any(|m| m.question() == Some(q))
            .then(|| RateSummary::from_outcomes(scores.iter().filter_map(|s| s.questions.get(&q).copied())))
    };
    Ok(MetricReport {
        method: method.to_string(),
        instances: entries.len(),
        processed: loaded.len(),
        skipped,
        cl: mean_of(|s| &s.cl)?,
        text_alignment: mean_of(|s| &s.text)?,
        set_consistency: mean_of(|s| &s.consistency)?,
        q1: rate_of(Question::Q1),
        q2: rate_of(Question::Q2),
        q3: rate_of(Question::Q3),
        caveats: vec![SET_CONSISTENCY_CAVEAT.to_string()],
    })
}

/// A reference subject, a target subject and a shared style.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationPair {
    pub ref_subject: String,
    pub tgt_subject: String,
    pub style: String,
}

impl CalibrationPair {
    /// Every ordered pair of distinct subjects within each entry.
    pub fn from_prompt_set(entries: &[PromptSetEntry]) -> Vec<Self> {
        let mut out = Vec::new();
        for e in entries {
            for (i, r) in e.subjects.iter().enumerate() {
                for (j, t) in e.subjects.iter().enumerate() {
                    if i != j {
                        out.push(Self {
                            ref_subject: r.clone(),
                            tgt_subject: t.clone(),
                            style: e.style.clone(),
                        });
                    }
                }
            }
        }
        out
    }
}

/// Leakage-score range spanned by unaligned generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClBounds {
    /// Plain images of `S_tgt` scored against `S_ref`.
    pub no_leakage: MeanScore,
    /// Plain images of `S_ref` scored against `S_ref`.
    pub full_leakage: MeanScore,
}

/// Scores plain generations to bracket the leakage score.
pub fn calibrate_cl_bounds<T: Scalar, B: Backbone<T>>(
    backbone: &B,
    pairs: &[CalibrationPair],
    image_embedder: &dyn ImageEmbedder,
    text_embedder: &dyn TextEmbedder,
    seed: u64,
) -> Result<ClBounds> {
    if pairs.is_empty() {
        return Err(Error::Evaluation("no calibration pairs".into()));
    }
    let generate = |subject: &str, style: &str| -> Result<RgbImage> {
        let prompt = PromptSpec::resolve(&[subject], style, |t| backbone.tokenize(t))?;
        let opts = GenerationOptions {
            capture: false,
            ..GenerationOptions::seeded(seed)
        };
        run_generation(backbone, &prompt, None, &opts)?
            .image
            .ok_or_else(|| Error::Generator("generation produced no image".into()))
    };
    // one generation per distinct (subject, style)
    let keys: BTreeSet<(&str, &str)> = pairs
        .iter()
        .flat_map(|p| [(p.ref_subject.as_str(), p.style.as_str()), (p.tgt_subject.as_str(), p.style.as_str())])
        .collect();
    let embedded: BTreeMap<(&str, &str), Result<Vec<f64>>> = keys
        .into_par_iter()
        .map(|k| (k, generate(k.0, k.1).and_then(|img| image_embedder.embed_image(&img))))
        .collect();
    let score = |subject: &str, p: &CalibrationPair| -> Result<f64> {
        let img = match &embedded[&(subject, p.style.as_str())] {
            Ok(v) => v,
            Err(e) => return Err(Error::Evaluation(e.to_string())),
        };
        cosine_f64(img, &text_embedder.embed_text(&p.ref_subject)?)
    };
    let low: Vec<Result<f64>> = pairs.iter().map(|p| score(&p.tgt_subject, p)).collect();
    let high: Vec<Result<f64>> = pairs.iter().map(|p| score(&p.ref_subject, p)).collect();
    Ok(ClBounds {
        no_leakage: MeanScore::collect(low)?,
        full_leakage: MeanScore::collect(high)?,
    })
}
