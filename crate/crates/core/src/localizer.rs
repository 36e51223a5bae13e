//! Patch-level content-leakage localization.
//!
//! For each subject a compact visual representation is pooled from the
//! features of the image that is supposed to show it, weighted by the
//! subject's own cross-attention restricted to its description mask. Both
//! representations are compared against the target's features; a target
//! patch leaks when it resembles the reference subject clearly more than the
//! target subject and at least one of the two similarities is meaningful.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    ddim_invert_pair, replay_trajectory, Backbone, Captures, FeatureStack, GenerationOptions,
    LayerId,
};
use crate::error::{Error, Result};
use crate::masks::{aggregate_subject_map, extract_description_mask, DescriptionMask, SubjectMap};
use crate::prompt::PromptSpec;
use crate::scalar::{cosine, Scalar};
use crate::tensor::{resample_nearest, Grid};

pub const DEFAULT_T_LEAK: f64 = 0.1;
pub const DEFAULT_T_REL: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t_leak: f64,
    pub t_rel: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            t_leak: DEFAULT_T_LEAK,
            t_rel: DEFAULT_T_REL,
        }
    }
}

impl Thresholds {
    pub fn new(t_leak: f64, t_rel: f64) -> Result<Self> {
        if !t_leak.is_finite() || !t_rel.is_finite() {
            return Err(Error::Config("thresholds must be finite".into()));
        }
        Ok(Self { t_leak, t_rel })
    }
}

/// The per-patch leak predicate.
#[inline]
pub fn leak_predicate(c_ref: f64, c_tgt: f64, th: Thresholds) -> bool {
    c_ref >= c_tgt + th.t_leak && c_ref.max(c_tgt) >= th.t_rel
}

/// Subject attention restricted to the description mask, normalized to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedSubjectMap<T> {
    pub grid: Grid,
    pub weights: Vec<T>,
}

/// One pooled vector per bottleneck layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRepresentation<T> {
    pub layers: BTreeMap<LayerId, Vec<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap<T> {
    pub grid: Grid,
    pub values: Vec<T>,
}

impl<T: Scalar> SimilarityMap<T> {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![T::zero(); grid.len()],
        }
    }

    /// Pointwise maximum of several maps on the same grid.
    pub fn pointwise_max(maps: &[SimilarityMap<T>]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Shape("no similarity maps to combine".into()))?;
        let mut out = first.clone();
        for m in &maps[1..] {
            if m.grid != out.grid {
                return Err(Error::Shape("similarity maps on different grids".into()));
            }
            for (o, &v) in out.values.iter_mut().zip(&m.values) {
                *o = o.max(v);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizationMode {
    InGeneration,
    PostHoc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectRole {
    Reference,
    Target,
}

/// Why a subject could not be represented; the verdict degrades to no leak.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LocalizationDiagnostic {
    NoSubjectLocalized { role: SubjectRole, subject: String },
    UnrepresentableSubject { role: SubjectRole, subject: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport<T> {
    pub grid: Grid,
    pub leak_map: Vec<bool>,
    /// Logical OR of `leak_map`.
    pub overall: bool,
    pub c_ref: SimilarityMap<T>,
    pub c_tgt: SimilarityMap<T>,
    pub thresholds: Thresholds,
    pub mode: LocalizationMode,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<LocalizationDiagnostic>,
}

impl<T: Scalar> LeakageReport<T> {
    pub fn leak_count(&self) -> usize {
        self.leak_map.iter().filter(|&&b| b).count()
    }

    /// `L ⊙ (C_ref − C_tgt)`, the per-patch leak margin.
    pub fn leak_margin(&self) -> Vec<T> {
        self.leak_map
            .iter()
            .zip(self.c_ref.values.iter().zip(&self.c_tgt.values))
            .map(|(&l, (&r, &t))| if l { r - t } else { T::zero() })
            .collect()
    }

    fn clean(grid: Grid, thresholds: Thresholds, mode: LocalizationMode, step: usize) -> Self {
        Self {
            grid,
            leak_map: vec![false; grid.len()],
            overall: false,
            c_ref: SimilarityMap::zeros(grid),
            c_tgt: SimilarityMap::zeros(grid),
            thresholds,
            mode,
            step,
            diagnostics: Vec::new(),
        }
    }
}

/// `(M ⊙ Â) / Σ(M ⊙ Â)`.
pub fn refine_subject_attention<T: Scalar>(
    map: &SubjectMap<T>,
    mask: &DescriptionMask,
) -> Result<RefinedSubjectMap<T>> {
    if map.grid != mask.grid {
        return Err(Error::Shape("subject map and description mask grids differ".into()));
    }
    if mask.count() == 0 {
        return Err(Error::UnrepresentableSubject("empty description mask".into()));
    }
    let masked: Vec<T> = map
        .values
        .iter()
        .zip(&mask.bits)
        .map(|(&v, &b)| if b { v } else { T::zero() })
        .collect();
    let total: T = masked.iter().copied().sum();
    if total.partial_cmp(&T::zero()) != Some(Ordering::Greater) {
        return Err(Error::UnrepresentableSubject(
            "no attention mass inside the description mask".into(),
        ));
    }
    Ok(RefinedSubjectMap {
        grid: map.grid,
        weights: masked.into_iter().map(|v| v / total).collect(),
    })
}

/// `vˡ = Σ_ij Fˡ_ij · w_ij` for every layer of the stack.
pub fn pool_subject_representation<T: Scalar>(
    features: &FeatureStack<T>,
    weights: &RefinedSubjectMap<T>,
) -> Result<SubjectRepresentation<T>> {
    let mut layers = BTreeMap::new();
    for (id, fm) in &features.layers {
        let w = if fm.grid == weights.grid {
            weights.weights.clone()
        } else {
            let r = resample_nearest(&weights.weights, weights.grid, fm.grid)?;
            let s: T = r.iter().copied().sum();
            if s.partial_cmp(&T::zero()) != Some(Ordering::Greater) {
                return Err(Error::Shape(format!(
                    "weights vanish after resampling onto layer {id}"
                )));
            }
            r.into_iter().map(|x| x / s).collect()
        };
        if fm.values.rows() != w.len() {
            return Err(Error::Shape(format!(
                "layer {id} has {} feature rows for {} weights",
                fm.values.rows(),
                w.len()
            )));
        }
        let mut v = vec![T::zero(); fm.values.cols()];
        for (p, &wp) in w.iter().enumerate() {
            if wp == T::zero() {
                continue;
            }
            for (acc, &f) in v.iter_mut().zip(fm.values.row(p)) {
                *acc = *acc + f * wp;
            }
        }
        layers.insert(id.clone(), v);
    }
    Ok(SubjectRepresentation { layers })
}

/// Mean over layers of the cosine between each patch feature and the pooled
/// vector. Zero-norm vectors give similarity 0.
pub fn similarity_map<T: Scalar>(
    target_features: &FeatureStack<T>,
    rep: &SubjectRepresentation<T>,
) -> Result<SimilarityMap<T>> {
    if target_features.layers.len() != rep.layers.len()
        || !target_features.layers.keys().all(|k| rep.layers.contains_key(k))
    {
        return Err(Error::Shape(
            "feature stack and representation cover different layers".into(),
        ));
    }
    let mut grid = None;
    let mut acc: Vec<T> = Vec::new();
    for (id, fm) in &target_features.layers {
        let g = *grid.get_or_insert(fm.grid);
        if g != fm.grid {
            return Err(Error::Shape(format!("layer {id} is on a different grid")));
        }
        let v = &rep.layers[id];
        if v.len() != fm.values.cols() {
            return Err(Error::Shape(format!("layer {id} representation width mismatch")));
        }
        if acc.is_empty() {
            acc = vec![T::zero(); g.len()];
        }
        for (p, a) in acc.iter_mut().enumerate() {
            *a = *a + cosine(fm.values.row(p), v);
        }
    }
    let grid = grid.ok_or_else(|| Error::Shape("empty feature stack".into()))?;
    let n = T::from_count(target_features.layers.len());
    Ok(SimilarityMap {
        grid,
        values: acc.into_iter().map(|a| a / n).collect(),
    })
}

/// Applies the leak predicate patch-wise and ORs the result.
pub fn detect_leakage<T: Scalar>(
    c_ref: &SimilarityMap<T>,
    c_tgt: &SimilarityMap<T>,
    thresholds: Thresholds,
    mode: LocalizationMode,
    step: usize,
) -> Result<LeakageReport<T>> {
    if c_ref.grid != c_tgt.grid || c_ref.values.len() != c_tgt.values.len() {
        return Err(Error::Shape("similarity maps on different grids".into()));
    }
    let leak_map: Vec<bool> = c_ref
        .values
        .iter()
        .zip(&c_tgt.values)
        .map(|(r, t)| leak_predicate(r.to_f64_lossy(), t.to_f64_lossy(), thresholds))
        .collect();
    Ok(LeakageReport {
        grid: c_ref.grid,
        overall: leak_map.iter().any(|&b| b),
        leak_map,
        c_ref: c_ref.clone(),
        c_tgt: c_tgt.clone(),
        thresholds,
        mode,
        step,
        diagnostics: Vec::new(),
    })
}

/// Representation of one subject from an image's own captures: attention
/// from `step - 1`, features from `step`.
pub fn subject_representation<T: Scalar>(
    captures: &Captures<T>,
    token_index: usize,
    step: usize,
) -> Result<SubjectRepresentation<T>> {
    if step < 2 {
        return Err(Error::Config(format!(
            "localization needs two consecutive steps, got step {step}"
        )));
    }
    let records = captures.cross_at(step - 1);
    if records.is_empty() {
        return Err(Error::MissingCapture(format!(
            "cross-attention at step {}",
            step - 1
        )));
    }
    let map = aggregate_subject_map(&records, token_index)?;
    let mask = extract_description_mask(&map);
    if mask.diagnostic.is_some() {
        return Err(Error::UnrepresentableSubject("no subject localized".into()));
    }
    let refined = refine_subject_attention(&map, &mask)?;
    pool_subject_representation(captures.features_at(step)?, &refined)
}

fn is_no_subject(e: &Error) -> bool {
    matches!(e, Error::UnrepresentableSubject(m) if m == "no subject localized")
}

/// Similarity of the target features to a set of subjects, combined by
/// pointwise max. Subjects that cannot be represented are reported and
/// skipped.
fn side_similarity<T: Scalar>(
    own: &Captures<T>,
    prompt: &PromptSpec,
    subjects: &[usize],
    target_features: &FeatureStack<T>,
    step: usize,
    role: SubjectRole,
    diagnostics: &mut Vec<LocalizationDiagnostic>,
) -> Result<Option<SimilarityMap<T>>> {
    let mut maps = Vec::new();
    for &s in subjects {
        let subject = prompt
            .subjects
            .get(s)
            .ok_or_else(|| Error::Config(format!("subject index {s} out of range")))?;
        match subject_representation(own, subject.token_index, step) {
            Ok(rep) => maps.push(similarity_map(target_features, &rep)?),
            Err(e) if is_no_subject(&e) => {
                diagnostics.push(LocalizationDiagnostic::NoSubjectLocalized {
                    role,
                    subject: subject.text.clone(),
                })
            }
            Err(Error::UnrepresentableSubject(message)) => {
                diagnostics.push(LocalizationDiagnostic::UnrepresentableSubject {
                    role,
                    subject: subject.text.clone(),
                    message,
                })
            }
            Err(e) => return Err(e),
        }
    }
    if maps.is_empty() {
        Ok(None)
    } else {
        SimilarityMap::pointwise_max(&maps).map(Some)
    }
}

/// Everything the composition needs from one side of the pair.
#[derive(Clone, Copy)]
pub struct LocalizationSide<'a, T> {
    pub captures: &'a Captures<T>,
    pub prompt: &'a PromptSpec,
    /// Indices into `prompt.subjects`; empty means all of them.
    pub subjects: &'a [usize],
}

impl<'a, T> LocalizationSide<'a, T> {
    pub fn new(captures: &'a Captures<T>, prompt: &'a PromptSpec) -> Self {
        Self {
            captures,
            prompt,
            subjects: &[],
        }
    }

    pub fn only(mut self, subjects: &'a [usize]) -> Self {
        self.subjects = subjects;
        self
    }

    fn indices(&self) -> Vec<usize> {
        if self.subjects.is_empty() {
            (0..self.prompt.subjects.len()).collect()
        } else {
            self.subjects.to_vec()
        }
    }
}

/// Localization from captured state of both generations.
///
/// With several reference subjects `C_ref` is their pointwise max, which
/// flags a patch iff any single reference subject would. With several target
/// subjects `C_tgt` is their pointwise max, which flags a patch iff every
/// target subject would.
pub fn localize_captures<T: Scalar>(
    reference: LocalizationSide<'_, T>,
    target: LocalizationSide<'_, T>,
    step: usize,
    thresholds: Thresholds,
    mode: LocalizationMode,
) -> Result<LeakageReport<T>> {
    let target_features = target.captures.features_at(step)?;
    let grid = target_features
        .layers
        .values()
        .next()
        .map(|f| f.grid)
        .ok_or_else(|| Error::MissingCapture(format!("features at step {step}")))?;
    let mut diagnostics = Vec::new();
    let c_ref = side_similarity(
        reference.captures,
        reference.prompt,
        &reference.indices(),
        target_features,
        step,
        SubjectRole::Reference,
        &mut diagnostics,
    )?;
    let c_tgt = side_similarity(
        target.captures,
        target.prompt,
        &target.indices(),
        target_features,
        step,
        SubjectRole::Target,
        &mut diagnostics,
    )?;
    let mut report = match (c_ref, c_tgt) {
        (Some(r), Some(t)) => detect_leakage(&r, &t, thresholds, mode, step)?,
        _ => LeakageReport::clean(grid, thresholds, mode, step),
    };
    report.diagnostics = diagnostics;
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PosthocOptions {
    /// Style text appended to the subject when re-simulating.
    pub style: String,
    pub seed: u64,
    pub thresholds: Thresholds,
}

/// Re-simulates the last two steps of an existing image with capture on.
pub fn resimulate_final_steps<T: Scalar, B: Backbone<T>>(
    backbone: &B,
    image: &RgbImage,
    prompt: &PromptSpec,
    seed: u64,
) -> Result<Captures<T>> {
    let total = backbone.config().total_steps;
    let pair = ddim_invert_pair(backbone, image, prompt, seed)?;
    let (out, _) = replay_trajectory(
        backbone,
        prompt,
        &pair.trajectory(total),
        None,
        false,
        &GenerationOptions::seeded(seed),
    )?;
    Ok(out.captures)
}

/// Post-hoc localization for two finished images: invert both, re-simulate
/// the final two steps and run the in-generation composition at step `T`.
pub fn localize_posthoc<T: Scalar, B: Backbone<T>>(
    backbone: &B,
    reference_image: &RgbImage,
    target_image: &RgbImage,
    reference_subjects: &[&str],
    target_subjects: &[&str],
    options: &PosthocOptions,
) -> Result<LeakageReport<T>> {
    let tokenize = |t: &str| backbone.tokenize(t);
    let ref_prompt = PromptSpec::resolve(reference_subjects, &options.style, tokenize)?;
    let tgt_prompt = PromptSpec::resolve(target_subjects, &options.style, tokenize)?;
    let ref_caps = resimulate_final_steps(backbone, reference_image, &ref_prompt, options.seed)?;
    let tgt_caps = resimulate_final_steps(backbone, target_image, &tgt_prompt, options.seed)?;
    localize_captures(
        LocalizationSide::new(&ref_caps, &ref_prompt),
        LocalizationSide::new(&tgt_caps, &tgt_prompt),
        backbone.config().total_steps,
        options.thresholds,
        LocalizationMode::PostHoc,
    )
}
