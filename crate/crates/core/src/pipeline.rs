//! End-to-end orchestration: one recorded reference pass, mask extraction,
//! controlled half-generation probes for the scale search, and the final
//! full generation at the chosen scale.

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    ddim_invert, replay_trajectory, run_generation, run_reference_generation, AttentionControl,
    Backbone, Captures, GenerationOptions, Provenance, ReferenceCache,
};
use crate::error::{Error, Result};
use crate::localizer::{
    localize_captures, LeakageReport, LocalizationMode, LocalizationSide, Thresholds,
};
use crate::masks::{aggregate_subject_map, extract_subject_mask, SubjectMap, SubjectMask};
use crate::prompt::PromptSpec;
use crate::scalar::Scalar;
use crate::search::{try_binary_search_scale, AlignmentTrace, Probe, ProbeMode, SearchConfig, Verdict};
use crate::shared_attention::ScalingScope;
use crate::tensor::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub reference: u64,
    /// Fixed across every probe of a search.
    pub target: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            reference: 0,
            target: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub search: SearchConfig,
    pub thresholds: Thresholds,
    pub seeds: Seeds,
    pub scope: ScalingScope,
    /// Skip the search and generate at this scale.
    pub fixed_alpha: Option<f64>,
    /// Overrides `ceil(T/2)`.
    pub localization_step: Option<usize>,
}


/// Everything about the reference that target generations reuse.
#[derive(Clone, Debug)]
pub struct ReferenceBundle<T, L> {
    pub prompt: PromptSpec,
    pub image: RgbImage,
    /// One map per reference subject, averaged over all steps.
    pub maps: Vec<SubjectMap<T>>,
    pub masks: Vec<SubjectMask>,
    pub captures: Captures<T>,
    pub cache: ReferenceCache<T, L>,
    pub provenance: Provenance,
}

impl<T: Scalar, L> ReferenceBundle<T, L> {
    pub fn grid(&self) -> Grid {
        self.masks[0].grid
    }

    /// Per-patch key scale: the smallest α among the subject masks covering
    /// a patch, 1 elsewhere.
    pub fn key_scales(&self, alphas: &[f64]) -> Result<Vec<T>> {
        if alphas.len() != self.masks.len() {
            return Err(Error::Config(format!(
                "{} scales for {} reference subjects",
                alphas.len(),
                self.masks.len()
            )));
        }
        Ok(combine_scales(&self.masks, alphas))
    }

    pub fn mask_union(&self) -> Vec<bool> {
        let mut out = vec![false; self.grid().len()];
        for m in &self.masks {
            for (o, &b) in out.iter_mut().zip(&m.bits) {
                *o |= b;
            }
        }
        out
    }
}

/// Minimum-α rule over possibly overlapping masks.
pub fn combine_scales<T: Scalar>(masks: &[SubjectMask], alphas: &[f64]) -> Vec<T> {
    let n = masks.first().map_or(0, |m| m.bits.len());
    (0..n)
        .map(|p| {
            let a = masks
                .iter()
                .zip(alphas)
                .filter(|(m, _)| m.bits[p])
                .map(|(_, &a)| a)
                .fold(1.0f64, f64::min);
            T::lit(a)
        })
        .collect()
}

/// A controlled target generation.
#[derive(Clone, Debug)]
pub struct TargetState<T> {
    /// Decoded image for full generations only.
    pub image: Option<RgbImage>,
    pub captures: Captures<T>,
    pub report: Option<LeakageReport<T>>,
    pub last_step: usize,
}

#[derive(Clone, Debug)]
pub struct AlignmentResult<T> {
    pub prompt: PromptSpec,
    pub image: RgbImage,
    /// α* per reference subject.
    pub alphas: Vec<f64>,
    pub traces: Vec<AlignmentTrace>,
    /// Verdict of the final generation at the localization step.
    pub final_report: LeakageReport<T>,
    pub scales: Vec<T>,
}

impl<T> AlignmentResult<T> {
    /// Half generations plus the final full one.
    pub fn generation_passes(&self) -> usize {
        self.traces.iter().map(|t| t.half_generations()).sum::<usize>() + 1
    }
}

#[derive(Clone, Debug)]
pub struct SetResult<T, L> {
    pub reference: ReferenceBundle<T, L>,
    pub targets: Vec<AlignmentResult<T>>,
}

pub struct Pipeline<'b, B> {
    pub backbone: &'b B,
    pub config: RunConfig,
}

impl<'b, B> Pipeline<'b, B> {
    pub fn new(backbone: &'b B, config: RunConfig) -> Self {
        Self { backbone, config }
    }

    pub fn prompt<T: Scalar>(&self, subjects: &[&str], style: &str) -> Result<PromptSpec>
    where
        B: Backbone<T>,
    {
        PromptSpec::resolve(subjects, style, |t| self.backbone.tokenize(t))
    }

    pub fn localization_step<T: Scalar>(&self) -> Result<usize>
    where
        B: Backbone<T>,
    {
        let cfg = self.backbone.config();
        let step = self
            .config
            .localization_step
            .unwrap_or_else(|| cfg.localization_step());
        if !(2..=cfg.total_steps).contains(&step) {
            return Err(Error::StopOutOfRange {
                stop_at: step,
                total: cfg.total_steps,
            });
        }
        Ok(step)
    }

    fn validate(&self) -> Result<()> {
        self.config.search.validate()?;
        if let Some(a) = self.config.fixed_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("fixed alpha {a} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn bundle<T: Scalar>(
        &self,
        prompt: &PromptSpec,
        image: RgbImage,
        captures: Captures<T>,
        cache: ReferenceCache<T, B::Latent>,
    ) -> Result<ReferenceBundle<T, B::Latent>>
    where
        B: Backbone<T>,
    {
        let records = captures.cross_all();
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for s in &prompt.subjects {
            let map = aggregate_subject_map(&records, s.token_index)?;
            masks.push(extract_subject_mask(&map));
            maps.push(map);
        }
        let provenance = cache.provenance;
        Ok(ReferenceBundle {
            prompt: prompt.clone(),
            image,
            maps,
            masks,
            captures,
            cache,
            provenance,
        })
    }

    /// Full reference generation with capture and key/value recording.
    pub fn run_reference<T: Scalar>(&self, prompt: &PromptSpec) -> Result<ReferenceBundle<T, B::Latent>>
    where
        B: Backbone<T>,
    {
        let opts = GenerationOptions::seeded(self.config.seeds.reference);
        let (out, cache) = run_reference_generation(self.backbone, prompt, &opts)?;
        let image = out
            .image
            .ok_or_else(|| Error::MissingCapture("reference image".into()))?;
        self.bundle(prompt, image, out.captures, cache)
    }

    /// Reference bundle for an existing image via full-depth inversion and a
    /// recorded replay of the recovered trajectory.
    pub fn reference_from_image<T: Scalar>(
        &self,
        image: &RgbImage,
        prompt: &PromptSpec,
    ) -> Result<ReferenceBundle<T, B::Latent>>
    where
        B: Backbone<T>,
    {
        let total = self.backbone.config().total_steps;
        let seed = self.config.seeds.reference;
        let trajectory = ddim_invert(self.backbone, image, prompt, total, seed)?;
        let (out, cache) = replay_trajectory(
            self.backbone,
            prompt,
            &trajectory,
            None,
            true,
            &GenerationOptions::seeded(seed),
        )?;
        let cache = cache.ok_or_else(|| Error::Inversion("replay did not record".into()))?;
        self.bundle(prompt, image.clone(), out.captures, cache)
    }

    /// Target generation sharing attention with the reference under the
    /// given per-patch key scales. With `localize`, the verdict for those
    /// reference subjects is computed at the localization step.
    pub fn run_target_scaled<T: Scalar>(
        &self,
        prompt: &PromptSpec,
        bundle: &ReferenceBundle<T, B::Latent>,
        scales: Vec<T>,
        stop_at: Option<usize>,
        localize: Option<&[usize]>,
    ) -> Result<TargetState<T>>
    where
        B: Backbone<T>,
    {
        let control = AttentionControl::with_scales(
            &bundle.cache,
            bundle.grid(),
            scales,
            bundle.mask_union(),
            self.config.scope,
        )?;
        let mut opts = GenerationOptions::seeded(self.config.seeds.target);
        opts.stop_at = stop_at;
        let out = run_generation(self.backbone, prompt, Some(&control), &opts)?;
        let report = match localize {
            Some(subjects) => {
                let step = self.localization_step()?;
                Some(localize_captures(
                    LocalizationSide::new(&bundle.captures, &bundle.prompt).only(subjects),
                    LocalizationSide::new(&out.captures, prompt),
                    step,
                    self.config.thresholds,
                    LocalizationMode::InGeneration,
                )?)
            }
            None => None,
        };
        Ok(TargetState {
            image: out.image,
            captures: out.captures,
            report,
            last_step: out.last_step,
        })
    }

    /// Target generation with every reference subject's keys scaled by `alpha`.
    pub fn run_target<T: Scalar>(
        &self,
        prompt: &PromptSpec,
        bundle: &ReferenceBundle<T, B::Latent>,
        alpha: f64,
        stop_at: Option<usize>,
    ) -> Result<TargetState<T>>
    where
        B: Backbone<T>,
    {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        let scales = bundle.key_scales(&vec![alpha; bundle.masks.len()])?;
        let all: Vec<usize> = (0..bundle.masks.len()).collect();
        let localize = stop_at.is_some().then_some(all.as_slice());
        self.run_target_scaled(prompt, bundle, scales, stop_at, localize)
    }

    /// Leak verdict of a half generation where subject `s` is scaled by α
    /// and every other reference subject is left untouched.
    pub fn probe_subject<T: Scalar>(
        &self,
        prompt: &PromptSpec,
        bundle: &ReferenceBundle<T, B::Latent>,
        subject: usize,
        alpha: f64,
    ) -> Result<LeakageReport<T>>
    where
        B: Backbone<T>,
    {
        let mut alphas = vec![1.0; bundle.masks.len()];
        alphas[subject] = alpha;
        let scales = bundle.key_scales(&alphas)?;
        let step = self.localization_step()?;
        let state = self.run_target_scaled(prompt, bundle, scales, Some(step), Some(&[subject]))?;
        Ok(state.report.expect("localization requested"))
    }

    fn search_subject<T: Scalar>(
        &self,
        prompt: &PromptSpec,
        bundle: &ReferenceBundle<T, B::Latent>,
        subject: usize,
    ) -> Result<AlignmentTrace>
    where
        B: Backbone<T>,
    {
        let mut trace = match self.config.fixed_alpha {
            Some(a) => AlignmentTrace::fixed(a),
            None => {
                let (_, trace) = try_binary_search_scale(
                    |alpha| {
                        let r = self.probe_subject(prompt, bundle, subject, alpha)?;
                        Ok(Verdict {
                            leak: r.overall,
                            leak_patches: Some(r.leak_count()),
                        })
                    },
                    &self.config.search,
                )?;
                trace
            }
        };
        trace.subject = Some(bundle.prompt.subjects[subject].text.clone());
        trace.reference = Some(bundle.provenance);
        if bundle.masks[subject].is_empty() {
            trace
                .warnings
                .push("reference subject mask is empty; scaling has no effect".into());
        }
        Ok(trace)
    }

    /// Independent searches per reference subject, then one full generation
    /// with the combined scales. Subjects are searched concurrently.
    pub fn multi_subject_align<T: Scalar>(
        &self,
        prompt: &PromptSpec,
        bundle: &ReferenceBundle<T, B::Latent>,
    ) -> Result<AlignmentResult<T>>
    where
        B: Backbone<T>,
    {
        self.validate()?;
        let mut traces = (0..bundle.masks.len())
            .into_par_iter()
            .map(|s| self.search_subject(prompt, bundle, s))
            .collect::<Result<Vec<_>>>()?;
        let alphas: Vec<f64> = traces.iter().map(|t| t.alpha_star).collect();
        let scales = bundle.key_scales(&alphas)?;
        let all: Vec<usize> = (0..bundle.masks.len()).collect();
        let state = self.run_target_scaled(prompt, bundle, scales.clone(), None, Some(&all))?;
        let final_report = state.report.expect("localization requested");
        for (s, trace) in traces.iter_mut().enumerate() {
            // per-subject re-check from the same final generation
            let r = if bundle.masks.len() == 1 {
                final_report.clone()
            } else {
                localize_captures(
                    LocalizationSide::new(&bundle.captures, &bundle.prompt).only(&[s]),
                    LocalizationSide::new(&state.captures, prompt),
                    final_report.step,
                    self.config.thresholds,
                    LocalizationMode::InGeneration,
                )?
            };
            trace.probes.push(Probe {
                alpha: trace.alpha_star,
                leak: r.overall,
                mode: ProbeMode::Full,
                leak_patches: Some(r.leak_count()),
            });
            if r.overall && self.config.fixed_alpha.is_none() {
                trace
                    .warnings
                    .push("final generation still leaks at the localization step".into());
            }
        }
        Ok(AlignmentResult {
            prompt: prompt.clone(),
            image: state
                .image
                .ok_or_else(|| Error::MissingCapture("final target image".into()))?,
            alphas,
            traces,
            final_report,
            scales,
        })
    }

    /// Scale search for a single-subject reference followed by the final
    /// full generation.
    pub fn adaptive_align<T: Scalar>(
        &self,
        prompt: &PromptSpec,
        bundle: &ReferenceBundle<T, B::Latent>,
    ) -> Result<AlignmentResult<T>>
    where
        B: Backbone<T>,
    {
        self.multi_subject_align(prompt, bundle)
    }

    /// One reference for many targets; targets are aligned independently
    /// and returned in input order.
    pub fn align_set<T: Scalar>(
        &self,
        reference: &PromptSpec,
        targets: &[PromptSpec],
    ) -> Result<SetResult<T, B::Latent>>
    where
        B: Backbone<T>,
    {
        if targets.is_empty() {
            return Err(Error::Config("at least one target prompt is required".into()));
        }
        self.validate()?;
        let bundle = self.run_reference(reference)?;
        let results = self.align_targets(&bundle, targets)?;
        Ok(SetResult {
            reference: bundle,
            targets: results,
        })
    }

    pub fn align_targets<T: Scalar>(
        &self,
        bundle: &ReferenceBundle<T, B::Latent>,
        targets: &[PromptSpec],
    ) -> Result<Vec<AlignmentResult<T>>>
    where
        B: Backbone<T>,
    {
        targets
            .par_iter()
            .map(|t| self.multi_subject_align(t, bundle))
            .collect()
    }

    /// Same as [`Pipeline::align_set`] with a real reference image.
    pub fn align_from_real<T: Scalar>(
        &self,
        image: &RgbImage,
        reference: &PromptSpec,
        targets: &[PromptSpec],
    ) -> Result<SetResult<T, B::Latent>>
    where
        B: Backbone<T>,
    {
        if targets.is_empty() {
            return Err(Error::Config("at least one target prompt is required".into()));
        }
        self.validate()?;
        let bundle = self.reference_from_image(image, reference)?;
        let results = self.align_targets(&bundle, targets)?;
        Ok(SetResult {
            reference: bundle,
            targets: results,
        })
    }
}
