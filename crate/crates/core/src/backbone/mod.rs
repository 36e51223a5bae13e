//! Capture-and-control boundary around a text-to-image denoising backbone.
//!
//! A backbone only has to implement [`Backbone`]: one denoising step, a
//! tokenizer, latent decode/encode and a single DDIM inversion step. At every
//! attention site it calls back into [`StepHooks`], which records
//! cross-attention probabilities and pre-attention features, caches the
//! reference image's self-attention tensors, and (for a target image) runs
//! shared attention with the scaled reference keys. Everything above this
//! module is backbone-agnostic.

pub mod mock;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::SubjectMask;
use crate::prompt::PromptSpec;
use crate::scalar::Scalar;
use crate::shared_attention::{
    attention, shared_attention_with_scales, AttentionTensors, ScaleParam, ScalingScope,
};
use crate::tensor::{resample_nearest, Grid, Matrix};

pub use mock::{
    rect, LeakCurve, MockBackbone, MockConcept, MockLatent, MockLayerSpec, MockSpec, PlantedLeak,
    RunEvent,
};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub String);

impl From<&str> for LayerId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One transformer block of the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: LayerId,
    pub grid: Grid,
    pub feature_dim: usize,
    /// Lowest-resolution block; cross-attention and features are captured here.
    pub bottleneck: bool,
    /// Self-attention of this block is shared with the reference.
    pub shared: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub total_steps: usize,
    pub bottleneck_layer_ids: Vec<LayerId>,
    /// Patch grid of the bottleneck layers.
    pub latent_grid: Grid,
    pub head_count: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self, layers: &[LayerInfo]) -> Result<()> {
        if self.total_steps < 2 {
            return Err(Error::Config(format!(
                "total_steps must be at least 2, got {}",
                self.total_steps
            )));
        }
        if self.head_count == 0 {
            return Err(Error::Config("head_count must be positive".into()));
        }
        if self.bottleneck_layer_ids.is_empty() {
            return Err(Error::Config("no bottleneck layers configured".into()));
        }
        for id in &self.bottleneck_layer_ids {
            let layer = layers
                .iter()
                .find(|l| &l.id == id)
                .ok_or_else(|| Error::UnknownLayer(id.0.clone()))?;
            if layer.grid != self.latent_grid {
                return Err(Error::Config(format!(
                    "bottleneck layer {id} is on a {}x{} grid, expected {}x{}",
                    layer.grid.height,
                    layer.grid.width,
                    self.latent_grid.height,
                    self.latent_grid.width
                )));
            }
        }
        Ok(())
    }

    /// Step at which the half-generation verdict is taken: `ceil(T/2)`, but
    /// never before step 2 since the preceding step's attention is needed.
    pub fn localization_step(&self) -> usize {
        self.total_steps.div_ceil(2).max(2)
    }

    pub fn is_bottleneck(&self, id: &LayerId) -> bool {
        self.bottleneck_layer_ids.contains(id)
    }
}

/// Head-averaged cross-attention probabilities of one layer at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord<T> {
    pub layer_id: LayerId,
    pub step: usize,
    pub grid: Grid,
    /// `[patches × text tokens]`, rows sum to one.
    pub probs: Matrix<T>,
}

/// Pre-self-attention features of one layer, `[patches × d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap<T> {
    pub grid: Grid,
    pub values: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStack<T> {
    pub step: usize,
    pub layers: BTreeMap<LayerId, FeatureMap<T>>,
}

/// Where a latent trajectory came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    Inverted,
}

/// Summary of one shared attention evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedAttentionStats {
    pub layer_id: LayerId,
    pub step: usize,
    pub scaled: bool,
    /// Attention mass on reference patches inside the subject mask.
    pub masked_mass: f64,
    /// Attention mass on all reference patches.
    pub reference_mass: f64,
    pub queries: usize,
}

/// Everything recorded during a generation.
#[derive(Clone, Debug)]
pub struct Captures<T> {
    pub cross: Vec<AttentionRecord<T>>,
    pub features: BTreeMap<usize, FeatureStack<T>>,
    pub shared: Vec<SharedAttentionStats>,
    pub scaled_layers: BTreeSet<LayerId>,
}

impl<T> Default for Captures<T> {
    fn default() -> Self {
        Self {
            cross: Vec::new(),
            features: BTreeMap::new(),
            shared: Vec::new(),
            scaled_layers: BTreeSet::new(),
        }
    }
}

impl<T: Scalar> Captures<T> {
    pub fn cross_at(&self, step: usize) -> Vec<&AttentionRecord<T>> {
        self.cross.iter().filter(|r| r.step == step).collect()
    }

    pub fn cross_all(&self) -> Vec<&AttentionRecord<T>> {
        self.cross.iter().collect()
    }

    pub fn features_at(&self, step: usize) -> Result<&FeatureStack<T>> {
        self.features
            .get(&step)
            .ok_or_else(|| Error::MissingCapture(format!("features at step {step}")))
    }

    pub fn steps_with_cross(&self) -> BTreeSet<usize> {
        self.cross.iter().map(|r| r.step).collect()
    }

    /// Masked reference attention mass summed over scaled layers.
    pub fn scaled_masked_mass(&self) -> f64 {
        self.shared
            .iter()
            .filter(|s| s.scaled)
            .map(|s| s.masked_mass)
            .sum()
    }
}

/// Reference self-attention tensors per `(step, layer)` plus the latent
/// entering each step, replayed for every target generation.
#[derive(Clone, Debug)]
pub struct ReferenceCache<T, L> {
    pub tensors: BTreeMap<(usize, LayerId), AttentionTensors<T>>,
    pub latents: BTreeMap<usize, L>,
    pub provenance: Provenance,
}

impl<T, L> ReferenceCache<T, L> {
    fn new(provenance: Provenance) -> Self {
        Self {
            tensors: BTreeMap::new(),
            latents: BTreeMap::new(),
            provenance,
        }
    }
}

/// Shared-attention control for a target generation.
#[derive(Clone, Debug)]
pub struct AttentionControl<'a, T, L> {
    pub reference: &'a ReferenceCache<T, L>,
    /// Per-reference-patch key scale on the bottleneck grid.
    pub scales: Vec<T>,
    /// Union of the subject masks the scales were built from.
    pub mask: Vec<bool>,
    pub grid: Grid,
    pub scope: ScalingScope,
}

impl<'a, T: Scalar, L> AttentionControl<'a, T, L> {
    /// Plain shared attention, no scaling.
    pub fn unscaled(reference: &'a ReferenceCache<T, L>, mask: &SubjectMask) -> Self {
        Self {
            reference,
            scales: vec![T::one(); mask.grid.len()],
            mask: mask.bits.clone(),
            grid: mask.grid,
            scope: ScalingScope::default(),
        }
    }

    /// Keys inside `mask` scaled by `alpha`, everything else untouched.
    pub fn masked(
        reference: &'a ReferenceCache<T, L>,
        mask: &SubjectMask,
        alpha: ScaleParam<T>,
        scope: ScalingScope,
    ) -> Self {
        let scales = mask
            .bits
            .iter()
            .map(|&b| {
                let r = if b { T::one() } else { T::zero() };
                (T::one() - r) + alpha.get() * r
            })
            .collect();
        Self {
            reference,
            scales,
            mask: mask.bits.clone(),
            grid: mask.grid,
            scope,
        }
    }

    pub fn with_scales(
        reference: &'a ReferenceCache<T, L>,
        grid: Grid,
        scales: Vec<T>,
        mask: Vec<bool>,
        scope: ScalingScope,
    ) -> Result<Self> {
        if scales.len() != grid.len() || mask.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} scales / {} mask bits for a {}-patch grid",
                scales.len(),
                mask.len(),
                grid.len()
            )));
        }
        Ok(Self {
            reference,
            scales,
            mask,
            grid,
            scope,
        })
    }
}

/// Callbacks a backbone invokes at its attention sites during one step.
pub struct StepHooks<'h, T, L> {
    control: Option<&'h AttentionControl<'h, T, L>>,
    recorder: Option<&'h mut ReferenceCache<T, L>>,
    captures: &'h mut Captures<T>,
    capture: bool,
}

impl<'h, T: Scalar, L> StepHooks<'h, T, L> {
    pub fn is_recording(&self) -> bool {
        self.recorder.is_some()
    }

    pub fn has_control(&self) -> bool {
        self.control.is_some()
    }

    /// Latent that entered `step` of the reference generation, when sharing.
    pub fn reference_latent(&self, step: usize) -> Option<&L> {
        self.control.and_then(|c| c.reference.latents.get(&step))
    }

    /// Bottleneck-grid key scales of the active control.
    pub fn key_scales(&self) -> Option<(&[T], Grid)> {
        self.control.map(|c| (c.scales.as_slice(), c.grid))
    }

    pub fn cross_attention(&mut self, layer: &LayerInfo, step: usize, probs: Matrix<T>) {
        if self.capture && layer.bottleneck {
            self.captures.cross.push(AttentionRecord {
                layer_id: layer.id.clone(),
                step,
                grid: layer.grid,
                probs,
            });
        }
    }

    pub fn features(&mut self, layer: &LayerInfo, step: usize, values: &Matrix<T>) {
        if self.capture && layer.bottleneck {
            self.captures
                .features
                .entry(step)
                .or_insert_with(|| FeatureStack {
                    step,
                    layers: BTreeMap::new(),
                })
                .layers
                .insert(
                    layer.id.clone(),
                    FeatureMap {
                        grid: layer.grid,
                        values: values.clone(),
                    },
                );
        }
    }

    /// Self-attention of `layer`: plain, or shared with the reference when a
    /// control is active.
    pub fn self_attention(
        &mut self,
        layer: &LayerInfo,
        step: usize,
        tensors: AttentionTensors<T>,
    ) -> Result<Matrix<T>> {
        if let Some(rec) = self.recorder.as_deref_mut() {
            rec.tensors.insert((step, layer.id.clone()), tensors.clone());
        }
        let control = match self.control {
            Some(c) if layer.shared => c,
            _ => return Ok(attention(&tensors.q, &tensors.k, &tensors.v)?.0),
        };
        let reference = control
            .reference
            .tensors
            .get(&(step, layer.id.clone()))
            .ok_or_else(|| {
                Error::MissingCapture(format!(
                    "reference tensors for layer {} at step {step}",
                    layer.id
                ))
            })?;
        let scaled = match control.scope {
            ScalingScope::AllShared => true,
            ScalingScope::BottleneckOnly => layer.bottleneck,
        };
        let scales = if scaled {
            resample_nearest(&control.scales, control.grid, layer.grid)?
        } else {
            vec![T::one(); layer.grid.len()]
        };
        let mask = resample_nearest(&control.mask, control.grid, layer.grid)?;
        let out = shared_attention_with_scales(&tensors, reference, &scales)?;
        if self.capture {
            if scaled {
                self.captures.scaled_layers.insert(layer.id.clone());
            }
            self.captures.shared.push(SharedAttentionStats {
                layer_id: layer.id.clone(),
                step,
                scaled,
                masked_mass: out.reference_mass(|j| mask[j]).to_f64_lossy(),
                reference_mass: out.reference_mass(|_| true).to_f64_lossy(),
                queries: out.probs.rows(),
            });
        }
        Ok(out.output)
    }
}

/// The plugin contract a denoising model implements.
pub trait Backbone<T: Scalar>: Sync {
    type Latent: Clone + fmt::Debug + Send + Sync;

    fn config(&self) -> &BackboneConfig;

    fn layers(&self) -> &[LayerInfo];

    fn tokenize(&self, text: &str) -> Vec<String>;

    /// Pixel size `(width, height)` of decoded images.
    fn image_size(&self) -> (u32, u32);

    fn initial_latent(&self, seed: u64) -> Self::Latent;

    /// Runs denoising step `step` (1-based) on the latent entering it.
    fn denoise_step(
        &self,
        prompt: &PromptSpec,
        latent: &Self::Latent,
        step: usize,
        seed: u64,
        hooks: &mut StepHooks<'_, T, Self::Latent>,
    ) -> Result<Self::Latent>;

    fn decode(&self, latent: &Self::Latent) -> RgbImage;

    fn encode(&self, image: &RgbImage) -> Result<Self::Latent>;

    /// One deterministic DDIM inversion step: maps the latent produced by
    /// `step` back to the latent that entered it.
    fn invert_step(
        &self,
        prompt: &PromptSpec,
        latent: &Self::Latent,
        step: usize,
        seed: u64,
    ) -> Result<Self::Latent>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerationOptions {
    pub seed: u64,
    /// Stop after this step without decoding; must lie in `[2, T]`.
    pub stop_at: Option<usize>,
    pub capture: bool,
}

impl GenerationOptions {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            stop_at: None,
            capture: true,
        }
    }

    pub fn stop_at(mut self, step: usize) -> Self {
        self.stop_at = Some(step);
        self
    }
}

#[derive(Clone, Debug)]
pub struct GenerationOutput<T, L> {
    /// Decoded image; `None` for stopped (partial) generations.
    pub image: Option<RgbImage>,
    pub final_latent: L,
    /// Latent entering each executed step.
    pub step_inputs: BTreeMap<usize, L>,
    pub captures: Captures<T>,
    pub last_step: usize,
}

/// Latents entering a contiguous run of steps, ending at the final step.
#[derive(Clone, Debug)]
pub struct LatentTrajectory<L> {
    pub inputs: BTreeMap<usize, L>,
    pub provenance: Provenance,
}

/// Latents entering the last two steps.
#[derive(Clone, Debug)]
pub struct LatentPair<L> {
    pub penultimate: L,
    pub last: L,
    pub provenance: Provenance,
}

impl<L: Clone> LatentPair<L> {
    pub fn trajectory(&self, total_steps: usize) -> LatentTrajectory<L> {
        let mut inputs = BTreeMap::new();
        inputs.insert(total_steps - 1, self.penultimate.clone());
        inputs.insert(total_steps, self.last.clone());
        LatentTrajectory {
            inputs,
            provenance: self.provenance,
        }
    }
}

enum Inputs<'t, L> {
    Free(L),
    Forced(&'t BTreeMap<usize, L>),
}

fn check_prompt<T: Scalar, B: Backbone<T>>(backbone: &B, prompt: &PromptSpec) -> Result<()> {
    backbone.config().validate(backbone.layers())?;
    let n = backbone.tokenize(&prompt.full_prompt).len();
    prompt.validate_tokens(n)
}

#[allow(clippy::too_many_arguments)]
fn drive<T: Scalar, B: Backbone<T>>(
    backbone: &B,
    prompt: &PromptSpec,
    inputs: Inputs<'_, B::Latent>,
    steps: std::ops::RangeInclusive<usize>,
    control: Option<&AttentionControl<'_, T, B::Latent>>,
    mut recorder: Option<&mut ReferenceCache<T, B::Latent>>,
    opts: &GenerationOptions,
    decode: bool,
) -> Result<GenerationOutput<T, B::Latent>> {
    let mut captures = Captures::default();
    let mut step_inputs = BTreeMap::new();
    let (first, last) = (*steps.start(), *steps.end());
    let mut latent = match &inputs {
        Inputs::Free(l) => l.clone(),
        Inputs::Forced(map) => map
            .get(&first)
            .cloned()
            .ok_or_else(|| Error::MissingCapture(format!("latent entering step {first}")))?,
    };
    for step in first..=last {
        if let Inputs::Forced(map) = &inputs {
            latent = map
                .get(&step)
                .cloned()
                .ok_or_else(|| Error::MissingCapture(format!("latent entering step {step}")))?;
        }
        if let Some(rec) = recorder.as_deref_mut() {
            rec.latents.insert(step, latent.clone());
        }
        step_inputs.insert(step, latent.clone());
        let mut hooks = StepHooks {
            control,
            recorder: recorder.as_deref_mut(),
            captures: &mut captures,
            capture: opts.capture,
        };
        latent = backbone.denoise_step(prompt, &latent, step, opts.seed, &mut hooks)?;
    }
    let image = decode.then(|| backbone.decode(&latent));
    Ok(GenerationOutput {
        image,
        final_latent: latent,
        step_inputs,
        captures,
        last_step: last,
    })
}

fn resolve_stop<T: Scalar, B: Backbone<T>>(backbone: &B, opts: &GenerationOptions) -> Result<usize> {
    let total = backbone.config().total_steps;
    match opts.stop_at {
        Some(s) if !(2..=total).contains(&s) => Err(Error::StopOutOfRange { stop_at: s, total }),
        Some(s) => Ok(s),
        None => Ok(total),
    }
}

/// Runs a generation from noise, optionally sharing attention with a cached
/// reference. Captures cross-attention and features at the bottleneck layers
/// for every executed step.
pub fn run_generation<T: Scalar, B: Backbone<T>>(
    backbone: &B,
    prompt: &PromptSpec,
    control: Option<&AttentionControl<'_, T, B::Latent>>,
    opts: &GenerationOptions,
) -> Result<GenerationOutput<T, B::Latent>> {
    check_prompt(backbone, prompt)?;
    let last = resolve_stop(backbone, opts)?;
    let decode = last == backbone.config().total_steps && opts.stop_at.is_none();
    drive(
        backbone,
        prompt,
        Inputs::Free(backbone.initial_latent(opts.seed)),
        1..=last,
        control,
        None,
        opts,
        decode,
    )
}

/// A generation together with the reference cache it recorded.
pub type RecordedRun<T, L> = (GenerationOutput<T, L>, ReferenceCache<T, L>);

/// A replay, with its cache when recording was requested.
pub type Replay<T, L> = (GenerationOutput<T, L>, Option<ReferenceCache<T, L>>);

/// Full reference generation that also records its self-attention tensors
/// for later replay.
pub fn run_reference_generation<T: Scalar, B: Backbone<T>>(
    backbone: &B,
    prompt: &PromptSpec,
    opts: &GenerationOptions,
) -> Result<RecordedRun<T, B::Latent>> {
    check_prompt(backbone, prompt)?;
    let total = backbone.config().total_steps;
    let mut cache = ReferenceCache::new(Provenance::Generated);
    let out = drive(
        backbone,
        prompt,
        Inputs::Free(backbone.initial_latent(opts.seed)),
        1..=total,
        None,
        Some(&mut cache),
        opts,
        true,
    )?;
    Ok((out, cache))
}

/// Re-runs the steps covered by `trajectory`, feeding each step its recorded
/// input latent. With `record`, the replay also fills a reference cache.
pub fn replay_trajectory<T: Scalar, B: Backbone<T>>(
    backbone: &B,
    prompt: &PromptSpec,
    trajectory: &LatentTrajectory<B::Latent>,
    control: Option<&AttentionControl<'_, T, B::Latent>>,
    record: bool,
    opts: &GenerationOptions,
) -> Result<Replay<T, B::Latent>> {
    check_prompt(backbone, prompt)?;
    let first = *trajectory
        .inputs
        .keys()
        .next()
        .ok_or_else(|| Error::Inversion("empty latent trajectory".into()))?;
    let last = *trajectory.inputs.keys().next_back().unwrap();
    let mut cache = record.then(|| ReferenceCache::new(trajectory.provenance));
    let out = drive(
        backbone,
        prompt,
        Inputs::Forced(&trajectory.inputs),
        first..=last,
        control,
        cache.as_mut(),
        opts,
        last == backbone.config().total_steps,
    )?;
    Ok((out, cache))
}

/// Deterministic inversion of `image` through the last `depth` steps.
pub fn ddim_invert<T: Scalar, B: Backbone<T>>(
    backbone: &B,
    image: &RgbImage,
    prompt: &PromptSpec,
    depth: usize,
    seed: u64,
) -> Result<LatentTrajectory<B::Latent>> {
    let (w, h) = backbone.image_size();
    if image.dimensions() != (w, h) {
        return Err(Error::ImageDimensions {
            expected_w: w,
            expected_h: h,
            got_w: image.width(),
            got_h: image.height(),
        });
    }
    let total = backbone.config().total_steps;
    if depth == 0 || depth > total {
        return Err(Error::Inversion(format!(
            "inversion depth {depth} outside [1, {total}]"
        )));
    }
    let mut produced = backbone.encode(image)?;
    let mut inputs = BTreeMap::new();
    for step in (total - depth + 1..=total).rev() {
        let entering = backbone.invert_step(prompt, &produced, step, seed)?;
        inputs.insert(step, entering.clone());
        produced = entering;
    }
    Ok(LatentTrajectory {
        inputs,
        provenance: Provenance::Inverted,
    })
}

/// Two-step inversion used by post-hoc localization.
pub fn ddim_invert_pair<T: Scalar, B: Backbone<T>>(
    backbone: &B,
    image: &RgbImage,
    prompt: &PromptSpec,
    seed: u64,
) -> Result<LatentPair<B::Latent>> {
    let total = backbone.config().total_steps;
    let mut traj = ddim_invert(backbone, image, prompt, 2, seed)?;
    Ok(LatentPair {
        penultimate: traj.inputs.remove(&(total - 1)).unwrap(),
        last: traj.inputs.remove(&total).unwrap(),
        provenance: Provenance::Inverted,
    })
}
