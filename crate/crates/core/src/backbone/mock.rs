//! Deterministic stand-in backbone with planted subject regions and leaks.
//!
//! Every concept owns a region of the latent grid and an orthonormal
//! prototype feature vector per layer. At step 1 the latent is "formed":
//! each patch gets a content id from the prompt's subjects. When the run
//! shares attention with a reference, each planted leak blends the source
//! concept's prototype into the target with strength `g(α_eff)`, where
//! `α_eff` is the mean key scale over the reference patches showing the
//! source concept. Features and cross-attention at every later step are
//! computed from the formed latent, so a decoded image carries everything
//! needed to re-simulate the final steps after inversion.

use std::sync::Mutex;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneConfig, LayerId, LayerInfo, StepHooks};
use crate::error::{Error, Result};
use crate::prompt::{subject_word, words, PromptSpec};
use crate::scalar::{softmax_in_place, Scalar};
use crate::shared_attention::AttentionTensors;
use crate::tensor::{resample_nearest, Grid, Matrix};

const MAX_CONCEPTS: usize = 15;
const START_TOKEN: &str = "<start>";
const QK_OFFSET: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockLayerSpec {
    pub id: LayerId,
    /// Grid multiplier relative to the latent grid.
    #[serde(default = "one")]
    pub upsample: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub bottleneck: bool,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockConcept {
    pub word: String,
    /// Planted region as row-major patch indices of the latent grid.
    pub region: Vec<usize>,
    /// Optional explicit prototype per layer; generated otherwise.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prototypes: Vec<(LayerId, Vec<f64>)>,
}

/// Leak strength `g(α)`, non-decreasing in α.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LeakCurve {
    /// No leak for `α ≤ threshold`; `onset` just above it rising to `full`
    /// at `α = 1`.
    Threshold {
        threshold: f64,
        #[serde(default = "default_onset")]
        onset: f64,
        #[serde(default = "default_full")]
        full: f64,
    },
    /// Piecewise linear through `(α, g)` knots sorted by α.
    Knots { points: Vec<(f64, f64)> },
    None,
}

fn default_onset() -> f64 {
    0.6
}

fn default_full() -> f64 {
    1.0
}

impl LeakCurve {
    pub fn threshold(threshold: f64) -> Self {
        Self::Threshold {
            threshold,
            onset: default_onset(),
            full: default_full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        match self {
            Self::Threshold {
                threshold,
                onset,
                full,
            } => {
                if !unit(*threshold) || !unit(*onset) || !unit(*full) || onset > full {
                    return Err(Error::MockSpec(format!(
                        "threshold curve needs values in [0,1] and onset <= full, got ({threshold}, {onset}, {full})"
                    )));
                }
            }
            Self::Knots { points } => {
                if points.is_empty() {
                    return Err(Error::MockSpec("knot curve without points".into()));
                }
                if points.iter().any(|&(a, g)| !unit(a) || !unit(g)) {
                    return Err(Error::MockSpec("knots must lie in [0,1]²".into()));
                }
                for w in points.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return Err(Error::MockSpec("knot α values must increase".into()));
                    }
                    if w[1].1 < w[0].1 {
                        return Err(Error::MockSpec(format!(
                            "leak curve is not monotone: g({}) = {} > g({}) = {}",
                            w[0].0, w[0].1, w[1].0, w[1].1
                        )));
                    }
                }
            }
            Self::None => {}
        }
        Ok(())
    }

    pub fn strength(&self, alpha: f64) -> f64 {
        match self {
            Self::Threshold {
                threshold,
                onset,
                full,
            } => {
                if alpha <= *threshold {
                    0.0
                } else if *threshold >= 1.0 {
                    *full
                } else {
                    onset + (full - onset) * (alpha - threshold) / (1.0 - threshold)
                }
            }
            Self::Knots { points } => {
                let first = points[0];
                let last = points[points.len() - 1];
                if alpha <= first.0 {
                    return first.1;
                }
                if alpha >= last.0 {
                    return last.1;
                }
                let i = points.iter().position(|p| p.0 >= alpha).unwrap();
                let (a0, g0) = points[i - 1];
                let (a1, g1) = points[i];
                g0 + (g1 - g0) * (alpha - a0) / (a1 - a0)
            }
            Self::None => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedLeak {
    /// Concept word whose semantics leak out of the reference.
    pub source: String,
    /// Only leak into targets whose prompt contains this word.
    #[serde(default)]
    pub target: Option<String>,
    pub curve: LeakCurve,
    /// Target patches receiving the leak; defaults to where the source
    /// appears in the reference.
    #[serde(default)]
    pub patches: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSpec {
    pub grid: Grid,
    pub total_steps: usize,
    pub head_count: usize,
    pub seed: u64,
    pub patch_pixels: u32,
    pub layers: Vec<MockLayerSpec>,
    pub concepts: Vec<MockConcept>,
    pub leaks: Vec<PlantedLeak>,
    /// Std-dev of the Gaussian noise on cross-attention logits.
    pub attention_noise: f64,
    /// Std-dev of the per-channel feature noise.
    pub feature_noise: f64,
}

impl Default for MockSpec {
    fn default() -> Self {
        let layer = |id: &str, upsample, bottleneck| MockLayerSpec {
            id: id.into(),
            upsample,
            feature_dim: 32,
            bottleneck,
        };
        Self {
            grid: Grid::new(8, 8),
            total_steps: 10,
            head_count: 2,
            seed: 0,
            patch_pixels: 4,
            layers: vec![
                layer("down.0", 2, false),
                layer("mid.0", 1, true),
                layer("mid.1", 1, true),
                layer("up.0", 2, false),
            ],
            concepts: Vec::new(),
            leaks: Vec::new(),
            attention_noise: 0.3,
            feature_noise: 0.05,
        }
    }
}

/// Row-major indices of an axis-aligned block.
pub fn rect(grid: Grid, row: usize, col: usize, height: usize, width: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(height * width);
    for r in row..(row + height).min(grid.height) {
        for c in col..(col + width).min(grid.width) {
            out.push(grid.index(r, c));
        }
    }
    out
}

impl MockSpec {
    /// Small scene with a handful of concepts and a dog that leaks above
    /// α = 0.6.
    pub fn demo() -> Self {
        let mut spec = Self::default();
        let g = spec.grid;
        spec = spec
            .with_concept("dog", rect(g, 2, 1, 4, 3))
            .with_concept("cat", rect(g, 2, 4, 4, 3))
            .with_concept("tree", rect(g, 0, 5, 3, 3))
            .with_concept("house", rect(g, 4, 4, 3, 4))
            .with_concept("lion", rect(g, 1, 2, 4, 4))
            .with_concept("hippo", rect(g, 5, 0, 3, 4))
            .with_leak("dog", None, LeakCurve::threshold(0.6));
        spec
    }

    pub fn with_concept(mut self, word: &str, region: Vec<usize>) -> Self {
        self.concepts.push(MockConcept {
            word: word.to_string(),
            region,
            prototypes: Vec::new(),
        });
        self
    }

    pub fn with_leak(mut self, source: &str, target: Option<&str>, curve: LeakCurve) -> Self {
        self.leaks.push(PlantedLeak {
            source: source.to_string(),
            target: target.map(str::to_string),
            curve,
            patches: None,
        });
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn region_of(&self, word: &str) -> Option<&[usize]> {
        self.concepts
            .iter()
            .find(|c| c.word == word)
            .map(|c| c.region.as_slice())
    }
}

/// Per-patch latent state. Content id 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MockLatent {
    pub grid: Grid,
    pub content: Vec<u8>,
    pub leak: Vec<u8>,
    /// Leak strength quantized to 1/255.
    pub weight: Vec<u8>,
    pub tint: Vec<u8>,
    pub formed: bool,
}

/// One full generation as seen by the mock, for call accounting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunEvent {
    pub prompt: String,
    pub recording: bool,
    pub controlled: bool,
}

pub struct MockBackbone {
    spec: MockSpec,
    config: BackboneConfig,
    layers: Vec<LayerInfo>,
    /// `[layer][content id]`, id 0 is background.
    prototypes: Vec<Vec<Vec<f64>>>,
    log: Mutex<Vec<RunEvent>>,
    steps: Mutex<usize>,
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 folding
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn unit_random(rng: &mut ChaCha8Rng, dims: std::ops::Range<usize>, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for i in dims {
        v[i] = rng.sample(StandardNormal);
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

fn build_prototypes(spec: &MockSpec, layer_idx: usize, layer: &MockLayerSpec) -> Result<Vec<Vec<f64>>> {
    let d = layer.feature_dim;
    let half = d / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, layer_idx as u64, 0xC0]));
    let bg: Vec<f64> = unit_random(&mut rng, half..d, d)
        .into_iter()
        .map(|x| 0.5 * x)
        .collect();
    let mut protos = vec![bg];
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for concept in &spec.concepts {
        if let Some((_, v)) = concept.prototypes.iter().find(|(id, _)| *id == layer.id) {
            if v.len() != d || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::MockSpec(format!(
                    "prototype for `{}` on layer {} must have {d} finite entries",
                    concept.word, layer.id
                )));
            }
            protos.push(v.clone());
            continue;
        }
        let mut v = unit_random(&mut rng, 0..half.max(1), d);
        if basis.len() < half {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v.clone());
        }
        protos.push(v);
    }
    Ok(protos)
}

impl MockBackbone {
    pub fn new(spec: MockSpec) -> Result<Self> {
        let n = spec.grid.len();
        if n == 0 {
            return Err(Error::MockSpec("empty latent grid".into()));
        }
        if spec.patch_pixels == 0 {
            return Err(Error::MockSpec("patch_pixels must be positive".into()));
        }
        if spec.layers.is_empty() {
            return Err(Error::MockSpec("no layers".into()));
        }
        for (i, l) in spec.layers.iter().enumerate() {
            if spec.layers[..i].iter().any(|o| o.id == l.id) {
                return Err(Error::MockSpec(format!("duplicate layer id {}", l.id)));
            }
            if l.upsample == 0 || l.feature_dim < 2 {
                return Err(Error::MockSpec(format!("layer {} has a degenerate shape", l.id)));
            }
            if l.bottleneck && l.upsample != 1 {
                return Err(Error::MockSpec(format!(
                    "bottleneck layer {} must sit on the latent grid",
                    l.id
                )));
            }
        }
        if spec.concepts.len() > MAX_CONCEPTS {
            return Err(Error::MockSpec(format!(
                "at most {MAX_CONCEPTS} concepts are supported"
            )));
        }
        for (i, c) in spec.concepts.iter().enumerate() {
            let w = subject_word(&c.word).map_err(|e| Error::MockSpec(e.to_string()))?;
            if w != c.word {
                return Err(Error::MockSpec(format!(
                    "concept word `{}` must be a single lowercase token",
                    c.word
                )));
            }
            if spec.concepts[..i].iter().any(|o| o.word == c.word) {
                return Err(Error::MockSpec(format!("duplicate concept `{}`", c.word)));
            }
            if c.region.iter().any(|&p| p >= n) {
                return Err(Error::MockSpec(format!("region of `{}` exceeds the grid", c.word)));
            }
        }
        for leak in &spec.leaks {
            if !spec.concepts.iter().any(|c| c.word == leak.source) {
                return Err(Error::MockSpec(format!("leak source `{}` is not a concept", leak.source)));
            }
            leak.curve.validate()?;
            if let Some(p) = &leak.patches {
                if p.iter().any(|&i| i >= n) {
                    return Err(Error::MockSpec("leak patches exceed the grid".into()));
                }
            }
        }
        for x in [spec.attention_noise, spec.feature_noise] {
            if !x.is_finite() || x < 0.0 {
                return Err(Error::MockSpec("noise levels must be finite and non-negative".into()));
            }
        }

        let layers: Vec<LayerInfo> = spec
            .layers
            .iter()
            .map(|l| LayerInfo {
                id: l.id.clone(),
                grid: Grid::new(spec.grid.height * l.upsample, spec.grid.width * l.upsample),
                feature_dim: l.feature_dim,
                bottleneck: l.bottleneck,
                shared: true,
            })
            .collect();
        let config = BackboneConfig {
            total_steps: spec.total_steps,
            bottleneck_layer_ids: layers
                .iter()
                .filter(|l| l.bottleneck)
                .map(|l| l.id.clone())
                .collect(),
            latent_grid: spec.grid,
            head_count: spec.head_count,
            seed: spec.seed,
        };
        config
            .validate(&layers)
            .map_err(|e| Error::MockSpec(e.to_string()))?;
        let prototypes = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| build_prototypes(&spec, i, l))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            config,
            layers,
            prototypes,
            log: Mutex::new(Vec::new()),
            steps: Mutex::new(0),
        })
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    /// Generations started from step 1 since construction (or the last reset).
    pub fn generation_log(&self) -> Vec<RunEvent> {
        self.log.lock().unwrap().clone()
    }

    /// Total denoising steps executed.
    pub fn step_count(&self) -> usize {
        *self.steps.lock().unwrap()
    }

    pub fn reset_counters(&self) {
        self.log.lock().unwrap().clear();
        *self.steps.lock().unwrap() = 0;
    }

    /// Injected leak strength for a source concept at effective scale α.
    pub fn leak_strength(&self, source: &str, alpha: f64) -> f64 {
        self.spec
            .leaks
            .iter()
            .filter(|l| l.source == source)
            .map(|l| l.curve.strength(alpha))
            .fold(0.0, f64::max)
    }

    pub fn tokens(&self, text: &str) -> Vec<String> {
        let mut t = vec![START_TOKEN.to_string()];
        t.extend(words(text));
        t
    }

    fn concept_id(&self, word: &str) -> Option<u8> {
        self.spec
            .concepts
            .iter()
            .position(|c| c.word == word)
            .map(|i| (i + 1) as u8)
    }

    fn reference_content<T: Scalar>(&self, hooks: &StepHooks<'_, T, MockLatent>) -> Result<Vec<u8>> {
        (1..=self.config.total_steps)
            .filter_map(|s| hooks.reference_latent(s))
            .find(|l| l.formed)
            .map(|l| l.content.clone())
            .ok_or_else(|| Error::MissingCapture("formed reference latent".into()))
    }

    fn form<T: Scalar>(
        &self,
        z: &mut MockLatent,
        prompt: &PromptSpec,
        hooks: &StepHooks<'_, T, MockLatent>,
    ) -> Result<()> {
        let n = z.grid.len();
        z.content = vec![0; n];
        z.leak = vec![0; n];
        z.weight = vec![0; n];
        for s in &prompt.subjects {
            let word = subject_word(&s.text)?;
            if let Some(id) = self.concept_id(&word) {
                for &p in self.spec.region_of(&word).unwrap() {
                    z.content[p] = id;
                }
            }
        }
        if let Some((scales, grid)) = hooks.key_scales() {
            let reference = self.reference_content(hooks)?;
            let scales = resample_nearest(scales, grid, z.grid)?;
            let prompt_words = words(&prompt.full_prompt);
            for leak in &self.spec.leaks {
                if let Some(t) = &leak.target {
                    if !prompt_words.contains(t) {
                        continue;
                    }
                }
                let src = self.concept_id(&leak.source).unwrap();
                let src_patches: Vec<usize> = (0..n).filter(|&p| reference[p] == src).collect();
                if src_patches.is_empty() {
                    continue;
                }
                let alpha_eff = src_patches
                    .iter()
                    .map(|&p| scales[p].to_f64_lossy())
                    .sum::<f64>()
                    / src_patches.len() as f64;
                let g = leak.curve.strength(alpha_eff.clamp(0.0, 1.0));
                let q = (g * 255.0).round().clamp(0.0, 255.0) as u8;
                if q == 0 {
                    continue;
                }
                let targets = leak.patches.as_ref().unwrap_or(&src_patches);
                for &p in targets {
                    if z.content[p] != src && q > z.weight[p] {
                        z.leak[p] = src;
                        z.weight[p] = q;
                    }
                }
            }
        }
        z.formed = true;
        Ok(())
    }

    fn features<T: Scalar>(
        &self,
        li: usize,
        layer: &LayerInfo,
        z: &MockLatent,
        step: usize,
        seed: u64,
    ) -> Result<Matrix<T>> {
        let content = resample_nearest(&z.content, z.grid, layer.grid)?;
        let leak = resample_nearest(&z.leak, z.grid, layer.grid)?;
        let weight = resample_nearest(&z.weight, z.grid, layer.grid)?;
        let protos = &self.prototypes[li];
        let d = layer.feature_dim;
        let ramp = step as f64 / self.config.total_steps as f64;
        let sigma = self.spec.feature_noise;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, li as u64, step as u64, 0xFE]));
        let mut data = Vec::with_capacity(layer.grid.len() * d);
        for p in 0..layer.grid.len() {
            let base = &protos[content[p] as usize];
            let w = weight[p] as f64 / 255.0;
            let other = &protos[leak[p] as usize];
            for c in 0..d {
                let v = if w > 0.0 {
                    (1.0 - w) * base[c] + w * other[c]
                } else {
                    base[c]
                };
                let noise: f64 = rng.sample(StandardNormal);
                data.push(T::lit(ramp * v + (1.0 - ramp) * sigma * noise));
            }
        }
        Matrix::from_vec(layer.grid.len(), d, data)
    }

    fn cross_probs<T: Scalar>(
        &self,
        li: usize,
        z: &MockLatent,
        token_concepts: &[Option<u8>],
        step: usize,
        seed: u64,
    ) -> Matrix<T> {
        let n = z.grid.len();
        let m = token_concepts.len();
        let ramp = step as f64 / self.config.total_steps as f64;
        let heads = self.config.head_count;
        let mut acc = vec![0.0f64; n * m];
        let mut row = vec![0.0f64; m];
        for h in 0..heads {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(&[seed, li as u64, step as u64, 0xA0 + h as u64]));
            for p in 0..n {
                for (j, tc) in token_concepts.iter().enumerate() {
                    let base = match tc {
                        _ if j == 0 => 2.0,
                        Some(c) if z.content[p] == *c => 3.0 + 3.0 * ramp,
                        Some(_) => -4.0,
                        None => 0.0,
                    };
                    let noise: f64 = rng.sample(StandardNormal);
                    row[j] = base + self.spec.attention_noise * noise;
                }
                softmax_in_place(&mut row);
                for j in 0..m {
                    acc[p * m + j] += row[j];
                }
            }
        }
        let inv = 1.0 / heads as f64;
        Matrix::from_fn(n, m, |p, j| T::lit(acc[p * m + j] * inv))
    }
}

impl<T: Scalar> Backbone<T> for MockBackbone {
    type Latent = MockLatent;

    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        self.tokens(text)
    }

    fn image_size(&self) -> (u32, u32) {
        let pp = self.spec.patch_pixels;
        (self.spec.grid.width as u32 * pp, self.spec.grid.height as u32 * pp)
    }

    fn initial_latent(&self, seed: u64) -> MockLatent {
        let n = self.spec.grid.len();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x1A7]));
        MockLatent {
            grid: self.spec.grid,
            content: vec![0; n],
            leak: vec![0; n],
            weight: vec![0; n],
            tint: (0..n).map(|_| rng.random()).collect(),
            formed: false,
        }
    }

    fn denoise_step(
        &self,
        prompt: &PromptSpec,
        latent: &MockLatent,
        step: usize,
        seed: u64,
        hooks: &mut StepHooks<'_, T, MockLatent>,
    ) -> Result<MockLatent> {
        if latent.grid != self.spec.grid {
            return Err(Error::Shape("latent grid does not match the mock grid".into()));
        }
        *self.steps.lock().unwrap() += 1;
        if step == 1 {
            self.log.lock().unwrap().push(RunEvent {
                prompt: prompt.full_prompt.clone(),
                recording: hooks.is_recording(),
                controlled: hooks.has_control(),
            });
        }
        let mut next = latent.clone();
        if !next.formed {
            self.form(&mut next, prompt, hooks)?;
        }
        let token_concepts: Vec<Option<u8>> = self
            .tokens(&prompt.full_prompt)
            .iter()
            .map(|t| self.concept_id(t))
            .collect();

        let n = next.grid.len();
        let mut tint = vec![0.0f64; n];
        let mut tint_layers = 0usize;
        for (li, layer) in self.layers.iter().enumerate() {
            let feats: Matrix<T> = self.features(li, layer, &next, step, seed)?;
            <StepHooks<'_, T, MockLatent>>::features(hooks, layer, step, &feats);
            if layer.bottleneck {
                let probs = self.cross_probs::<T>(li, &next, &token_concepts, step, seed);
                hooks.cross_attention(layer, step, probs);
            }
            let q = Matrix::from_fn(feats.rows(), feats.cols(), |r, c| {
                feats.get(r, c) + T::lit(QK_OFFSET)
            });
            let out = hooks.self_attention(layer, step, AttentionTensors::new(q.clone(), q, feats)?)?;
            if layer.bottleneck {
                tint_layers += 1;
                for (p, t) in tint.iter_mut().enumerate() {
                    let row = out.row(p);
                    *t += row.iter().map(|x| x.to_f64_lossy()).sum::<f64>() / row.len() as f64;
                }
            }
        }
        let k = tint_layers.max(1) as f64;
        next.tint = tint
            .iter()
            .map(|t| (128.0 + 255.0 * t / k).round().clamp(0.0, 255.0) as u8)
            .collect();
        Ok(next)
    }

    fn decode(&self, latent: &MockLatent) -> RgbImage {
        let pp = self.spec.patch_pixels;
        let (w, h) = <Self as Backbone<T>>::image_size(self);
        RgbImage::from_fn(w, h, |x, y| {
            let p = latent
                .grid
                .index((y / pp) as usize, (x / pp) as usize);
            Rgb([
                latent.content[p] | (latent.leak[p] << 4),
                latent.weight[p],
                latent.tint[p],
            ])
        })
    }

    fn encode(&self, image: &RgbImage) -> Result<MockLatent> {
        let (w, h) = <Self as Backbone<T>>::image_size(self);
        if image.dimensions() != (w, h) {
            return Err(Error::ImageDimensions {
                expected_w: w,
                expected_h: h,
                got_w: image.width(),
                got_h: image.height(),
            });
        }
        let pp = self.spec.patch_pixels;
        let grid = self.spec.grid;
        let known = self.spec.concepts.len() as u8;
        let mut z = MockLatent {
            grid,
            content: vec![0; grid.len()],
            leak: vec![0; grid.len()],
            weight: vec![0; grid.len()],
            tint: vec![0; grid.len()],
            formed: true,
        };
        for p in 0..grid.len() {
            let (r, c) = grid.coords(p);
            let px = image.get_pixel(c as u32 * pp + pp / 2, r as u32 * pp + pp / 2).0;
            let content = px[0] & 0x0F;
            let leak = px[0] >> 4;
            z.content[p] = if content <= known { content } else { 0 };
            if leak != 0 && leak <= known && px[1] > 0 {
                z.leak[p] = leak;
                z.weight[p] = px[1];
            }
            z.tint[p] = px[2];
        }
        Ok(z)
    }

    fn invert_step(
        &self,
        _prompt: &PromptSpec,
        latent: &MockLatent,
        _step: usize,
        _seed: u64,
    ) -> Result<MockLatent> {
        if latent.grid != self.spec.grid {
            return Err(Error::Inversion("latent grid does not match the mock grid".into()));
        }
        let mut z = latent.clone();
        z.formed = true;
        Ok(z)
    }
}
