//! Image and text embedders used by the metrics.

use std::collections::BTreeMap;

use image::RgbImage;

use crate::backbone::MockSpec;
use crate::error::{Error, Result};
use crate::prompt::{subject_word, words};

pub trait ImageEmbedder: Sync {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

pub trait TextEmbedder: Sync {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn cosine_f64(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Embedder(format!(
            "embedding widths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(crate::scalar::cosine(a, b))
}

/// Embeds mock-backbone images as a concept histogram and subject texts as
/// one-hot concept vectors. Index 0 is background.
#[derive(Clone, Debug)]
pub struct ConceptEmbedder {
    vocabulary: Vec<String>,
    patch_pixels: u32,
}

impl ConceptEmbedder {
    pub fn new(spec: &MockSpec) -> Self {
        Self {
            vocabulary: spec.concepts.iter().map(|c| c.word.clone()).collect(),
            patch_pixels: spec.patch_pixels,
        }
    }

    fn dims(&self) -> usize {
        self.vocabulary.len() + 1
    }

    /// Concept ids present in an image with their weights.
    pub fn histogram(&self, image: &RgbImage) -> Vec<f64> {
        let pp = self.patch_pixels.max(1);
        let mut h = vec![0.0; self.dims()];
        let known = self.vocabulary.len() as u8;
        for y in (0..image.height()).step_by(pp as usize) {
            for x in (0..image.width()).step_by(pp as usize) {
                let cx = (x + pp / 2).min(image.width() - 1);
                let cy = (y + pp / 2).min(image.height() - 1);
                let px = image.get_pixel(cx, cy).0;
                let content = px[0] & 0x0F;
                let leak = px[0] >> 4;
                let w = px[1] as f64 / 255.0;
                let c = if content <= known { content } else { 0 } as usize;
                if leak != 0 && leak <= known && w > 0.0 {
                    h[c] += 1.0 - w;
                    h[leak as usize] += w;
                } else {
                    h[c] += 1.0;
                }
            }
        }
        h
    }
}

impl ImageEmbedder for ConceptEmbedder {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        Ok(self.histogram(image))
    }
}

impl TextEmbedder for ConceptEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dims()];
        let ws = match subject_word(text) {
            Ok(w) => vec![w],
            Err(_) => words(text),
        };
        for w in ws {
            if let Some(i) = self.vocabulary.iter().position(|c| *c == w) {
                v[i + 1] = 1.0;
            }
        }
        Ok(v)
    }
}

/// Mean RGB of an image, and a fixed lookup table for texts. Handy for
/// hand-computable fixtures.
#[derive(Clone, Debug, Default)]
pub struct MeanColorEmbedder {
    pub texts: BTreeMap<String, Vec<f64>>,
}

impl MeanColorEmbedder {
    pub fn with_text(mut self, text: &str, v: Vec<f64>) -> Self {
        self.texts.insert(text.to_string(), v);
        self
    }
}

impl ImageEmbedder for MeanColorEmbedder {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let n = (image.width() as f64) * (image.height() as f64);
        if n == 0.0 {
            return Err(Error::Embedder("empty image".into()));
        }
        let mut acc = [0.0f64; 3];
        for p in image.pixels() {
            for (a, &c) in acc.iter_mut().zip(&p.0) {
                *a += c as f64;
            }
        }
        Ok(acc.iter().map(|a| a / n).collect())
    }
}

impl TextEmbedder for MeanColorEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.texts
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Embedder(format!("no embedding for text `{text}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn mean_color_self_similarity() {
        let img = RgbImage::from_pixel(2, 2, Rgb([10, 20, 30]));
        let e = MeanColorEmbedder::default().with_text("x", vec![10.0, 20.0, 30.0]);
        let a = e.embed_image(&img).unwrap();
        let b = e.embed_text("x").unwrap();
        assert!((cosine_f64(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concept_text_one_hot() {
        let spec = MockSpec::demo();
        let e = ConceptEmbedder::new(&spec);
        let v = e.embed_text("A cat").unwrap();
        assert_eq!(v.iter().sum::<f64>(), 1.0);
        assert_eq!(v[2], 1.0);
    }
}
