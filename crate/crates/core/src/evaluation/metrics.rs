//! Embedding-similarity metrics and yes/no rates.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::embed::{cosine_f64, ImageEmbedder, TextEmbedder};
use super::lvlm::{lvlm_protocol, Outcome, Question, VisionChat};
use crate::error::{Error, Result};

/// Mean and population standard deviation of per-item scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanScore {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    /// Items dropped because scoring them failed.
    pub skipped: usize,
}

impl MeanScore {
    /// Sums in sorted order so the result does not depend on input order.
    pub fn from_values(values: &[f64], skipped: usize) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
        dev.sort_by(f64::total_cmp);
        let std = (dev.iter().sum::<f64>() / n).sqrt();
        Some(Self {
            mean,
            std,
            count: v.len(),
            skipped,
        })
    }

    /// Aggregates per-item results, skipping and counting failures.
    pub fn collect(items: impl IntoIterator<Item = Result<f64>>) -> Result<Self> {
        let mut values = Vec::new();
        let mut skipped = 0;
        for item in items {
            match item {
                Ok(v) => values.push(v),
                Err(e) => {
                    log::debug!("skipping item: {e}");
                    skipped += 1;
                }
            }
        }
        Self::from_values(&values, skipped)
            .ok_or_else(|| Error::Evaluation(format!("no item could be scored ({skipped} failed)")))
    }
}

fn image_text_scores(
    images: &[RgbImage],
    text: &str,
    image_embedder: &dyn ImageEmbedder,
    text_embedder: &dyn TextEmbedder,
) -> Result<MeanScore> {
    let t = text_embedder.embed_text(text)?;
    MeanScore::collect(
        images
            .iter()
            .map(|img| cosine_f64(&image_embedder.embed_image(img)?, &t)),
    )
}

/// Mean similarity between target images and the reference-subject text.
/// Lower means less leakage.
pub fn cl_metric(
    images: &[RgbImage],
    s_ref: &str,
    image_embedder: &dyn ImageEmbedder,
    text_embedder: &dyn TextEmbedder,
) -> Result<MeanScore> {
    image_text_scores(images, s_ref, image_embedder, text_embedder)
}

/// Mean similarity between target images and their own subject text.
pub fn text_alignment(
    images: &[RgbImage],
    s_tgt: &str,
    image_embedder: &dyn ImageEmbedder,
    text_embedder: &dyn TextEmbedder,
) -> Result<MeanScore> {
    image_text_scores(images, s_tgt, image_embedder, text_embedder)
}

/// Mean image-image similarity between each target and the reference.
pub fn set_consistency(
    images: &[RgbImage],
    reference: &RgbImage,
    image_embedder: &dyn ImageEmbedder,
) -> Result<MeanScore> {
    let r = image_embedder.embed_image(reference)?;
    MeanScore::collect(
        images
            .iter()
            .map(|img| cosine_f64(&image_embedder.embed_image(img)?, &r)),
    )
}

/// Success rate over determinate outcomes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub successes: usize,
    pub failures: usize,
    pub indeterminate: usize,
    /// `None` when every outcome was indeterminate.
    pub rate: Option<f64>,
}

impl RateSummary {
    pub fn from_outcomes(outcomes: impl IntoIterator<Item = Outcome>) -> Self {
        let mut s = Self::default();
        for o in outcomes {
            match o {
                Outcome::Success => s.successes += 1,
                Outcome::Failure => s.failures += 1,
                Outcome::Indeterminate => s.indeterminate += 1,
            }
        }
        let determinate = s.successes + s.failures;
        s.rate = (determinate > 0).then(|| s.successes as f64 / determinate as f64);
        s
    }
}

pub fn lvlm_rate(
    images: &[RgbImage],
    s_ref: &str,
    s_tgt: &str,
    q: Question,
    client: &dyn VisionChat,
    retries: usize,
) -> RateSummary {
    RateSummary::from_outcomes(
        images
            .iter()
            .map(|img| lvlm_protocol(img, s_ref, s_tgt, q, client, retries)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::embed::MeanColorEmbedder;
    use image::Rgb;

    #[test]
    fn hand_computed_cl() {
        let red = RgbImage::from_pixel(2, 2, Rgb([255, 0, 0]));
        let green = RgbImage::from_pixel(2, 2, Rgb([0, 255, 0]));
        let e = MeanColorEmbedder::default().with_text("A dog", vec![1.0, 1.0, 0.0]);
        let s = cl_metric(&[red, green], "A dog", &e, &e).unwrap();
        let expected = 1.0 / 2f64.sqrt();
        assert!((s.mean - expected).abs() < 1e-12);
        assert!(s.std.abs() < 1e-12);
        assert_eq!(s.count, 2);
    }

    #[test]
    fn failures_are_skipped_and_counted() {
        let s = MeanScore::collect(vec![Ok(1.0), Err(Error::Embedder("x".into())), Ok(0.0)]).unwrap();
        assert_eq!((s.count, s.skipped), (2, 1));
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.std, 0.5);
    }

    #[test]
    fn rates_exclude_indeterminate() {
        let r = RateSummary::from_outcomes([
            Outcome::Success,
            Outcome::Failure,
            Outcome::Success,
            Outcome::Indeterminate,
        ]);
        assert_eq!(r.rate, Some(2.0 / 3.0));
        assert_eq!(RateSummary::from_outcomes([Outcome::Indeterminate]).rate, None);
    }
}
