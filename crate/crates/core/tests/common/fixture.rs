//! Eight solid-colour targets with hand-computable scores.

use std::path::Path;

use leakguard::evaluation::{ManifestEntry, MeanColorEmbedder, Metric};
use leakguard::io::{save_rgb, RgbImage};

pub const RED: [u8; 3] = [255, 0, 0];
pub const GREEN: [u8; 3] = [0, 255, 0];
/// Green for embedding purposes, but the canned chat hedges on it.
pub const HEDGE_GREEN: [u8; 3] = [0, 254, 0];
pub const MAGENTA: [u8; 3] = [255, 0, 255];

pub fn embedder() -> MeanColorEmbedder {
    MeanColorEmbedder::default()
        .with_text("A dog", vec![1.0, 0.0, 0.0])
        .with_text("A cat", vec![0.0, 1.0, 0.0])
}

pub fn is_red(img: &RgbImage) -> bool {
    img.get_pixel(0, 0).0 == RED
}

/// Answers from the pixel colour: red shows the dog, green shows the cat.
pub fn canned(img: &RgbImage, text: &str) -> leakguard::Result<String> {
    if img.get_pixel(0, 0).0 == HEDGE_GREEN && !text.contains("dog") {
        return Ok("Maybe.".into());
    }
    let present = if text.contains("dog") { is_red(img) } else { !is_red(img) };
    Ok(if present { "Yes." } else { "No." }.into())
}

/// Eight targets: three red (leaking), four green, one hedged green.
pub fn write_fixture(dir: &Path) -> Vec<ManifestEntry> {
    let solid = |c: [u8; 3]| RgbImage::from_pixel(4, 4, image_rgb(c));
    save_rgb(&dir.join("reference.png"), &solid(MAGENTA)).unwrap();
    let colours = [RED, RED, RED, GREEN, GREEN, GREEN, GREEN, HEDGE_GREEN];
    colours
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let p = dir.join(format!("target_{i}.png"));
            save_rgb(&p, &solid(c)).unwrap();
            ManifestEntry {
                entry_id: format!("e{i}"),
                reference_path: dir.join("reference.png"),
                target_path: p,
                ref_subject: "A dog".into(),
                tgt_subject: "A cat".into(),
            }
        })
        .collect()
}

pub fn image_rgb(c: [u8; 3]) -> image::Rgb<u8> {
    image::Rgb(c)
}

pub fn all_metrics() -> Vec<Metric> {
    vec![
        Metric::Cl,
        Metric::TextAlignment,
        Metric::SetConsistency,
        Metric::Q1,
        Metric::Q2,
        Metric::Q3,
    ]
}
