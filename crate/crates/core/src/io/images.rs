//! 8-bit RGB and grayscale image helpers.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Grid;

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let decode = |message: String| Error::ImageDecode {
        path: path.to_path_buf(),
        message,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| decode(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| decode(e.to_string()))?;
    Ok(reader.decode().map_err(|e| decode(e.to_string()))?.to_rgb8())
}

pub fn save_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    image
        .save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Patch-grid values in `[lo, hi]` mapped to gray levels, each patch drawn
/// as a `cell`-pixel square.
pub fn grayscale_image(grid: Grid, values: &[f64], lo: f64, hi: f64, cell: u32) -> Result<GrayImage> {
    if values.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} values for a {}x{} grid",
            values.len(),
            grid.height,
            grid.width
        )));
    }
    let cell = cell.max(1);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(GrayImage::from_fn(
        grid.width as u32 * cell,
        grid.height as u32 * cell,
        |x, y| {
            let v = values[grid.index((y / cell) as usize, (x / cell) as usize)];
            let t = ((v - lo) / span).clamp(0.0, 1.0);
            Luma([(t * 255.0).round() as u8])
        },
    ))
}

pub fn save_grayscale_png(path: &Path, grid: Grid, values: &[f64], lo: f64, hi: f64, cell: u32) -> Result<()> {
    grayscale_image(grid, values, lo, hi, cell)?
        .save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Blends red over the image pixels covered by flagged patches.
pub fn leak_overlay(image: &RgbImage, grid: Grid, leak: &[bool]) -> Result<RgbImage> {
    if leak.len() != grid.len() {
        return Err(Error::Shape(format!("{} flags for a {}-patch grid", leak.len(), grid.len())));
    }
    let (w, h) = image.dimensions();
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let r = (y as usize * grid.height / h.max(1) as usize).min(grid.height - 1);
        let c = (x as usize * grid.width / w.max(1) as usize).min(grid.width - 1);
        let p = image.get_pixel(x, y).0;
        if leak[grid.index(r, c)] {
            Rgb([
                ((p[0] as u16 + 255) / 2) as u8,
                (p[1] / 2),
                (p[2] / 2),
            ])
        } else {
            Rgb(p)
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_levels() {
        let img = grayscale_image(Grid::new(1, 2), &[0.0, 1.0], 0.0, 1.0, 2).unwrap();
        assert_eq!(img.dimensions(), (4, 2));
        assert_eq!(img.get_pixel(0, 0).0, [0]);
        assert_eq!(img.get_pixel(3, 1).0, [255]);
    }

    #[test]
    fn overlay_marks_only_flagged_patches() {
        let img = RgbImage::from_pixel(4, 4, Rgb([0, 100, 100]));
        let out = leak_overlay(&img, Grid::new(2, 2), &[true, false, false, false]).unwrap();
        assert_eq!(out.get_pixel(0, 0).0, [127, 50, 50]);
        assert_eq!(out.get_pixel(3, 3).0, [0, 100, 100]);
    }

    #[test]
    fn missing_file_is_decode_error() {
        let err = load_rgb(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, Error::ImageDecode { .. }));
    }
}
