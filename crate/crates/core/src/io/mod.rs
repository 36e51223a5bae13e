//! On-disk artifacts: numeric array containers and images.

pub mod arrays;
pub mod images;

pub use arrays::{decode_arrays, encode_arrays, read_arrays, write_arrays, ArrayData, NamedArray, MAGIC};
pub use images::{grayscale_image, leak_overlay, load_rgb, save_grayscale_png, save_rgb};
pub use image::RgbImage;
