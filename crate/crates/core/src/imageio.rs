//! PNG decoding and encoding to `[1, 3, h, w]` tensors in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    Tensor::from_fn([1, 3, h as usize, w as usize], |[_, c, y, x]| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

/// Quantizes sample 0 of `t` by rounding to the nearest 8-bit level.
pub fn to_rgb8(t: &Tensor<f32>) -> RgbImage {
    let [_, _, h, w] = t.shape();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| quantize(t.at([0, c, y as usize, x as usize]));
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if t.channels() != 3 {
        return Err(Error::pre(format!(
            "{}: expected a 3-channel image, got {}",
            path.display(),
            t.channels()
        )));
    }
    to_rgb8(t)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
