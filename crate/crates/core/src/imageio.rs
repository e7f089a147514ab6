//! PNG input/output and range conversions.
//!
//! Images are stored on disk as 8-bit RGB PNG. In memory they are `[3,h,w]`
//! tensors, either in storage range [0,1] (dataset, metrics) or in model
//! range [−1,1] (network inputs and latents). Quantization is the usual
//! 8-bit mapping: encode `round(clamp(x,0,1)·255)`, decode `v/255`, so a
//! decode→encode round trip is exact on 8-bit data.

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a PNG (or any format the backend recognizes) into a `[3,h,w]`
/// tensor in [0,1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    rgb8_to_tensor(&img)
}

/// Like `load_image`, but bicubically resized to `size`×`size` when the
/// file's resolution differs.
pub fn load_image_resized(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    if img.width() as usize == size && img.height() as usize == size {
        return rgb8_to_tensor(&img);
    }
    let resized = image::imageops::resize(&img, size as u32, size as u32, FilterType::CatmullRom);
    rgb8_to_tensor(&resized)
}

/// Encodes a `[3,h,w]` tensor in [0,1] as 8-bit RGB PNG.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let rgb = tensor_to_rgb8(image)?;
    rgb.save(path).map_err(|e| Error::Image(e))?;
    Ok(())
}

pub fn rgb8_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn tensor_to_rgb8(image: &Tensor) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("expected a [3,h,w] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut out: RgbImage = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let i = y as usize * w + x as usize;
        let mut rgb = [0u8; 3];
        for c in 0..3 {
            let v = d[c * h * w + i].clamp(0.0, 1.0);
            rgb[c] = (v * 255.0).round() as u8;
        }
        *px = Rgb(rgb);
    }
    Ok(out)
}

/// [0,1] storage range → [−1,1] model range.
pub fn to_model_range(image: &Tensor) -> Result<Tensor> {
    image
        .scale(2.0)?
        .add_scaled(&Tensor::full(image.shape(), 1.0), -1.0)
}

/// [−1,1] model range → [0,1] storage range, clamped (sampled latents can
/// overshoot slightly).
pub fn to_storage_range(image: &Tensor) -> Result<Tensor> {
    let data: Vec<f32> = image
        .data()
        .iter()
        .map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}
