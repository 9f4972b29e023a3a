//! PNG round-tripping between 8-bit files and [0,1] float planes.

use std::path::Path;

use crate::error::{Error, Result};

/// Loads an RGB PNG as a 3 x H x W float image in [0, 1].
pub fn load_rgb(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let idx = y as usize * w + x as usize;
        out[idx] = px.0[0] as f64 / 255.0;
        out[h * w + idx] = px.0[1] as f64 / 255.0;
        out[2 * h * w + idx] = px.0[2] as f64 / 255.0;
    }
    Ok((out, h, w))
}

/// Loads a grayscale PNG as a 1 x H x W float mask in [0, 1].
pub fn load_gray(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; h * w];
    for (x, y, px) in img.enumerate_pixels() {
        out[y as usize * w + x as usize] = px.0[0] as f64 / 255.0;
    }
    Ok((out, h, w))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves a 3 x H x W float image as 8-bit RGB.
pub fn save_rgb(path: &Path, data: &[f64], height: usize, width: usize) -> Result<()> {
    if data.len() != 3 * height * width {
        return Err(Error::Dimension(format!(
            "rgb buffer {} vs 3x{}x{}",
            data.len(),
            height,
            width
        )));
    }
    let mut img = image::RgbImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let idx = y * width + x;
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    quantize(data[idx]),
                    quantize(data[height * width + idx]),
                    quantize(data[2 * height * width + idx]),
                ]),
            );
        }
    }
    img.save(path)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))
}

/// Saves a 1 x H x W float mask as 8-bit grayscale.
pub fn save_gray(path: &Path, data: &[f64], height: usize, width: usize) -> Result<()> {
    if data.len() != height * width {
        return Err(Error::Dimension(format!(
            "gray buffer {} vs {}x{}",
            data.len(),
            height,
            width
        )));
    }
    let mut img = image::GrayImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            img.put_pixel(x as u32, y as u32, image::Luma([quantize(data[y * width + x])]));
        }
    }
    img.save(path)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))
}
