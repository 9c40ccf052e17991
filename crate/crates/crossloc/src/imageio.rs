//! RGB images as `3×H×W` tensors in `[0, 1]`.

use std::path::Path;

use crossloc_core::Tensor;
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// Reads PNG or binary PPM (chosen by content, falling back to extension).
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)
        .map_err(Error::io(path))?
        .with_guessed_format()
        .map_err(Error::io(path))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + p] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("3×H×W buffer")
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `t` must be `3×H×W`.
pub fn to_rgb8(t: &Tensor) -> Result<RgbImage> {
    let [3, h, w] = *t.shape() else {
        return Err(Error::Config(format!("expected a 3×H×W image, got {:?}", t.shape())));
    };
    let plane = h * w;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([to_u8(d[p]), to_u8(d[plane + p]), to_u8(d[2 * plane + p])])
    }))
}

/// Format follows the extension: `.ppm` writes binary PPM, anything else PNG.
pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => image::ImageFormat::Pnm,
        _ => image::ImageFormat::Png,
    };
    img.save_with_format(path, format).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn write_rgb(path: &Path, t: &Tensor) -> Result<()> {
    write_image(path, &to_rgb8(t)?)
}
