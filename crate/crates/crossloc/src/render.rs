//! Visual output for inference: the predicted box over the reference
//! image, and the confidence grid as a colour heatmap.

use crossloc_core::detection::BBox;
use crossloc_core::Tensor;
use image::{Rgb, RgbImage};

/// Bilinear resize of an `H×W` grid to `out_h×out_w`, sampling at pixel
/// centres mapped onto cell centres.
pub fn upsample_bilinear(grid: &Tensor, out_h: usize, out_w: usize) -> Vec<f64> {
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    let d = grid.data();
    let coord = |i: usize, n_out: usize, n_in: usize| {
        let c = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), c - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, out_w, w);
            let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
            let bot = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Black → red → yellow → white for `t ∈ [0, 1]`.
pub fn ramp(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    let ch = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(t), ch(t - 1.0), ch(t - 2.0)]
}

/// `heat` holds values in `[0, 1]`.
pub fn heatmap_image(heat: &Tensor, out_h: usize, out_w: usize) -> RgbImage {
    let up = upsample_bilinear(heat, out_h, out_w);
    RgbImage::from_fn(out_w as u32, out_h as u32, |x, y| {
        Rgb(ramp(up[y as usize * out_w + x as usize]))
    })
}

/// One-pixel outline of `b`, clipped to the image.
pub fn draw_box(img: &mut RgbImage, b: &BBox, colour: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if w == 0 || h == 0 {
        return;
    }
    let (x0, y0, x1, y1) = b.corners();
    let clip = |v: f64, hi: i64| (v.round() as i64).clamp(0, hi - 1);
    let (x0, x1) = (clip(x0, w), clip(x1 - 1.0, w));
    let (y0, y1) = (clip(y0, h), clip(y1 - 1.0, h));
    let mut put = |x: i64, y: i64| img.put_pixel(x as u32, y as u32, Rgb(colour));
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}
