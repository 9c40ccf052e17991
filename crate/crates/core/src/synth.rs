//! Synthetic cross-view pairs.
//!
//! Each scene holds one target and a few distractors, each in its own
//! palette colour and a random shape. The query view draws them at base size
//! with no rotation and clicks a pixel of the target. The reference view
//! draws the same objects under one scene-wide scale and quarter-turn
//! rotation at fresh positions, and adds coloured strips along the border
//! as clutter. The ground-truth box is the exact pixel extent of the
//! rendered target.
//!
//! Everything is a function of `(spec, index)`, so any sample can be
//! regenerated alone.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Sample, Split};
use crate::detection::BBox;
use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Rect,
    Disc,
    Cross,
}

pub const SHAPES: [Shape; 3] = [Shape::Rect, Shape::Disc, Shape::Cross];

pub const PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.90],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    /// Square query image edge, pixels.
    pub query_size: usize,
    /// Square reference image edge, pixels.
    pub reference_size: usize,
    /// Object size range in the query view as a fraction of `query_size`.
    pub base_size: (f64, f64),
    /// Width/height ratio range of each object.
    pub aspect: (f64, f64),
    pub distractors: usize,
    /// Scene-wide reference scale range.
    pub scale: (f64, f64),
    /// Allow quarter-turn rotations of the reference view.
    pub rotate: bool,
    /// Number of clutter strips along the reference border.
    pub clutter: usize,
    /// Depth of the border band as a fraction of `reference_size`.
    /// Objects stay outside it; clutter stays inside it.
    pub border_band: f64,
    /// Amplitude of uniform background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 320,
            query_size: 64,
            reference_size: 128,
            base_size: (0.18, 0.28),
            aspect: (0.7, 1.4),
            distractors: 2,
            scale: (0.5, 2.0),
            rotate: true,
            clutter: 4,
            border_band: 1.0 / 16.0,
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1 && r.1.is_finite();
        if self.query_size < 8 || self.reference_size < 8 {
            return Err(Error::Config("synthetic images must be at least 8×8".into()));
        }
        if !range_ok(self.base_size) || self.base_size.1 > 0.5 {
            return Err(Error::Config(alloc::format!(
                "base size {:?} must lie in (0, 0.5]",
                self.base_size
            )));
        }
        if !range_ok(self.aspect) || !range_ok(self.scale) {
            return Err(Error::Config(
                "aspect and scale ranges must be positive and ordered".into(),
            ));
        }
        if !(0.0..0.25).contains(&self.border_band) || !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(
                "border band must be in [0, 0.25) and noise in [0, 0.5]".into(),
            ));
        }
        if self.distractors + 1 > PALETTE.len() {
            return Err(Error::Config("more objects than palette colours".into()));
        }
        let stretch = math::sqrt(self.aspect.1.max(1.0 / self.aspect.0));
        let biggest = self.base_size.1 * self.query_size as f64 * stretch;
        if biggest + 2.0 > self.query_size as f64 {
            return Err(Error::Config(
                "largest query object does not fit the query image".into(),
            ));
        }
        let room = self.reference_size as f64 * (1.0 - 2.0 * self.border_band);
        if biggest * self.scale.1 + 2.0 > room {
            return Err(Error::Config(
                "largest reference object does not fit inside the border band".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: Shape,
    colour: usize,
    /// Query-view size in pixels.
    w: f64,
    h: f64,
}

/// A rendered scene plus the target's reference-view pixel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub sample: Sample,
    /// Row-major `H_r×W_r`.
    pub target_mask: Vec<bool>,
}

fn covers(shape: Shape, dx: f64, dy: f64, w: f64, h: f64) -> bool {
    let (hw, hh) = (w / 2.0, h / 2.0);
    match shape {
        Shape::Rect => dx.abs() <= hw && dy.abs() <= hh,
        Shape::Disc => (dx / hw) * (dx / hw) + (dy / hh) * (dy / hh) <= 1.0,
        Shape::Cross => {
            let (tw, th) = (0.35 * hw, 0.35 * hh);
            (dx.abs() <= hw && dy.abs() <= th) || (dy.abs() <= hh && dx.abs() <= tw)
        }
    }
}

struct Canvas {
    size: usize,
    rgb: Vec<f64>,
}

impl Canvas {
    fn new(size: usize, rng: &mut ChaCha8Rng, noise: f64) -> Self {
        let base: f64 = rng.gen_range(0.30..0.50);
        let tint: [f64; 3] = core::array::from_fn(|_| rng.gen_range(-0.04..0.04));
        let plane = size * size;
        let mut rgb = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                let n = if noise > 0.0 {
                    rng.gen_range(-noise..=noise)
                } else {
                    0.0
                };
                rgb[c * plane + p] = base + tint[c] + n;
            }
        }
        Self { size, rgb }
    }

    /// Paints pixels whose centres fall inside the shape; returns them.
    fn draw(&mut self, shape: Shape, colour: [f64; 3], cx: f64, cy: f64, w: f64, h: f64) -> Vec<usize> {
        let plane = self.size * self.size;
        let x0 = math::floor(cx - w / 2.0).max(0.0) as usize;
        let y0 = math::floor(cy - h / 2.0).max(0.0) as usize;
        let x1 = (math::floor(cx + w / 2.0) as usize + 1).min(self.size);
        let y1 = (math::floor(cy + h / 2.0) as usize + 1).min(self.size);
        let mut painted = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if covers(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, w, h) {
                    let p = y * self.size + x;
                    for (c, v) in colour.iter().enumerate() {
                        self.rgb[c * plane + p] = *v;
                    }
                    painted.push(p);
                }
            }
        }
        painted
    }

    /// 8-bit quantized image so that PNG storage is lossless.
    fn finish(self) -> Tensor {
        let data = self
            .rgb
            .into_iter()
            .map(|v| math::round(v.clamp(0.0, 1.0) * 255.0) / 255.0)
            .collect();
        Tensor::new(&[3, self.size, self.size], data).expect("canvas is 3×S×S")
    }
}

/// Non-overlapping centres for boxes of the given sizes inside
/// `[lo, hi]²`, or `None` after too many rejections.
fn place(rng: &mut ChaCha8Rng, sizes: &[(f64, f64)], lo: f64, hi: f64) -> Option<Vec<(f64, f64)>> {
    const GAP: f64 = 2.0;
    let mut out: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(sizes.len());
    for &(w, h) in sizes {
        let (xmin, xmax) = (lo + w / 2.0, hi - w / 2.0);
        let (ymin, ymax) = (lo + h / 2.0, hi - h / 2.0);
        if xmin > xmax || ymin > ymax {
            return None;
        }
        let mut placed = false;
        for _ in 0..200 {
            let cx = rng.gen_range(xmin..=xmax);
            let cy = rng.gen_range(ymin..=ymax);
            let clear = out.iter().all(|&(ox, oy, ow, oh)| {
                (cx - ox).abs() >= (w + ow) / 2.0 + GAP || (cy - oy).abs() >= (h + oh) / 2.0 + GAP
            });
            if clear {
                out.push((cx, cy, w, h));
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(out.into_iter().map(|(x, y, _, _)| (x, y)).collect())
}

fn pick_objects(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, count: usize) -> Vec<Object> {
    let mut colours: Vec<usize> = (0..PALETTE.len()).collect();
    let q = spec.query_size as f64;
    (0..count)
        .map(|_| {
            let c = colours.swap_remove(rng.gen_range(0..colours.len()));
            let s = rng.gen_range(0..SHAPES.len());
            let size = q * rng.gen_range(spec.base_size.0..=spec.base_size.1);
            let a = math::sqrt(rng.gen_range(spec.aspect.0..=spec.aspect.1));
            Object {
                shape: SHAPES[s],
                colour: c,
                w: (size * a).max(2.0),
                h: (size / a).max(2.0),
            }
        })
        .collect()
}

fn extent(mask: &[usize], size: usize) -> Result<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &p in mask {
        let (x, y) = (p % size, p / size);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    if mask.is_empty() {
        return Err(Error::Contract("target rendered no pixels".into()));
    }
    BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

fn draw_clutter(canvas: &mut Canvas, rng: &mut ChaCha8Rng, spec: &SyntheticSpec) {
    let s = canvas.size as f64;
    let band = (s * spec.border_band).max(1.0);
    for _ in 0..spec.clutter {
        let colour = PALETTE[rng.gen_range(0..PALETTE.len())];
        let len = rng.gen_range(0.1 * s..=0.35 * s);
        let thick = rng.gen_range(1.0..=band);
        let along = rng.gen_range(len / 2.0..=s - len / 2.0);
        let across = rng.gen_range(thick / 2.0..=band - thick / 2.0 + f64::EPSILON);
        let (cx, cy, w, h) = match rng.gen_range(0..4) {
            0 => (along, across, len, thick),
            1 => (along, s - across, len, thick),
            2 => (across, along, thick, len),
            _ => (s - across, along, thick, len),
        };
        canvas.draw(Shape::Rect, colour, cx, cy, w, h);
    }
}

/// Renders sample `index` of `spec`.
pub fn render_scene(spec: &SyntheticSpec, index: u64, split: Split) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let mut count = spec.distractors + 1;
    loop {
        let objects = pick_objects(&mut rng, spec, count);

        let q = spec.query_size as f64;
        let q_sizes: Vec<(f64, f64)> = objects.iter().map(|o| (o.w, o.h)).collect();
        let scale = rng.gen_range(spec.scale.0..=spec.scale.1);
        let quarter = if spec.rotate { rng.gen_range(0..4) } else { 0 };
        let r_sizes: Vec<(f64, f64)> = q_sizes
            .iter()
            .map(|&(w, h)| {
                if quarter % 2 == 1 {
                    (h * scale, w * scale)
                } else {
                    (w * scale, h * scale)
                }
            })
            .collect();
        let r = spec.reference_size as f64;
        let band = math::floor(r * spec.border_band);
        let q_at = place(&mut rng, &q_sizes, 0.0, q);
        let r_at = place(&mut rng, &r_sizes, band, r - band);
        let (Some(q_at), Some(r_at)) = (q_at, r_at) else {
            // Crowded scene: retry the same draw with one fewer distractor.
            count = (count - 1).max(1);
            continue;
        };

        let mut query = Canvas::new(spec.query_size, &mut rng, spec.noise);
        let mut target_q = Vec::new();
        for (i, (o, &(cx, cy))) in objects.iter().zip(&q_at).enumerate() {
            let painted = query.draw(o.shape, PALETTE[o.colour], cx, cy, o.w, o.h);
            if i == 0 {
                target_q = painted;
            }
        }
        let mut reference = Canvas::new(spec.reference_size, &mut rng, spec.noise);
        draw_clutter(&mut reference, &mut rng, spec);
        let mut target_r = Vec::new();
        for (i, ((o, &(w, h)), &(cx, cy))) in objects.iter().zip(&r_sizes).zip(&r_at).enumerate() {
            let painted = reference.draw(o.shape, PALETTE[o.colour], cx, cy, w, h);
            if i == 0 {
                target_r = painted;
            }
        }
        if target_q.is_empty() || target_r.is_empty() {
            return Err(Error::Contract(alloc::format!(
                "sample {index}: target rendered no pixels"
            )));
        }
        let click_p = target_q[rng.gen_range(0..target_q.len())];
        let click = ((click_p % spec.query_size) as f64, (click_p / spec.query_size) as f64);
        let gt = extent(&target_r, spec.reference_size)?;
        let mut target_mask = vec![false; spec.reference_size * spec.reference_size];
        for p in target_r {
            target_mask[p] = true;
        }
        let sample = Sample {
            id: sample_id(index),
            query: query.finish(),
            click,
            reference: reference.finish(),
            gt,
            split,
        };
        sample.validate()?;
        return Ok(Scene { sample, target_mask });
    }
}

pub fn sample_id(index: u64) -> String {
    alloc::format!("syn{index:06}")
}

pub fn render_sample(spec: &SyntheticSpec, index: u64, split: Split) -> Result<Sample> {
    Ok(render_scene(spec, index, split)?.sample)
}

/// Samples `start .. start + spec.n_samples`, all tagged `split`.
pub fn generate(spec: &SyntheticSpec, start: u64, split: Split) -> Result<Vec<Sample>> {
    (start..start + spec.n_samples as u64)
        .map(|i| render_sample(spec, i, split))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_gives_empty_dataset() {
        let spec = SyntheticSpec {
            n_samples: 0,
            ..Default::default()
        };
        assert!(generate(&spec, 0, Split::Train).unwrap().is_empty());
    }

    #[test]
    fn same_index_same_pixels() {
        let spec = SyntheticSpec::default();
        let a = render_sample(&spec, 17, Split::Test).unwrap();
        let b = render_sample(&spec, 17, Split::Test).unwrap();
        assert_eq!(a, b);
        let c = render_sample(&spec, 18, Split::Test).unwrap();
        assert_ne!(a.reference, c.reference);
    }

    #[test]
    fn click_is_on_target_colour() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..Default::default()
        };
        for i in 0..10 {
            let s = render_sample(&spec, i, Split::Train).unwrap();
            let (x, y) = (s.click.0 as usize, s.click.1 as usize);
            let px: [f64; 3] = core::array::from_fn(|c| s.query.at(&[c, y, x]));
            let q = |v: f64| math::round(v * 255.0) / 255.0;
            assert!(
                PALETTE.iter().any(|p| p.iter().zip(&px).all(|(a, b)| q(*a) == *b)),
                "{px:?}"
            );
        }
    }

    #[test]
    fn pixels_are_8bit() {
        let s = render_sample(&SyntheticSpec::default(), 3, Split::Train).unwrap();
        assert!(s
            .reference
            .data()
            .iter()
            .all(|v| (v * 255.0 - math::round(v * 255.0)).abs() < 1e-9));
    }

    #[test]
    fn oversized_objects_are_a_config_error() {
        let spec = SyntheticSpec {
            scale: (1.0, 8.0),
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }
}
