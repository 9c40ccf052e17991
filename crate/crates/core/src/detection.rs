//! Anchor-based localization head: prior boxes, target assignment, losses,
//! decoding and the single-box inference rule.
//!
//! The raw grid has `A·5` channels. Channel `a·5 + j` holds field `j` of
//! anchor `a`, with fields `(x̂, ŷ, ŵ, ĥ, ĉ)`. Boxes are numbered
//! `(gy·W_g + gx)·A + a`; every argmax over boxes breaks ties towards the
//! lowest number.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::tensor::Tensor;
use crate::tol::BCE_EPS;
use crate::{Error, GradTape, Result, Var};

pub const NUM_ANCHORS: usize = 9;
pub const FIELDS: usize = 5;
pub const CONF: usize = 4;

/// Axis-aligned box, center format, reference-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || !(self.w > 0.0) || !(self.h > 0.0) {
            return Err(Error::Input(alloc::format!(
                "invalid box {self:?}: need finite values and w, h > 0"
            )));
        }
        Ok(())
    }

    /// `(x0, y0, x1, y1)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        (self.x - hw, self.y - hh, self.x + hw, self.y + hh)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// IoU of two `(w, h)` shapes placed at a common center.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

/// Prior box sizes in pixels, sorted by area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    anchors: Vec<(f64, f64)>,
}

impl AnchorSet {
    /// Exactly [`NUM_ANCHORS`] positive sizes.
    pub fn new(anchors: Vec<(f64, f64)>) -> Result<Self> {
        if anchors.len() != NUM_ANCHORS {
            return Err(Error::Input(alloc::format!(
                "expected {NUM_ANCHORS} anchors, got {}",
                anchors.len()
            )));
        }
        Self::with_count(anchors)
    }

    /// Any non-empty set; used by reduced configurations.
    pub fn with_count(mut anchors: Vec<(f64, f64)>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::Input("anchor set is empty".into()));
        }
        if let Some(bad) = anchors
            .iter()
            .find(|(w, h)| !(w.is_finite() && h.is_finite() && *w > 0.0 && *h > 0.0))
        {
            return Err(Error::Input(alloc::format!("anchor {bad:?} must be positive")));
        }
        sort_by_area(&mut anchors);
        Ok(Self { anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn get(&self, a: usize) -> (f64, f64) {
        self.anchors[a]
    }

    pub fn as_slice(&self) -> &[(f64, f64)] {
        &self.anchors
    }
}

fn sort_by_area(v: &mut [(f64, f64)]) {
    v.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
}

fn nearest(b: (f64, f64), centroids: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &c) in centroids.iter().enumerate() {
        let d = 1.0 - shape_iou(b, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means over `(w, h)` with distance `1 − shape_iou`. Seeding is
/// k-means++ style from `seed`; centroids are per-cluster means and an
/// emptied cluster keeps its previous centroid.
pub fn cluster_anchors(boxes: &[(f64, f64)], n: usize, iters: usize, seed: u64) -> Result<AnchorSet> {
    if n == 0 || boxes.len() < n {
        return Err(Error::Input(alloc::format!(
            "need at least {n} boxes to cluster {n} anchors, got {}",
            boxes.len()
        )));
    }
    if let Some(bad) = boxes.iter().find(|(w, h)| !(*w > 0.0 && *h > 0.0)) {
        return Err(Error::Input(alloc::format!("box size {bad:?} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![boxes[rng.gen_range(0..boxes.len())]];
    while centroids.len() < n {
        let d: Vec<f64> = boxes.iter().map(|&b| nearest(b, &centroids).1).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            d.iter()
                .position(|&v| {
                    r -= v;
                    r < 0.0
                })
                .unwrap_or(boxes.len() - 1)
        } else {
            rng.gen_range(0..boxes.len())
        };
        centroids.push(boxes[pick]);
    }

    let mut assign = vec![usize::MAX; boxes.len()];
    for _ in 0..iters.max(1) {
        let mut changed = false;
        for (slot, &b) in assign.iter_mut().zip(boxes) {
            let c = nearest(b, &centroids).0;
            changed |= *slot != c;
            *slot = c;
        }
        let mut sums = vec![(0.0, 0.0, 0usize); n];
        for (&c, &(w, h)) in assign.iter().zip(boxes) {
            sums[c].0 += w;
            sums[c].1 += h;
            sums[c].2 += 1;
        }
        for (c, &(sw, sh, cnt)) in centroids.iter_mut().zip(&sums) {
            if cnt > 0 {
                *c = (sw / cnt as f64, sh / cnt as f64);
            }
        }
        if !changed {
            break;
        }
    }
    AnchorSet::with_count(centroids)
}

/// Spatial layout of the prediction grid over the reference image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Pixels per cell edge.
    pub cell_size: f64,
}

impl GridSpec {
    pub fn image_size(&self) -> (f64, f64) {
        (self.width as f64 * self.cell_size, self.height as f64 * self.cell_size)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Raw head output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionGrid {
    pub raw: Tensor,
    pub grid: GridSpec,
    pub num_anchors: usize,
}

impl PredictionGrid {
    pub fn new(raw: Tensor, num_anchors: usize, cell_size: f64) -> Result<Self> {
        match *raw.shape() {
            [c, h, w] if c == num_anchors * FIELDS && num_anchors > 0 => Ok(Self {
                raw,
                grid: GridSpec {
                    height: h,
                    width: w,
                    cell_size,
                },
                num_anchors,
            }),
            _ => Err(Error::shape(
                "prediction_grid",
                raw.shape(),
                alloc::format!("expected {}×H×W", num_anchors * FIELDS),
            )),
        }
    }

    /// Total predicted boxes `M`.
    pub fn num_boxes(&self) -> usize {
        self.num_anchors * self.grid.cells()
    }

    /// `(gx, gy, a)` of a flat box number.
    pub fn unflatten(&self, k: usize) -> (usize, usize, usize) {
        let (cell, a) = (k / self.num_anchors, k % self.num_anchors);
        (cell % self.grid.width, cell / self.grid.width, a)
    }

    pub fn flat_index(&self, gx: usize, gy: usize, a: usize) -> usize {
        (gy * self.grid.width + gx) * self.num_anchors + a
    }

    /// Offset into `raw.data()` of field `j` of box `k`.
    pub fn offset(&self, k: usize, j: usize) -> usize {
        let (gx, gy, a) = self.unflatten(k);
        ((a * FIELDS + j) * self.grid.height + gy) * self.grid.width + gx
    }

    pub fn fields(&self, k: usize) -> [f64; FIELDS] {
        core::array::from_fn(|j| self.raw.data()[self.offset(k, j)])
    }

    pub fn conf_logit(&self, k: usize) -> f64 {
        self.raw.data()[self.offset(k, CONF)]
    }
}

/// One positive box and its regression targets. All other boxes carry
/// confidence label 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetAssignment {
    pub cell: (usize, usize),
    pub anchor: usize,
    /// Box number of the positive.
    pub index: usize,
    /// `(x − ⌊x⌋, y − ⌊y⌋, ln(w/w_a), ln(h/h_a))`, `x, y` in cell units.
    pub offsets: [f64; 4],
}

impl TargetAssignment {
    pub fn label(&self, k: usize) -> f64 {
        if k == self.index {
            1.0
        } else {
            0.0
        }
    }
}

pub fn assign_target(gt: &BBox, anchors: &AnchorSet, grid: &GridSpec) -> Result<TargetAssignment> {
    gt.validate()?;
    let (iw, ih) = grid.image_size();
    if !(0.0..iw).contains(&gt.x) || !(0.0..ih).contains(&gt.y) {
        return Err(Error::Input(alloc::format!(
            "box center ({}, {}) outside {iw}×{ih} reference image",
            gt.x,
            gt.y
        )));
    }
    let (cx, cy) = (gt.x / grid.cell_size, gt.y / grid.cell_size);
    let (fx, fy) = (math::floor(cx), math::floor(cy));
    let (gx, gy) = ((fx as usize).min(grid.width - 1), (fy as usize).min(grid.height - 1));
    let mut best = (0, f64::NEG_INFINITY);
    for (a, &shape) in anchors.as_slice().iter().enumerate() {
        let v = shape_iou((gt.w, gt.h), shape);
        if v > best.1 {
            best = (a, v);
        }
    }
    let anchor = best.0;
    let (wa, ha) = anchors.get(anchor);
    Ok(TargetAssignment {
        cell: (gx, gy),
        anchor,
        index: (gy * grid.width + gx) * anchors.len() + anchor,
        offsets: [cx - fx, cy - fy, math::ln(gt.w / wa), math::ln(gt.h / ha)],
    })
}

/// Clamped confidence `clamp(σ(z), ε, 1−ε)`.
pub fn confidence(logit: f64) -> f64 {
    math::sigmoid(logit).clamp(BCE_EPS, 1.0 - BCE_EPS)
}

fn bce(c: f64, p: f64) -> f64 {
    -(c * math::ln(p) + (1.0 - c) * math::ln(1.0 - p))
}

/// BCE summed over every box of one sample.
pub fn confidence_loss(pred: &PredictionGrid, tgt: &TargetAssignment) -> f64 {
    (0..pred.num_boxes())
        .map(|k| bce(tgt.label(k), confidence(pred.conf_logit(k))))
        .sum()
}

/// Squared offset errors at the positive box of one sample.
pub fn localization_loss(pred: &PredictionGrid, tgt: &TargetAssignment) -> f64 {
    predicted_offsets(pred, tgt.index)
        .iter()
        .zip(&tgt.offsets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

fn predicted_offsets(pred: &PredictionGrid, k: usize) -> [f64; 4] {
    let f = pred.fields(k);
    [math::sigmoid(f[0]), math::sigmoid(f[1]), f[2], f[3]]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub conf: f64,
    pub loc: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.conf + self.loc
    }
}

pub fn total_loss(pred: &PredictionGrid, tgt: &TargetAssignment) -> LossParts {
    LossParts {
        conf: confidence_loss(pred, tgt),
        loc: localization_loss(pred, tgt),
    }
}

/// Gradient of [`total_loss`] with respect to `pred.raw`.
///
/// The confidence term passes `σ(ĉ) − c` straight through the clamp, so a
/// saturated wrong prediction still receives a gradient. Inside
/// `[ε, 1−ε]` this is the exact derivative.
pub fn total_loss_grad(pred: &PredictionGrid, tgt: &TargetAssignment) -> Tensor {
    let mut g = Tensor::zeros(pred.raw.shape());
    for k in 0..pred.num_boxes() {
        let s = math::sigmoid(pred.conf_logit(k));
        g.data_mut()[pred.offset(k, CONF)] = s - tgt.label(k);
    }
    let f = pred.fields(tgt.index);
    let p = predicted_offsets(pred, tgt.index);
    for j in 0..4 {
        let mut d = 2.0 * (p[j] - tgt.offsets[j]);
        if j < 2 {
            let s = math::sigmoid(f[j]);
            d *= s * (1.0 - s);
        }
        g.data_mut()[pred.offset(tgt.index, j)] += d;
    }
    g
}

/// Records the per-sample loss on `tape` as a function of the raw grid
/// variable. The caller scales by the batch size.
pub fn loss_on_tape(
    tape: &mut GradTape<'_>,
    raw: Var,
    num_anchors: usize,
    cell_size: f64,
    tgt: &TargetAssignment,
) -> Result<(Var, LossParts)> {
    let pred = PredictionGrid::new(tape.value(raw).clone(), num_anchors, cell_size)?;
    if tgt.index >= pred.num_boxes() {
        return Err(Error::Contract(alloc::format!(
            "positive box {} outside a grid of {} boxes",
            tgt.index,
            pred.num_boxes()
        )));
    }
    let parts = total_loss(&pred, tgt);
    let grad = total_loss_grad(&pred, tgt);
    Ok((tape.scalar_fn(raw, parts.total(), grad)?, parts))
}

/// Box for raw fields at `cell = (gx, gy)` with prior `anchor = (w_a, h_a)`.
pub fn decode_box(raw: &[f64], cell: (usize, usize), anchor: (f64, f64), cell_size: f64) -> BBox {
    BBox {
        x: (cell.0 as f64 + math::sigmoid(raw[0])) * cell_size,
        y: (cell.1 as f64 + math::sigmoid(raw[1])) * cell_size,
        w: anchor.0 * math::exp(raw[2]),
        h: anchor.1 * math::exp(raw[3]),
    }
}

/// Inverse of [`decode_box`]: raw `(x̂, ŷ, ŵ, ĥ)` that decode to `b` from
/// the given cell. The center must lie strictly inside that cell.
pub fn encode_box(b: &BBox, cell: (usize, usize), anchor: (f64, f64), cell_size: f64) -> Result<[f64; 4]> {
    let fx = b.x / cell_size - cell.0 as f64;
    let fy = b.y / cell_size - cell.1 as f64;
    if !(fx > 0.0 && fx < 1.0 && fy > 0.0 && fy < 1.0) {
        return Err(Error::Input(alloc::format!(
            "box center not strictly inside cell {cell:?}"
        )));
    }
    let logit = |p: f64| math::ln(p / (1.0 - p));
    Ok([logit(fx), logit(fy), math::ln(b.w / anchor.0), math::ln(b.h / anchor.1)])
}

/// Index of the largest value, lowest index on ties.
pub fn argmax_first(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub cell: (usize, usize),
    pub anchor: usize,
    /// Unclamped `σ(ĉ)`.
    pub confidence: f64,
    pub bbox: BBox,
}

/// The single most confident box.
pub fn select_prediction(pred: &PredictionGrid, anchors: &AnchorSet) -> Result<Selection> {
    if anchors.len() != pred.num_anchors {
        return Err(Error::Contract(alloc::format!(
            "grid has {} anchors per cell but the set has {}",
            pred.num_anchors,
            anchors.len()
        )));
    }
    // Comparing logits is the same as comparing σ(logit) but never saturates.
    let index = argmax_first((0..pred.num_boxes()).map(|k| pred.conf_logit(k))).expect("grid is non-empty");
    let (gx, gy, a) = pred.unflatten(index);
    let f = pred.fields(index);
    Ok(Selection {
        index,
        cell: (gx, gy),
        anchor: a,
        confidence: math::sigmoid(f[CONF]),
        bbox: decode_box(&f, (gx, gy), anchors.get(a), pred.grid.cell_size),
    })
}
