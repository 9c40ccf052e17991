//! IoU, thresholded accuracy and evaluation reports.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detection::BBox;
use crate::math;
use crate::{Error, Result};

pub const THRESHOLDS: [f64; 2] = [0.25, 0.5];

/// Area IoU in continuous pixel coordinates.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // Areas from the same corners as the overlap, so iou(a, a) is exactly 1.
    let area_a = (ax1 - ax0) * (ay1 - ay0);
    let area_b = (bx1 - bx0) * (by1 - by0);
    Ok(inter / (area_a + area_b - inter))
}

/// Fraction of IoUs with `iou ≥ t`.
pub fn accu_at(ious: &[f64], t: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Input("accuracy of an empty record set".into()));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Input(alloc::format!("threshold {t} outside (0, 1)")));
    }
    let hits = ious.iter().filter(|&&v| v >= t).count();
    Ok(hits as f64 / ious.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub iou: f64,
    pub hit_025: bool,
    pub hit_05: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accu_025: f64,
    pub accu_05: f64,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn from_ious(records: Vec<(String, f64)>) -> Result<Self> {
        let ious: Vec<f64> = records.iter().map(|(_, v)| *v).collect();
        let accu_025 = accu_at(&ious, THRESHOLDS[0])?;
        let accu_05 = accu_at(&ious, THRESHOLDS[1])?;
        let records = records
            .into_iter()
            .map(|(id, iou)| EvalRecord {
                id,
                iou,
                hit_025: iou >= THRESHOLDS[0],
                hit_05: iou >= THRESHOLDS[1],
            })
            .collect();
        Ok(Self {
            n: ious.len(),
            accu_025,
            accu_05,
            records,
        })
    }
}

/// Fraction as a percentage with two decimals, rounded half-up.
/// `0.4615` renders as `"46.15"`.
pub fn format_percent(v: f64) -> String {
    // The small bias absorbs representation error such as 0.4615 being
    // stored as 0.46149999….
    let hundredths = math::floor(v * 10_000.0 + 0.5 + 1e-9) as i64;
    let sign = if hundredths < 0 { "-" } else { "" };
    let h = hundredths.unsigned_abs();
    alloc::format!("{sign}{}.{:02}", h / 100, h % 100)
}
