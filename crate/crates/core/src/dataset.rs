//! In-memory samples and dataset splitting.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::BBox;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One query/reference pair. Images are `3×H×W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub query: Tensor,
    /// `(x, y)` pixel coordinates in the query image.
    pub click: (f64, f64),
    pub reference: Tensor,
    pub gt: BBox,
    pub split: Split,
}

fn rgb_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [3, h, w] => Ok((h, w)),
        _ => Err(Error::Input(alloc::format!(
            "{what} must be 3×H×W, got {:?}",
            t.shape()
        ))),
    }
}

impl Sample {
    /// Click inside the query image, box inside the reference image.
    pub fn validate(&self) -> Result<()> {
        let (qh, qw) = rgb_dims(&self.query, "query image")?;
        let (rh, rw) = rgb_dims(&self.reference, "reference image")?;
        let (cx, cy) = self.click;
        if !(0.0..qw as f64).contains(&cx) || !(0.0..qh as f64).contains(&cy) {
            return Err(Error::Input(alloc::format!(
                "click ({cx}, {cy}) outside {qw}×{qh} query image"
            )));
        }
        self.gt.validate()?;
        let (x0, y0, x1, y1) = self.gt.corners();
        if x0 < 0.0 || y0 < 0.0 || x1 > rw as f64 || y1 > rh as f64 {
            return Err(Error::Input(alloc::format!(
                "box {:?} extends outside {rw}×{rh} reference image",
                self.gt
            )));
        }
        Ok(())
    }

    pub fn query_size(&self) -> (usize, usize) {
        (self.query.shape()[1], self.query.shape()[2])
    }

    pub fn reference_size(&self) -> (usize, usize) {
        (self.reference.shape()[1], self.reference.shape()[2])
    }
}

/// Train/val/test ratios of a 1951/432/370 split.
pub const G2D_RATIOS: [f64; 3] = [1951.0 / 2753.0, 432.0 / 2753.0, 370.0 / 2753.0];

/// Seeded shuffle, then cut into `round(n·r_train)`, `round(n·r_val)` and
/// the remainder. Elements keep their identity; no field is rewritten.
pub fn split_dataset<T>(mut items: Vec<T>, ratios: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(alloc::format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let n = items.len();
    let count = |r: f64| crate::math::round(n as f64 * r) as usize;
    let n_train = count(ratios[0]).min(n);
    let n_val = count(ratios[1]).min(n - n_train);
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = items.split_off(n_train + n_val);
    let val = items.split_off(n_train);
    Ok((items, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g2d_counts() {
        let (a, b, c) = split_dataset((0..2753).collect::<Vec<u32>>(), G2D_RATIOS, 5).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (1951, 432, 370));
    }

    #[test]
    fn all_train_and_partition() {
        let (a, b, c) = split_dataset((0..10).collect::<Vec<u32>>(), [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (10, 0, 0));
        let (a, b, c) = split_dataset((0..97).collect::<Vec<u32>>(), [0.5, 0.3, 0.2], 9).unwrap();
        let mut all: Vec<u32> = a.into_iter().chain(b).chain(c).collect();
        all.sort();
        assert_eq!(all, (0..97).collect::<Vec<u32>>());
    }

    #[test]
    fn bad_ratios() {
        assert!(matches!(
            split_dataset(Vec::<u8>::new(), [0.5, 0.2, 0.2], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_names_round_trip() {
        for s in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(Split::parse(s.as_str()), Some(s));
        }
    }
}
