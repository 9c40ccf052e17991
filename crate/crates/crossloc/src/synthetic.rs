//! Synthetic datasets on disk.

use std::path::{Path, PathBuf};

use crossloc_core::dataset::Split;
use crossloc_core::synth::{render_sample, SyntheticSpec};

use crate::annotations::save_dataset;
use crate::error::Result;

/// Split sizes for [`generate_synthetic`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 256 train and 64 test pairs.
    pub const BENCHMARK: SplitSizes = SplitSizes {
        train: 256,
        val: 0,
        test: 64,
    };

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Renders sample indices `0..total` in train, val, test order and writes
/// them under `dir`. `spec.n_samples` is ignored in favour of `sizes`.
pub fn generate_synthetic(dir: &Path, spec: &SyntheticSpec, sizes: SplitSizes) -> Result<PathBuf> {
    spec.validate()?;
    let bounds = [
        (Split::Train, 0, sizes.train),
        (Split::Val, sizes.train, sizes.train + sizes.val),
        (Split::Test, sizes.train + sizes.val, sizes.total()),
    ];
    let mut samples = Vec::with_capacity(sizes.total());
    for (split, lo, hi) in bounds {
        for i in lo..hi {
            samples.push(render_sample(spec, i as u64, split)?);
        }
    }
    save_dataset(dir, &samples)
}
