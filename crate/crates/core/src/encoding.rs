//! Fixed 2-D sinusoidal position tables and the query click channel.

use alloc::collections::btree_map::{BTreeMap, Entry};

use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Sinusoidal table of shape `d_model×H×W`.
///
/// For `j in 0..d_model/4`, with `f_j = 10000^(2j/d_model)`, column `x`
/// and row `y`:
///
/// | channel | value        |
/// |---------|--------------|
/// | `4j`    | `sin(x/f_j)` |
/// | `4j+1`  | `cos(x/f_j)` |
/// | `4j+2`  | `sin(y/f_j)` |
/// | `4j+3`  | `cos(y/f_j)` |
#[derive(Clone, Debug, PartialEq)]
pub struct PosEnc2D {
    pub d_model: usize,
    pub height: usize,
    pub width: usize,
    pub table: Tensor,
}

impl PosEnc2D {
    /// The table flattened to `d_model × (H·W)`, the layout attention uses.
    pub fn flat(&self) -> Tensor {
        self.table
            .reshape(&[self.d_model, self.height * self.width])
            .expect("table size is d_model·H·W")
    }
}

pub fn build_posenc(d_model: usize, height: usize, width: usize) -> Result<PosEnc2D> {
    if d_model == 0 || !d_model.is_multiple_of(4) {
        return Err(Error::Config(alloc::format!(
            "positional encoding width {d_model} must be a positive multiple of 4"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::Config("positional encoding grid must be non-empty".into()));
    }
    let plane = height * width;
    let mut table = Tensor::zeros(&[d_model, height, width]);
    let data = table.data_mut();
    for j in 0..d_model / 4 {
        let freq = math::pow(10000.0, 2.0 * j as f64 / d_model as f64);
        for y in 0..height {
            for x in 0..width {
                let p = y * width + x;
                let (xs, ys) = (x as f64 / freq, y as f64 / freq);
                data[(4 * j) * plane + p] = math::sin(xs);
                data[(4 * j + 1) * plane + p] = math::cos(xs);
                data[(4 * j + 2) * plane + p] = math::sin(ys);
                data[(4 * j + 3) * plane + p] = math::cos(ys);
            }
        }
    }
    Ok(PosEnc2D {
        d_model,
        height,
        width,
        table,
    })
}

/// Elementwise `features + pe.table`.
pub fn add_posenc(features: &Tensor, pe: &PosEnc2D) -> Result<Tensor> {
    if features.shape() != pe.table.shape() {
        return Err(Error::mismatch("add_posenc", features.shape(), pe.table.shape()));
    }
    crate::ops::add(features, &pe.table)
}

/// Tables keyed by `(d_model, H, W)`, built on first use.
#[derive(Clone, Debug, Default)]
pub struct PosEncCache {
    tables: BTreeMap<(usize, usize, usize), PosEnc2D>,
}

impl PosEncCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(&mut self, d_model: usize, height: usize, width: usize) -> Result<&PosEnc2D> {
        let key = (d_model, height, width);
        Ok(match self.tables.entry(key) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(build_posenc(d_model, height, width)?),
        })
    }

    pub fn get(&self, d_model: usize, height: usize, width: usize) -> Option<&PosEnc2D> {
        self.tables.get(&(d_model, height, width))
    }
}

/// Gaussian bump marking the clicked pixel of the query image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClickEncoding {
    pub sigma: f64,
    /// `1×H×W`
    pub channel: Tensor,
}

/// Default spread of the click bump, in pixels.
pub const CLICK_SIGMA: f64 = 3.0;

/// `exp(−((x−x_q)² + (y−y_q)²) / 2σ²)` sampled at integer pixel
/// coordinates `(x, y)` = (column, row).
pub fn encode_click(click: (f64, f64), height: usize, width: usize, sigma: f64) -> Result<ClickEncoding> {
    let (xq, yq) = click;
    if !(sigma > 0.0) {
        return Err(Error::Input(alloc::format!(
            "click sigma must be positive, got {sigma}"
        )));
    }
    if !(0.0..width as f64).contains(&xq) || !(0.0..height as f64).contains(&yq) {
        return Err(Error::Input(alloc::format!(
            "click ({xq}, {yq}) outside {width}×{height} image"
        )));
    }
    let denom = 2.0 * sigma * sigma;
    let channel = Tensor::from_fn(&[1, height, width], |i| {
        let (y, x) = ((i / width) as f64, (i % width) as f64);
        math::exp(-((x - xq) * (x - xq) + (y - yq) * (y - yq)) / denom)
    });
    Ok(ClickEncoding { sigma, channel })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_pattern_is_exact() {
        let pe = build_posenc(16, 3, 5).unwrap();
        for j in 0..4 {
            assert_eq!(pe.table.at(&[4 * j, 0, 0]), 0.0);
            assert_eq!(pe.table.at(&[4 * j + 1, 0, 0]), 1.0);
            assert_eq!(pe.table.at(&[4 * j + 2, 0, 0]), 0.0);
            assert_eq!(pe.table.at(&[4 * j + 3, 0, 0]), 1.0);
        }
    }

    #[test]
    fn d4_at_x1_is_sin1() {
        let pe = build_posenc(4, 1, 2).unwrap();
        assert!((pe.table.at(&[0, 0, 1]) - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!((pe.table.at(&[1, 0, 1]) - math::cos(1.0)).abs() < 1e-15);
        assert_eq!(pe.table.at(&[2, 0, 1]), 0.0);
    }

    #[test]
    fn rejects_width_not_multiple_of_4() {
        assert!(matches!(build_posenc(6, 2, 2), Err(Error::Config(_))));
    }

    #[test]
    fn values_bounded_and_build_is_pure() {
        let a = build_posenc(32, 7, 9).unwrap();
        assert!(a.table.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let b = build_posenc(32, 7, 9).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<alloc::vec::Vec<_>>();
        assert_eq!(bits(&a.table), bits(&b.table));
    }

    #[test]
    fn add_posenc_identities() {
        let pe = build_posenc(8, 2, 3).unwrap();
        let zero = Tensor::zeros(&[8, 2, 3]);
        assert_eq!(add_posenc(&zero, &pe).unwrap(), pe.table);
        let f = Tensor::from_fn(&[8, 2, 3], |i| i as f64 * 0.1);
        let twice = add_posenc(&add_posenc(&f, &pe).unwrap(), &pe).unwrap();
        let direct = crate::ops::add(&f, &crate::ops::scale(&pe.table, 2.0)).unwrap();
        assert!(twice.max_abs_diff(&direct) < 1e-15);
        let probe = add_posenc(&f, &pe).unwrap();
        assert_eq!(probe.at(&[5, 1, 2]), f.at(&[5, 1, 2]) + pe.table.at(&[5, 1, 2]));
        assert!(add_posenc(&Tensor::zeros(&[4, 2, 3]), &pe).is_err());
    }

    #[test]
    fn cache_builds_once() {
        let mut cache = PosEncCache::new();
        assert!(cache.get(8, 2, 2).is_none());
        let t = cache.get_or_build(8, 2, 2).unwrap().table.clone();
        assert_eq!(cache.get(8, 2, 2).unwrap().table, t);
    }

    #[test]
    fn click_bump_values() {
        let c = encode_click((10.0, 7.0), 16, 20, 3.0).unwrap();
        assert_eq!(c.channel.shape(), &[1, 16, 20]);
        assert_eq!(c.channel.at(&[0, 7, 10]), 1.0);
        assert!((c.channel.at(&[0, 7, 13]) - math::exp(-0.5)).abs() < 1e-15);
        assert!((c.channel.at(&[0, 4, 10]) - 0.606_530_659_712_633_4).abs() < 1e-12);
    }

    #[test]
    fn click_sum_shrinks_with_sigma() {
        let sums: alloc::vec::Vec<f64> = [4.0, 2.0, 1.0, 0.5, 0.1]
            .iter()
            .map(|&s| encode_click((5.0, 5.0), 11, 11, s).unwrap().channel.sum())
            .collect();
        assert!(sums.windows(2).all(|w| w[1] < w[0]), "{sums:?}");
        assert!((sums[4] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn click_outside_is_rejected() {
        assert!(matches!(encode_click((20.0, 1.0), 16, 20, 3.0), Err(Error::Input(_))));
        assert!(matches!(encode_click((-0.5, 1.0), 16, 20, 3.0), Err(Error::Input(_))));
        assert!(matches!(encode_click((1.0, 1.0), 16, 20, 0.0), Err(Error::Input(_))));
    }
}
