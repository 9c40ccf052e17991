//! Multi-scale spatial gate over the fused feature map.
//!
//! Three heads with kernels 1, 3 and 5, each `deconv(relu(conv(F)))` at
//! stride 1 and no padding. The conv widens channels by `expansion` and
//! shrinks the map by `k−1`; the deconv restores both. Then
//! `A = sigmoid(H_1 + H_2 + H_3)` and the output is `A ⊙ F`.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::params::{Bound, ParamId, ParamStore};
use crate::{Error, GradTape, Result, Var};

pub const HEAD_KERNELS: [usize; 3] = [1, 3, 5];
pub const DEFAULT_EXPANSION: usize = 2;

/// Kernel size of head `i` (zero-based): `2i + 1`.
pub const fn head_kernel(i: usize) -> usize {
    2 * i + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhsamHead {
    pub kernel: usize,
    /// `E·C × C × k × k`
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    /// `E·C × C × k × k`, read as `C_in × C_out × k × k`.
    pub deconv_w: ParamId,
    pub deconv_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhsamParams {
    pub channels: usize,
    pub expansion: usize,
    pub heads: Vec<MhsamHead>,
}

impl MhsamParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        expansion: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if channels == 0 || expansion == 0 {
            return Err(Error::Config("gate channels and expansion must be positive".into()));
        }
        let wide = channels * expansion;
        let heads = (0..HEAD_KERNELS.len())
            .map(|i| {
                let k = head_kernel(i);
                let shape = [wide, channels, k, k];
                MhsamHead {
                    kernel: k,
                    conv_w: store.add_uniform(alloc::format!("{name}.h{i}.conv.w"), &shape, channels * k * k, rng),
                    conv_b: store.add_zeros(alloc::format!("{name}.h{i}.conv.b"), &[wide]),
                    deconv_w: store.add_uniform(alloc::format!("{name}.h{i}.deconv.w"), &shape, wide * k * k, rng),
                    deconv_b: store.add_zeros(alloc::format!("{name}.h{i}.deconv.b"), &[channels]),
                }
            })
            .collect();
        Ok(Self {
            channels,
            expansion,
            heads,
        })
    }
}

/// One head: `deconv(relu(conv(f)))`, shape preserving.
pub fn mhsam_head(tape: &mut GradTape<'_>, bound: &Bound, head: &MhsamHead, f: Var) -> Result<Var> {
    let shape = tape.shape(f);
    if shape.len() != 3 || shape[1] < head.kernel || shape[2] < head.kernel {
        return Err(Error::shape(
            "mhsam_head",
            shape,
            alloc::format!("needs C×H×W with H, W ≥ {}", head.kernel),
        ));
    }
    let mid = tape.conv2d(f, bound[head.conv_w], Some(bound[head.conv_b]), 1, 0)?;
    let mid = tape.relu(mid);
    tape.deconv2d(mid, bound[head.deconv_w], Some(bound[head.deconv_b]), 1, 0)
}

/// Gate weights `A = sigmoid(ΣH_i)`; heads are summed in kernel order.
pub fn mhsam_gate(tape: &mut GradTape<'_>, bound: &Bound, params: &MhsamParams, f: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for head in &params.heads {
        let h = mhsam_head(tape, bound, head, f)?;
        acc = Some(match acc {
            None => h,
            Some(a) => tape.add(a, h)?,
        });
    }
    let sum = acc.ok_or_else(|| Error::Config("gate has no heads".into()))?;
    Ok(tape.sigmoid(sum))
}

pub fn mhsam_forward(tape: &mut GradTape<'_>, bound: &Bound, params: &MhsamParams, f: Var) -> Result<Var> {
    let a = mhsam_gate(tape, bound, params, f)?;
    tape.mul(a, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn params(c: usize) -> (ParamStore, MhsamParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let p = MhsamParams::new(&mut store, "gate", c, DEFAULT_EXPANSION, &mut rng).unwrap();
        (store, p)
    }

    #[test]
    fn kernels_follow_odd_schedule() {
        let (_, p) = params(2);
        let ks: Vec<usize> = p.heads.iter().map(|h| h.kernel).collect();
        assert_eq!(ks, HEAD_KERNELS);
    }

    #[test]
    fn zero_input_gives_half_gate_and_zero_output() {
        let (store, p) = params(3);
        let zero = Tensor::zeros(&[3, 6, 6]);
        let mut tape = GradTape::new();
        let b = store.bind(&mut tape);
        let f = tape.constant(&zero);
        let a = mhsam_gate(&mut tape, &b, &p, f).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| v == 0.5));
        let o = mhsam_forward(&mut tape, &b, &p, f).unwrap();
        assert_eq!(tape.value(o), &zero);
    }

    #[test]
    fn k5_head_goes_through_4x4_on_8x8() {
        let (store, p) = params(2);
        let x = Tensor::from_fn(&[2, 8, 8], |i| (i as f64 * 0.37).sin());
        let mid = crate::ops::conv2d(&x, store.get(p.heads[2].conv_w), None, 1, 0).unwrap();
        assert_eq!(mid.shape(), &[4, 4, 4]);
        let mut tape = GradTape::new();
        let b = store.bind(&mut tape);
        let f = tape.constant(&x);
        let h = mhsam_head(&mut tape, &b, &p.heads[2], f).unwrap();
        assert_eq!(tape.shape(h), &[2, 8, 8]);
    }

    #[test]
    fn small_maps_are_rejected() {
        let (store, p) = params(2);
        let x = Tensor::zeros(&[2, 4, 8]);
        let mut tape = GradTape::new();
        let b = store.bind(&mut tape);
        let f = tape.constant(&x);
        assert!(matches!(
            mhsam_forward(&mut tape, &b, &p, f),
            Err(Error::InvalidShape { .. })
        ));
    }
}
