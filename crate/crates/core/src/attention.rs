//! Cross-attention block (CAB) and the cross-view interaction/fusion stack
//! built from it.
//!
//! A CAB takes `f1: D×N1` and `f2: D×N2` and returns a `D×N1` map:
//!
//! ```text
//! Q = W_Q (f1 + pe1)   K = W_K (f2 + pe2)   V = W_V f2
//! per head h (d = D/m rows each):
//!     S_h = softmax_rows(Q_hᵀ K_h / √d)        N1×N2
//!     O_h = V_h S_hᵀ                           d×N1
//! out = [O_1; …; O_m]
//! ```
//!
//! There is no residual path, normalization or feed-forward sublayer.
//! Positional encodings enter the query and key projections only.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::params::{Bound, ParamId, ParamStore};
use crate::{Error, GradTape, Result, Var};

/// Projection weights of one cross-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct CabParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl CabParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(alloc::format!(
                "channel dim {dim} must be a positive multiple of the head count {heads}"
            )));
        }
        let mut proj = |suffix: &str| store.add_lecun_uniform(alloc::format!("{name}.{suffix}"), &[dim, dim], dim, rng);
        let wq = proj("w_q");
        let wk = proj("w_k");
        let wv = proj("w_v");
        Ok(Self { wq, wk, wv, dim, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Output of a CAB together with its per-head score matrices.
pub struct CabTrace {
    pub output: Var,
    /// One `N1×N2` row-stochastic matrix per head.
    pub scores: Vec<Var>,
}

fn expect_dim(tape: &GradTape<'_>, v: Var, dim: usize, what: &str) -> Result<usize> {
    match *tape.shape(v) {
        [d, n] if d == dim => Ok(n),
        _ => Err(Error::shape(
            "cab_forward",
            tape.shape(v),
            alloc::format!("{what} must be {dim}×N"),
        )),
    }
}

/// Cross-attention of `f1` (queries) over `f2` (keys and values).
pub fn cab_forward(
    tape: &mut GradTape<'_>,
    bound: &Bound,
    params: &CabParams,
    f1: Var,
    f2: Var,
    pe1: Var,
    pe2: Var,
) -> Result<Var> {
    Ok(cab_forward_traced(tape, bound, params, f1, f2, pe1, pe2)?.output)
}

pub fn cab_forward_traced(
    tape: &mut GradTape<'_>,
    bound: &Bound,
    params: &CabParams,
    f1: Var,
    f2: Var,
    pe1: Var,
    pe2: Var,
) -> Result<CabTrace> {
    let d = params.dim;
    let n1 = expect_dim(tape, f1, d, "query-side features")?;
    let n2 = expect_dim(tape, f2, d, "key-side features")?;
    if tape.shape(pe1) != [d, n1] {
        return Err(Error::mismatch("cab_forward", tape.shape(pe1), &[d, n1]));
    }
    if tape.shape(pe2) != [d, n2] {
        return Err(Error::mismatch("cab_forward", tape.shape(pe2), &[d, n2]));
    }

    let q_in = tape.add(f1, pe1)?;
    let k_in = tape.add(f2, pe2)?;
    let q = tape.matmul(bound[params.wq], q_in)?;
    let k = tape.matmul(bound[params.wk], k_in)?;
    let v = tape.matmul(bound[params.wv], f2)?;

    let hd = params.head_dim();
    let scale = 1.0 / math::sqrt(hd as f64);
    let mut heads = Vec::with_capacity(params.heads);
    let mut scores = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (qh, kh, vh) = if params.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_rows(q, h * hd, hd)?,
                tape.slice_rows(k, h * hd, hd)?,
                tape.slice_rows(v, h * hd, hd)?,
            )
        };
        let qt = tape.transpose(qh)?;
        let logits = tape.matmul(qt, kh)?;
        let logits = tape.scale(logits, scale);
        let s = tape.softmax(logits, 1)?;
        let st = tape.transpose(s)?;
        heads.push(tape.matmul(vh, st)?);
        scores.push(s);
    }
    let output = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_rows(&heads)?
    };
    Ok(CabTrace { output, scores })
}

/// Interaction depth and width of the cross-view stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvcamConfig {
    /// Number of paired-CAB interaction rounds.
    pub k: usize,
    pub heads: usize,
    pub dim: usize,
    /// Reuse one CAB pair for every round.
    pub share_weights: bool,
}

impl Default for CvcamConfig {
    fn default() -> Self {
        Self {
            k: 4,
            heads: 4,
            dim: 256,
            share_weights: true,
        }
    }
}

impl CvcamConfig {
    /// Within a round both sides are updated from the round's input pair.
    pub const SIMULTANEOUS_UPDATE: bool = true;

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("interaction rounds k must be at least 1".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(alloc::format!(
                "dim {} must be a multiple of heads {}",
                self.dim,
                self.heads
            )));
        }
        if !self.dim.is_multiple_of(4) {
            return Err(Error::Config(alloc::format!(
                "dim {} must be a multiple of 4 for positional encoding",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Parameters of the cross-view stack.
#[derive(Clone, Debug, PartialEq)]
pub struct CvcamParams {
    pub cfg: CvcamConfig,
    /// Updates the query side from the reference side, one per round (or
    /// a single shared block).
    pub update_query: Vec<CabParams>,
    /// Updates the reference side from the query side.
    pub update_reference: Vec<CabParams>,
    /// Final block: reference-side queries over query-side keys/values.
    pub fuse: CabParams,
}

impl CvcamParams {
    pub fn new(store: &mut ParamStore, name: &str, cfg: CvcamConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let blocks = if cfg.share_weights { 1 } else { cfg.k };
        let mut update_query = Vec::with_capacity(blocks);
        let mut update_reference = Vec::with_capacity(blocks);
        for i in 0..blocks {
            update_query.push(CabParams::new(
                store,
                &alloc::format!("{name}.q_from_r.{i}"),
                cfg.dim,
                cfg.heads,
                rng,
            )?);
            update_reference.push(CabParams::new(
                store,
                &alloc::format!("{name}.r_from_q.{i}"),
                cfg.dim,
                cfg.heads,
                rng,
            )?);
        }
        let fuse = CabParams::new(store, &alloc::format!("{name}.fuse"), cfg.dim, cfg.heads, rng)?;
        Ok(Self {
            cfg,
            update_query,
            update_reference,
            fuse,
        })
    }

    fn round(&self, i: usize) -> (&CabParams, &CabParams) {
        let j = if self.cfg.share_weights { 0 } else { i };
        (&self.update_query[j], &self.update_reference[j])
    }
}

/// `k` rounds of simultaneous exchange. Inputs are flattened `D×(H·W)`
/// maps; outputs keep their shapes.
#[allow(clippy::too_many_arguments)]
pub fn cvcam_interact(
    tape: &mut GradTape<'_>,
    bound: &Bound,
    params: &CvcamParams,
    f_q: Var,
    f_r: Var,
    pe_q: Var,
    pe_r: Var,
) -> Result<(Var, Var)> {
    params.cfg.validate()?;
    let (mut q, mut r) = (f_q, f_r);
    for i in 0..params.cfg.k {
        let (to_q, to_r) = params.round(i);
        let next_q = cab_forward(tape, bound, to_q, q, r, pe_q, pe_r)?;
        let next_r = cab_forward(tape, bound, to_r, r, q, pe_r, pe_q)?;
        q = next_q;
        r = next_r;
    }
    Ok((q, r))
}

/// Fused reference-shaped feature `D×H_r×W_r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusedFeature {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

/// Final fusion: queries come from the reference side so the result has
/// the reference map's spatial extent.
#[allow(clippy::too_many_arguments)]
pub fn cvcam_fuse(
    tape: &mut GradTape<'_>,
    bound: &Bound,
    params: &CvcamParams,
    f_q: Var,
    f_r: Var,
    pe_q: Var,
    pe_r: Var,
    (height, width): (usize, usize),
) -> Result<FusedFeature> {
    let n_r = tape.shape(f_r).get(1).copied().unwrap_or(0);
    if n_r != height * width {
        return Err(Error::shape(
            "cvcam_fuse",
            tape.shape(f_r),
            alloc::format!("reference map does not flatten from {height}×{width}"),
        ));
    }
    let out = cab_forward(tape, bound, &params.fuse, f_r, f_q, pe_r, pe_q)?;
    let var = tape.reshape(out, &[params.cfg.dim, height, width])?;
    Ok(FusedFeature { var, height, width })
}
