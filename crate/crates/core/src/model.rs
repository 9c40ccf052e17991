//! End-to-end network: backbone, fusion, optional gate and anchor head.
//!
//! ```text
//! query RGB+click ─ q_stem ─┐
//!                           ├─ shared stages ─ F_q, F_r ─ fusion ─ [gate] ─ 1×1 head
//! reference RGB ── r_stem ──┘
//! ```
//!
//! Fusion is either the cross-view attention stack or, for the baseline,
//! `F_r + mean_spatial(F_q)` broadcast over the reference map.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cvcam_fuse, cvcam_interact, CvcamConfig, CvcamParams};
use crate::dataset::Sample;
use crate::detection::{
    self, assign_target, loss_on_tape, select_prediction, AnchorSet, GridSpec, LossParts, PredictionGrid, Selection,
    TargetAssignment, FIELDS,
};
use crate::encoding::{build_posenc, encode_click, CLICK_SIGMA};
use crate::eval::{iou, EvalReport};
use crate::mhsam::{mhsam_forward, MhsamParams, DEFAULT_EXPANSION};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, GradTape, Result, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Sum fusion, no gate.
    Baseline,
    /// Cross-view attention fusion, no gate.
    Cvcam,
    /// Cross-view attention fusion and the spatial gate.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Cvcam, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cvcam => "baseline+CVCAM",
            Variant::Full => "baseline+CVCAM+MHSAM",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(Variant::Baseline),
            "cvcam" => Some(Variant::Cvcam),
            "full" => Some(Variant::Full),
            _ => None,
        }
    }

    pub fn uses_attention(self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    pub fn uses_gate(self) -> bool {
        matches!(self, Variant::Full)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub query_size: usize,
    pub reference_size: usize,
    /// Output channels of the first three backbone stages; the fourth
    /// produces `dim`.
    pub widths: [usize; 3],
    pub strides: [usize; 4],
    pub dim: usize,
    pub heads: usize,
    /// Interaction rounds.
    pub k: usize,
    pub share_weights: bool,
    /// Channel expansion inside each gate head.
    pub expansion: usize,
    pub variant: Variant,
    pub click_sigma: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            query_size: 64,
            reference_size: 128,
            widths: [16, 32, 64],
            strides: [2, 2, 2, 2],
            dim: 64,
            heads: 4,
            k: 4,
            share_weights: true,
            expansion: DEFAULT_EXPANSION,
            variant: Variant::Full,
            click_sigma: CLICK_SIGMA,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration exercising every layer: 16×16 images, an
    /// 8×8 reference grid, `D = 8`, two heads, one interaction round.
    pub fn micro() -> Self {
        Self {
            query_size: 16,
            reference_size: 16,
            widths: [4, 4, 8],
            strides: [2, 1, 1, 1],
            dim: 8,
            heads: 2,
            k: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_size == 0 || self.reference_size == 0 {
            return Err(Error::Config("image sizes must be positive".into()));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) || self.expansion == 0 {
            return Err(Error::Config(
                "backbone widths, strides and gate expansion must be positive".into(),
            ));
        }
        if !(self.click_sigma > 0.0) {
            return Err(Error::Config("click sigma must be positive".into()));
        }
        CvcamConfig::from(self).validate()?;
        let (gh, gw) = self.grid_dims();
        if self.variant.uses_gate() && (gh < 5 || gw < 5) {
            return Err(Error::Config(alloc::format!(
                "the spatial gate needs a reference grid of at least 5×5, got {gh}×{gw}"
            )));
        }
        if !self.reference_size.is_multiple_of(gw) {
            return Err(Error::Config(alloc::format!(
                "reference size {} is not a whole number of {gw} cells",
                self.reference_size
            )));
        }
        Ok(())
    }

    /// Edge length after the backbone (3×3 kernels, padding 1).
    pub fn feature_size(&self, image: usize) -> usize {
        self.strides.iter().fold(image, |s, &st| (s - 1) / st + 1)
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        let g = self.feature_size(self.reference_size);
        (g, g)
    }

    pub fn grid(&self) -> GridSpec {
        let (h, w) = self.grid_dims();
        GridSpec {
            height: h,
            width: w,
            cell_size: self.reference_size as f64 / w as f64,
        }
    }
}

impl From<&ModelConfig> for CvcamConfig {
    fn from(c: &ModelConfig) -> Self {
        CvcamConfig {
            k: c.k,
            heads: c.heads,
            dim: c.dim,
            share_weights: c.share_weights,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    q_stem: Conv,
    r_stem: Conv,
    stages: Vec<Conv>,
    cvcam: Option<CvcamParams>,
    gate: Option<MhsamParams>,
    head: Conv,
}

/// Network inputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    /// `4×H_q×W_q`: RGB plus the click channel.
    pub query: Tensor,
    pub reference: Tensor,
    pub target: TargetAssignment,
    pub gt: detection::BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub selection: Selection,
    /// `H_g×W_g`, see [`confidence_heatmap`].
    pub heatmap: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub anchors: AnchorSet,
    layout: Layout,
    pe_q: Tensor,
    pe_r: Tensor,
}

/// Module-local generator so that adding or removing one module leaves
/// every other module's initial weights unchanged.
fn module_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn add_conv(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) -> Conv {
    Conv {
        w: store.add_he_uniform(alloc::format!("{name}.w"), &[cout, cin, k, k], cin * k * k, rng),
        b: store.add_zeros(alloc::format!("{name}.b"), &[cout]),
    }
}

/// Head bias: zero for the box fields, `−ln(M − 1)` for every confidence
/// channel so each of the `M` boxes starts at `σ = 1/M`.
fn confidence_prior(num_anchors: usize, cells: usize) -> Tensor {
    let m = (num_anchors * cells) as f64;
    let logit = if m > 1.0 { -crate::math::ln(m - 1.0) } else { 0.0 };
    Tensor::from_fn(&[num_anchors * FIELDS], |i| {
        if i % FIELDS == detection::CONF {
            logit
        } else {
            0.0
        }
    })
}

impl Model {
    pub fn new(cfg: ModelConfig, anchors: AnchorSet) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let widths = [cfg.widths[0], cfg.widths[1], cfg.widths[2], cfg.dim];
        let q_stem = add_conv(
            &mut store,
            "backbone.q_stem",
            widths[0],
            4,
            3,
            &mut module_rng(cfg.seed, 0),
        );
        let r_stem = add_conv(
            &mut store,
            "backbone.r_stem",
            widths[0],
            3,
            3,
            &mut module_rng(cfg.seed, 1),
        );
        let mut rng = module_rng(cfg.seed, 2);
        let stages = (1..4)
            .map(|i| {
                add_conv(
                    &mut store,
                    &alloc::format!("backbone.stage{}", i + 1),
                    widths[i],
                    widths[i - 1],
                    3,
                    &mut rng,
                )
            })
            .collect();
        let cvcam = if cfg.variant.uses_attention() {
            Some(CvcamParams::new(
                &mut store,
                "cvcam",
                CvcamConfig::from(&cfg),
                &mut module_rng(cfg.seed, 3),
            )?)
        } else {
            None
        };
        let gate = if cfg.variant.uses_gate() {
            Some(MhsamParams::new(
                &mut store,
                "mhsam",
                cfg.dim,
                cfg.expansion,
                &mut module_rng(cfg.seed, 4),
            )?)
        } else {
            None
        };
        let mut head_rng = module_rng(cfg.seed, 5);
        let head = Conv {
            w: store.add_uniform(
                "head.w",
                &[anchors.len() * FIELDS, cfg.dim, 1, 1],
                cfg.dim,
                &mut head_rng,
            ),
            b: store.add("head.b", confidence_prior(anchors.len(), cfg.grid().cells())),
        };
        let fq = cfg.feature_size(cfg.query_size);
        let (gh, gw) = cfg.grid_dims();
        let pe_q = build_posenc(cfg.dim, fq, fq)?.flat();
        let pe_r = build_posenc(cfg.dim, gh, gw)?.flat();
        Ok(Self {
            cfg,
            store,
            anchors,
            layout: Layout {
                q_stem,
                r_stem,
                stages,
                cvcam,
                gate,
                head,
            },
            pe_q,
            pe_r,
        })
    }

    /// Builds the network inputs and training target for `sample`.
    pub fn prepare(&self, sample: &Sample) -> Result<Prepared> {
        sample.validate()?;
        let (q, r) = (self.cfg.query_size, self.cfg.reference_size);
        if sample.query_size() != (q, q) || sample.reference_size() != (r, r) {
            return Err(Error::Config(alloc::format!(
                "sample {} has query {:?} and reference {:?}, model expects {q}×{q} and {r}×{r}",
                sample.id,
                sample.query_size(),
                sample.reference_size()
            )));
        }
        let click = encode_click(sample.click, q, q, self.cfg.click_sigma)?;
        let mut data = sample.query.data().to_vec();
        data.extend_from_slice(click.channel.data());
        Ok(Prepared {
            id: sample.id.clone(),
            query: Tensor::new(&[4, q, q], data)?,
            reference: sample.reference.clone(),
            target: assign_target(&sample.gt, &self.anchors, &self.cfg.grid())?,
            gt: sample.gt,
        })
    }

    fn conv(&self, tape: &mut GradTape<'_>, b: &Bound, x: Var, c: Conv, stride: usize, pad: usize) -> Result<Var> {
        tape.conv2d(x, b[c.w], Some(b[c.b]), stride, pad)
    }

    fn backbone(&self, tape: &mut GradTape<'_>, b: &Bound, x: Var, stem: Conv) -> Result<Var> {
        let s = &self.cfg.strides;
        let mut h = self.conv(tape, b, x, stem, s[0], 1)?;
        h = tape.relu(h);
        for (c, &st) in self.layout.stages.iter().zip(&s[1..]) {
            h = self.conv(tape, b, h, *c, st, 1)?;
            h = tape.relu(h);
        }
        Ok(h)
    }

    /// `(F_q, F_r)` on the tape.
    pub fn features<'a>(&'a self, tape: &mut GradTape<'a>, b: &Bound, input: &'a Prepared) -> Result<(Var, Var)> {
        let q = tape.constant(&input.query);
        let r = tape.constant(&input.reference);
        let fq = self.backbone(tape, b, q, self.layout.q_stem)?;
        let fr = self.backbone(tape, b, r, self.layout.r_stem)?;
        Ok((fq, fr))
    }

    /// Raw head output `A·5 × H_g × W_g` on the tape.
    pub fn forward_tape<'a>(&'a self, tape: &mut GradTape<'a>, b: &Bound, input: &'a Prepared) -> Result<Var> {
        let (fq, fr) = self.features(tape, b, input)?;
        let d = self.cfg.dim;
        let (nq, (gh, gw)) = (tape.shape(fq)[1] * tape.shape(fq)[2], self.cfg.grid_dims());
        let nr = gh * gw;
        let fq = tape.reshape(fq, &[d, nq])?;
        let fr = tape.reshape(fr, &[d, nr])?;
        let mut fused = match &self.layout.cvcam {
            Some(p) => {
                let pq = tape.constant(&self.pe_q);
                let pr = tape.constant(&self.pe_r);
                let (fq, fr) = cvcam_interact(tape, b, p, fq, fr, pq, pr)?;
                cvcam_fuse(tape, b, p, fq, fr, pq, pr, (gh, gw))?.var
            }
            None => {
                let avg = tape.constant_owned(Tensor::full(&[nq, 1], 1.0 / nq as f64));
                let spread = tape.constant_owned(Tensor::ones(&[1, nr]));
                let m = tape.matmul(fq, avg)?;
                let m = tape.matmul(m, spread)?;
                let sum = tape.add(fr, m)?;
                tape.reshape(sum, &[d, gh, gw])?
            }
        };
        if let Some(g) = &self.layout.gate {
            fused = mhsam_forward(tape, b, g, fused)?;
        }
        self.conv(tape, b, fused, self.layout.head, 1, 0)
    }

    pub fn predict(&self, input: &Prepared) -> Result<PredictionGrid> {
        let mut tape = GradTape::new();
        let b = self.store.bind(&mut tape);
        let out = self.forward_tape(&mut tape, &b, input)?;
        PredictionGrid::new(tape.value(out).clone(), self.anchors.len(), self.cfg.grid().cell_size)
    }

    pub fn loss(&self, input: &Prepared) -> Result<LossParts> {
        let grid = self.predict(input)?;
        Ok(detection::total_loss(&grid, &input.target))
    }

    /// Loss and its gradient for every parameter, in store order.
    pub fn loss_and_grads(&self, input: &Prepared) -> Result<(LossParts, Vec<Tensor>)> {
        let mut tape = GradTape::new();
        let b = self.store.bind(&mut tape);
        let out = self.forward_tape(&mut tape, &b, input)?;
        let (loss, parts) = loss_on_tape(
            &mut tape,
            out,
            self.anchors.len(),
            self.cfg.grid().cell_size,
            &input.target,
        )?;
        let grads = tape.backward(loss)?;
        Ok((parts, b.vars().iter().map(|&v| grads.wrt(&tape, v)).collect()))
    }

    pub fn infer(&self, input: &Prepared) -> Result<Inference> {
        let grid = self.predict(input)?;
        let selection = select_prediction(&grid, &self.anchors)?;
        Ok(Inference {
            selection,
            heatmap: confidence_heatmap(&grid),
        })
    }

    pub fn evaluate(&self, inputs: &[Prepared]) -> Result<EvalReport> {
        let mut records = Vec::with_capacity(inputs.len());
        for input in inputs {
            let sel = self.infer(input)?.selection;
            records.push((input.id.clone(), iou(&sel.bbox, &input.gt)?));
        }
        EvalReport::from_ious(records)
    }
}

/// Per-cell best confidence over anchors, min-max scaled. Scaling is done
/// on the logits, which rank cells exactly as `σ(ĉ)` does but never tie
/// through saturation. A flat map is all zeros.
pub fn confidence_heatmap(grid: &PredictionGrid) -> Tensor {
    let (h, w) = (grid.grid.height, grid.grid.width);
    let mut best = Tensor::full(&[h, w], f64::NEG_INFINITY);
    for k in 0..grid.num_boxes() {
        let (gx, gy, _) = grid.unflatten(k);
        let v = grid.conf_logit(k);
        let slot = &mut best.data_mut()[gy * w + gx];
        *slot = slot.max(v);
    }
    let lo = best.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = best.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        best.map(|v| (v - lo) / (hi - lo))
    } else {
        Tensor::zeros(&[h, w])
    }
}

/// Central-difference check of the full loss against the tape gradient
/// for up to `per_tensor` randomly chosen entries of every parameter.
/// Returns the largest `|a − n| / max(1, |a|)`.
pub fn pipeline_grad_check(model: &Model, input: &Prepared, eps: f64, per_tensor: usize, seed: u64) -> Result<f64> {
    if !(crate::tol::FD_EPS_MIN..=crate::tol::FD_EPS_MAX).contains(&eps) {
        return Err(Error::Contract(alloc::format!(
            "finite-difference step {eps} out of range"
        )));
    }
    let (_, grads) = model.loss_and_grads(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for id in model.store.ids() {
        let n = model.store.get(id).numel();
        for _ in 0..per_tensor.min(n) {
            let i = rng.gen_range(0..n);
            let orig = model.store.get(id).data()[i];
            probe.store.get_mut(id).data_mut()[i] = orig + eps;
            let hi = probe.loss(input)?.total();
            probe.store.get_mut(id).data_mut()[i] = orig - eps;
            let lo = probe.loss(input)?.total();
            probe.store.get_mut(id).data_mut()[i] = orig;
            let numeric = (hi - lo) / (2.0 * eps);
            let analytic = grads[id.index()].data()[i];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
        }
    }
    Ok(worst)
}
