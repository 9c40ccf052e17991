//! Tape gradients against central finite differences.

use crossloc_core::attention::{cab_forward, cvcam_fuse, cvcam_interact, CabParams, CvcamConfig, CvcamParams};
use crossloc_core::dataset::Split;
use crossloc_core::detection::{loss_on_tape, AnchorSet, TargetAssignment};
use crossloc_core::gradcheck::grad_check;
use crossloc_core::mhsam::{mhsam_forward, MhsamParams};
use crossloc_core::model::{pipeline_grad_check, Model, ModelConfig, Variant};
use crossloc_core::params::ParamStore;
use crossloc_core::synth::{render_sample, SyntheticSpec};
use crossloc_core::tol::{FD_EPS, GRAD_REL_OP, GRAD_REL_PIPELINE};
use crossloc_core::{GradTape, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values kept at least `gap` away from zero, for kinked ops.
fn away_from_zero(shape: &[usize], gap: f64, seed: u64) -> Tensor {
    random(shape, seed).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// `Σ y ⊙ R` for a fixed random `R`, turning any output into a scalar
/// with a generic upstream gradient.
fn project(tape: &mut GradTape<'_>, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant_owned(random(tape.shape(y), seed));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn check<F>(name: &str, x: &Tensor, f: F)
where
    F: Fn(&mut GradTape<'_>, Var) -> Result<Var>,
{
    let err = grad_check(f, x, FD_EPS).unwrap();
    assert!(err < GRAD_REL_OP, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_and_reduction_ops() {
    let x = random(&[3, 4], 1);
    let other = random(&[3, 4], 2);
    check("add", &x, |t, v| {
        let o = t.constant_owned(other.clone());
        let y = t.add(v, o)?;
        project(t, y, 9)
    });
    check("add self", &x, |t, v| {
        let y = t.add(v, v)?;
        project(t, y, 9)
    });
    check("sub", &x, |t, v| {
        let o = t.constant_owned(other.clone());
        let y = t.sub(o, v)?;
        project(t, y, 9)
    });
    check("mul", &x, |t, v| {
        let o = t.constant_owned(other.clone());
        let y = t.mul(v, o)?;
        project(t, y, 9)
    });
    check("square", &x, |t, v| {
        let y = t.mul(v, v)?;
        project(t, y, 9)
    });
    check("scale", &x, |t, v| {
        let y = t.scale(v, -2.5);
        project(t, y, 9)
    });
    check("sigmoid", &x, |t, v| {
        let y = t.sigmoid(v);
        project(t, y, 9)
    });
    check("sum", &x, |t, v| {
        let y = t.mul(v, v)?;
        Ok(t.sum(y))
    });
    check("mean", &x, |t, v| {
        let y = t.mul(v, v)?;
        Ok(t.mean(y))
    });
    let kinked = away_from_zero(&[3, 4], 0.05, 3);
    check("relu", &kinked, |t, v| {
        let y = t.relu(v);
        project(t, y, 9)
    });
    // Clamp bounds sit between sample values, never on them.
    let spread = Tensor::from_fn(&[2, 5], |i| -1.0 + 0.21 * i as f64);
    check("clamp", &spread, |t, v| {
        let y = t.clamp(v, -0.5, 0.5);
        project(t, y, 9)
    });
}

#[test]
fn shape_ops() {
    let x = random(&[4, 3], 4);
    check("transpose", &x, |t, v| {
        let y = t.transpose(v)?;
        project(t, y, 10)
    });
    check("reshape", &x, |t, v| {
        let y = t.reshape(v, &[2, 6])?;
        project(t, y, 10)
    });
    check("slice_rows", &x, |t, v| {
        let y = t.slice_rows(v, 1, 2)?;
        project(t, y, 10)
    });
    check("concat_rows", &x, |t, v| {
        let a = t.slice_rows(v, 2, 2)?;
        let b = t.slice_rows(v, 0, 3)?;
        let y = t.concat_rows(&[a, b, a])?;
        project(t, y, 10)
    });
}

#[test]
fn matmul_both_sides() {
    let a = random(&[3, 4], 5);
    let b = random(&[4, 2], 6);
    check("matmul lhs", &a, |t, v| {
        let w = t.constant_owned(b.clone());
        let y = t.matmul(v, w)?;
        project(t, y, 11)
    });
    check("matmul rhs", &b, |t, v| {
        let w = t.constant_owned(a.clone());
        let y = t.matmul(w, v)?;
        project(t, y, 11)
    });
}

#[test]
fn softmax_each_axis() {
    let x = random(&[3, 5], 7).map(|v| 3.0 * v);
    for axis in [0, 1] {
        check("softmax", &x, |t, v| {
            let y = t.softmax(v, axis)?;
            project(t, y, 12)
        });
    }
}

#[test]
fn conv_and_deconv_all_arguments() {
    for (stride, pad, k) in [(1, 0, 1), (1, 1, 3), (2, 1, 3), (1, 0, 5), (2, 2, 5)] {
        let x = random(&[2, 6, 7], 20);
        let w = random(&[3, 2, k, k], 21);
        let b = random(&[3], 22);
        check("conv2d x", &x, |t, v| {
            let (wv, bv) = (t.constant_owned(w.clone()), t.constant_owned(b.clone()));
            let y = t.conv2d(v, wv, Some(bv), stride, pad)?;
            project(t, y, 13)
        });
        check("conv2d w", &w, |t, v| {
            let (xv, bv) = (t.constant_owned(x.clone()), t.constant_owned(b.clone()));
            let y = t.conv2d(xv, v, Some(bv), stride, pad)?;
            project(t, y, 13)
        });
        check("conv2d b", &b, |t, v| {
            let (xv, wv) = (t.constant_owned(x.clone()), t.constant_owned(w.clone()));
            let y = t.conv2d(xv, wv, Some(v), stride, pad)?;
            project(t, y, 13)
        });
    }
    for k in [1, 3, 5] {
        let x = random(&[3, 4, 5], 30);
        let w = random(&[3, 2, k, k], 31);
        let b = random(&[2], 32);
        check("deconv2d x", &x, |t, v| {
            let (wv, bv) = (t.constant_owned(w.clone()), t.constant_owned(b.clone()));
            let y = t.deconv2d(v, wv, Some(bv), 1, 0)?;
            project(t, y, 14)
        });
        check("deconv2d w", &w, |t, v| {
            let (xv, bv) = (t.constant_owned(x.clone()), t.constant_owned(b.clone()));
            let y = t.deconv2d(xv, v, Some(bv), 1, 0)?;
            project(t, y, 14)
        });
        check("deconv2d b", &b, |t, v| {
            let (xv, wv) = (t.constant_owned(x.clone()), t.constant_owned(w.clone()));
            let y = t.deconv2d(xv, wv, Some(v), 1, 0)?;
            project(t, y, 14)
        });
    }
}

#[test]
fn cross_attention_block() {
    let mut store = ParamStore::new();
    let p = CabParams::new(&mut store, "cab", 8, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let f1 = random(&[8, 5], 40);
    let f2 = random(&[8, 6], 41);
    let pe1 = random(&[8, 5], 42);
    let pe2 = random(&[8, 6], 43);
    check("cab f1", &f1, |t, v| {
        let b = store.bind_owned(t);
        let [c2, c3, c4] = [&f2, &pe1, &pe2].map(|x| t.constant_owned(x.clone()));
        let y = cab_forward(t, &b, &p, v, c2, c3, c4)?;
        project(t, y, 15)
    });
    check("cab f2", &f2, |t, v| {
        let b = store.bind_owned(t);
        let [c1, c3, c4] = [&f1, &pe1, &pe2].map(|x| t.constant_owned(x.clone()));
        let y = cab_forward(t, &b, &p, c1, v, c3, c4)?;
        project(t, y, 15)
    });
    for (name, id) in [("w_q", p.wq), ("w_k", p.wk), ("w_v", p.wv)] {
        check(name, store.get(id), |t, v| {
            let b = store.bind_owned_with(t, id, v);
            let [c1, c2, c3, c4] = [&f1, &f2, &pe1, &pe2].map(|x| t.constant_owned(x.clone()));
            let y = cab_forward(t, &b, &p, c1, c2, c3, c4)?;
            project(t, y, 15)
        });
    }
}

#[test]
fn interaction_and_fusion_stack() {
    let cfg = CvcamConfig {
        k: 2,
        heads: 2,
        dim: 4,
        share_weights: false,
    };
    let mut store = ParamStore::new();
    let p = CvcamParams::new(&mut store, "cvcam", cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let fq = random(&[4, 4], 50);
    let fr = random(&[4, 6], 51);
    let pq = random(&[4, 4], 52);
    let pr = random(&[4, 6], 53);
    check("cvcam f_q", &fq, |t, v| {
        let b = store.bind_owned(t);
        let [cr, cpq, cpr] = [&fr, &pq, &pr].map(|x| t.constant_owned(x.clone()));
        let (q, r) = cvcam_interact(t, &b, &p, v, cr, cpq, cpr)?;
        let y = cvcam_fuse(t, &b, &p, q, r, cpq, cpr, (2, 3))?.var;
        project(t, y, 16)
    });
    let wk = p.update_reference[1].wk;
    check("cvcam round-2 w_k", store.get(wk), |t, v| {
        let b = store.bind_owned_with(t, wk, v);
        let [cq, cr, cpq, cpr] = [&fq, &fr, &pq, &pr].map(|x| t.constant_owned(x.clone()));
        let (q, r) = cvcam_interact(t, &b, &p, cq, cr, cpq, cpr)?;
        let y = cvcam_fuse(t, &b, &p, q, r, cpq, cpr, (2, 3))?.var;
        project(t, y, 16)
    });
}

#[test]
fn spatial_gate() {
    let mut store = ParamStore::new();
    let p = MhsamParams::new(&mut store, "gate", 2, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let f = random(&[2, 6, 5], 60);
    check("mhsam input", &f, |t, v| {
        let b = store.bind_owned(t);
        let y = mhsam_forward(t, &b, &p, v)?;
        project(t, y, 17)
    });
    for head in &p.heads {
        for id in [head.conv_w, head.deconv_w, head.deconv_b] {
            check("mhsam weight", store.get(id), |t, v| {
                let b = store.bind_owned_with(t, id, v);
                let fv = t.constant_owned(f.clone());
                let y = mhsam_forward(t, &b, &p, fv)?;
                project(t, y, 17)
            });
        }
    }
}

#[test]
fn detection_loss() {
    let anchors = 2;
    let raw = random(&[anchors * 5, 3, 4], 70).map(|v| 2.0 * v);
    let tgt = TargetAssignment {
        cell: (1, 2),
        anchor: 1,
        index: (2 * 4 + 1) * anchors + 1,
        offsets: [0.3, 0.8, -0.2, 0.4],
    };
    check("loss", &raw, |t, v| Ok(loss_on_tape(t, v, anchors, 8.0, &tgt)?.0));
}

fn micro_spec() -> SyntheticSpec {
    SyntheticSpec {
        query_size: 16,
        reference_size: 16,
        base_size: (0.3, 0.4),
        scale: (0.8, 1.2),
        distractors: 1,
        clutter: 1,
        border_band: 0.0,
        ..SyntheticSpec::default()
    }
}

#[test]
fn micro_pipeline_every_variant() {
    let anchors = AnchorSet::new(vec![
        (2.0, 2.0),
        (3.0, 2.0),
        (2.0, 3.0),
        (3.0, 3.0),
        (4.0, 3.0),
        (3.0, 4.0),
        (4.0, 4.0),
        (5.0, 5.0),
        (6.0, 6.0),
    ])
    .unwrap();
    for variant in Variant::ALL {
        for seed in 0..2 {
            let cfg = ModelConfig {
                variant,
                seed,
                ..ModelConfig::micro()
            };
            let model = Model::new(cfg, anchors.clone()).unwrap();
            let sample = render_sample(&micro_spec(), seed, Split::Train).unwrap();
            let input = model.prepare(&sample).unwrap();
            let err = pipeline_grad_check(&model, &input, FD_EPS, 6, seed).unwrap();
            assert!(err < GRAD_REL_PIPELINE, "{variant:?} seed {seed}: {err:e}");
        }
    }
}
