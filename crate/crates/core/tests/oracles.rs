//! Forward passes against independent straight-line implementations.

use crossloc_core::attention::{cab_forward, CabParams};
use crossloc_core::detection::{total_loss, PredictionGrid, TargetAssignment};
use crossloc_core::mhsam::{mhsam_forward, MhsamParams};
use crossloc_core::ops;
use crossloc_core::params::ParamStore;
use crossloc_core::tol::{CONV_ABS, ORACLE_ABS};
use crossloc_core::{GradTape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `out[c][n] = Σ_k w[c][k] x[k][n]` by loops.
fn dense(w: &Tensor, x: &Tensor) -> Vec<Vec<f64>> {
    let (rows, inner, cols) = (w.shape()[0], w.shape()[1], x.shape()[1]);
    (0..rows)
        .map(|c| {
            (0..cols)
                .map(|n| (0..inner).map(|k| w.at(&[c, k]) * x.at(&[k, n])).sum())
                .collect()
        })
        .collect()
}

fn add_t(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

/// Dense multi-head attention written out element by element.
#[allow(clippy::too_many_arguments)]
fn attention_oracle(
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    heads: usize,
    f1: &Tensor,
    f2: &Tensor,
    pe1: &Tensor,
    pe2: &Tensor,
) -> Vec<Vec<f64>> {
    let q = dense(wq, &add_t(f1, pe1));
    let k = dense(wk, &add_t(f2, pe2));
    let v = dense(wv, f2);
    let (d, n1, n2) = (f1.shape()[0], f1.shape()[1], f2.shape()[1]);
    let hd = d / heads;
    let mut out = vec![vec![0.0; n1]; d];
    for h in 0..heads {
        let rows = h * hd..(h + 1) * hd;
        for i in 0..n1 {
            let logits: Vec<f64> = (0..n2)
                .map(|j| rows.clone().map(|c| q[c][i] * k[c][j]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in rows.clone() {
                out[c][i] = (0..n2).map(|j| v[c][j] * e[j] / z).sum();
            }
        }
    }
    out
}

#[test]
fn cab_matches_dense_attention() {
    for (heads, seed) in [(1, 0), (2, 1), (4, 2)] {
        let mut store = ParamStore::new();
        let p = CabParams::new(&mut store, "cab", 4, heads, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let f1 = random(&[4, 4], 10 + seed);
        let f2 = random(&[4, 4], 20 + seed);
        let pe1 = random(&[4, 4], 30 + seed);
        let pe2 = random(&[4, 4], 40 + seed);
        let mut tape = GradTape::new();
        let b = store.bind(&mut tape);
        let [v1, v2, v3, v4] = [&f1, &f2, &pe1, &pe2].map(|t| tape.constant(t));
        let out = cab_forward(&mut tape, &b, &p, v1, v2, v3, v4).unwrap();
        let want = attention_oracle(
            store.get(p.wq),
            store.get(p.wk),
            store.get(p.wv),
            heads,
            &f1,
            &f2,
            &pe1,
            &pe2,
        );
        let got = tape.value(out);
        for (c, row) in want.iter().enumerate() {
            for (n, &w) in row.iter().enumerate() {
                assert!((got.at(&[c, n]) - w).abs() < ORACLE_ABS, "heads {heads} c {c} n {n}");
            }
        }
    }
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for o in 0..cout {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xo * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w.at(&[o, c, ky, kx]) * x.at(&[c, iy as usize, ix as usize]);
                            }
                        }
                    }
                }
                out.set(&[o, y, xo], acc);
            }
        }
    }
    out
}

/// Transposed convolution as a scatter; `w` is `C_in × C_out × k × k`.
fn deconv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[1], w.shape()[2]);
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (wd - 1) * stride + k - 2 * pad;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for o in 0..cout {
        let bias = b.map_or(0.0, |b| b.data()[o]);
        for y in 0..oh {
            for xo in 0..ow {
                out.set(&[o, y, xo], bias);
            }
        }
    }
    for c in 0..cin {
        for y in 0..h {
            for xi in 0..wd {
                for o in 0..cout {
                    for ky in 0..k {
                        for kx in 0..k {
                            let oy = (y * stride + ky) as isize - pad as isize;
                            let ox = (xi * stride + kx) as isize - pad as isize;
                            if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                let (oy, ox) = (oy as usize, ox as usize);
                                let v = out.at(&[o, oy, ox]) + w.at(&[c, o, ky, kx]) * x.at(&[c, y, xi]);
                                out.set(&[o, oy, ox], v);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_nested_loops() {
    let cases = [
        // (cin, h, w, cout, k, stride, pad)
        (1, 5, 5, 1, 1, 1, 0),
        (3, 8, 8, 5, 3, 1, 1),
        (5, 8, 7, 2, 3, 2, 1),
        (2, 6, 8, 4, 5, 1, 0),
        (4, 7, 8, 3, 3, 2, 0),
        (2, 5, 5, 3, 5, 1, 2),
    ];
    for (i, &(cin, h, w, cout, k, s, p)) in cases.iter().enumerate() {
        let x = random(&[cin, h, w], i as u64);
        let wt = random(&[cout, cin, k, k], 100 + i as u64);
        let b = random(&[cout], 200 + i as u64);
        let got = ops::conv2d(&x, &wt, Some(&b), s, p).unwrap();
        let want = conv_oracle(&x, &wt, Some(&b), s, p);
        assert_eq!(got.shape(), want.shape(), "case {i}");
        assert!(got.max_abs_diff(&want) < CONV_ABS, "case {i}");
    }
}

#[test]
fn deconv2d_matches_scatter_loops() {
    for (i, &(cin, h, w, cout, k)) in [(2, 4, 4, 3, 1), (3, 4, 5, 2, 3), (2, 3, 3, 5, 5)].iter().enumerate() {
        let x = random(&[cin, h, w], 300 + i as u64);
        let wt = random(&[cin, cout, k, k], 400 + i as u64);
        let b = random(&[cout], 500 + i as u64);
        let got = ops::deconv2d(&x, &wt, Some(&b), 1, 0).unwrap();
        let want = deconv_oracle(&x, &wt, Some(&b), 1, 0);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < CONV_ABS, "case {i}");
    }
}

#[test]
fn mhsam_matches_straight_line_gate() {
    let (c, h, w) = (3, 6, 7);
    let mut store = ParamStore::new();
    let p = MhsamParams::new(&mut store, "gate", c, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    // Nonzero biases so the oracle exercises them.
    let ids: Vec<_> = store.ids().collect();
    for (n, id) in ids.into_iter().enumerate() {
        if store.get(id).ndim() == 1 {
            *store.get_mut(id) = random(store.get(id).shape(), 900 + n as u64);
        }
    }
    let f = random(&[c, h, w], 6);

    let mut sum = Tensor::zeros(&[c, h, w]);
    for head in &p.heads {
        let mid = conv_oracle(&f, store.get(head.conv_w), Some(store.get(head.conv_b)), 1, 0).map(|v| v.max(0.0));
        let out = deconv_oracle(&mid, store.get(head.deconv_w), Some(store.get(head.deconv_b)), 1, 0);
        sum = add_t(&sum, &out);
    }
    let want = Tensor::new(
        &[c, h, w],
        sum.data()
            .iter()
            .zip(f.data())
            .map(|(s, x)| x / (1.0 + (-s).exp()))
            .collect(),
    )
    .unwrap();

    let mut tape = GradTape::new();
    let b = store.bind(&mut tape);
    let fv = tape.constant(&f);
    let out = mhsam_forward(&mut tape, &b, &p, fv).unwrap();
    assert!(tape.value(out).max_abs_diff(&want) < ORACLE_ABS);
}

/// BCE over every box plus squared offset error at the positive box,
/// written without the library's helpers.
fn loss_oracle(raw: &Tensor, anchors: usize, tgt: &TargetAssignment) -> f64 {
    let (ch, gh, gw) = (raw.shape()[0], raw.shape()[1], raw.shape()[2]);
    assert_eq!(ch, anchors * 5);
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut bce = 0.0;
    let mut mse = 0.0;
    for gy in 0..gh {
        for gx in 0..gw {
            for a in 0..anchors {
                let positive = (gx, gy) == tgt.cell && a == tgt.anchor;
                let p = sig(raw.at(&[a * 5 + 4, gy, gx])).clamp(1e-7, 1.0 - 1e-7);
                bce -= if positive { p.ln() } else { (1.0 - p).ln() };
                if positive {
                    let pred = [
                        sig(raw.at(&[a * 5, gy, gx])),
                        sig(raw.at(&[a * 5 + 1, gy, gx])),
                        raw.at(&[a * 5 + 2, gy, gx]),
                        raw.at(&[a * 5 + 3, gy, gx]),
                    ];
                    for (p, t) in pred.iter().zip(tgt.offsets) {
                        mse += (p - t).powi(2);
                    }
                }
            }
        }
    }
    bce + mse
}

#[test]
fn total_loss_matches_straight_line_script() {
    let anchors = 3;
    for seed in 0..5u64 {
        let mut raw = random(&[anchors * 5, 4, 5], seed);
        // Push a few logits into the clamp region.
        raw.set(&[4, 0, 0], 40.0);
        raw.set(&[9, 1, 1], -40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let (gx, gy, a) = (rng.gen_range(0..5), rng.gen_range(0..4), rng.gen_range(0..anchors));
        let tgt = TargetAssignment {
            cell: (gx, gy),
            anchor: a,
            index: (gy * 5 + gx) * anchors + a,
            offsets: [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ],
        };
        let grid = PredictionGrid::new(raw.clone(), anchors, 8.0).unwrap();
        let got = total_loss(&grid, &tgt).total();
        let want = loss_oracle(&raw, anchors, &tgt);
        assert!((got - want).abs() < ORACLE_ABS, "seed {seed}: {got} vs {want}");
    }
}
