use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::rng::SplitMix64;

fn rand_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = 0.0;
                for c in 0..c_in {
                    for ki in 0..k {
                        for kj in 0..k {
                            let ii = (i * stride + ki) as isize - pad as isize;
                            let jj = (j * stride + kj) as isize - pad as isize;
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                s += x.at(&[c, ii as usize, jj as usize]) * w.at(&[o, c, ki, kj]);
                            }
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = s;
            }
        }
    }
    (vec![c_out, ho, wo], out)
}

#[test]
fn matmul_identity_and_zero() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = tape.constant(&Tensor::identity(2));
    let z = tape.constant(&Tensor::zeros(&[2, 2]));
    let ai = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(ai), &[1.0, 2.0, 3.0, 4.0]);
    let az = tape.matmul(a, z).unwrap();
    assert!(tape.value(az).iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = SplitMix64::new(5);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(&a), tape.constant(&b));
    let c = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.shape(c), &[3, 2]);
    for (x, y) in tape.value(c).iter().zip(triple_loop(&a, &b)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn conv_identity_zero_and_naive() {
    let mut rng = SplitMix64::new(8);
    let x = rand_tensor(&[1, 4, 5], &mut rng);
    let mut tape = Tape::new();
    let vx = tape.constant(&x);
    let one = tape.constant(&Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = tape.conv2d(vx, one, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), x.data());

    let zero = tape.constant(&Tensor::zeros(&[2, 1, 3, 3]));
    let y0 = tape.conv2d(vx, zero, None, 1, 1).unwrap();
    assert!(tape.value(y0).iter().all(|&v| v == 0.0));

    let x = rand_tensor(&[2, 5, 5], &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let mut tape = Tape::new();
        let (vx, vw) = (tape.constant(&x), tape.constant(&w));
        let y = tape.conv2d(vx, vw, None, stride, pad).unwrap();
        let (shape, reference) = naive_conv(&x, &w, stride, pad);
        assert_eq!(tape.shape(y), shape.as_slice());
        for (a, b) in tape.value(y).iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[2, 4, 4]));
    let w = tape.constant(&Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(tape.conv2d(x, w, None, 1, 1), Err(Error::Dimension(_))));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let u = tape.constant(&Tensor::vector(vec![0.3; 4]));
    let su = tape.softmax(u, 0).unwrap();
    assert!(tape.value(su).iter().all(|&p| (p - 0.25).abs() < 1e-15));

    let v = tape.constant(&Tensor::vector(vec![0.0, 2f64.ln()]));
    let sv = tape.softmax(v, 0).unwrap();
    assert!((tape.value(sv)[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((tape.value(sv)[1] - 2.0 / 3.0).abs() < 1e-15);

    let big = tape.constant(&Tensor::vector(vec![1000.0, 1001.0]));
    let sb = tape.softmax(big, 0).unwrap();
    let e = std::f64::consts::E;
    assert!((tape.value(sb)[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
    assert!((tape.value(sb)[1] - e / (1.0 + e)).abs() < 1e-15);
}

#[test]
fn softmax_along_inner_axis() {
    let mut rng = SplitMix64::new(2);
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    let mut tape = Tape::new();
    let vx = tape.constant(&x);
    let s = tape.softmax(vx, 1).unwrap();
    let y = tape.tensor(s);
    for o in 0..2 {
        for i in 0..4 {
            let total: f64 = (0..3).map(|k| y.at(&[o, k, i])).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one_without_nan(xs in prop::collection::vec(-1e4f64..1e4, 1..40)) {
        let mut tape = Tape::new();
        let v = tape.constant(&Tensor::vector(xs));
        let s = tape.softmax(v, 0).unwrap();
        let out = tape.value(s);
        prop_assert!(out.iter().all(|p| p.is_finite() && *p >= 0.0 && *p <= 1.0));
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

fn lstm_params(d_in: usize, d: usize, rng: Option<&mut SplitMix64>) -> ParamSet {
    let mut p = ParamSet::new();
    match rng {
        Some(rng) => {
            p.insert("w_ih", Tensor::uniform(&[4 * d, d_in], -0.5, 0.5, rng)).unwrap();
            p.insert("w_hh", Tensor::uniform(&[4 * d, d], -0.5, 0.5, rng)).unwrap();
            p.insert("b", Tensor::uniform(&[4 * d], -0.5, 0.5, rng)).unwrap();
        }
        None => {
            p.insert("w_ih", Tensor::zeros(&[4 * d, d_in])).unwrap();
            p.insert("w_hh", Tensor::zeros(&[4 * d, d])).unwrap();
            p.insert("b", Tensor::zeros(&[4 * d])).unwrap();
        }
    }
    p
}

fn run_lstm(tape: &mut Tape, p: &ParamSet, x: &Tensor, h: &Tensor, c: &Tensor) -> (Var, Var) {
    let (vx, vh, vc) = (tape.constant(x), tape.constant(h), tape.constant(c));
    let w_ih = tape.param(p, "w_ih").unwrap();
    let w_hh = tape.param(p, "w_hh").unwrap();
    let b = tape.param(p, "b").unwrap();
    tape.lstm_cell(vx, vh, vc, w_ih, w_hh, b).unwrap()
}

#[test]
fn lstm_zero_params() {
    let p = lstm_params(3, 4, None);
    let x = Tensor::new(vec![1, 3], vec![0.4, -1.0, 2.0]).unwrap();
    let h = Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let mut tape = Tape::new();
    let (h1, c1) = run_lstm(&mut tape, &p, &x, &h, &Tensor::zeros(&[1, 4]));
    assert!(tape.value(h1).iter().all(|&v| v == 0.0));
    assert!(tape.value(c1).iter().all(|&v| v == 0.0));

    let c = Tensor::new(vec![1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let mut tape = Tape::new();
    let (h1, c1) = run_lstm(&mut tape, &p, &x, &h, &c);
    for j in 0..4 {
        let cj = c.data()[j];
        assert!((tape.value(c1)[j] - 0.5 * cj).abs() < 1e-15);
        assert!((tape.value(h1)[j] - 0.5 * (0.5 * cj).tanh()).abs() < 1e-15);
    }
}

#[test]
fn lstm_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = SplitMix64::new(100 + seed);
        let mut p = lstm_params(3, 4, Some(&mut rng));
        // inputs are checked as parameters too
        p.insert("x", rand_tensor(&[2, 3], &mut rng)).unwrap();
        p.insert("h", rand_tensor(&[2, 4], &mut rng)).unwrap();
        p.insert("c", rand_tensor(&[2, 4], &mut rng)).unwrap();
        let report = grad_check(
            |tape, p| {
                let x = tape.param(p, "x")?;
                let h = tape.param(p, "h")?;
                let c = tape.param(p, "c")?;
                let w_ih = tape.param(p, "w_ih")?;
                let w_hh = tape.param(p, "w_hh")?;
                let b = tape.param(p, "b")?;
                let (h1, c1) = tape.lstm_cell(x, h, c, w_ih, w_hh, b)?;
                // second step so both returned states feed the loss
                let (h2, _) = tape.lstm_cell(x, h1, c1, w_ih, w_hh, b)?;
                tape.sum(h2)
            },
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "seed {seed}: {report:?}");
    }
}

#[test]
fn lstm_dimension_mismatch() {
    let p = lstm_params(3, 4, None);
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[1, 2]));
    let h = tape.constant(&Tensor::zeros(&[1, 4]));
    let c = tape.constant(&Tensor::zeros(&[1, 4]));
    let w_ih = tape.param(&p, "w_ih").unwrap();
    let w_hh = tape.param(&p, "w_hh").unwrap();
    let b = tape.param(&p, "b").unwrap();
    assert!(matches!(tape.lstm_cell(x, h, c, w_ih, w_hh, b), Err(Error::Dimension(_))));
}

#[test]
fn backward_linear_map_is_outer_product() {
    let mut rng = SplitMix64::new(4);
    let mut p = ParamSet::new();
    p.insert("W", rand_tensor(&[3, 2], &mut rng)).unwrap();
    p.insert("unused", rand_tensor(&[2], &mut rng)).unwrap();
    let x = rand_tensor(&[2, 1], &mut rng);
    let mut tape = Tape::new();
    let w = tape.param(&p, "W").unwrap();
    let _ = tape.param(&p, "unused").unwrap();
    let vx = tape.constant(&x);
    let y = tape.matmul(w, vx).unwrap();
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    // ∂ Σ_i (W x)_i / ∂W_ij = x_j
    let gw = g.get("W").unwrap();
    for i in 0..3 {
        for j in 0..2 {
            assert_eq!(gw[i * 2 + j], x.data()[j]);
        }
    }
    assert!(g.get("unused").is_none_or(|u| u.iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_accumulates_until_reset() {
    let mut p = ParamSet::new();
    p.insert("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&p, "a").unwrap();
    let sq = tape.mul(a, a).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward_into(loss, &mut p).unwrap();
    tape.backward_into(loss, &mut p).unwrap();
    assert_eq!(p.get("a").unwrap().grad().unwrap(), &[4.0, 8.0]);
    p.zero_grad();
    assert_eq!(p.get("a").unwrap().grad().unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let v = tape.constant(&Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

#[test]
fn grad_check_quadratic() {
    let mut rng = SplitMix64::new(1);
    let mut p = ParamSet::new();
    p.insert("p", rand_tensor(&[5], &mut rng)).unwrap();
    let r = grad_check(
        |tape, p| {
            let v = tape.param(p, "p")?;
            let sq = tape.mul(v, v)?;
            tape.sum(sq)
        },
        &p,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
    assert_eq!(r.checked, 5);
}

#[test]
fn grad_check_softmax_cross_entropy_layer() {
    for seed in 0..5 {
        let mut rng = SplitMix64::new(30 + seed);
        let mut p = ParamSet::new();
        p.insert("W", rand_tensor(&[6, 4], &mut rng)).unwrap();
        p.insert("b", rand_tensor(&[6], &mut rng)).unwrap();
        let x = rand_tensor(&[3, 4], &mut rng);
        let r = grad_check(
            |tape, p| {
                let w = tape.param(p, "W")?;
                let b = tape.param(p, "b")?;
                let vx = tape.constant(&x);
                let z = tape.matmul_nt(vx, w)?;
                let z = tape.add_row(z, b)?;
                tape.softmax_cross_entropy(z, &[Some(1), None, Some(5)])
            },
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}

/// Every tape operation, composed into one scalar, checked on random shapes.
#[test]
fn grad_check_every_op() {
    for seed in 0..5 {
        let mut rng = SplitMix64::new(700 + seed);
        let mut p = ParamSet::new();
        p.insert("img", rand_tensor(&[2, 6, 6], &mut rng)).unwrap();
        p.insert("k1", rand_tensor(&[3, 2, 3, 3], &mut rng)).unwrap();
        p.insert("kb", rand_tensor(&[3], &mut rng)).unwrap();
        p.insert("k2", rand_tensor(&[4, 3, 1, 1], &mut rng)).unwrap();
        p.insert("q", rand_tensor(&[1, 4], &mut rng)).unwrap();
        p.insert("emb", rand_tensor(&[5, 4], &mut rng)).unwrap();
        let report = grad_check(
            |t, p| {
                let img = t.param(p, "img")?;
                let k1 = t.param(p, "k1")?;
                let kb = t.param(p, "kb")?;
                let k2 = t.param(p, "k2")?;
                let x = t.conv2d(img, k1, Some(kb), 1, 1)?;
                let x = t.tanh(x)?;
                let x = t.max_pool(x, 2, 2)?;
                let x = t.conv2d(x, k2, None, 1, 0)?; // [4,3,3]
                let x = t.reshape(x, &[4, 9])?;
                let f = t.transpose(x)?; // [9,4]
                let q = t.param(p, "q")?;
                let scores = t.matmul_nt(f, q)?; // [9,1]
                let alpha = t.softmax(scores, 0)?;
                let g = t.matmul_tn(alpha, f)?; // [1,4]
                let emb = t.param(p, "emb")?;
                let rows = t.gather_rows(emb, &[3, 0, 3])?;
                let cat = t.concat(&[g, g], 0)?;
                let cat = t.concat(&[cat, rows], 0)?; // [5,4]
                let s = t.sigmoid(cat)?;
                let r = t.relu(cat)?;
                let m = t.mul(s, r)?;
                let a = t.add(m, cat)?;
                let wide = t.concat(&[a, s], 1)?;
                let sl = t.slice_cols(wide, 2, 6)?;
                let sc = t.scale(sl, 0.7)?;
                t.softmax_cross_entropy(sc, &[Some(0), Some(3), None, Some(2), Some(1)])
            },
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn validation_mode_flags_non_finite() {
    let mut tape = Tape::with_validation();
    let x = tape.constant(&Tensor::vector(vec![1e300, 1e300]));
    let err = tape.mul(x, x).unwrap_err();
    assert!(matches!(err, Error::Numeric { ref name, .. } if name == "mul"));
}

#[test]
fn tensor_invariants() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    let mut t = Tensor::zeros(&[2, 2]);
    assert!(t.accumulate_grad(&[1.0]).is_err());
    t.accumulate_grad(&[1.0; 4]).unwrap();
    assert_eq!(t.grad().unwrap().len(), 4);
    assert!(Tensor::vector(vec![f64::NAN]).validate("x").is_err());
}

#[test]
fn param_set_order_and_uniqueness() {
    let mut p = ParamSet::new();
    p.insert("b.x", Tensor::zeros(&[1])).unwrap();
    p.insert("a.y", Tensor::zeros(&[2])).unwrap();
    assert!(p.insert("a.y", Tensor::zeros(&[1])).is_err());
    assert_eq!(p.names().collect::<Vec<_>>(), vec!["a.y", "b.x"]);
    assert_eq!(p.num_scalars(), 3);
}
