use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::{grad_check, grad_check_params, ParamStore, Tape, Tensor, Var};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Weighted sum so that every output coordinate influences the loss.
fn probe_loss(tp: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let w = random(tp.shape(y), seed);
    let wv = tp.constant(w)?;
    let p = tp.mul(y, wv)?;
    tp.mean(p)
}

/// Plain nested-loop cross-correlation.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (co, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![n, co, oh, ow]);
    for bi in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b[o];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[((bi * co + o) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> crate::Result<Tensor> {
    let mut tp = Tape::<f64>::new();
    let xv = tp.constant(x.clone())?;
    let wv = tp.constant(w.clone())?;
    let bv = b.map(|b| tp.constant(b.clone())).transpose()?;
    let y = tp.conv2d(xv, wv, bv, stride, pad)?;
    Ok(tp.value(y).clone())
}

#[test]
fn conv_centered_delta_is_identity() {
    let x = random(&[1, 1, 3, 3], 1);
    let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    assert_eq!(conv(&x, &k, None, 1, 1).unwrap(), x);
}

#[test]
fn conv_all_ones_kernel_on_constant_interior() {
    let x = Tensor::full(vec![1, 1, 3, 3], 1.0);
    let k = Tensor::full(vec![1, 1, 3, 3], 1.0);
    let b = Tensor::full(vec![1], 0.5);
    let y = conv(&x, &k, Some(&b), 1, 1).unwrap();
    assert_eq!(y.data()[4], 9.5);
    assert_eq!(y.data()[0], 4.5);
}

#[test]
fn conv_matches_nested_loops() {
    for (stride, pad, k, seed) in [(1, 1, 3, 1u64), (2, 0, 2, 2), (1, 0, 1, 3), (2, 1, 3, 4)] {
        let x = random(&[2, 3, 7, 7], seed);
        let x = if stride == 2 && k == 2 { random(&[2, 3, 6, 6], seed) } else { x };
        let w = random(&[4, 3, k, k], seed + 10);
        let b = random(&[4], seed + 20);
        let got = conv(&x, &w, Some(&b), stride, pad).unwrap();
        let want = naive_conv(&x, &w, b.data(), stride, pad);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn conv_shape_errors() {
    let x = random(&[1, 2, 4, 4], 1);
    let w = random(&[1, 3, 3, 3], 2);
    assert!(matches!(conv(&x, &w, None, 1, 1), Err(Error::Shape(_))));
    let w = random(&[1, 2, 2, 2], 2);
    let x = random(&[1, 2, 5, 5], 1);
    assert!(matches!(conv(&x, &w, None, 2, 0), Err(Error::Shape(_))));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let p3 = ConvParams::new(&mut store, "c3", 2, 3, 3, 1, 1, false, &mut rng);
    let p1 = ConvParams::new(&mut store, "c1", 3, 2, 1, 1, 0, false, &mut rng);
    for id in [p3.bias.unwrap(), p1.bias.unwrap()] {
        store.set_value(id, random(store.value(id).shape(), 8)).unwrap();
    }
    let x = random(&[2, 2, 5, 5], 9);
    let err = grad_check_params(&mut store, 1e-5, |tp, s| {
        let xv = tp.constant(x.clone())?;
        let a = tp.apply_conv(s, &p3, xv)?;
        let b = tp.apply_conv(s, &p1, a)?;
        probe_loss(tp, b, 1)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let w = random(&[3, 2, 3, 3], 10);
    let err = grad_check(
        |tp, x| {
            let wv = tp.constant(w.clone())?;
            let y = tp.conv2d(x, wv, None, 2, 1)?;
            probe_loss(tp, y, 2)
        },
        &random(&[1, 2, 7, 7], 11),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv_params_count_and_macs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let p = ConvParams::new(&mut store, "c", 2, 4, 3, 1, 1, false, &mut rng);
    assert_eq!(p.param_count(), 76);
    assert_eq!(store.numel(), 76);
    let q = ConvParams::new(&mut store, "d", 1, 1, 3, 1, 1, false, &mut rng);
    assert_eq!(q.macs(4, 4).unwrap(), 144);
}

fn transpose(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let mut tp = Tape::<f64>::new();
    let xv = tp.constant(x.clone()).unwrap();
    let wv = tp.constant(w.clone()).unwrap();
    let bv = b.map(|b| tp.constant(b.clone()).unwrap());
    let y = tp.conv_transpose2d(xv, wv, bv, 2).unwrap();
    tp.value(y).clone()
}

#[test]
fn conv_transpose_is_the_transposed_strided_conv_matrix() {
    // The strided conv maps a 4×4 grid to 2×2; build its 4×16 matrix column
    // by column from unit probes and compare Aᵀx with the transpose op.
    let k = random(&[1, 1, 2, 2], 3);
    let mut a = vec![vec![0.0; 16]; 4];
    for j in 0..16 {
        let mut e = Tensor::zeros(vec![1, 1, 4, 4]);
        e.data_mut()[j] = 1.0;
        let col = naive_conv(&e, &k, &[0.0], 2, 0);
        for i in 0..4 {
            a[i][j] = col.data()[i];
        }
    }
    let x = random(&[1, 1, 2, 2], 4);
    let got = transpose(&x, &k, None);
    assert_eq!(got.shape(), &[1, 1, 4, 4]);
    for j in 0..16 {
        let want: f64 = (0..4).map(|i| a[i][j] * x.data()[i]).sum();
        assert!((got.data()[j] - want).abs() < 1e-14);
    }
}

#[test]
fn conv_transpose_zero_input_broadcasts_bias() {
    let w = random(&[2, 3, 2, 2], 1);
    let b = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap();
    let y = transpose(&Tensor::zeros(vec![1, 2, 3, 3]), &w, Some(&b));
    assert_eq!(y.shape(), &[1, 3, 6, 6]);
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, b.data()[i / 36]);
    }
}

#[test]
fn conv_transpose_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let p = ConvParams::new(&mut store, "up", 3, 2, 2, 2, 0, true, &mut rng);
    store.set_value(p.bias.unwrap(), random(&[2], 3)).unwrap();
    let x = random(&[2, 3, 3, 3], 4);
    let err = grad_check_params(&mut store, 1e-5, |tp, s| {
        let xv = tp.constant(x.clone())?;
        let y = tp.apply_conv(s, &p, xv)?;
        probe_loss(tp, y, 5)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let w = store.value(p.weight).clone();
    let err = grad_check(
        |tp, x| {
            let wv = tp.constant(w.clone())?;
            let y = tp.conv_transpose2d(x, wv, None, 2)?;
            probe_loss(tp, y, 6)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv_transpose_channel_mismatch() {
    let mut tp = Tape::<f64>::new();
    let x = tp.constant(Tensor::zeros(vec![1, 2, 2, 2])).unwrap();
    let w = tp.constant(Tensor::zeros(vec![3, 1, 2, 2])).unwrap();
    assert!(matches!(tp.conv_transpose2d(x, w, None, 2), Err(Error::Shape(_))));
}

/// `⟨A x, y⟩` and `⟨x, Aᵀ y⟩` for a linear op, the latter via backward.
fn adjoint_pair(x: &Tensor, y_seed: u64, op: impl Fn(&mut Tape, Var) -> crate::Result<Var>) -> (f64, f64) {
    let mut tp = Tape::<f64>::new();
    let xv = tp.leaf(x.clone(), true).unwrap();
    let ax = op(&mut tp, xv).unwrap();
    let y = random(tp.shape(ax), y_seed);
    let lhs = tp.value(ax).dot(&y).unwrap();
    let n = y.numel() as f64;
    let yv = tp.constant(y).unwrap();
    let p = tp.mul(ax, yv).unwrap();
    let m = tp.mean(p).unwrap();
    let s = tp.scale(m, n).unwrap();
    tp.backward_leaves(s).unwrap();
    let rhs = x.dot(tp.grad(xv).unwrap()).unwrap();
    (lhs, rhs)
}

#[test]
fn max_pool_small_cases() {
    let mut tp = Tape::<f64>::new();
    let x = tp
        .leaf(Tensor::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(), true)
        .unwrap();
    let y = tp.max_pool2d(x).unwrap();
    assert_eq!(tp.value(y).data(), &[4.0]);

    let c = tp.leaf(Tensor::full(vec![1, 1, 4, 4], 2.5), true).unwrap();
    let y = tp.max_pool2d(c).unwrap();
    assert!(tp.value(y).data().iter().all(|&v| v == 2.5));
    let s = tp.mean(y).unwrap();
    tp.backward_leaves(s).unwrap();
    let g = tp.grad(c).unwrap().data();
    for (i, v) in g.iter().enumerate() {
        let (r, col) = (i / 4, i % 4);
        let first = r % 2 == 0 && col % 2 == 0;
        assert_eq!(*v, if first { 0.25 } else { 0.0 });
    }
}

#[test]
fn max_pool_matches_brute_force() {
    let x = random(&[2, 3, 4, 4], 12);
    let mut tp = Tape::<f64>::new();
    let xv = tp.constant(x.clone()).unwrap();
    let y = tp.max_pool2d(xv).unwrap();
    let out = tp.value(y);
    assert_eq!(out.shape(), &[2, 3, 2, 2]);
    for plane in 0..6 {
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[plane * 16 + (2 * oy + dy) * 4 + 2 * ox + dx]);
                    }
                }
                assert_eq!(out.data()[plane * 4 + oy * 2 + ox], m);
            }
        }
    }
}

#[test]
fn max_pool_rejects_odd_extents() {
    let mut tp = Tape::<f64>::new();
    let x = tp.constant(Tensor::zeros(vec![1, 1, 3, 4])).unwrap();
    assert!(matches!(tp.max_pool2d(x), Err(Error::Shape(_))));
}

#[test]
fn max_pool_gradient_matches_finite_differences() {
    let err = grad_check(
        |tp, x| {
            let y = tp.max_pool2d(x)?;
            probe_loss(tp, y, 3)
        },
        &random(&[1, 2, 4, 6], 13),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4);
}

fn resize(x: &Tensor, h: usize, w: usize) -> Tensor {
    let mut tp = Tape::<f64>::new();
    let xv = tp.constant(x.clone()).unwrap();
    let y = tp.bilinear_resize(xv, h, w).unwrap();
    tp.value(y).clone()
}

/// Half-pixel bilinear sample written independently of the operator.
fn bilinear_oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |i: usize, s: usize, d: usize| {
        let p = ((i as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = if i0 + 1 < s { i0 + 1 } else { i0 };
        (i0, i1, p - i0 as f64)
    };
    let mut out = vec![];
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let v = src[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                + src[y0 * w + x1] * (1.0 - fy) * fx
                + src[y1 * w + x0] * fy * (1.0 - fx)
                + src[y1 * w + x1] * fy * fx;
            out.push(v);
        }
    }
    out
}

#[test]
fn bilinear_upsample_matches_direct_formula() {
    let x = Tensor::from_f64(vec![1, 1, 2, 2], &[0.0, 1.0, 1.0, 2.0]).unwrap();
    let y = resize(&x, 4, 4);
    let want = bilinear_oracle(x.data(), 2, 2, 4, 4);
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn bilinear_constant_and_identity() {
    let c = Tensor::full(vec![2, 3, 4, 8], 1.75);
    for (h, w) in [(1, 1), (2, 4), (8, 16), (3, 5), (16, 2)] {
        let y = resize(&c, h, w);
        assert!(y.data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
    }
    let x = random(&[1, 2, 4, 4], 1);
    assert_eq!(resize(&x, 4, 4), x);
}

#[test]
fn linear_operators_are_adjoint() {
    let x = random(&[2, 3, 4, 6], 21);
    for (h, w) in [(8, 12), (2, 3), (1, 1), (5, 7)] {
        let (l, r) = adjoint_pair(&x, 22, |tp, v| tp.bilinear_resize(v, h, w));
        assert!((l - r).abs() < 1e-8, "resize {h}x{w}: {l} vs {r}");
    }
    let k = random(&[3, 2, 2, 2], 23);
    let (l, r) = adjoint_pair(&x, 24, |tp, v| {
        let kv = tp.constant(k.clone())?;
        tp.conv_transpose2d(v, kv, None, 2)
    });
    assert!((l - r).abs() < 1e-8);
}

fn bn_store(c: usize, seed: u64) -> (ParamStore<f64>, BatchNormState<f64>) {
    let mut store = ParamStore::new();
    let state = BatchNormState::new(&mut store, "bn", c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Tensor::from_fn(vec![c], |_| rng.gen_range(0.5..2.0));
    let b = Tensor::from_fn(vec![c], |_| rng.gen_range(-1.0..1.0));
    store.set_value(state.gamma, g).unwrap();
    store.set_value(state.beta, b).unwrap();
    (store, state)
}

#[test]
fn batch_norm_training_statistics() {
    let (store, mut state) = bn_store(3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_fn(vec![64, 3, 8, 8], |_| rng.gen_range(-3.0..5.0));
    let mut tp = Tape::<f64>::new();
    let xv = tp.constant(x).unwrap();
    let y = tp.apply_batch_norm(&store, &mut state, xv, true).unwrap();
    let out = tp.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..64).flat_map(|b| out.data()[(b * 3 + c) * 64..(b * 3 + c + 1) * 64].to_vec()).collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        let (g, b) = (store.value(state.gamma).data()[c], store.value(state.beta).data()[c]);
        assert!((m - b).abs() < 1e-6);
        // ε shifts the standard deviation by about γ·ε/(2σ²)
        assert!((sd - g).abs() < 1e-5 * g);
    }
    assert!(state.stats.mean.iter().any(|&m| m != 0.0));
}

#[test]
fn batch_norm_eval_with_unit_stats_is_identity() {
    let mut store = ParamStore::new();
    let mut state = BatchNormState::<f64>::new(&mut store, "bn", 2);
    let x = random(&[3, 2, 2, 2], 5);
    let mut tp = Tape::<f64>::new();
    let xv = tp.constant(x.clone()).unwrap();
    let y = tp.apply_batch_norm(&store, &mut state, xv, false).unwrap();
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, b) in tp.value(y).data().iter().zip(x.data()) {
        assert!((a - b * scale).abs() < 1e-15);
    }
    assert_eq!(state.stats.mean, vec![0.0, 0.0]);
    assert_eq!(state.stats.var, vec![1.0, 1.0]);
}

#[test]
fn batch_norm_channel_mismatch() {
    let mut store = ParamStore::new();
    let mut state = BatchNormState::<f64>::new(&mut store, "bn", 2);
    let mut tp = Tape::<f64>::new();
    let xv = tp.constant(Tensor::zeros(vec![1, 3, 2, 2])).unwrap();
    assert!(matches!(tp.apply_batch_norm(&store, &mut state, xv, true), Err(Error::Shape(_))));
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    for training in [true, false] {
        let (mut store, state) = bn_store(3, 3);
        let mut st = state.clone();
        st.stats.mean = vec![0.2, -0.1, 0.4];
        st.stats.var = vec![0.8, 1.3, 0.5];
        let x = random(&[4, 3, 3, 3], 4);
        let err = grad_check_params(&mut store, 1e-5, |tp, s| {
            let mut local = st.clone();
            let xv = tp.constant(x.clone())?;
            let y = tp.apply_batch_norm(s, &mut local, xv, training)?;
            probe_loss(tp, y, 7)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let (g, b) = (store.value(st.gamma).clone(), store.value(st.beta).clone());
        let err = grad_check(
            |tp, xv| {
                let mut stats = st.stats.clone();
                let gv = tp.constant(g.clone())?;
                let bv = tp.constant(b.clone())?;
                let y = tp.batch_norm(xv, gv, bv, &mut stats, 0.1, 1e-5, training)?;
                probe_loss(tp, y, 8)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "training={training}: {err}");
    }
}

fn leaves(tp: &mut Tape, xs: &[Tensor]) -> Vec<Var> {
    xs.iter().map(|x| tp.leaf(x.clone(), true).unwrap()).collect()
}

#[test]
fn fuse_average_and_concat() {
    let mut tp = Tape::<f64>::new();
    let x = random(&[2, 3, 2, 2], 1);
    let same = leaves(&mut tp, &[x.clone(), x.clone(), x.clone()]);
    let y = tp.fuse(&same, FusionMode::Average).unwrap();
    assert!(tp.value(y).max_abs_diff(&x) < 1e-15);

    let a = Tensor::from_f64(vec![1, 1, 1, 2], &[1.0, 3.0]).unwrap();
    let b = Tensor::from_f64(vec![1, 1, 1, 2], &[3.0, 5.0]).unwrap();
    let ab = leaves(&mut tp, &[a, b]);
    let y = tp.average(&ab).unwrap();
    assert_eq!(tp.value(y).data(), &[2.0, 4.0]);

    let c = leaves(&mut tp, &[random(&[2, 2, 3, 3], 2), random(&[2, 3, 3, 3], 3)]);
    let y = tp.fuse(&c, FusionMode::Concat).unwrap();
    assert_eq!(tp.shape(y), &[2, 5, 3, 3]);
    assert_eq!(&tp.value(y).data()[18..45], &tp.value(c[1]).data()[..27]);
}

#[test]
fn fuse_errors() {
    let mut tp = Tape::<f64>::new();
    for mode in [FusionMode::Concat, FusionMode::Average] {
        assert!(matches!(tp.fuse(&[], mode), Err(Error::Contract(_))));
    }
    let v = leaves(&mut tp, &[random(&[1, 2, 2, 2], 1), random(&[1, 2, 4, 4], 2)]);
    assert!(matches!(tp.concat(&v), Err(Error::Shape(_))));
    assert!(matches!(tp.average(&v), Err(Error::Shape(_))));
}

#[test]
fn fuse_gradients_match_finite_differences() {
    let other = random(&[2, 3, 2, 2], 5);
    let third = random(&[2, 1, 2, 2], 6);
    for mode in [FusionMode::Concat, FusionMode::Average] {
        let err = grad_check(
            |tp, x| {
                let o = tp.constant(other.clone())?;
                let streams = match mode {
                    FusionMode::Average => vec![x, o, x],
                    FusionMode::Concat => {
                        let t = tp.constant(third.clone())?;
                        vec![t, x, o]
                    }
                };
                let y = tp.fuse(&streams, mode)?;
                probe_loss(tp, y, 9)
            },
            &random(&[2, 3, 2, 2], 7),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
    }
}

fn one_hot(rows: usize, picks: &[usize]) -> Tensor {
    let cols = picks.len();
    let mut g = Tensor::zeros(vec![rows, cols]);
    for (c, &r) in picks.iter().enumerate() {
        g.data_mut()[r * cols + c] = 1.0;
    }
    g
}

#[test]
fn select_average_unique_streams() {
    let xs: Vec<Tensor> = (0..5).map(|i| random(&[1, 2, 2, 2], 30 + i)).collect();
    let mut tp = Tape::<f64>::new();
    let v = leaves(&mut tp, &xs);
    let g = tp.constant(one_hot(5, &[3, 3, 3])).unwrap();
    let y = tp.select_average(&v, g).unwrap();
    assert_eq!(tp.value(y), &xs[3]);

    let g = tp.constant(one_hot(5, &[1, 4, 1])).unwrap();
    let y = tp.select_average(&v, g).unwrap();
    for i in 0..8 {
        let want = (xs[1].data()[i] + xs[4].data()[i]) / 2.0;
        assert!((tp.value(y).data()[i] - want).abs() < 1e-15);
    }
    let fused = tp.average(&[v[1], v[4]]).unwrap();
    assert_eq!(tp.value(fused), tp.value(y));
}

#[test]
fn select_average_needs_three_streams() {
    let mut tp = Tape::<f64>::new();
    let v = leaves(&mut tp, &[random(&[1, 1, 2, 2], 1), random(&[1, 1, 2, 2], 2)]);
    let g = tp.constant(one_hot(2, &[0])).unwrap();
    assert!(matches!(tp.select_average(&v, g), Err(Error::Contract(_))));
}

#[test]
fn select_average_gradient_follows_matmul_form() {
    // Dense form Σ_k d_k Σ_j G_jk x_j with d = 1/(|U|·multiplicity).
    let xs: Vec<Tensor> = (0..4).map(|i| random(&[1, 2, 2, 2], 50 + i)).collect();
    let picks = [2, 0, 2];
    let gmat = one_hot(4, &picks);
    let weights = [0.25, 0.5, 0.25];
    let probe = random(&[1, 2, 2, 2], 11);
    let mut tp = Tape::<f64>::new();
    let v = leaves(&mut tp, &xs);
    let g = tp.leaf(gmat.clone(), true).unwrap();
    let y = tp.select_average(&v, g).unwrap();
    let pv = tp.constant(probe.clone()).unwrap();
    let p = tp.mul(y, pv).unwrap();
    let s = tp.mean(p).unwrap();
    tp.backward_leaves(s).unwrap();
    let dg = tp.grad(g).unwrap().data().to_vec();
    for j in 0..4 {
        let dot = xs[j].dot(&probe).unwrap() / 8.0;
        for c in 0..3 {
            assert!((dg[j * 3 + c] - dot * weights[c]).abs() < 1e-14);
        }
    }
    for (j, x) in v.iter().enumerate() {
        let zero = Tensor::zeros(vec![1, 2, 2, 2]);
        let gx = tp.grad(*x).unwrap_or(&zero).data();
        let expect = if j == 0 || j == 2 { 0.5 / 8.0 } else { 0.0 };
        for (a, p) in gx.iter().zip(probe.data()) {
            assert!((a - expect * p).abs() < 1e-15);
        }
    }
}

#[test]
fn cross_entropy_reference_values() {
    let mut tp = Tape::<f64>::new();
    let z = tp.constant(Tensor::zeros(vec![2, 2, 3, 3])).unwrap();
    let t = vec![1u32; 18];
    let l = tp.softmax_cross_entropy(z, &t).unwrap();
    assert!((tp.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

    let mut conf = Tensor::zeros(vec![1, 3, 1, 2]);
    conf.data_mut()[0] = 50.0;
    conf.data_mut()[5] = 50.0;
    let z = tp.constant(conf).unwrap();
    let l = tp.softmax_cross_entropy(z, &[0, 2]).unwrap();
    assert!(tp.value(l).item() < 1e-20);

    let z = tp.constant(Tensor::zeros(vec![1, 2, 1, 1])).unwrap();
    assert!(matches!(tp.softmax_cross_entropy(z, &[2]), Err(Error::Domain(_))));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let targets: Vec<u32> = (0..2 * 9).map(|_| rng.gen_range(0..3)).collect();
    let err = grad_check(|tp, z| tp.softmax_cross_entropy(z, &targets), &random(&[2, 3, 3, 3], 4), 1e-5).unwrap();
    assert!(err < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn resize_is_adjoint_on_random_probes(seed in any::<u64>(), h in 1usize..7, w in 1usize..7, oh in 1usize..13, ow in 1usize..13) {
        let x = random(&[1, 2, h, w], seed);
        let (l, r) = adjoint_pair(&x, seed ^ 1, |tp, v| tp.bilinear_resize(v, oh, ow));
        prop_assert!((l - r).abs() < 1e-8);
        let direct = resize(&x, oh, ow);
        let plane = bilinear_oracle(&x.data()[..h * w], h, w, oh, ow);
        for (a, b) in direct.data()[..oh * ow].iter().zip(&plane) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_channel_law(c1 in 1usize..5, c2 in 1usize..5, c3 in 1usize..5) {
        let mut tp = Tape::<f64>::new();
        let v = leaves(&mut tp, &[random(&[1, c1, 2, 2], 1), random(&[1, c2, 2, 2], 2), random(&[1, c3, 2, 2], 3)]);
        let y = tp.concat(&v).unwrap();
        prop_assert_eq!(tp.shape(y)[1], c1 + c2 + c3);
        let y = tp.average(&v[..1]).unwrap();
        prop_assert_eq!(tp.shape(y)[1], c1);
    }

    #[test]
    fn pool_then_upsample_restores_extent(seed in any::<u64>(), h in 1usize..5, w in 1usize..5) {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(random(&[1, 1, 2 * h, 2 * w], seed)).unwrap();
        let p = tp.max_pool2d(x).unwrap();
        prop_assert_eq!(tp.shape(p), &[1, 1, h, w]);
        let u = tp.bilinear_resize(p, 2 * h, 2 * w).unwrap();
        prop_assert_eq!(tp.shape(u), tp.shape(x));
    }
}
