use alloc::rc::Rc;
use alloc::vec::Vec;

use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

use super::gradcheck::{check_input, check_params, max_rel_err};
use super::nn::{apply_buffer_updates, window_mask, BatchNorm, Linear};
use super::optim::{Adam, CosineSchedule, GradAccum};
use super::*;

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

// ----- matmul --------------------------------------------------------------

#[test]
fn matmul_identity_and_hand_case() {
    let id = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let x = m(&[&[1.5, -2.0], &[3.0, 4.25]]);
    assert_eq!(matmul(&id, &x).unwrap(), x);
    let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let b = m(&[&[1.0], &[1.0]]);
    assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_is_error() {
    let a = Tensor::zeros(&[2, 3]);
    assert!(matches!(matmul(&a, &a), Err(crate::Error::Shape(_))));
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let a = rand_t(&[3, 4], 1);
    let b = rand_t(&[4, 2], 2);
    let probes = check_input(&a, |g, x| {
        let bv = g.constant(&b);
        let y = g.matmul(x, bv)?;
        g.sum(y)
    })
    .unwrap();
    assert!(max_rel_err(&probes) < 1e-6, "{probes:?}");
    // gradient of sum(A·B) wrt A is the row sums of B broadcast
    for (i, p) in probes.iter().enumerate() {
        let k = i % 4;
        let expect: f64 = b.row(k).iter().sum();
        assert!((p.analytic - expect).abs() < 1e-12);
    }
}

// ----- softmax / top-k ------------------------------------------------------

#[test]
fn softmax_examples() {
    let s = softmax(&Tensor::vector(&[0.0, 0.0]), 0).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = softmax(&Tensor::vector(&[1000.0, 1000.0, 1000.0]), 0).unwrap();
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = softmax(&Tensor::vector(&[1.0, 2.0, 3.0]), 0).unwrap();
    // direct formula oracle
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
    let z: f64 = e.iter().sum();
    for (v, ei) in s.data().iter().zip(&e) {
        assert!(((v - ei / z) / (ei / z)).abs() < 1e-12);
    }
}

#[test]
fn softmax_axis_zero_normalizes_columns() {
    let x = rand_t(&[3, 4], 5);
    let s = softmax(&x, 0).unwrap();
    for j in 0..4 {
        let col: f64 = (0..3).map(|i| s.at(i, j)).sum();
        assert!((col - 1.0).abs() < 1e-12);
    }
}

#[test]
fn top_k_examples() {
    let t = top_k_mask(&Tensor::vector(&[0.1, 0.5, 0.3, 0.2]), 2).unwrap();
    assert_eq!(t.data(), &[NEG_SENTINEL, 0.5, 0.3, NEG_SENTINEL]);
    let x = Tensor::vector(&[0.1, 0.5, 0.3, 0.2]);
    assert_eq!(top_k_mask(&x, 4).unwrap(), x);
    let t = top_k_mask(&Tensor::vector(&[0.3, 0.3, 0.1]), 1).unwrap();
    assert_eq!(t.data(), &[0.3, NEG_SENTINEL, NEG_SENTINEL]);
    assert!(top_k_mask(&x, 0).is_err());
    assert!(top_k_mask(&x, 5).is_err());
}

#[test]
fn masked_softmax_stays_finite() {
    let t = top_k_mask(&Tensor::vector(&[2.0, -1.0, 0.5]), 1).unwrap();
    let s = softmax(&t, 0).unwrap();
    assert_eq!(s.data(), &[1.0, 0.0, 0.0]);
}

// ----- embeddings / interpolation --------------------------------------------

#[test]
fn sincos_examples() {
    let e = sincos_embed_1d(&[0.0], 8).unwrap();
    assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    let e = sincos_embed_1d(&[3.5, 3.5], 6).unwrap();
    assert_eq!(e.row(0), e.row(1));
    // dim 4, position 1: frequencies 1 and 10000^(-1/2) = 0.01
    let e = sincos_embed_1d(&[1.0], 4).unwrap();
    let expect = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
    for (a, b) in e.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(sincos_embed_1d(&[1.0], 3).is_err());
}

#[test]
fn interpolation_examples() {
    let y = interpolate_linear(&Tensor::vector(&[0.0, 2.0]), 3, 0).unwrap();
    assert_eq!(y.data(), &[0.0, 1.0, 2.0]);
    let x = rand_t(&[5, 3], 9);
    assert_eq!(interpolate_linear(&x, 5, 0).unwrap(), x);
    let y = interpolate_linear(&Tensor::vector(&[1.0, 3.0, 5.0]), 5, 0).unwrap();
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    assert!(interpolate_linear(&x, 0, 0).is_err());
    assert!(interpolate_linear(&Tensor::vector(&[1.0]), 3, 0).is_err());
}

#[test]
fn interpolation_matches_piecewise_linear_oracle() {
    let x = rand_t(&[7, 2], 13);
    let y = interpolate_linear(&x, 19, 0).unwrap();
    for i in 0..19 {
        let t = i as f64 * 6.0 / 18.0;
        let lo = (t.floor() as usize).min(5);
        let f = t - lo as f64;
        for c in 0..2 {
            let e = x.at(lo, c) * (1.0 - f) + x.at(lo + 1, c) * f;
            assert!((y.at(i, c) - e).abs() < 1e-12);
        }
    }
    // endpoints exact; columns axis too
    assert_eq!(y.row(0), x.row(0));
    assert_eq!(y.row(18), x.row(6));
    let yt = interpolate_linear(&x.transpose(), 19, 1).unwrap();
    assert_eq!(yt, y.transpose());
}

#[test]
fn sincos_2d_rows_are_distinct() {
    let e = sincos_embed_2d(4, 16).unwrap();
    assert_eq!(&e.row(0)[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    for i in 0..16 {
        for j in i + 1..16 {
            assert_ne!(e.row(i), e.row(j));
        }
    }
}

// ----- finite-difference checks on every differentiable op ---------------

fn fd_ok<F>(x: &Tensor, f: F)
where
    F: Fn(&mut Graph, Var) -> crate::Result<Var>,
{
    let probes = check_input(x, f).unwrap();
    let worst = max_rel_err(&probes);
    assert!(worst < 1e-4, "worst relative error {worst}: {probes:?}");
}

/// Random weighting so that reductions do not hide gradient errors.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> crate::Result<Var> {
    let (r, c) = g.dims(y);
    let w = g.constant(&rand_t(&[r, c], seed));
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn fd_elementwise_ops() {
    let x = rand_t(&[3, 4], 21);
    let other = rand_t(&[3, 4], 22);
    let row = rand_t(&[1, 4], 23);
    fd_ok(&x, |g, v| { let o = g.constant(&other); let y = g.add(v, o)?; weighted_sum(g, y, 1) });
    fd_ok(&x, |g, v| { let o = g.constant(&other); let y = g.sub(o, v)?; weighted_sum(g, y, 1) });
    fd_ok(&x, |g, v| { let o = g.constant(&other); let y = g.mul(v, o)?; weighted_sum(g, y, 1) });
    fd_ok(&x, |g, v| { let y = g.mul(v, v)?; weighted_sum(g, y, 1) });
    fd_ok(&x, |g, v| { let o = g.constant(&row); let y = g.add_row(v, o)?; weighted_sum(g, y, 1) });
    fd_ok(&x, |g, v| { let o = g.constant(&row); let y = g.mul_row(v, o)?; weighted_sum(g, y, 1) });
    fd_ok(&row, |g, v| { let o = g.constant(&x); let y = g.mul_row(o, v)?; weighted_sum(g, y, 1) });
    fd_ok(&row, |g, v| { let o = g.constant(&x); let y = g.add_row(o, v)?; weighted_sum(g, y, 1) });
    fd_ok(&x, |g, v| { let y = g.scale(v, -2.5)?; weighted_sum(g, y, 1) });
    fd_ok(&x, |g, v| { let y = g.gelu(v)?; weighted_sum(g, y, 1) });
    fd_ok(&x, |g, v| { let y = g.softplus(v)?; weighted_sum(g, y, 1) });
    fd_ok(&x, |g, v| { let y = g.relu(v)?; weighted_sum(g, y, 1) });
    fd_ok(&x, |g, v| { let y = g.transpose(v)?; weighted_sum(g, y, 1) });
    fd_ok(&x, |g, v| { let y = g.reshape(v, 2, 6)?; weighted_sum(g, y, 1) });
    fd_ok(&x, |g, v| g.mean(v));
}

#[test]
fn fd_linear_algebra_and_softmax() {
    let a = rand_t(&[3, 5], 31);
    let b = rand_t(&[4, 5], 32);
    fd_ok(&a, |g, v| { let o = g.constant(&b); let y = g.matmul_nt(v, o)?; weighted_sum(g, y, 2) });
    fd_ok(&b, |g, v| { let o = g.constant(&a); let y = g.matmul_nt(o, v)?; weighted_sum(g, y, 2) });
    let bt = b.transpose();
    fd_ok(&bt, |g, v| { let o = g.constant(&a); let y = g.matmul(o, v)?; weighted_sum(g, y, 2) });
    fd_ok(&a, |g, v| { let y = g.softmax(v)?; weighted_sum(g, y, 3) });
    fd_ok(&a, |g, v| { let y = g.top_k_mask(v, 2)?; let y = g.softmax(y)?; weighted_sum(g, y, 3) });
    let keep = Rc::new(window_mask(2, 1));
    let sq = rand_t(&[4, 4], 33);
    fd_ok(&sq, |g, v| { let y = g.mask_fill(v, keep.clone())?; let y = g.softmax(y)?; weighted_sum(g, y, 4) });
}

#[test]
fn fd_normalization() {
    let x = rand_t(&[5, 6], 41);
    let gamma = rand_t(&[1, 6], 42);
    let beta = rand_t(&[1, 6], 43);
    fd_ok(&x, |g, v| {
        let (ga, be) = (g.constant(&gamma), g.constant(&beta));
        let y = g.layer_norm(v, ga, be)?;
        weighted_sum(g, y, 5)
    });
    fd_ok(&gamma, |g, v| {
        let (xx, be) = (g.constant(&x), g.constant(&beta));
        let y = g.layer_norm(xx, v, be)?;
        weighted_sum(g, y, 5)
    });
    fd_ok(&x, |g, v| {
        let (ga, be) = (g.constant(&gamma), g.constant(&beta));
        let (y, _, _) = g.batch_norm_train(v, ga, be)?;
        weighted_sum(g, y, 6)
    });
    fd_ok(&beta, |g, v| {
        let (xx, ga) = (g.constant(&x), g.constant(&gamma));
        let (y, _, _) = g.batch_norm_train(xx, ga, v)?;
        weighted_sum(g, y, 6)
    });
}

#[test]
fn fd_convolution_and_row_maps() {
    let x = rand_t(&[16, 3], 51);
    let w = rand_t(&[27, 2], 52);
    let geom = ConvGeom::square(4, 4, 3, 3, 2, 1);
    fd_ok(&x, |g, v| { let wv = g.constant(&w); let y = g.conv2d(v, wv, None, geom)?; weighted_sum(g, y, 7) });
    fd_ok(&w, |g, v| { let xv = g.constant(&x); let y = g.conv2d(xv, v, None, geom)?; weighted_sum(g, y, 7) });
    let seq = rand_t(&[6, 3], 53);
    let w1 = rand_t(&[9, 4], 54);
    fd_ok(&seq, |g, v| { let wv = g.constant(&w1); let y = g.conv1d(v, wv, None, 3, 1)?; weighted_sum(g, y, 8) });
    fd_ok(&x, |g, v| { let y = g.mix_rows(v, Rc::new(RowMap::bilinear(4, 4, 7, 7)))?; weighted_sum(g, y, 9) });
    fd_ok(&x, |g, v| { let y = g.mix_rows(v, Rc::new(RowMap::avg_pool(4, 4, 2)))?; weighted_sum(g, y, 9) });
    fd_ok(&x, |g, v| { let y = g.gather_rows(v, &[3, 3, 0, 15])?; weighted_sum(g, y, 9) });
    fd_ok(&x, |g, v| { let a = g.slice_cols(v, 1, 3)?; let b = g.slice_rows(v, 2, 6)?; let b = g.reshape(b, 2, 6)?; let c = g.concat_rows(&[a, a])?; let c = g.reshape(c, 16, 4)?; let d = g.concat_cols(&[c, c])?; let s1 = weighted_sum(g, d, 10)?; let s2 = weighted_sum(g, b, 11)?; g.add(s1, s2) });
    let targets = [2usize, 0, 1, 2];
    let logits = rand_t(&[4, 3], 55);
    fd_ok(&logits, |g, v| g.cross_entropy(v, &targets));
}

#[test]
fn conv_matches_direct_loop_oracle() {
    let (h, w, c, co, k, s, p) = (5, 4, 2, 3, 3, 2, 1);
    let x = rand_t(&[h * w, c], 61);
    let wt = rand_t(&[k * k * c, co], 62);
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let (xv, wv) = (g.constant(&x), g.constant(&wt));
    let geom = ConvGeom::square(h, w, c, k, s, p);
    let y = g.conv2d(xv, wv, None, geom).unwrap();
    let (oh, ow) = (geom.out_h(), geom.out_w());
    assert_eq!((oh, ow), (3, 2));
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..co {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..c {
                            acc += x.at(iy as usize * w + ix as usize, ci) * wt.at((ky * k + kx) * c + ci, o);
                        }
                    }
                }
                assert!((g.value(y)[(oy * ow + ox) * co + o] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_c() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let l = g.constant(&Tensor::zeros(&[6, 5]));
    let ce = g.cross_entropy(l, &[0, 1, 2, 3, 4, 0]).unwrap();
    assert!((g.scalar(ce) - 5f64.ln()).abs() < 1e-15);
    assert!(matches!(g.cross_entropy(l, &[5, 0, 0, 0, 0, 0]), Err(crate::Error::Data(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let a = g.constant(&Tensor::full(&[1, 2], 1e308));
    let r = g.scale(a, 10.0);
    assert!(matches!(r, Err(crate::Error::NonFinite(_))));
}

#[test]
fn layer_norm_output_is_standardized() {
    let x = Tensor::randn(&[8, 32], 3.0, &mut Rng::new(71));
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let v = g.constant(&x);
    let (ga, be) = (g.constant(&Tensor::full(&[1, 32], 1.0)), g.constant(&Tensor::zeros(&[1, 32])));
    let y = g.layer_norm(v, ga, be).unwrap();
    for row in g.value(y).chunks(32) {
        let mean = row.iter().sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

// ----- parameters and optimizers -------------------------------------------

#[test]
fn frozen_parameters_are_bit_identical_after_steps() {
    let mut rng = Rng::new(81);
    let mut store = ParamStore::new();
    let a = Linear::new(&mut store, "a", 4, 4, 0.5, true, &mut rng);
    let b = Linear::new(&mut store, "b", 4, 2, 0.5, true, &mut rng);
    store.set_frozen_prefix("a.", true);
    let before: Vec<Tensor> = store.iter().map(|(_, p)| p.tensor.clone()).collect();
    let mut adam = Adam::new(&store);
    let x = rand_t(&[3, 4], 82);
    for _ in 0..5 {
        let mut acc = GradAccum::new(&store);
        {
            let mut g = Graph::new(&store, true);
            let xv = g.constant(&x);
            let h = a.forward(&mut g, xv).unwrap();
            let y = b.forward(&mut g, h).unwrap();
            let loss = weighted_sum(&mut g, y, 83).unwrap();
            let grads = g.backward(loss).unwrap();
            assert!(grads.param(a.weight).is_none(), "frozen parameter got a gradient");
            acc.add(&grads);
        }
        adam.step(&mut store, &acc, 1e-2);
    }
    for ((_, p), old) in store.iter().zip(&before) {
        if p.name.starts_with("a.") {
            assert_eq!(p.tensor.data(), old.data());
        } else {
            assert_ne!(p.tensor.data(), old.data());
        }
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::vector(&[3.0, -2.0]));
    let mut adam = Adam::new(&store);
    let sched = CosineSchedule { base: 0.1, total: 400 };
    for step in 0..400 {
        let mut acc = GradAccum::new(&store);
        {
            let mut g = Graph::new(&store, true);
            let x = g.param(id);
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq).unwrap();
            acc.add(&g.backward(loss).unwrap());
        }
        adam.step(&mut store, &acc, sched.lr(step));
    }
    for v in store.get(id).tensor.data() {
        assert!(v.abs() < 1e-2, "{v}");
    }
}

#[test]
fn batch_norm_running_statistics() {
    let mut rng = Rng::new(91);
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 3);
    let x = Tensor::randn(&[10, 3], 2.0, &mut rng);
    let updates = {
        let mut g = Graph::new(&store, true);
        let v = g.constant(&x);
        bn.forward(&mut g, v).unwrap();
        g.buffer_updates.clone()
    };
    apply_buffer_updates(&mut store, &updates);
    let mean0: f64 = (0..10).map(|i| x.at(i, 0)).sum::<f64>() / 10.0;
    let rm = store.buffer(bn.running_mean).data()[0];
    assert!((rm - 0.1 * mean0).abs() < 1e-12);
    // eval mode uses running statistics and is deterministic
    let run = |store: &ParamStore| {
        let mut g = Graph::new(store, false);
        let v = g.constant(&x);
        let y = bn.forward(&mut g, v).unwrap();
        g.tensor(y)
    };
    assert_eq!(run(&store), run(&store));
}

#[test]
fn cosine_schedule_endpoints() {
    let s = CosineSchedule { base: 1e-3, total: 100 };
    assert_eq!(s.lr(0), 1e-3);
    assert!(s.lr(100).abs() < 1e-18);
    assert!((s.lr(50) - 5e-4).abs() < 1e-15);
}

#[test]
fn gradcheck_on_parameters() {
    let mut rng = Rng::new(101);
    let mut store = ParamStore::new();
    let l = Linear::new(&mut store, "l", 3, 2, 0.7, true, &mut rng);
    let x = rand_t(&[4, 3], 102);
    let coords: Vec<(ParamId, usize)> = (0..6).map(|k| (l.weight, k)).chain([(l.bias.unwrap(), 1)]).collect();
    let probes = check_params(&store, false, &coords, |g| {
        let xv = g.constant(&x);
        let y = l.forward(g, xv)?;
        let y = g.gelu(y)?;
        weighted_sum(g, y, 103)
    })
    .unwrap();
    assert!(max_rel_err(&probes) < 1e-6);
}

// ----- properties ------------------------------------------------------------

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12), shift in -100.0f64..100.0) {
        let x = Tensor::new(&[3, 4], vals.clone()).unwrap();
        let s = softmax(&x, 1).unwrap();
        for i in 0..3 {
            let sum: f64 = s.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(s.row(i).iter().all(|v| *v >= 0.0));
        }
        let shifted = Tensor::new(&[3, 4], vals.iter().map(|v| v + shift).collect()).unwrap();
        let s2 = softmax(&shifted, 1).unwrap();
        prop_assert!(s.max_abs_diff(&s2) < 1e-9);
    }

    #[test]
    fn top_k_keeps_exactly_k(vals in proptest::collection::vec(-5.0f64..5.0, 20), k in 1usize..=5) {
        let x = Tensor::new(&[4, 5], vals).unwrap();
        let t = top_k_mask(&x, k).unwrap();
        for i in 0..4 {
            let kept = t.row(i).iter().filter(|v| **v != NEG_SENTINEL).count();
            prop_assert_eq!(kept, k);
            let min_kept = t.row(i).iter().copied().filter(|v| *v != NEG_SENTINEL).fold(f64::INFINITY, f64::min);
            for (j, v) in t.row(i).iter().enumerate() {
                if *v == NEG_SENTINEL {
                    prop_assert!(x.at(i, j) <= min_kept);
                }
            }
        }
    }

    #[test]
    fn random_op_chains_pass_gradient_check(seed in 0u64..1000) {
        let x = rand_t(&[4, 4], seed);
        let w = rand_t(&[4, 4], seed + 7);
        let gamma = rand_t(&[1, 4], seed + 8);
        let probes = check_input(&x, |g, v| {
            let wv = g.constant(&w);
            let y = g.matmul(v, wv)?;
            let y = g.gelu(y)?;
            let ga = g.constant(&gamma);
            let z = g.constant(&Tensor::zeros(&[1, 4]));
            let y = g.layer_norm(y, ga, z)?;
            let y = g.softmax(y)?;
            weighted_sum(g, y, seed + 9)
        }).unwrap();
        prop_assert!(max_rel_err(&probes) < 1e-4);
    }
}

#[test]
fn window_mask_blocks() {
    let k = window_mask(4, 2);
    // (0,0) and (1,1) share a window; (0,0) and (0,2) do not
    assert!(k[0 * 16 + 5]);
    assert!(!k[0 * 16 + 2]);
    let full = window_mask(4, 4);
    assert!(full.iter().all(|v| *v));
}
