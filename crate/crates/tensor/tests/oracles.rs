use echodepth_tensor::{BatchNormMode, Graph, RunningStats, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sextuple-loop direct cross-correlation.
fn direct_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [bn, cin, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [cout, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[bn, cout, ho, wo]);
    for n in 0..bn {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * cin + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out.data_mut()[((n * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv2d(xv, wv, Some(bv), (stride, stride), (pad, pad)).unwrap();
    g.value(y).clone()
}

fn conv_t(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut g = Graph::new();
    let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
    let y = g.conv_transpose2d(xv, wv, None, (stride, stride), (pad, pad)).unwrap();
    g.value(y).clone()
}

#[test]
fn conv2d_matches_direct_loop_on_reference_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::uniform(&[2, 3, 8, 8], 1.0, &mut rng);
    let w = Tensor::uniform(&[4, 3, 3, 3], 1.0, &mut rng);
    let b = Tensor::uniform(&[4], 1.0, &mut rng);
    let fast = conv(&x, &w, &b, 2, 1);
    assert_eq!(fast.shape(), &[2, 4, 4, 4]);
    assert!(max_abs_diff(&fast, &direct_conv2d(&x, &w, &b, 2, 1)) <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_direct_loop(
        seed in any::<u64>(),
        b in 1usize..=2, cin in 1usize..=4, cout in 1usize..=4,
        k in 1usize..=4, s in 1usize..=3, p in 0usize..=2,
        h in 4usize..=9, w in 4usize..=9,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[b, cin, h, w], 1.0, &mut rng);
        let wt = Tensor::uniform(&[cout, cin, k, k], 1.0, &mut rng);
        let bias = Tensor::uniform(&[cout], 1.0, &mut rng);
        let d = max_abs_diff(&conv(&x, &wt, &bias, s, p), &direct_conv2d(&x, &wt, &bias, s, p));
        prop_assert!(d <= 1e-12, "diff {d}");
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv(
        seed in any::<u64>(),
        cin in 1usize..=3, cout in 1usize..=3,
        k in 1usize..=4, s in 1usize..=3, h in 1usize..=5, w in 1usize..=5,
    ) {
        let p = (k - 1) / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // conv_transpose maps [B,Cin,h,w] -> [B,Cout,H',W'], weight [Cin,Cout,k,k];
        // its adjoint is conv2d with the same weight read as [Cout_conv=Cin, Cin_conv=Cout].
        let y = Tensor::uniform(&[2, cin, h, w], 1.0, &mut rng);
        let wt = Tensor::uniform(&[cin, cout, k, k], 1.0, &mut rng);
        let up = conv_t(&y, &wt, s, p);
        let x = Tensor::uniform(up.shape(), 1.0, &mut rng);
        let down = conv(&x, &wt, &Tensor::zeros(&[cin]), s, p);
        prop_assert_eq!(down.shape(), y.shape());
        let lhs = down.dot(&y);
        let rhs = x.dot(&up);
        prop_assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_transpose_input_gradient_is_conv_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::uniform(&[1, 3, 3, 3], 1.0, &mut rng);
    let w = Tensor::uniform(&[3, 2, 4, 4], 1.0, &mut rng);
    let upstream = Tensor::uniform(&[1, 2, 6, 6], 1.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let wv = g.input(w.clone());
    let y = g.conv_transpose2d(xv, wv, None, (2, 2), (1, 1)).unwrap();
    let u = g.input(upstream.clone());
    let prod = g.mul(y, u).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let expected = conv(&upstream, &w, &Tensor::zeros(&[3]), 2, 1);
    assert!(max_abs_diff(g.grad(xv).unwrap(), &expected) <= 1e-12);
}

#[test]
fn batch_norm_output_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(&[4, 2, 3, 3], |_| rng.gen_range(-3.0..5.0));
    let mut g = Graph::new();
    let xv = g.input(x);
    let gamma = g.input(Tensor::ones(&[2]));
    let beta = g.input(Tensor::zeros(&[2]));
    let mut stats = RunningStats::new(2);
    let mode = BatchNormMode {
        training: true,
        eps: 1e-12,
        momentum: 0.1,
    };
    let y = g.batch_norm(xv, gamma, beta, &mut stats, mode).unwrap();
    let out = g.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4).flat_map(|b| out[(b * 2 + c) * 9..(b * 2 + c + 1) * 9].to_vec()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 1e-12, "mean {mean}");
        assert!((std - 1.0).abs() <= 1e-6, "std {std}");
    }
}

#[test]
fn identical_seeds_give_identical_arrays() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::uniform(&[2, 3, 9, 9], 1.0, &mut rng);
        let w = Tensor::uniform(&[4, 3, 3, 3], 0.5, &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x), g.param(w));
        let y = g.conv2d(xv, wv, None, (2, 2), (1, 1)).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        (g.value(y).clone(), g.grad(wv).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
