//! Analytic gradients against central finite differences, h = 1e-4, over
//! at least 20 randomized shapes per op.

use echodepth_tensor::gradcheck::{check_gradients, weighted_sum};
use echodepth_tensor::{Activation, BatchNormMode, Graph, Result, RunningStats, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;
const TRIALS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Values bounded away from zero so kinks sit far outside the FD stencil.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn assert_grads<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = check_gradients(inputs, H, None, f).unwrap();
    assert!(
        report.max_rel_err <= TOL,
        "{name}: max relative error {:.3e} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn conv2d_gradients() {
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.gen_range(1..3);
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let k = rng.gen_range(1..4);
        let s = rng.gen_range(1..3);
        let p = rng.gen_range(0..2);
        let h = rng.gen_range(k.max(2)..7);
        let w = rng.gen_range(k.max(2)..7);
        let inputs = [
            rand_tensor(&mut rng, &[b, cin, h, w]),
            rand_tensor(&mut rng, &[cout, cin, k, k]),
            rand_tensor(&mut rng, &[cout]),
        ];
        assert_grads("conv2d", &inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), (s, s), (p, p))?;
            weighted_sum(g, y, seed)
        });
    }
}

#[test]
fn conv_transpose2d_gradients() {
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let b = rng.gen_range(1..3);
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let k = rng.gen_range(2..5);
        let s = rng.gen_range(1..3);
        // k > 2p keeps the output non-empty for every input size
        let p = rng.gen_range(0..=(k - 1) / 2);
        let h = rng.gen_range(1..5);
        let w = rng.gen_range(1..5);
        let inputs = [
            rand_tensor(&mut rng, &[b, cin, h, w]),
            rand_tensor(&mut rng, &[cin, cout, k, k]),
            rand_tensor(&mut rng, &[cout]),
        ];
        assert_grads("conv_transpose2d", &inputs, |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), (s, s), (p, p))?;
            weighted_sum(g, y, seed)
        });
    }
}

#[test]
fn batch_norm_gradients_train_and_eval() {
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let b = rng.gen_range(1..4);
        let c = rng.gen_range(1..4);
        let h = rng.gen_range(1..4);
        let w = rng.gen_range(2..4);
        let training = seed % 2 == 0;
        let inputs = [
            rand_tensor(&mut rng, &[b, c, h, w]),
            rand_tensor(&mut rng, &[c]),
            rand_tensor(&mut rng, &[c]),
        ];
        let stats = RunningStats {
            mean: (0..c).map(|i| 0.1 * i as f64).collect(),
            var: (0..c).map(|i| 0.5 + 0.2 * i as f64).collect(),
        };
        assert_grads("batch_norm", &inputs, |g, v| {
            let mut st = stats.clone();
            let mode = BatchNormMode {
                training,
                ..BatchNormMode::default()
            };
            let y = g.batch_norm(v[0], v[1], v[2], &mut st, mode)?;
            weighted_sum(g, y, seed)
        });
    }
}

#[test]
fn activation_gradients() {
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5)];
        let x = rand_away_from_zero(&mut rng, &shape);
        for kind in [Activation::Relu, Activation::LeakyRelu(0.2), Activation::Sigmoid] {
            assert_grads("activation", std::slice::from_ref(&x), |g, v| {
                let y = g.activation(v[0], kind);
                weighted_sum(g, y, seed)
            });
        }
    }
}

#[test]
fn elementwise_and_reduction_gradients() {
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let shape = [rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
        let inputs = [rand_tensor(&mut rng, &shape), rand_tensor(&mut rng, &shape)];
        assert_grads("add/sub/mul/scale", &inputs, |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            let m = g.scale(m, -1.5);
            weighted_sum(g, m, seed)
        });
        assert_grads("concat", &inputs, |g, v| {
            let c = g.concat(&[v[0], v[1], v[0]])?;
            weighted_sum(g, c, seed)
        });
        assert_grads("global_avg_pool", &inputs[..1], |g, v| {
            let p = g.global_avg_pool(v[0])?;
            weighted_sum(g, p, seed)
        });
        let (h, w) = (shape[2], shape[3]);
        let target = (rng.gen_range(1..=h), rng.gen_range(1..=w));
        assert_grads("adaptive_avg_pool2d", &inputs[..1], |g, v| {
            let p = g.adaptive_avg_pool2d(v[0], target)?;
            weighted_sum(g, p, seed)
        });
        let vec_in = rand_tensor(&mut rng, &[shape[0], shape[1]]);
        assert_grads("broadcast_spatial/reshape", &[vec_in], |g, v| {
            let b = g.broadcast_spatial(v[0], 2, 3)?;
            let n = g.value(b).numel();
            let r = g.reshape(b, &[n])?;
            weighted_sum(g, r, seed)
        });
    }
}

#[test]
fn bilinear_fusion_gradients() {
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let b = rng.gen_range(1..3);
        let n = rng.gen_range(1..5);
        let m = rng.gen_range(1..5);
        let k = rng.gen_range(1..4);
        let (h, w) = (rng.gen_range(1..3), rng.gen_range(1..3));
        let inputs = [
            rand_tensor(&mut rng, &[b, n]),
            rand_tensor(&mut rng, &[k, n, m]),
            rand_tensor(&mut rng, &[b, m, h, w]),
            rand_tensor(&mut rng, &[k]),
        ];
        assert_grads("bilinear_map", &inputs, |g, v| {
            let y = g.bilinear_map(v[0], v[1], v[2], Some(v[3]))?;
            weighted_sum(g, y, seed)
        });
        let square = [
            rand_tensor(&mut rng, &[b, m]),
            inputs[2].clone(),
        ];
        assert_grads("channel_dot", &square, |g, v| {
            let y = g.channel_dot(v[0], v[1])?;
            weighted_sum(g, y, seed)
        });
        let mv = [
            rand_tensor(&mut rng, &[n]),
            rand_tensor(&mut rng, &[n, m]),
            rand_tensor(&mut rng, &[m]),
        ];
        assert_grads("matvec_bilinear", &mv, |g, v| g.matvec_bilinear(v[0], v[1], v[2]));
    }
}

#[test]
fn combine_and_loss_gradients() {
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let shape = [rng.gen_range(1..3), 1, rng.gen_range(1..4), rng.gen_range(2..4)];
        let alpha = Tensor::from_fn(&shape, |i| 0.1 + 0.8 * ((i as f64 * 0.731).sin().abs()));
        let inputs = [alpha, rand_tensor(&mut rng, &shape), rand_tensor(&mut rng, &shape)];
        assert_grads("lerp", &inputs, |g, v| {
            let y = g.lerp(v[0], v[1], v[2])?;
            weighted_sum(g, y, seed)
        });

        let pred = rand_tensor(&mut rng, &shape);
        // offsets bounded away from zero keep |·| differentiable under the stencil
        let target = Tensor::from_fn(&shape, |i| pred.data()[i] + if i % 2 == 0 { 0.3 } else { -0.7 });
        let mask: Vec<bool> = (0..pred.numel()).map(|i| i % 3 != 1).collect();
        assert_grads("log_l1_loss", &[pred], |g, v| g.log_l1_loss(v[0], &target, &mask));
    }
}
