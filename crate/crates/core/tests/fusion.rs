use echodepth_core::fusion::*;
use echodepth_core::params::{seeded_rng, Builder, Ctx, ParamStore};
use echodepth_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn fusion_store(n: usize, k: usize) -> (ParamStore, FusionParams) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(1);
    let p = FusionParams::new(&mut Builder::new(&mut store, &mut rng), n, k);
    (store, p)
}

#[test]
fn identity_bilinear_equals_dot_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let (b, n) = (rng.gen_range(1..4), rng.gen_range(1..9));
        let (h, w) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let (mut store, p) = fusion_store(n, 1);
        let eye = Tensor::from_fn(&[1, n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        for (a, bias) in [(p.a_img, p.b_img), (p.a_mat, p.b_mat)] {
            *store.value_mut(a) = eye.clone();
            *store.value_mut(bias) = Tensor::zeros(&[1]);
        }
        let (fe, fi, fm) = (rand_t(&mut rng, &[b, n]), rand_t(&mut rng, &[b, n, h, w]), rand_t(&mut rng, &[b, n, h, w]));
        let mut ctx = Ctx::new(&store, false);
        let (e, i, m) = (ctx.g.input(fe), ctx.g.input(fi), ctx.g.input(fm));
        let bil = bilinear_fusion(&mut ctx, e, i, m, &p).unwrap();
        let dot = dot_fusion(&mut ctx, e, i, m).unwrap();
        assert_eq!(ctx.g.value(bil.f_star), ctx.g.value(dot.f_star));
        assert_eq!(ctx.g.shape(bil.f_star), &[b, 2, h, w]);
    }
}

#[test]
fn zero_echo_vector_gives_the_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, k) = (6, 3);
    let (store, p) = fusion_store(n, k);
    let mut ctx = Ctx::new(&store, false);
    let e = ctx.g.input(Tensor::zeros(&[2, n]));
    let i = ctx.g.input(rand_t(&mut rng, &[2, n, 3, 3]));
    let m = ctx.g.input(rand_t(&mut rng, &[2, n, 3, 3]));
    let out = bilinear_fusion(&mut ctx, e, i, m, &p).unwrap();
    let bias = store.value(p.b_img).data();
    for (j, v) in ctx.g.value(out.f_img).data().iter().enumerate() {
        assert_eq!(*v, bias[(j / 9) % k]);
    }
}

#[test]
fn bilinear_response_is_linear_in_echo_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, k) = (5, 4);
    let (store, p) = fusion_store(n, k);
    let fe = rand_t(&mut rng, &[1, n]);
    let fi = rand_t(&mut rng, &[1, n, 2, 3]);
    let fm = rand_t(&mut rng, &[1, n, 2, 3]);
    let run = |scale: f64| {
        let mut ctx = Ctx::new(&store, false);
        let e = ctx.g.input(fe.map(|v| v * scale));
        let (i, m) = (ctx.g.input(fi.clone()), ctx.g.input(fm.clone()));
        let out = bilinear_fusion(&mut ctx, e, i, m, &p).unwrap();
        ctx.g.value(out.f_mat).clone()
    };
    let bias = store.value(p.b_mat).data().to_vec();
    let (one, c) = (run(1.0), run(-2.5));
    for (j, (a, b)) in one.data().iter().zip(c.data()).enumerate() {
        let bk = bias[j / 6];
        assert!((-2.5 * (a - bk) - (b - bk)).abs() < 1e-12);
    }
}

#[test]
fn blend_endpoints_are_exact_and_interior_is_convex() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = ParamStore::new();
    let de = rand_t(&mut rng, &[2, 1, 4, 4]).map(|v| v * 5.0 + 5.0);
    let di = rand_t(&mut rng, &[2, 1, 4, 4]).map(|v| v * 5.0 + 5.0);
    let mut ctx = Ctx::new(&store, false);
    let (e, i) = (ctx.g.input(de.clone()), ctx.g.input(di.clone()));
    let one = ctx.g.input(Tensor::full(&[2, 1, 4, 4], 1.0));
    let zero = ctx.g.input(Tensor::zeros(&[2, 1, 4, 4]));
    let a = combine_depth(&mut ctx, one, e, i).unwrap();
    let b = combine_depth(&mut ctx, zero, e, i).unwrap();
    assert_eq!(ctx.g.value(a), &de);
    assert_eq!(ctx.g.value(b), &di);
    let alpha = ctx.g.input(rand_t(&mut rng, &[2, 1, 4, 4]).map(|v| 0.5 * v + 0.5));
    let mix = combine_depth(&mut ctx, alpha, e, i).unwrap();
    for ((m, x), y) in ctx.g.value(mix).data().iter().zip(de.data()).zip(di.data()) {
        assert!(*m >= x.min(*y) - 1e-12 && *m <= x.max(*y) + 1e-12);
    }
}

#[test]
fn masked_pixels_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let mut brng = seeded_rng(0);
    let pred_id = Builder::new(&mut store, &mut brng).weight("pred", &[2, 1, 3, 3], 1);
    *store.value_mut(pred_id) = rand_t(&mut rng, &[2, 1, 3, 3]).map(|v| v + 3.0);
    let target = rand_t(&mut rng, &[2, 1, 3, 3]).map(|v| v + 3.0);
    let mask: Vec<bool> = (0..18).map(|i| i % 3 != 0).collect();
    let mut ctx = Ctx::new(&store, true);
    let pred = ctx.p(pred_id);
    let loss = log_l1_loss(&mut ctx, pred, &target, &mask).unwrap();
    ctx.g.backward(loss).unwrap();
    let grads = ctx.gradients();
    let g = &grads.iter().find(|(id, _)| *id == pred_id).unwrap().1;
    for (j, &m) in mask.iter().enumerate() {
        if m {
            assert!(g.data()[j] != 0.0);
        } else {
            assert_eq!(g.data()[j], 0.0);
        }
    }
}

#[test]
fn log_l1_worked_examples() {
    let store = ParamStore::new();
    let mut ctx = Ctx::new(&store, false);
    let target = Tensor::full(&[1, 1, 2, 2], 2.0);
    let e = std::f64::consts::E;
    let pred = ctx.g.input(Tensor::new(&[1, 1, 2, 2], vec![2.0 + (e - 1.0), 2.0 - (e - 1.0), 2.0, 9.0]).unwrap());
    let first_two = log_l1_loss(&mut ctx, pred, &target, &[true, true, false, false]).unwrap();
    assert!((ctx.g.value(first_two).item() - 1.0).abs() < 1e-12);
    let half = log_l1_loss(&mut ctx, pred, &target, &[true, false, true, false]).unwrap();
    assert!((ctx.g.value(half).item() - 0.5).abs() < 1e-12);
    assert!(log_l1_loss(&mut ctx, pred, &target, &[false; 4]).is_err());
}
