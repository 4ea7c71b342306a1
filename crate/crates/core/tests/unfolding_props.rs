//! Shape, descent and gradient properties of the unfolded network.

use panfuse_autograd::gradcheck::{directional_derivative, relative_error_scalar};
use panfuse_autograd::Graph;
use panfuse_core::degradation::{DegradeOp, FixedDegradeOracle};
use panfuse_core::raster::{MsImage, PanImage};
use panfuse_core::unfolding::{f2_gradient, f2_objective, hqs_h_step, UnfoldingConfig, UnfoldingModel};
use panfuse_core::wald::DegradationConfig;
use panfuse_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

fn small_config(bands: usize) -> UnfoldingConfig {
    UnfoldingConfig {
        width: 8,
        encoder_blocks: 2,
        stages: 2,
        lambda: 0.0,
        ..UnfoldingConfig::new(bands, 4)
    }
}

/// Replaces every parameter with small random values so no path is trivially zero.
fn perturb(model: &mut UnfoldingModel<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

fn half_sq_residual(op: &FixedDegradeOracle, h: &Tensor<f64>, l: &Tensor<f64>) -> f64 {
    let ah = op.down(h).unwrap();
    0.5 * ah.data().iter().zip(l.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
}

#[test]
fn h_step_gradient_matches_objective_on_20_instances() {
    let op = FixedDegradeOracle::new(DegradationConfig::for_ratio(2));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let h = random(&mut rng, &[2, 8, 8]);
        let u = random(&mut rng, &[2, 8, 8]);
        let l = random(&mut rng, &[2, 4, 4]);
        let eta = rng.random_range(0.05..1.0);
        let dir = Tensor::from_fn(&[2, 8, 8], |_| rng.random_range(-1.0..1.0));
        let numeric = directional_derivative(|t| f2_objective(t, &u, &l, eta, &op).unwrap(), &h, &dir, 1e-5);
        let analytic = f2_gradient(&h, &u, &l, eta, &op).unwrap().dot(&dir);
        assert!(relative_error_scalar(analytic, numeric) < 1e-3);
    }
}

#[test]
fn identity_prox_descends_monotonically() {
    let op = FixedDegradeOracle::new(DegradationConfig::for_ratio(2));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let mut h = random(&mut rng, &[2, 8, 8]);
        let l = random(&mut rng, &[2, 4, 4]);
        let mut prev = half_sq_residual(&op, &h, &l);
        for _ in 0..10 {
            let u = h.clone();
            h = hqs_h_step(&h, &u, &l, 0.1, 0.1, &op).unwrap();
            let now = half_sq_residual(&op, &h, &l);
            assert!(now < prev, "{now} >= {prev}");
            prev = now;
        }
    }
}

#[test]
fn pan_features_gradient() {
    let mut model = UnfoldingModel::<f64>::new(small_config(2), 3).unwrap();
    perturb(&mut model, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pan = random(&mut rng, &[1, 8, 8]);
    let dir = Tensor::from_fn(&[1, 8, 8], |_| rng.random_range(-1.0..1.0));
    let probe = Tensor::from_fn(&[8, 8, 8], |_| rng.random_range(-1.0..1.0));
    let eval = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        g.freeze(&model.store);
        let p = g.input(t.clone());
        let f = model.pan_features(&mut g, p);
        g.value(f).dot(&probe)
    };
    let numeric = directional_derivative(eval, &pan, &dir, 1e-5);
    let mut g = Graph::new();
    g.freeze(&model.store);
    let p = g.input_with_grad(pan.clone());
    let f = model.pan_features(&mut g, p);
    let q = g.input(probe.clone());
    let prod = g.mul(f, q);
    let s = g.sum(prod);
    let analytic = g.backward(s).get(p).unwrap().dot(&dir);
    assert!(relative_error_scalar(analytic, numeric) < 1e-3, "{analytic} vs {numeric}");

    let zero = UnfoldingModel::<f64>::new(small_config(2), 3).unwrap();
    let mut g = Graph::new();
    g.freeze(&zero.store);
    let p = g.input(Tensor::zeros(&[1, 8, 8]));
    let f = zero.pan_features(&mut g, p);
    assert_eq!(g.shape(f), &[8, 8, 8]);
}

#[test]
fn unet_prox_gradient() {
    let mut model = UnfoldingModel::<f64>::new(small_config(2), 4).unwrap();
    perturb(&mut model, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = random(&mut rng, &[2, 8, 8]);
    let pan = random(&mut rng, &[1, 8, 8]);
    let dir = Tensor::from_fn(&[2, 8, 8], |_| rng.random_range(-1.0..1.0));
    let probe = Tensor::from_fn(&[2, 8, 8], |_| rng.random_range(-1.0..1.0));
    let eval = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        g.freeze(&model.store);
        let hv = g.input(t.clone());
        let p = g.input(pan.clone());
        let fp = model.pan_features(&mut g, p);
        let u = model.unet_prox(&mut g, hv, fp, 1).unwrap();
        g.value(u).dot(&probe)
    };
    let numeric = directional_derivative(eval, &h, &dir, 1e-5);
    let mut g = Graph::new();
    g.freeze(&model.store);
    let hv = g.input_with_grad(h.clone());
    let p = g.input(pan.clone());
    let fp = model.pan_features(&mut g, p);
    let u = model.unet_prox(&mut g, hv, fp, 1).unwrap();
    let q = g.input(probe.clone());
    let prod = g.mul(u, q);
    let s = g.sum(prod);
    let analytic = g.backward(s).get(hv).unwrap().dot(&dir);
    assert!(relative_error_scalar(analytic, numeric) < 1e-3, "{analytic} vs {numeric}");
}

#[test]
fn full_scale_geometry_forward() {
    let config = UnfoldingConfig { width: 8, encoder_blocks: 2, ..UnfoldingConfig::new(4, 4) };
    assert_eq!(config.stages, 4);
    let model = UnfoldingModel::<f32>::new(config, 5).unwrap();
    let lrms = MsImage::<f32>::constant(32, 32, 4, 0.4).unwrap();
    let pan = PanImage::<f32>::constant(128, 128, 0.4).unwrap();
    let out = model.fuse(&lrms, &pan).unwrap();
    assert_eq!(out.tensor().shape(), &[4, 128, 128]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn output_shape_matches_gt(m in 8usize..=32, n in 8usize..=32, ci in 0usize..3, seed in 0u64..100) {
        let (m, n, c) = (m * 4, n * 4, [2, 4, 8][ci]);
        let model = UnfoldingModel::<f32>::new(small_config(c), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lrms = MsImage::new(Tensor::from_fn(&[c, m / 4, n / 4], |_| rng.random_range(0.0f32..1.0))).unwrap();
        let pan = PanImage::new(Tensor::from_fn(&[1, m, n], |_| rng.random_range(0.0f32..1.0))).unwrap();
        let out = model.fuse(&lrms, &pan).unwrap();
        prop_assert_eq!(out.tensor().shape(), &[c, m, n]);
    }
}
