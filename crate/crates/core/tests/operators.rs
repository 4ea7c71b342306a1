//! Learned degradation operators against dense-matrix and finite-difference oracles.

use panfuse_autograd::gradcheck::{directional_derivative, relative_error_scalar};
use panfuse_autograd::{Graph, ParamStore};
use panfuse_core::degradation::{FixedDegradeOracle, LearnedDownOp, LearnedUpOp};
use panfuse_core::wald::DegradationConfig;
use panfuse_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Columns are the operator applied to each basis vector.
fn dense_matrix(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, in_shape: &[usize]) -> Vec<Vec<f64>> {
    let n: usize = in_shape.iter().product();
    (0..n)
        .map(|j| {
            let e = Tensor::from_fn(in_shape, |i| if i == j { 1.0 } else { 0.0 });
            f(&e).into_data()
        })
        .collect()
}

fn matvec(cols: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols[0].len()];
    for (col, xv) in cols.iter().zip(x) {
        for (o, c) in out.iter_mut().zip(col) {
            *o += c * xv;
        }
    }
    out
}

#[test]
fn down_matches_dense_matrix() {
    for s in [2, 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(s as u64);
        let mut store = ParamStore::<f64>::new();
        let op = LearnedDownOp::random(&mut store, &mut rng, "d", 1, s);
        let cols = dense_matrix(|e| op.apply(&store, e).unwrap(), &[1, 8, 8]);
        for _ in 0..5 {
            let x = random(&mut rng, &[1, 8, 8]);
            let y = op.apply(&store, &x).unwrap();
            assert_eq!(y.shape(), &[1, 8 / s, 8 / s]);
            for (a, b) in y.data().iter().zip(matvec(&cols, x.data())) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn up_matches_dense_matrix() {
    for s in [2, 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + s as u64);
        let mut store = ParamStore::<f64>::new();
        let op = LearnedUpOp::random(&mut store, &mut rng, "u", 1, s);
        let m = 8 / s;
        let cols = dense_matrix(|e| op.apply(&store, e).unwrap(), &[1, m, m]);
        for _ in 0..5 {
            let x = random(&mut rng, &[1, m, m]);
            let y = op.apply(&store, &x).unwrap();
            assert_eq!(y.shape(), &[1, 8, 8]);
            for (a, b) in y.data().iter().zip(matvec(&cols, x.data())) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn ops_are_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let down = LearnedDownOp::random(&mut store, &mut rng, "d", 3, 4);
    let up = LearnedUpOp::random(&mut store, &mut rng, "u", 3, 4);
    for _ in 0..10 {
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let x = random(&mut rng, &[3, 16, 16]);
        let y = random(&mut rng, &[3, 16, 16]);
        let combo = x.zip_map(&y, |p, q| a * p + b * q);
        let lhs = down.apply(&store, &combo).unwrap();
        let rhs = down.apply(&store, &x).unwrap().zip_map(&down.apply(&store, &y).unwrap(), |p, q| a * p + b * q);
        assert!(lhs.zip_map(&rhs, |p, q| p - q).max_abs() < 1e-5);

        let (xs, ys) = (random(&mut rng, &[3, 4, 4]), random(&mut rng, &[3, 4, 4]));
        let combo = xs.zip_map(&ys, |p, q| a * p + b * q);
        let lhs = up.apply(&store, &combo).unwrap();
        let rhs = up.apply(&store, &xs).unwrap().zip_map(&up.apply(&store, &ys).unwrap(), |p, q| a * p + b * q);
        assert!(lhs.zip_map(&rhs, |p, q| p - q).max_abs() < 1e-5);
    }
}

#[test]
fn input_jvp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let down = LearnedDownOp::random(&mut store, &mut rng, "d", 2, 2);
    let up = LearnedUpOp::random(&mut store, &mut rng, "u", 2, 2);

    // down: probe the output with a fixed random cotangent
    let x = random(&mut rng, &[2, 8, 8]);
    let dir = random(&mut rng, &[2, 8, 8]);
    let probe = random(&mut rng, &[2, 4, 4]);
    let numeric = directional_derivative(|t| down.apply(&store, t).unwrap().dot(&probe), &x, &dir, 1e-5);
    let mut g = Graph::new();
    g.freeze(&store);
    let xv = g.input_with_grad(x.clone());
    let y = down.forward(&mut g, &store, xv).unwrap();
    let p = g.input(probe.clone());
    let prod = g.mul(y, p);
    let s = g.sum(prod);
    let analytic = g.backward(s).get(xv).unwrap().dot(&dir);
    assert!(relative_error_scalar(analytic, numeric) < 1e-3);

    let x = random(&mut rng, &[2, 4, 4]);
    let dir = random(&mut rng, &[2, 4, 4]);
    let probe = random(&mut rng, &[2, 8, 8]);
    let numeric = directional_derivative(|t| up.apply(&store, t).unwrap().dot(&probe), &x, &dir, 1e-5);
    let mut g = Graph::new();
    g.freeze(&store);
    let xv = g.input_with_grad(x.clone());
    let y = up.forward(&mut g, &store, xv).unwrap();
    let p = g.input(probe.clone());
    let prod = g.mul(y, p);
    let s = g.sum(prod);
    let analytic = g.backward(s).get(xv).unwrap().dot(&dir);
    assert!(relative_error_scalar(analytic, numeric) < 1e-3);
}

#[test]
fn weight_jvp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let down = LearnedDownOp::random(&mut store, &mut rng, "d", 2, 2);
    let x = random(&mut rng, &[2, 8, 8]);
    let probe = random(&mut rng, &[2, 4, 4]);

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = down.forward(&mut g, &store, xv).unwrap();
    let p = g.input(probe.clone());
    let prod = g.mul(y, p);
    let s = g.sum(prod);
    let grads = g.backward(s).for_store(&store);

    for id in [down.blur.weight, down.sample.weight] {
        let w0 = store.get(id).clone();
        let dir = random(&mut rng, w0.shape());
        let mut scratch = store.clone();
        let numeric = directional_derivative(
            |w| {
                *scratch.get_mut(id) = w.clone();
                down.apply(&scratch, &x).unwrap().dot(&probe)
            },
            &w0,
            &dir,
            1e-5,
        );
        let analytic = grads[id.0].as_ref().unwrap().dot(&dir);
        assert!(relative_error_scalar(analytic, numeric) < 1e-3, "{analytic} vs {numeric}");
    }
}

#[test]
fn oracle_impulse_reproduces_kernel_footprint() {
    let cfg = DegradationConfig::for_ratio(2);
    let taps = cfg.kernel();
    let oracle = FixedDegradeOracle::new(cfg.clone());
    // impulse at (4, 6) of a 16x16 plane; decimated output sample (2, 3) sits on it
    let x = Tensor::<f64>::from_fn(&[1, 16, 16], |i| if i == 4 * 16 + 6 { 1.0 } else { 0.0 });
    let y = oracle.apply(&x).unwrap();
    let half = (taps.len() / 2) as isize;
    for oy in 0..8isize {
        for ox in 0..8isize {
            let (dy, dx) = (4 - 2 * oy, 6 - 2 * ox);
            let expect = if dy.abs() <= half && dx.abs() <= half {
                taps[(dy + half) as usize] * taps[(dx + half) as usize]
            } else {
                0.0
            };
            assert!((y.data()[(oy * 8 + ox) as usize] - expect).abs() < 1e-12);
        }
    }
    let flat = oracle.apply(&Tensor::<f64>::full(&[2, 8, 8], 0.7)).unwrap();
    assert!(flat.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
}
