//! Every graph op against central finite differences in f64.

use std::rc::Rc;

use panfuse_autograd::gradcheck::{numeric_gradient, relative_error};
use panfuse_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Builds `loss = sum(op(x) * probe)` and compares d loss / d x.
fn check(shape: &[usize], seed: u64, op: impl Fn(&mut Graph<f64>, Var) -> Var) {
    let x0 = random(shape, seed);
    let build = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.input_with_grad(x.clone());
        let y = op(&mut g, xv);
        let probe = g.input(random(g.shape(y), seed + 1000));
        let p = g.mul(y, probe);
        let loss = g.sum(p);
        (g, xv, loss)
    };
    let (g, xv, loss) = build(&x0);
    let analytic = g.backward(loss).get(xv).cloned().expect("gradient reaches input");
    let numeric = numeric_gradient(
        |x| {
            let (g, _, loss) = build(x);
            g.value(loss).item()
        },
        &x0,
        1e-6,
    );
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn elementwise_ops() {
    check(&[3, 4], 1, |g, x| g.relu(x));
    check(&[3, 4], 2, |g, x| g.leaky_relu(x, 0.2));
    check(&[3, 4], 3, |g, x| g.gelu(x));
    check(&[3, 4], 4, |g, x| g.softplus(x));
    check(&[3, 4], 5, |g, x| g.sin(x));
    check(&[3, 4], 6, |g, x| g.cos(x));
    check(&[3, 4], 7, |g, x| g.square(x));
    check(&[3, 4], 8, |g, x| {
        let s = g.square(x);
        let s = g.add_const(s, 0.5);
        g.sqrt(s)
    });
    check(&[3, 4], 9, |g, x| g.scale(x, -1.7));
    check(&[3, 4], 10, |g, x| g.neg(x));
}

#[test]
fn binary_ops() {
    check(&[2, 5], 11, |g, x| {
        let c = g.input(random(&[2, 5], 99));
        let a = g.mul(x, c);
        let b = g.sub(a, x);
        g.add(b, x)
    });
    check(&[2, 5], 12, |g, x| {
        let c = g.input(random(&[2, 5], 98));
        g.atan2(x, c)
    });
    check(&[2, 5], 13, |g, x| {
        let c = g.input(random(&[2, 5], 97));
        g.atan2(c, x)
    });
    check(&[1], 14, |g, s| {
        let c = g.input(random(&[2, 5], 96));
        g.mul_scalar(c, s)
    });
    check(&[2, 5], 15, |g, x| {
        let s = g.input(Tensor::scalar(0.7));
        g.mul_scalar(x, s)
    });
}

#[test]
fn row_broadcast_ops() {
    check(&[4], 20, |g, b| {
        let x = g.input(random(&[3, 4], 1));
        g.add_row(x, b)
    });
    check(&[4], 21, |g, s| {
        let x = g.input(random(&[3, 4], 2));
        g.mul_row(x, s)
    });
    check(&[3, 4], 22, |g, x| {
        let s = g.input(random(&[4], 3));
        g.mul_row(x, s)
    });
}

#[test]
fn shape_ops() {
    check(&[2, 3, 4], 30, |g, x| {
        let c = g.input(random(&[1, 3, 4], 5));
        g.concat(&[c, x, x], 0)
    });
    check(&[3, 4], 31, |g, x| {
        let c = g.input(random(&[3, 2], 6));
        g.concat(&[x, c], 1)
    });
    check(&[4, 3, 3], 32, |g, x| g.slice(x, 0, 1, 2));
    check(&[3, 6], 33, |g, x| g.slice(x, 1, 2, 3));
    check(&[2, 6], 34, |g, x| g.reshape(x, &[3, 4]));
    check(&[3, 5], 35, |g, x| g.transpose(x));
    check(&[2, 3], 39, |g, x| g.gather(x, Rc::new(vec![5, 0, 0, 3]), &[2, 2]));
    check(&[5, 3], 36, |g, x| g.gather_rows(x, &[4, 0, 2]));
    check(&[2, 3], 37, |g, v| {
        let t = g.input(random(&[3], 7));
        g.scatter_rows(v, t, &[3, 1], 5)
    });
    check(&[3], 38, |g, t| {
        let v = g.input(random(&[2, 3], 8));
        g.scatter_rows(v, t, &[3, 1], 5)
    });
}

#[test]
fn conv_ops() {
    check(&[2, 6, 6], 40, |g, x| {
        let w = g.input(random(&[3, 2, 3, 3], 1));
        let b = g.input(random(&[3], 2));
        g.conv2d(x, w, Some(b), 1, 1)
    });
    check(&[3, 2, 3, 3], 41, |g, w| {
        let x = g.input(random(&[2, 6, 6], 3));
        g.conv2d(x, w, None, 1, 1)
    });
    check(&[3], 42, |g, b| {
        let x = g.input(random(&[2, 6, 6], 4));
        let w = g.input(random(&[3, 2, 3, 3], 5));
        g.conv2d(x, w, Some(b), 1, 1)
    });
    check(&[2, 8, 8], 43, |g, x| {
        let w = g.input(random(&[2, 2, 4, 4], 6));
        g.conv2d(x, w, None, 4, 0)
    });
    check(&[4, 5, 5], 44, |g, x| {
        let w = g.input(random(&[3, 4, 1, 1], 7));
        g.conv2d(x, w, None, 1, 0)
    });
    check(&[3, 4, 1, 1], 45, |g, w| {
        let x = g.input(random(&[4, 5, 5], 8));
        g.conv2d(x, w, None, 1, 0)
    });
    check(&[2, 2, 2], 46, |g, x| {
        let w = g.input(random(&[2, 3, 4, 4], 9));
        g.conv_transpose2d(x, w, 4)
    });
    check(&[2, 3, 4, 4], 47, |g, w| {
        let x = g.input(random(&[2, 2, 2], 10));
        g.conv_transpose2d(x, w, 4)
    });
}

#[test]
fn matrix_ops() {
    check(&[3, 4], 50, |g, a| {
        let b = g.input(random(&[4, 2], 1));
        g.matmul(a, b)
    });
    check(&[4, 2], 51, |g, b| {
        let a = g.input(random(&[3, 4], 2));
        g.matmul(a, b)
    });
    check(&[3, 5], 52, |g, x| g.softmax_rows(x));
    check(&[3, 6], 53, |g, x| g.layer_norm_rows(x, 1e-5));
}

#[test]
fn reductions_and_masks() {
    check(&[2, 3, 3], 60, |g, x| {
        let c = g.input(random(&[2, 3, 3], 1));
        g.mean_abs_diff(x, c)
    });
    check(&[2, 3, 3], 61, |g, x| {
        let c = g.input(random(&[2, 3, 3], 2));
        let mask = Rc::new((0..18).map(|i| i % 3 != 0).collect());
        g.masked_mean_abs_diff(c, x, mask)
    });
    check(&[2, 3, 3], 62, |g, x| g.mean(x));
    check(&[2, 3, 3], 63, |g, x| {
        let t = g.input(random(&[2], 3));
        let mask = Rc::new((0..9).map(|i| i % 2 == 0).collect());
        g.masked_fill(x, t, mask)
    });
    check(&[2], 64, |g, t| {
        let x = g.input(random(&[2, 3, 3], 4));
        let mask = Rc::new((0..9).map(|i| i % 2 == 0).collect());
        g.masked_fill(x, t, mask)
    });
}

#[test]
fn fourier_ops() {
    check(&[2, 4, 6], 70, |g, x| g.dft2(x));
    check(&[4, 4, 6], 71, |g, z| g.idft2_real(z));
    // polar round trip used by the frequency branch
    check(&[2, 6, 6], 72, |g, x| {
        let z = g.dft2(x);
        let re = g.slice(z, 0, 0, 2);
        let im = g.slice(z, 0, 2, 2);
        let r2 = g.square(re);
        let i2 = g.square(im);
        let s = g.add(r2, i2);
        let s = g.add_const(s, 1e-8);
        let amp = g.sqrt(s);
        let pha = g.atan2(im, re);
        let c = g.cos(pha);
        let sn = g.sin(pha);
        let re2 = g.mul(amp, c);
        let im2 = g.mul(amp, sn);
        let z2 = g.concat(&[re2, im2], 0);
        g.idft2_real(z2)
    });
}

#[test]
fn shared_parameter_accumulates_once() {
    use panfuse_autograd::ParamStore;
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::new(&[2], vec![1.5, -0.5]));
    let mut g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    assert_eq!(a, b);
    let p = g.mul(a, b);
    let loss = g.sum(p);
    let grads = g.backward(loss).for_store(&store);
    assert_eq!(grads[0].as_ref().unwrap().data(), &[3.0, -1.0]);
}

#[test]
fn frozen_store_gets_no_gradient_but_passes_it_through() {
    use panfuse_autograd::ParamStore;
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::new(&[2], vec![2.0, 3.0]));
    let mut g = Graph::new();
    g.freeze(&store);
    let x = g.input_with_grad(Tensor::new(&[2], vec![1.0, 1.0]));
    let w = g.param(&store, id);
    let p = g.mul(x, w);
    let loss = g.sum(p);
    let grads = g.backward(loss);
    assert!(grads.for_store(&store)[0].is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 3.0]);
}
