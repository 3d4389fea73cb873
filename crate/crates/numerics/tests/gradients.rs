//! Every primitive against central finite differences (eps = 1e-4, f64),
//! plus the structural properties of softmax and the tape.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usam_numerics::{check_inputs, Result, Tape, Tensor, Var};

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `sum(y * r)` with a fixed random `r` so that gradients are generic.
fn project(t: &Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = t.constant(uniform(&t.shape(y), -1.0, 1.0, &mut rng));
    let prod = t.mul(y, r)?;
    Ok(t.sum_all(prod))
}

fn assert_op<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let report = check_inputs(inputs, |t, x| project(t, f(t, x)?, 99), EPS, TOL).unwrap();
    assert!(report.passed(), "{name}: {report}");
}

#[test]
fn matmul_3x4_times_4x2() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = uniform(&[3, 4], -2.0, 2.0, &mut rng);
    let b = uniform(&[4, 2], -2.0, 2.0, &mut rng);
    assert_op("matmul", &[a, b], |t, x| t.matmul(x[0], x[1]));
}

#[test]
fn batched_matmul_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = uniform(&[2, 3, 4], -2.0, 2.0, &mut rng);
    let b = uniform(&[4, 5], -2.0, 2.0, &mut rng);
    assert_op("bmm", &[a, b], |t, x| t.matmul(x[0], x[1]));
    let a = uniform(&[3, 4], -2.0, 2.0, &mut rng);
    let b = uniform(&[2, 4, 2], -2.0, 2.0, &mut rng);
    assert_op("bmm-left", &[a, b], |t, x| t.matmul(x[0], x[1]));
}

#[test]
fn softmax_then_dot() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = uniform(&[3, 5], -2.0, 2.0, &mut rng);
    assert_op("softmax-1", std::slice::from_ref(&x), |t, x| t.softmax(x[0], 1));
    assert_op("softmax-0", std::slice::from_ref(&x), |t, x| t.softmax(x[0], 0));
    assert_op("log_softmax", &[x], |t, x| t.log_softmax(x[0]));
}

#[test]
fn elementwise_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = uniform(&[3, 4], -2.0, 2.0, &mut rng);
    let b = uniform(&[3, 4], -2.0, 2.0, &mut rng);
    let row = uniform(&[4], -2.0, 2.0, &mut rng);
    let pos = uniform(&[3, 4], 0.5, 2.0, &mut rng);
    assert_op("add", &[a.clone(), b.clone()], |t, x| t.add(x[0], x[1]));
    assert_op("add-broadcast", &[a.clone(), row.clone()], |t, x| t.add(x[0], x[1]));
    assert_op("sub", &[a.clone(), row.clone()], |t, x| t.sub(x[0], x[1]));
    assert_op("mul", &[a.clone(), b.clone()], |t, x| t.mul(x[0], x[1]));
    assert_op("mul-broadcast", &[row.clone(), a.clone()], |t, x| t.mul(x[0], x[1]));
    assert_op("div", &[a.clone(), pos.clone()], |t, x| t.div(x[0], x[1]));
    assert_op("scale", std::slice::from_ref(&a), |t, x| Ok(t.scale(x[0], -1.7)));
    assert_op("add_scalar", std::slice::from_ref(&a), |t, x| Ok(t.add_scalar(x[0], 0.3)));
    assert_op("relu", std::slice::from_ref(&a), |t, x| Ok(t.relu(x[0])));
    assert_op("sigmoid", std::slice::from_ref(&a), |t, x| Ok(t.sigmoid(x[0])));
    assert_op("exp", std::slice::from_ref(&a), |t, x| Ok(t.exp(x[0])));
    assert_op("log", &[pos], |t, x| t.log(x[0]));
    assert_op("l1_norm", std::slice::from_ref(&a), |t, x| Ok(t.l1_norm(x[0])));
    assert_op("transpose", std::slice::from_ref(&a), |t, x| t.transpose(x[0]));
    assert_op("reshape", std::slice::from_ref(&a), |t, x| t.reshape(x[0], &[2, 6]));
    assert_op("sum", std::slice::from_ref(&a), |t, x| t.sum(x[0], 0));
    assert_op("mean", std::slice::from_ref(&a), |t, x| t.mean(x[0], 1));
    assert_op("mean_all", std::slice::from_ref(&a), |t, x| Ok(t.mean_all(x[0])));
    assert_op("concat", &[a.clone(), b.clone()], |t, x| t.concat(&[x[0], x[1]], 1));
    assert_op("concat-0", &[a.clone(), b], |t, x| t.concat(&[x[0], x[1]], 0));
    assert_op("slice", std::slice::from_ref(&a), |t, x| t.slice(x[0], 1, 1, 3));
    assert_op("embedding_lookup", &[a], |t, x| t.embedding_lookup(x[0], &[2, 0, 2, 1]));
}

#[test]
fn layer_norm_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform(&[3, 6], -2.0, 2.0, &mut rng);
    let g = uniform(&[6], 0.5, 1.5, &mut rng);
    let b = uniform(&[6], -0.5, 0.5, &mut rng);
    assert_op("layer_norm", &[x, g, b], |t, x| t.layer_norm(x[0], x[1], x[2], 1e-5));
}

#[test]
fn interp_linear_gradient_is_transpose_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (t_in, t_out) in [(5, 3), (3, 7), (1, 4), (4, 4)] {
        let x = uniform(&[t_in, 3], -2.0, 2.0, &mut rng);
        assert_op("interp_linear", &[x], |t, x| t.interp_linear(x[0], t_out));
    }
    // Explicitly: the backward of a 2 -> 3 interpolation is M^T g.
    let tape = Tape::new();
    let x = tape.var(Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap());
    let y = tape.interp_linear(x, 3).unwrap();
    let g = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 10.0, 100.0]).unwrap());
    let obj = tape.mul(y, g).unwrap();
    let grads = tape.backward(tape.sum_all(obj)).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0, 105.0]);
}

#[test]
fn cosine_distance_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = uniform(&[6], -2.0, 2.0, &mut rng);
    let b = uniform(&[6], -2.0, 2.0, &mut rng);
    let report = check_inputs(&[a, b], |t, x| t.cosine_distance(x[0], x[1]), EPS, TOL).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn square_function_gradient() {
    let report = check_inputs(&[Tensor::scalar(3.0)], |t, x| t.mul(x[0], x[0]), EPS, TOL).unwrap();
    let (_, ad, fd) = report.params[0].worst.unwrap();
    assert_eq!(ad, 6.0);
    assert!((fd - 6.0).abs() < 1e-6);
}

#[test]
fn two_path_accumulation_matches_analytic() {
    // y = sigmoid(x) * exp(x): dy/dx = y * (1 - sigmoid(x)) + y
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(0.4));
    let s = tape.sigmoid(x);
    let e = tape.exp(x);
    let y = tape.mul(s, e).unwrap();
    let grads = tape.backward(y).unwrap();
    let sx = 1.0 / (1.0 + (-0.4f64).exp());
    let yv = sx * 0.4f64.exp();
    let expect = yv * (1.0 - sx) + yv;
    assert!((grads.get(x).unwrap().item() - expect).abs() < 1e-14);
}

#[test]
fn forward_is_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tape = Tape::new();
        let a = tape.var(uniform(&[4, 8], -2.0, 2.0, &mut rng));
        let b = tape.var(uniform(&[8, 3], -2.0, 2.0, &mut rng));
        let y = tape.softmax(tape.matmul(a, b).unwrap(), 1).unwrap();
        let out = tape.value(y).clone();
        out
    };
    let first = build();
    let second = build();
    assert_eq!(
        first.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        second.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #[test]
    fn softmax_is_on_the_simplex(values in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(values));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        prop_assert!(v.data().iter().all(|&p| p >= 0.0));
        prop_assert!((v.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn elementwise_gradients_on_random_inputs(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = uniform(&[2, 3], -2.0, 2.0, &mut rng);
        let b = uniform(&[2, 3], -2.0, 2.0, &mut rng);
        let r = check_inputs(&[a, b], |t, x| {
            let m = t.mul(x[0], t.sigmoid(x[1]))?;
            let s = t.softmax(m, 1)?;
            project(t, s, seed)
        }, EPS, TOL).unwrap();
        prop_assert!(r.passed(), "{}", r);
    }
}
