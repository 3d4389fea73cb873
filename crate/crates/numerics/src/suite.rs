//! Finite-difference check of every differentiable primitive on seeded
//! random inputs.
//!
//! Each op's output is reduced as `sum(op(x) * r)` with a fixed random `r`,
//! so every output entry contributes a distinct weight to the gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{check_inputs, GradCheckReport};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("nonzero shape")
}

type OpFn = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;

/// Runs the suite. `ste_threshold` and `detach` are excluded: their tape
/// gradients are not derivatives of their forward maps.
pub fn primitive_suite(eps: f64, tol: f64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut g = |shape: &[usize]| uniform(shape, -2.0, 2.0, &mut rng);
    let a = g(&[3, 4]);
    let b = g(&[3, 4]);
    let row = g(&[4]);
    let a3 = g(&[2, 3, 4]);
    let b2 = g(&[4, 2]);
    let v6a = g(&[6]);
    let v6b = g(&[6]);
    let x6 = g(&[3, 6]);
    let interp = g(&[5, 3]);
    let pos = uniform(&[3, 4], 0.5, 2.0, &mut rng);
    let gamma = uniform(&[6], 0.5, 1.5, &mut rng);
    let beta = uniform(&[6], -0.5, 0.5, &mut rng);
    let r_seed: u64 = 99;

    let cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = vec![
        ("add", vec![a.clone(), row.clone()], Box::new(|t, x| t.add(x[0], x[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, x| t.sub(x[0], x[1]))),
        ("mul", vec![row.clone(), a.clone()], Box::new(|t, x| t.mul(x[0], x[1]))),
        ("div", vec![a.clone(), pos.clone()], Box::new(|t, x| t.div(x[0], x[1]))),
        ("scale", vec![a.clone()], Box::new(|t, x| Ok(t.scale(x[0], -1.7)))),
        ("add_scalar", vec![a.clone()], Box::new(|t, x| Ok(t.add_scalar(x[0], 0.3)))),
        ("neg", vec![a.clone()], Box::new(|t, x| Ok(t.neg(x[0])))),
        ("relu", vec![a.clone()], Box::new(|t, x| Ok(t.relu(x[0])))),
        ("sigmoid", vec![a.clone()], Box::new(|t, x| Ok(t.sigmoid(x[0])))),
        ("exp", vec![a.clone()], Box::new(|t, x| Ok(t.exp(x[0])))),
        ("log", vec![pos], Box::new(|t, x| t.log(x[0]))),
        ("matmul", vec![a3.clone(), b2], Box::new(|t, x| t.matmul(x[0], x[1]))),
        ("transpose", vec![a3.clone()], Box::new(|t, x| t.transpose(x[0]))),
        ("reshape", vec![a.clone()], Box::new(|t, x| t.reshape(x[0], &[2, 6]))),
        ("concat", vec![a.clone(), b.clone()], Box::new(|t, x| t.concat(&[x[0], x[1]], 1))),
        ("slice", vec![a3.clone()], Box::new(|t, x| t.slice(x[0], 2, 1, 3))),
        ("embedding_lookup", vec![a.clone()], Box::new(|t, x| t.embedding_lookup(x[0], &[2, 0, 2, 1]))),
        ("sum", vec![a3.clone()], Box::new(|t, x| t.sum(x[0], 1))),
        ("mean", vec![a3.clone()], Box::new(|t, x| t.mean(x[0], 2))),
        ("sum_all", vec![a.clone()], Box::new(|t, x| Ok(t.sum_all(x[0])))),
        ("mean_all", vec![a.clone()], Box::new(|t, x| Ok(t.mean_all(x[0])))),
        ("l1_norm", vec![b], Box::new(|t, x| Ok(t.l1_norm(x[0])))),
        ("softmax", vec![a3], Box::new(|t, x| t.softmax(x[0], 2))),
        ("log_softmax", vec![a], Box::new(|t, x| t.log_softmax(x[0]))),
        ("interp_linear", vec![interp], Box::new(|t, x| t.interp_linear(x[0], 7))),
        ("cosine_distance", vec![v6a, v6b], Box::new(|t, x| t.cosine_distance(x[0], x[1]))),
        (
            "layer_norm",
            vec![x6, gamma, beta],
            Box::new(|t, x| t.layer_norm(x[0], x[1], x[2], 1e-5)),
        ),
    ];

    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = check_inputs(
                &inputs,
                |t, x| {
                    let y = f(t, x)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(r_seed);
                    let r = t.constant(uniform(&t.shape(y), -1.0, 1.0, &mut rng));
                    Ok(t.sum_all(t.mul(y, r)?))
                },
                eps,
                tol,
            )?;
            Ok(OpCheck { name, report })
        })
        .collect()
}
