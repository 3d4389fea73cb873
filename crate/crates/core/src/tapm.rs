//! Task-aware projection: a prompt-routed mixture of MLP experts.
//!
//! Routing is computed once per sequence from the prompt embedding,
//! `w = softmax(W_r e_text)`, and every expert is evaluated densely on every
//! frame: `phi = sum_i w_i * Expert_i(Z)`.

use usam_numerics::{Binder, Var};

use crate::config::ModelConfig;
use crate::error::{Result, UsamError};
use crate::nn::{self, Init};

pub const ROUTER: &str = "tapm.router.weight";
pub const TASK_EMBEDDING: &str = "tapm.task_embedding";

pub fn expert_prefix(i: usize) -> String {
    format!("tapm.expert.{i}")
}

pub fn init(init: &mut Init, config: &ModelConfig, num_tasks: usize) -> Result<()> {
    let d = config.d_model;
    init.constant(ROUTER, &[config.num_experts, config.d_text], 0.0, true)?;
    init.normal(TASK_EMBEDDING, &[num_tasks, config.d_text], 1.0, true)?;
    for i in 0..config.num_experts {
        init.mlp(&expert_prefix(i), d, config.expert_hidden, d, true)?;
    }
    Ok(())
}

/// Prompt embedding per example: the trainable task vector plus the mean of
/// the prompt tokens' (frozen) LM embeddings. `[B, d_text]`
pub fn prompt_embedding(b: &Binder, tasks: &[usize], prompts: &[Vec<usize>], token_table: &str) -> Result<Var> {
    let t = b.tape();
    let task_table = b.param(TASK_EMBEDDING)?;
    let tokens = b.param(token_table)?;
    let task_rows = t.embedding_lookup(task_table, tasks)?;
    let means = prompts
        .iter()
        .map(|p| Ok(t.mean(t.embedding_lookup(tokens, p)?, 0)?))
        .collect::<Result<Vec<_>>>()?;
    let prompt_rows = t.concat(&means, 0)?;
    Ok(t.add(task_rows, prompt_rows)?)
}

/// `softmax(W_r e_text)` for each row of `e_text: [B, d_text]` -> `[B, n]`.
pub fn route(b: &Binder, e_text: Var) -> Result<Var> {
    let t = b.tape();
    let router = b.param(ROUTER)?;
    let logits = t.matmul(e_text, t.transpose(router)?)?;
    Ok(t.softmax(logits, 1)?)
}

pub fn expert(b: &Binder, i: usize, z: Var) -> Result<Var> {
    nn::mlp(b, &expert_prefix(i), z)
}

/// Dense combination of all experts. `z: [B, L, d]`, `w: [B, n]`.
pub fn project(b: &Binder, z: Var, w: Var) -> Result<Var> {
    let t = b.tape();
    let ws = t.shape(w);
    let zs = t.shape(z);
    if ws.len() != 2 || zs.len() != 3 || ws[0] != zs[0] {
        return Err(UsamError::arg(format!("routing {ws:?} does not match features {zs:?}")));
    }
    let n = ws[1];
    let mut acc = None;
    for i in 0..n {
        let wi = t.reshape(t.slice(w, 1, i, i + 1)?, &[ws[0], 1, 1])?;
        let term = t.mul(expert(b, i, z)?, wi)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => t.add(prev, term)?,
        });
    }
    acc.ok_or_else(|| UsamError::arg("no experts"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use usam_numerics::{ParamStore, Tape, Tensor};

    fn config() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.d_model = 6;
        c.d_text = 6;
        c.expert_hidden = 5;
        c
    }

    fn store(c: &ModelConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init(&mut Init::new(&mut s, seed), c, 2).unwrap();
        s
    }

    fn z_input(tape: &Tape, seed: u64) -> Var {
        let data = (0..2 * 4 * 6)
            .map(|i| ((i as u64 * 31 + seed * 17) % 97) as f64 / 48.0 - 1.0)
            .collect();
        tape.constant(Tensor::new(vec![2, 4, 6], data).unwrap())
    }

    #[test]
    fn zero_router_is_uniform() {
        let c = config();
        let mut s = store(&c, 0);
        *s.value_mut(ROUTER).unwrap() = Tensor::zeros(&[3, 6]);
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let e = tape.constant(Tensor::new(vec![1, 6], vec![0.4, -1.0, 2.0, 0.0, 0.3, 0.1]).unwrap());
        let w = route(&b, e).unwrap();
        for v in tape.value(w).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn analytic_routing_8_1_1() {
        let c = config();
        let mut s = store(&c, 0);
        let mut r = Tensor::zeros(&[3, 6]);
        r.data_mut()[0] = 8f64.ln();
        *s.value_mut(ROUTER).unwrap() = r;
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let e = tape.constant(Tensor::new(vec![1, 6], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let w = route(&b, e).unwrap();
        let v = tape.value(w);
        assert!((v.data()[0] - 0.8).abs() < 1e-12);
        assert!((v.data()[1] - 0.1).abs() < 1e-12);
        assert!((v.data()[2] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn one_hot_routing_reproduces_expert() {
        let c = config();
        let s = store(&c, 1);
        for k in 0..3 {
            let tape = Tape::new();
            let b = Binder::new(&tape, &s);
            let z = z_input(&tape, 2);
            let mut w = Tensor::zeros(&[2, 3]);
            w.data_mut()[k] = 1.0;
            w.data_mut()[3 + k] = 1.0;
            let phi = project(&b, z, tape.constant(w)).unwrap();
            let direct = expert(&b, k, z).unwrap();
            assert!(tape.value(phi).max_abs_diff(&tape.value(direct)) < 1e-12);
        }
    }

    #[test]
    fn identical_experts_ignore_routing() {
        let c = config();
        let mut s = store(&c, 2);
        for part in ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"] {
            let v = s.value(&format!("tapm.expert.0.{part}")).unwrap().clone();
            for i in 1..3 {
                *s.value_mut(&format!("tapm.expert.{i}.{part}")).unwrap() = v.clone();
            }
        }
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let z = z_input(&tape, 3);
        let w1 = tape.constant(Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.9, 0.05, 0.05]).unwrap());
        let w2 = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let a = project(&b, z, w1).unwrap();
        let c2 = project(&b, z, w2).unwrap();
        assert!(tape.value(a).max_abs_diff(&tape.value(c2)) < 1e-12);
    }

    #[test]
    fn every_expert_and_router_gets_gradient() {
        let c = config();
        let s = store(&c, 3);
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let z = z_input(&tape, 4);
        let e = prompt_embedding_fixture(&tape);
        let w = route(&b, e).unwrap();
        let phi = project(&b, z, w).unwrap();
        let r = z_input(&tape, 5);
        let loss = tape.sum_all(tape.mul(phi, r).unwrap());
        let grads = b.gradients(&tape.backward(loss).unwrap());
        for name in [ROUTER, "tapm.expert.0.fc1.weight", "tapm.expert.1.fc2.weight", "tapm.expert.2.fc1.weight"] {
            assert!(grads[name].data().iter().any(|&g| g != 0.0), "{name}");
        }
    }

    fn prompt_embedding_fixture(tape: &Tape) -> Var {
        tape.constant(
            Tensor::new(vec![2, 6], vec![0.3, -0.2, 0.8, 0.1, -0.5, 0.4, -0.6, 0.2, 0.1, 0.9, 0.0, -0.3]).unwrap(),
        )
    }

    proptest! {
        #[test]
        fn routing_on_simplex(e in prop::collection::vec(-20.0f64..20.0, 6), seed in 0u64..50) {
            let c = config();
            let s = store(&c, seed);
            let tape = Tape::new();
            let b = Binder::new(&tape, &s);
            let w = route(&b, tape.constant(Tensor::new(vec![1, 6], e).unwrap())).unwrap();
            let v = tape.value(w);
            prop_assert!(v.data().iter().all(|&x| x >= 0.0));
            prop_assert!((v.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn joint_permutation_invariance(seed in 0u64..50, perm_idx in 0usize..6) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let perm = perms[perm_idx];
            let c = config();
            let s = store(&c, seed);
            let mut p = s.clone();
            let router = s.value(ROUTER).unwrap();
            let mut permuted = router.clone();
            for (new, &old) in perm.iter().enumerate() {
                permuted.data_mut()[new * 6..(new + 1) * 6].copy_from_slice(router.row(old));
                for part in ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"] {
                    let v = s.value(&format!("tapm.expert.{old}.{part}")).unwrap().clone();
                    *p.value_mut(&format!("tapm.expert.{new}.{part}")).unwrap() = v;
                }
            }
            *p.value_mut(ROUTER).unwrap() = permuted;
            let run = |store: &ParamStore| {
                let tape = Tape::new();
                let b = Binder::new(&tape, store);
                let z = z_input(&tape, seed);
                let e = prompt_embedding_fixture(&tape);
                let w = route(&b, e).unwrap();
                let phi = project(&b, z, w).unwrap();
                let out = tape.value(phi).clone();
                out
            };
            prop_assert!(run(&s).max_abs_diff(&run(&p)) < 1e-6);
        }
    }
}
