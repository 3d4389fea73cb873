//! Parameter initialisation and the small layers shared by every module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use usam_numerics::{Binder, ParamStore, Tensor, Var};

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// Registers freshly initialised parameters into a store.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, trainable: bool) -> Result<()> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data)?, trainable)?;
        Ok(())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, value), trainable)?;
        Ok(())
    }

    /// `weight: [fan_in, fan_out]` with std `1/sqrt(fan_in)`, zero bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool, trainable: bool) -> Result<()> {
        self.normal(
            &format!("{prefix}.weight"),
            &[fan_in, fan_out],
            1.0 / (fan_in as f64).sqrt(),
            trainable,
        )?;
        if bias {
            self.constant(&format!("{prefix}.bias"), &[fan_out], 0.0, trainable)?;
        }
        Ok(())
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize, trainable: bool) -> Result<()> {
        self.constant(&format!("{prefix}.gamma"), &[dim], 1.0, trainable)?;
        self.constant(&format!("{prefix}.beta"), &[dim], 0.0, trainable)
    }

    /// Two-layer ReLU perceptron `in -> hidden -> out`.
    pub fn mlp(&mut self, prefix: &str, input: usize, hidden: usize, output: usize, trainable: bool) -> Result<()> {
        self.linear(&format!("{prefix}.fc1"), input, hidden, true, trainable)?;
        self.linear(&format!("{prefix}.fc2"), hidden, output, true, trainable)
    }
}

/// `x W (+ b)` applied over the last axis.
pub fn linear(b: &Binder, prefix: &str, x: Var) -> Result<Var> {
    let t = b.tape();
    let w = b.param(&format!("{prefix}.weight"))?;
    let y = t.matmul(x, w)?;
    let bias = format!("{prefix}.bias");
    if b.store().contains(&bias) {
        Ok(t.add(y, b.param(&bias)?)?)
    } else {
        Ok(y)
    }
}

pub fn layer_norm(b: &Binder, prefix: &str, x: Var) -> Result<Var> {
    let gamma = b.param(&format!("{prefix}.gamma"))?;
    let beta = b.param(&format!("{prefix}.beta"))?;
    Ok(b.tape().layer_norm(x, gamma, beta, LN_EPS)?)
}

pub fn mlp(b: &Binder, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(b, &format!("{prefix}.fc1"), x)?;
    let h = b.tape().relu(h);
    linear(b, &format!("{prefix}.fc2"), h)
}
