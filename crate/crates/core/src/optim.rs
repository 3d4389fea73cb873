//! AdamW with decoupled weight decay and the warm-up/linear-decay schedule.

use std::collections::BTreeMap;

use usam_numerics::{ParamStore, Tensor};

use crate::config::TrainConfig;
use crate::error::{Result, UsamError};
use crate::qformer;

/// Learning rate at `step` of `total`: linear from 0 to `peak` over the first
/// `floor(warm_ratio * total)` steps, then linear back to 0 at `total`.
pub fn lr_at(step: usize, total: usize, peak: f64, warm_ratio: f64) -> Result<f64> {
    if total == 0 {
        return Err(UsamError::arg("schedule needs at least one step"));
    }
    if step > total {
        return Err(UsamError::arg(format!("step {step} is past the end of a {total}-step schedule")));
    }
    let warm = (warm_ratio * total as f64).floor() as usize;
    Ok(if step <= warm {
        if warm == 0 {
            peak
        } else {
            peak * step as f64 / warm as f64
        }
    } else {
        peak * (total - step) as f64 / (total - warm) as f64
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_exempt_vectors: bool,
    /// Number of updates applied so far.
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: &TrainConfig, store: &ParamStore) -> Self {
        let moments = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| {
                let shape = p.value.shape();
                (
                    name.to_string(),
                    Moments {
                        m: Tensor::zeros(shape),
                        v: Tensor::zeros(shape),
                    },
                )
            })
            .collect();
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            decay_exempt_vectors: config.decay_exempt_vectors,
            t: 0,
            moments,
        }
    }

    pub fn decays(&self, name: &str, value: &Tensor) -> bool {
        !(self.decay_exempt_vectors && (value.rank() <= 1 || name == qformer::QUERY))
    }

    /// One update. Parameters absent from `grads` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let decay = if self.decays(name, g) { self.weight_decay } else { 0.0 };
            let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
            let state = self
                .moments
                .get_mut(name)
                .ok_or_else(|| UsamError::arg(format!("no optimizer state for `{name}`")))?;
            let p = store.value_mut(name)?;
            if p.shape() != g.shape() {
                return Err(UsamError::arg(format!("gradient shape mismatch for `{name}`")));
            }
            let (m, v) = (state.m.data_mut(), state.v.data_mut());
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * *pi);
            }
        }
        Ok(())
    }

    /// Rounds every moment to the nearest `f32`.
    pub fn quantize(&mut self) {
        for s in self.moments.values_mut() {
            round_f32(&mut s.m);
            round_f32(&mut s.v);
        }
    }
}

pub fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = f64::from(*v as f32);
    }
}

/// Rounds every parameter to the nearest `f32`, the checkpoint precision.
pub fn quantize_store(store: &mut ParamStore) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        round_f32(store.value_mut(&n).expect("listed name"));
    }
}
