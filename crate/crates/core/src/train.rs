//! Training loop and evaluation.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usam_numerics::{Binder, ParamStore, Tape, Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{Example, Task};
use crate::encoders::EncoderBank;
use crate::error::{Result, UsamError};
use crate::lm;
use crate::model::{self, Ablation, ForwardOutput, LossSettings};
use crate::optim::{self, AdamW};
use crate::saclm::{self, SaclmSettings};

pub fn ablation(config: &Config) -> Ablation {
    Ablation {
        disable_tapm: config.train.disable_tapm,
        disable_saclm: config.train.disable_saclm,
        zero_encoder: config.train.zero_encoder,
    }
}

pub fn loss_settings(config: &Config, ste: bool) -> LossSettings {
    LossSettings {
        alpha: config.train.alpha_mix,
        saclm: SaclmSettings {
            threshold: config.model.threshold,
            lambda: config.train.lambda,
            margin: config.train.margin,
            ste,
        },
    }
}

fn mix(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step.wrapping_add(0x2545_f491_4f6c_dd1d)
}

/// Example indices of batch `step`: consecutive slices of per-epoch seeded
/// shuffles, so the schedule depends only on `(n, batch, seed, step)`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (step * batch..(step + 1) * batch)
        .map(|j| {
            let epoch = j / n;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64));
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("filled above").1[j % n]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_ce: f64,
    pub loss_triplet: f64,
    pub loss_sparsity: f64,
    pub fallbacks: usize,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} lr={:.6e} L={:.6} L_CE={:.6} L_triplet={:.6} L_sparsity={:.6}",
            self.step, self.lr, self.loss, self.loss_ce, self.loss_triplet, self.loss_sparsity
        )
    }
}

fn first_non_finite<'a>(named: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Option<String> {
    named
        .into_iter()
        .find(|(_, t)| !t.all_finite())
        .map(|(n, _)| n.to_string())
}

pub struct Trainer {
    pub config: Config,
    pub store: ParamStore,
    pub opt: AdamW,
    pub bank: EncoderBank,
    pub examples: Vec<Example>,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: Config, examples: Vec<Example>) -> Result<Self> {
        config.validate()?;
        let store = model::init_params(&config.model)?;
        Self::with_store(config, examples, store)
    }

    pub fn with_store(config: Config, examples: Vec<Example>, store: ParamStore) -> Result<Self> {
        if examples.is_empty() {
            return Err(UsamError::arg("training needs at least one example"));
        }
        let bank = EncoderBank::from_store(&store, &config.model)?;
        let opt = AdamW::new(&config.train, &store);
        Ok(Self {
            config,
            store,
            opt,
            bank,
            examples,
            step: 0,
        })
    }

    pub fn from_checkpoint(config: Config, examples: Vec<Example>, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::with_store(config, examples, ckpt.store.clone())?;
        ckpt.restore_optimizer(&mut t.opt);
        t.step = ckpt.step as usize;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.config, self.step as u64, &self.store, &self.opt)
    }

    /// Negatives for batch `step`.
    pub fn negatives(&self, batch: usize, step: usize) -> Result<Vec<usize>> {
        if self.config.train.disable_saclm {
            return Ok((0..batch).collect());
        }
        saclm::derangement(batch, mix(self.config.train.seed ^ 0x6e_6567, step as u64))
    }

    pub fn train_step(&mut self) -> Result<StepLog> {
        let tc = &self.config.train;
        if self.step >= tc.total_steps {
            return Err(UsamError::arg(format!("already trained for {} steps", tc.total_steps)));
        }
        let idx = batch_indices(self.examples.len(), tc.batch_size, tc.seed, self.step);
        let batch: Vec<&Example> = idx.iter().map(|&i| &self.examples[i]).collect();
        let negatives = self.negatives(batch.len(), self.step)?;
        let lr = optim::lr_at(self.step + 1, tc.total_steps, tc.lr, tc.warmup_ratio)?;

        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.store);
        let out = model::forward(
            &binder,
            &self.config.model,
            &self.bank,
            &batch,
            &negatives,
            ablation(&self.config),
            loss_settings(&self.config, true),
        )?;
        let log = summarize(&tape, &out, self.step + 1, lr);
        let losses = [
            ("L", log.loss),
            ("L_CE", log.loss_ce),
            ("L_triplet", log.loss_triplet),
            ("L_sparsity", log.loss_sparsity),
        ];
        if let Some((name, _)) = losses.iter().find(|(_, v)| !v.is_finite()) {
            return Err(UsamError::NonFinite(format!("{name} at step {}", self.step + 1)));
        }
        let grads = binder.gradients(&tape.backward(out.loss)?);
        if let Some(name) = first_non_finite(grads.iter().map(|(n, t)| (n.as_str(), t))) {
            return Err(UsamError::NonFinite(format!("gradient of {name} at step {}", self.step + 1)));
        }
        drop(binder);
        self.opt.step(&mut self.store, &grads, lr)?;
        optim::quantize_store(&mut self.store);
        self.opt.quantize();
        if let Some(name) = first_non_finite(self.store.iter().map(|(n, p)| (n, &p.value))) {
            return Err(UsamError::NonFinite(format!("parameter {name} at step {}", self.step + 1)));
        }
        self.step += 1;
        Ok(log)
    }

    /// Trains up to `until` steps, reporting each step to `on_step`.
    pub fn run_until(&mut self, until: usize, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.step < until.min(self.config.train.total_steps) {
            let log = self.train_step()?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

fn summarize(tape: &Tape, out: &ForwardOutput, step: usize, lr: f64) -> StepLog {
    let get = |v: Option<Var>| v.map_or(0.0, |v| tape.item(v));
    StepLog {
        step,
        lr,
        loss: tape.item(out.loss),
        loss_ce: tape.item(out.loss_ce),
        loss_triplet: get(out.loss_triplet),
        loss_sparsity: get(out.loss_sparsity),
        fallbacks: out.fallbacks,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub examples: usize,
    pub token_accuracy: f64,
    pub exact_match: Option<f64>,
    /// Combined objective, always including the contrastive term.
    pub loss: f64,
    pub loss_ce: f64,
    pub loss_triplet: f64,
    pub loss_sparsity: f64,
    /// Mean routing weights per task, when routing is active.
    pub routing: BTreeMap<&'static str, Vec<f64>>,
    pub mean_score: f64,
    pub mean_score_noise: Option<f64>,
    pub mean_score_signal: Option<f64>,
    pub fallbacks: usize,
}

impl Metrics {
    /// Mean significance on signal frames minus that on noise frames.
    pub fn score_gap(&self) -> Option<f64> {
        Some(self.mean_score_signal? - self.mean_score_noise?)
    }

    /// L1 distance between the mean copy and reverse routing vectors.
    pub fn routing_distance(&self) -> Option<f64> {
        let a = self.routing.get(Task::Copy.name())?;
        let b = self.routing.get(Task::Reverse.name())?;
        Some(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        writeln!(f, "{:<22}{}", "examples", self.examples)?;
        writeln!(f, "{:<22}{:.6}", "token_accuracy", self.token_accuracy)?;
        writeln!(f, "{:<22}{}", "exact_match", opt(self.exact_match))?;
        writeln!(f, "{:<22}{:.6}", "L", self.loss)?;
        writeln!(f, "{:<22}{:.6}", "L_CE", self.loss_ce)?;
        writeln!(f, "{:<22}{:.6}", "L_triplet", self.loss_triplet)?;
        writeln!(f, "{:<22}{:.6}", "L_sparsity", self.loss_sparsity)?;
        writeln!(f, "{:<22}{:.6}", "mean_S", self.mean_score)?;
        writeln!(f, "{:<22}{}", "mean_S_noise", opt(self.mean_score_noise))?;
        writeln!(f, "{:<22}{}", "mean_S_signal", opt(self.mean_score_signal))?;
        writeln!(f, "{:<22}{}", "S_gap", opt(self.score_gap()))?;
        writeln!(f, "{:<22}{}", "fallbacks", self.fallbacks)?;
        for (task, w) in &self.routing {
            let ws: Vec<String> = w.iter().map(|v| format!("{v:.4}")).collect();
            writeln!(f, "{:<22}{}", format!("routing[{task}]"), ws.join(" "))?;
        }
        Ok(())
    }
}

/// Splits `n` items into contiguous chunks of at most `size`, none of a
/// single item when `n >= 2`.
fn chunks(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let count = n.div_ceil(size.max(2));
    let base = n / count;
    let extra = n % count;
    let mut start = 0;
    (0..count)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Evaluates `store` on `examples`. Losses always include the contrastive
/// term so that ablated models are scored on the same objective.
pub fn evaluate(config: &Config, store: &ParamStore, examples: &[Example], decode: bool) -> Result<Metrics> {
    if examples.len() < 2 {
        return Err(UsamError::arg("evaluation needs at least two examples"));
    }
    let bank = EncoderBank::from_store(store, &config.model)?;
    let mut ab = ablation(config);
    ab.disable_saclm = false;
    let settings = loss_settings(config, false);
    let mut m = Metrics {
        examples: examples.len(),
        ..Metrics::default()
    };
    let mut correct = 0usize;
    let mut predicted = 0usize;
    let mut routing_sum: BTreeMap<&'static str, (Vec<f64>, usize)> = BTreeMap::new();
    let (mut s_all, mut s_noise, mut s_signal) = ((0.0, 0usize), (0.0, 0usize), (0.0, 0usize));
    for (ci, range) in chunks(examples.len(), config.train.batch_size).into_iter().enumerate() {
        let batch: Vec<&Example> = examples[range.clone()].iter().collect();
        let negatives = saclm::derangement(batch.len(), mix(0x6576_616c, ci as u64))?;
        let tape = Tape::new();
        let b = Binder::new(&tape, store);
        let out = model::forward(&b, &config.model, &bank, &batch, &negatives, ab, settings)?;
        let w = batch.len() as f64 / examples.len() as f64;
        m.loss += w * tape.item(out.loss);
        m.loss_ce += w * tape.item(out.loss_ce);
        m.loss_triplet += w * out.loss_triplet.map_or(0.0, |v| tape.item(v));
        m.loss_sparsity += w * out.loss_sparsity.map_or(0.0, |v| tape.item(v));
        m.fallbacks += out.fallbacks;

        let logits = tape.value(out.logits);
        for (row, (&label, &mask)) in out.labels.iter().zip(&out.loss_mask).enumerate() {
            if mask != 0.0 {
                predicted += 1;
                correct += usize::from(lm::argmax(logits.row(row)) == label);
            }
        }
        if let Some(r) = out.routing {
            let r = tape.value(r);
            for (i, e) in batch.iter().enumerate() {
                let entry = routing_sum
                    .entry(e.task.name())
                    .or_insert_with(|| (vec![0.0; r.shape()[1]], 0));
                for (acc, v) in entry.0.iter_mut().zip(r.row(i)) {
                    *acc += v;
                }
                entry.1 += 1;
            }
        }
        for (e, &s) in batch.iter().zip(&out.scores) {
            for (p, &v) in tape.value(s).data().iter().enumerate() {
                let frame = model::position_frame(&config.model, &config.task, p);
                s_all = (s_all.0 + v, s_all.1 + 1);
                if e.noise_frames.binary_search(&frame).is_ok() {
                    s_noise = (s_noise.0 + v, s_noise.1 + 1);
                } else {
                    s_signal = (s_signal.0 + v, s_signal.1 + 1);
                }
            }
        }
    }
    m.token_accuracy = correct as f64 / predicted.max(1) as f64;
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    m.mean_score = mean(s_all).unwrap_or(0.0);
    m.mean_score_noise = mean(s_noise);
    m.mean_score_signal = mean(s_signal);
    m.routing = routing_sum
        .into_iter()
        .map(|(k, (sum, n))| (k, sum.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    if decode {
        let max_new = config.task.max_tokens + 1;
        let mut hits = 0;
        for e in examples {
            let tape = Tape::new();
            let b = Binder::new(&tape, store);
            let out = model::decode(&b, &config.model, &bank, e, ab, max_new)?;
            hits += usize::from(out == e.targets);
        }
        m.exact_match = Some(hits as f64 / examples.len() as f64);
    }
    Ok(m)
}
