//! Semantic-aware frame selection and the contrastive loss built on it.
//!
//! Each projected frame is scored against the time-aligned target text, the
//! scores are thresholded into a selection mask, the selected frames are
//! pooled through an aggregation MLP, and the pooled vector is pulled toward
//! its own text and pushed from an in-batch negative. Examples may have
//! different lengths, so everything below works on one example at a time.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usam_numerics::{Binder, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Result, UsamError};
use crate::nn::{self, Init};

pub const SCORE: &str = "saclm.score";
pub const AGG: &str = "saclm.agg";
pub const AGG_EPS: f64 = 1e-8;

pub fn init(init: &mut Init, config: &ModelConfig) -> Result<()> {
    let d = config.d_model;
    let h = config.score_hidden;
    init.linear(&format!("{SCORE}.fc1"), 2 * d, h, true, true)?;
    init.normal(&format!("{SCORE}.fc2.weight"), &[h, 1], 1.0 / (h as f64).sqrt(), true)?;
    init.constant(&format!("{SCORE}.fc2.bias"), &[1], config.score_bias_init, true)?;
    init.mlp(AGG, d, config.agg_hidden, d, true)
}

/// Interpolates a `[T_t, d]` text sequence onto `t_a` frames.
pub fn align_text(tape: &Tape, text: Var, t_a: usize) -> Result<Var> {
    Ok(tape.interp_linear(text, t_a)?)
}

/// Per-frame significance `sigmoid(MLP([phi_t ; text_t]))`, shape `[T]`.
pub fn score(b: &Binder, phi: Var, aligned: Var) -> Result<Var> {
    let t = b.tape();
    let (ps, ts) = (t.shape(phi), t.shape(aligned));
    if ps.len() != 2 || ps != ts {
        return Err(UsamError::arg(format!("score inputs {ps:?} and {ts:?} differ")));
    }
    let x = t.concat(&[phi, aligned], 1)?;
    let logits = nn::mlp(b, SCORE, x)?;
    Ok(t.reshape(t.sigmoid(logits), &[ps[0]])?)
}

/// Hard selection `D = [S >= threshold]`. When nothing clears the threshold
/// the highest-scoring frame is selected instead; the flag reports that.
pub fn decide_values(s: &[f64], threshold: f64) -> (Vec<f64>, bool) {
    let mut d: Vec<f64> = s.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();
    let fallback = d.iter().all(|&v| v == 0.0);
    if fallback {
        if let Some(best) = argmax(s) {
            d[best] = 1.0;
        }
    }
    (d, fallback)
}

fn argmax(s: &[f64]) -> Option<usize> {
    s.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Tape version of [`decide_values`]. With `ste` the threshold passes
/// gradient straight through; otherwise `D` is a constant.
pub fn decide(tape: &Tape, s: Var, threshold: f64, ste: bool) -> Result<(Var, bool)> {
    let values = tape.value(s).data().to_vec();
    let (d, fallback) = decide_values(&values, threshold);
    if !ste {
        return Ok((tape.constant(Tensor::new(vec![d.len()], d)?), fallback));
    }
    let hard = tape.ste_threshold(s, threshold);
    if !fallback {
        return Ok((hard, false));
    }
    let patch = tape.constant(Tensor::new(vec![d.len()], d)?);
    Ok((tape.add(hard, patch)?, true))
}

/// `sum_t D_t S_t Agg(phi_t) / (sum_t D_t S_t + eps)`, shape `[1, d]`.
pub fn aggregate(b: &Binder, phi: Var, s: Var, d: Var) -> Result<Var> {
    let t = b.tape();
    let frames = t.shape(phi)[0];
    let w = t.reshape(t.mul(d, s)?, &[frames, 1])?;
    let agg = nn::mlp(b, AGG, phi)?;
    let num = t.sum(t.mul(agg, w)?, 0)?;
    let den = t.add_scalar(t.sum_all(w), AGG_EPS);
    Ok(t.div(num, den)?)
}

/// Seeded uniform derangement of `0..n` by rejection sampling.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(UsamError::config(format!(
            "contrastive negatives need a batch of at least 2, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// In-batch negatives: row `i` of the result is row `perm[i]` of `pooled`.
pub fn sample_negatives(tape: &Tape, pooled: Var, perm: &[usize]) -> Result<Var> {
    Ok(tape.embedding_lookup(pooled, perm)?)
}

/// Batch mean of `max(d(a, p) - d(a, n) + margin, 0)` with cosine distance.
/// All inputs are `[B, d]`.
pub fn triplet_loss(tape: &Tape, anchor: Var, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let batch = tape.shape(anchor)[0];
    let mut hinges = Vec::with_capacity(batch);
    for i in 0..batch {
        let a = tape.slice(anchor, 0, i, i + 1)?;
        let d_pos = tape.cosine_distance(a, tape.slice(pos, 0, i, i + 1)?)?;
        let d_neg = tape.cosine_distance(a, tape.slice(neg, 0, i, i + 1)?)?;
        let h = tape.relu(tape.add_scalar(tape.sub(d_pos, d_neg)?, margin));
        hinges.push(tape.reshape(h, &[1])?);
    }
    Ok(tape.mean_all(tape.concat(&hinges, 0)?))
}

#[derive(Clone, Copy, Debug)]
pub struct SaclmSettings {
    pub threshold: f64,
    pub lambda: f64,
    pub margin: f64,
    /// Straight-through gradient for the selection mask; off for finite
    /// difference checks, where the mask must be piecewise constant.
    pub ste: bool,
}

pub struct SaclmOutput {
    /// Per example `[T_a]`.
    pub scores: Vec<Var>,
    /// Per example `[T_a]`, in `{0, 1}`.
    pub decisions: Vec<Tensor>,
    /// `[B, d]`
    pub aggregated: Var,
    pub negatives: Vec<usize>,
    pub fallbacks: usize,
    pub loss_triplet: Var,
    pub loss_sparsity: Var,
    pub loss: Var,
}

/// Full contrastive objective. `phis[i]` is `[T_a_i, d]` and `texts[i]` is
/// the target-text embedding sequence `[T_t_i, d]` of example `i`.
pub fn saclm_loss(
    b: &Binder,
    phis: &[Var],
    texts: &[Var],
    perm: &[usize],
    settings: SaclmSettings,
) -> Result<SaclmOutput> {
    let t = b.tape();
    let batch = phis.len();
    if batch < 2 {
        return Err(UsamError::config("contrastive loss needs a batch of at least 2"));
    }
    if texts.len() != batch || perm.len() != batch {
        return Err(UsamError::arg("phi, text and negative counts differ"));
    }
    let mut scores = Vec::with_capacity(batch);
    let mut decisions = Vec::with_capacity(batch);
    let mut pooled_audio = Vec::with_capacity(batch);
    let mut pooled_text = Vec::with_capacity(batch);
    let mut fallbacks = 0;
    let mut frames = 0;
    for (&phi, &text) in phis.iter().zip(texts) {
        let t_a = t.shape(phi)[0];
        frames += t_a;
        let aligned = align_text(t, text, t_a)?;
        let s = score(b, phi, aligned)?;
        let (d, fell_back) = decide(t, s, settings.threshold, settings.ste)?;
        fallbacks += usize::from(fell_back);
        pooled_audio.push(aggregate(b, phi, s, d)?);
        pooled_text.push(t.mean(text, 0)?);
        decisions.push(t.value(d).clone());
        scores.push(s);
    }
    let aggregated = t.concat(&pooled_audio, 0)?;
    let pos = t.concat(&pooled_text, 0)?;
    let neg = sample_negatives(t, pos, perm)?;
    let loss_triplet = triplet_loss(t, aggregated, pos, neg, settings.margin)?;
    let all_scores = t.concat(&scores, 0)?;
    let loss_sparsity = t.scale(t.l1_norm(all_scores), settings.lambda / frames as f64);
    let loss = t.add(loss_triplet, loss_sparsity)?;
    Ok(SaclmOutput {
        scores,
        decisions,
        aggregated,
        negatives: perm.to_vec(),
        fallbacks,
        loss_triplet,
        loss_sparsity,
        loss,
    })
}
