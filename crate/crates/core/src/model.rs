//! The assembled model: parameter registry, full forward pass and losses.

use usam_numerics::{Binder, ParamStore, Tensor, Var};

use crate::config::{ModelConfig, TaskSpec};
use crate::data::{Example, Task};
use crate::encoders::{self, EncoderBank};
use crate::error::{Result, UsamError};
use crate::lm::{self, Adapters};
use crate::nn::Init;
use crate::optim;
use crate::qformer;
use crate::saclm::{self, SaclmSettings};
use crate::tapm;

/// Parameter-name prefixes of the trainable set.
pub const TRAINABLE_PREFIXES: [&str; 3] = ["qformer.", "tapm.", "saclm."];

/// Whether `name` belongs to the trainable set: Q-Former, TAPM, SACLM, the
/// adapters and the two input projections.
pub fn is_trainable_name(name: &str) -> bool {
    TRAINABLE_PREFIXES.iter().any(|p| name.starts_with(p))
        || name.contains(".lora_")
        || name.starts_with(lm::AUDIO_PROJ)
}

/// Registers every parameter, rounded to `f32`.
pub fn init_params(config: &ModelConfig) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, config.init_seed);
    encoders::init(&mut init, config)?;
    qformer::init(&mut init, config)?;
    tapm::init(&mut init, config, Task::ALL.len())?;
    saclm::init(&mut init, config)?;
    lm::init(&mut init, config)?;
    optim::quantize_store(&mut store);
    Ok(store)
}

/// Trainable parameter count derived from the configuration alone.
pub fn analytic_trainable_count(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let mlp = |i: usize, h: usize, o: usize| i * h + h + h * o + o;
    let qformer = config.fused_dim() * d + d + config.num_queries * d + 3 * 2 * d + 8 * d * d;
    let tapm = config.num_experts * config.d_text
        + Task::ALL.len() * config.d_text
        + config.num_experts * mlp(d, config.expert_hidden, d);
    let saclm = mlp(2 * d, config.score_hidden, 1) + mlp(d, config.agg_hidden, d);
    let lora = config.lm_layers * 2 * 2 * d * config.lora_rank;
    let audio_proj = d * d + d;
    qformer + tapm + saclm + lora + audio_proj
}

/// Switches that remove one computation path each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Use expert 0 alone, with no routing.
    pub disable_tapm: bool,
    /// Drop the contrastive loss; the objective is the cross-entropy alone.
    pub disable_saclm: bool,
    /// Replace an encoder's output with zeros.
    pub zero_encoder: [bool; 3],
}

#[derive(Clone, Copy, Debug)]
pub struct LossSettings {
    pub alpha: f64,
    pub saclm: SaclmSettings,
}

pub struct ForwardOutput {
    pub loss: Var,
    pub loss_ce: Var,
    pub loss_sac: Option<Var>,
    pub loss_triplet: Option<Var>,
    pub loss_sparsity: Option<Var>,
    /// `[B, experts]`, absent when routing is disabled.
    pub routing: Option<Var>,
    /// Per example `[T_a]`.
    pub scores: Vec<Var>,
    pub decisions: Vec<Tensor>,
    pub fallbacks: usize,
    /// Per example, valid Q-Former positions.
    pub lengths: Vec<usize>,
    /// `[B, T_a max, d]`
    pub projected: Var,
    pub logits: Var,
    pub labels: Vec<usize>,
    pub loss_mask: Vec<f64>,
}

/// Everything the projection stage produces for a batch.
pub struct Projection {
    pub phi: Var,
    pub routing: Option<Var>,
    pub lengths: Vec<usize>,
    /// Per example `[T_a_i, d]`.
    pub per_example: Vec<Var>,
}

/// Encoders, Q-Former and TAPM.
pub fn project_batch(
    b: &Binder,
    config: &ModelConfig,
    bank: &EncoderBank,
    examples: &[&Example],
    ablation: Ablation,
) -> Result<Projection> {
    let t = b.tape();
    let waves: Vec<&[f64]> = examples.iter().map(|e| e.samples.as_slice()).collect();
    let fused = bank.encode_all(&waves, ablation.zero_encoder)?;
    let projected = qformer::input_proj(b, t.constant(fused.values.clone()))?;
    let q = qformer::window_qformer(b, config, projected, &fused.mask)?;
    let (phi, routing) = if ablation.disable_tapm {
        (tapm::expert(b, 0, q.values)?, None)
    } else {
        let tasks: Vec<usize> = examples.iter().map(|e| e.task.id()).collect();
        let prompts: Vec<Vec<usize>> = examples.iter().map(|e| e.prompt.clone()).collect();
        let e_text = tapm::prompt_embedding(b, &tasks, &prompts, lm::TOK_EMBED)?;
        let w = tapm::route(b, e_text)?;
        (tapm::project(b, q.values, w)?, Some(w))
    };
    let d = config.d_model;
    let lengths: Vec<usize> = (0..examples.len()).map(|i| q.valid_len(i)).collect();
    let per_example = lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let row = t.slice(phi, 0, i, i + 1)?;
            let row = t.slice(row, 1, 0, len)?;
            Ok(t.reshape(row, &[len, d])?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Projection {
        phi,
        routing,
        lengths,
        per_example,
    })
}

/// Full forward pass to the combined loss `alpha * CE + (1 - alpha) * SAC`.
pub fn forward(
    b: &Binder,
    config: &ModelConfig,
    bank: &EncoderBank,
    examples: &[&Example],
    negatives: &[usize],
    ablation: Ablation,
    settings: LossSettings,
) -> Result<ForwardOutput> {
    if examples.is_empty() {
        return Err(UsamError::arg("empty batch"));
    }
    let t = b.tape();
    let proj = project_batch(b, config, bank, examples, ablation)?;

    let seqs = examples
        .iter()
        .zip(&proj.per_example)
        .map(|(e, &phi)| lm::build_sequence(b, phi, &e.prompt, &e.targets))
        .collect::<Result<Vec<_>>>()?;
    let (h, labels, loss_mask) = lm::batch_sequences(t, &seqs)?;
    let logits = lm::decoder_forward(b, config, h, Adapters::On)?;
    let loss_ce = lm::ce_loss(t, logits, &labels, &loss_mask)?;

    let mut out = ForwardOutput {
        loss: loss_ce,
        loss_ce,
        loss_sac: None,
        loss_triplet: None,
        loss_sparsity: None,
        routing: proj.routing,
        scores: Vec::new(),
        decisions: Vec::new(),
        fallbacks: 0,
        lengths: proj.lengths,
        projected: proj.phi,
        logits,
        labels,
        loss_mask,
    };
    if ablation.disable_saclm {
        return Ok(out);
    }
    let table = b.param(lm::TOK_EMBED)?;
    let texts = examples
        .iter()
        .map(|e| Ok(t.embedding_lookup(table, &e.targets)?))
        .collect::<Result<Vec<_>>>()?;
    let sac = saclm::saclm_loss(b, &proj.per_example, &texts, negatives, settings.saclm)?;
    let a = settings.alpha;
    out.loss = t.add(t.scale(loss_ce, a), t.scale(sac.loss, 1.0 - a))?;
    out.loss_sac = Some(sac.loss);
    out.loss_triplet = Some(sac.loss_triplet);
    out.loss_sparsity = Some(sac.loss_sparsity);
    out.scores = sac.scores;
    out.decisions = sac.decisions;
    out.fallbacks = sac.fallbacks;
    Ok(out)
}

/// Generator frame covered by the start of Q-Former position `pos`.
pub fn position_frame(config: &ModelConfig, spec: &TaskSpec, pos: usize) -> usize {
    let stride = config
        .encoders
        .iter()
        .filter(|e| e.dim > 0)
        .map(|e| e.stride)
        .min()
        .unwrap_or(1);
    let window = pos / config.num_queries;
    window * config.qformer_window * stride / spec.frame_samples
}

/// Greedy transcription of one example.
pub fn decode(
    b: &Binder,
    config: &ModelConfig,
    bank: &EncoderBank,
    example: &Example,
    ablation: Ablation,
    max_new: usize,
) -> Result<Vec<usize>> {
    let t = b.tape();
    let proj = project_batch(b, config, bank, &[example], ablation)?;
    let audio = crate::nn::linear(b, lm::AUDIO_PROJ, proj.per_example[0])?;
    let prompt = t.embedding_lookup(b.param(lm::TOK_EMBED)?, &example.prompt)?;
    let prefix = t.concat(&[audio, prompt], 0)?;
    lm::greedy_decode(b, config, prefix, max_new)
}
