//! Flat `key = value` configuration covering model dimensions, the synthetic
//! task generator, and training.
//!
//! Every field has a default; a config file only needs the keys it changes.
//! Unknown keys are rejected. [`Config::to_text`] emits every key in a fixed
//! order and is what the checkpoint fingerprint hashes.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Result, UsamError};

/// Number of symbol tokens; BOS/EOS/PAD follow them in the vocabulary.
pub const SYMBOLS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub window: usize,
    pub stride: usize,
    /// Output channels; 0 removes the encoder from the bank.
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoders: [EncoderConfig; 3],
    pub d_model: usize,
    pub qformer_window: usize,
    pub num_queries: usize,
    pub num_experts: usize,
    pub expert_hidden: usize,
    pub d_text: usize,
    pub score_hidden: usize,
    pub agg_hidden: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_ffn: usize,
    pub lm_max_seq: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub lora_init_std: f64,
    pub logit_scale: f64,
    pub threshold: f64,
    /// Initial output bias of the score network.
    pub score_bias_init: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoders: [
                EncoderConfig { window: 16, stride: 16, dim: 8 },
                EncoderConfig { window: 32, stride: 32, dim: 8 },
                EncoderConfig { window: 64, stride: 64, dim: 8 },
            ],
            d_model: 64,
            qformer_window: 8,
            num_queries: 1,
            num_experts: 3,
            expert_hidden: 128,
            d_text: 64,
            score_hidden: 128,
            agg_hidden: 128,
            lm_layers: 2,
            lm_heads: 4,
            lm_ffn: 256,
            lm_max_seq: 128,
            lora_rank: 8,
            lora_scale: 1.0,
            lora_init_std: 0.02,
            logit_scale: 0.25,
            threshold: 0.5,
            score_bias_init: 2.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Fused channel width `d1 + d2 + d3`.
    pub fn fused_dim(&self) -> usize {
        self.encoders.iter().map(|e| e.dim).sum()
    }

    /// Symbols plus BOS, EOS and PAD.
    pub fn vocab_size(&self) -> usize {
        SYMBOLS + 3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(UsamError::config(m));
        if self.fused_dim() == 0 {
            return fail("at least one encoder needs a nonzero dim");
        }
        for e in &self.encoders {
            if e.dim > 0 && (e.window == 0 || e.stride == 0) {
                return fail("encoder window and stride must be positive");
            }
        }
        if self.qformer_window == 0 || self.num_queries == 0 {
            return fail("qformer_window and num_queries must be positive");
        }
        if self.num_experts == 0 {
            return fail("num_experts must be positive");
        }
        if self.d_text != self.d_model {
            return fail("d_text must equal d_model (prompt embeddings share the LM table)");
        }
        if self.lm_heads == 0 || !self.d_model.is_multiple_of(self.lm_heads) {
            return fail("d_model must be divisible by lm_heads");
        }
        if self.lora_rank == 0 || self.lora_rank >= self.d_model {
            return fail("lora_rank must satisfy 0 < r < d_model");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail("threshold must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub vocab: usize,
    /// Generator frames per token motif.
    pub motif_frames: usize,
    /// Waveform samples per generator frame.
    pub frame_samples: usize,
    pub noise_ratio: f64,
    pub noise_amplitude: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub data_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab: SYMBOLS,
            motif_frames: 4,
            frame_samples: 128,
            noise_ratio: 0.3,
            noise_amplitude: 0.25,
            min_tokens: 3,
            max_tokens: 8,
            data_seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(UsamError::config(m));
        if self.vocab == 0 || self.vocab > SYMBOLS {
            return fail("vocab must be in 1..=32");
        }
        if self.motif_frames == 0 || self.frame_samples == 0 {
            return fail("motif_frames and frame_samples must be positive");
        }
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return fail("noise_ratio must lie in [0, 1)");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return fail("need 1 <= min_tokens <= max_tokens");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub alpha_mix: f64,
    pub lambda: f64,
    pub margin: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Skip weight decay for rank-1 parameters and the Q-Former query.
    pub decay_exempt_vectors: bool,
    pub disable_tapm: bool,
    pub disable_saclm: bool,
    pub zero_encoder: [bool; 3],
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 1e-6,
            warmup_ratio: 0.13,
            batch_size: 8,
            total_steps: 3000,
            alpha_mix: 0.5,
            lambda: 0.01,
            margin: 0.2,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay_exempt_vectors: true,
            disable_tapm: false,
            disable_saclm: false,
            zero_encoder: [false; 3],
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(UsamError::config(m));
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return fail("warmup_ratio must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alpha_mix) {
            return fail("alpha_mix must lie in [0, 1]");
        }
        if self.batch_size < 2 && !self.disable_saclm {
            return fail("batch_size must be >= 2 when SACLM is enabled");
        }
        if self.total_steps == 0 {
            return fail("total_steps must be positive");
        }
        if self.lambda < 0.0 || self.margin < 0.0 {
            return fail("lambda and margin must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| UsamError::config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(UsamError::config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        let longest = self.task.max_tokens as f64 * self.task.motif_frames as f64
            / (1.0 - self.task.noise_ratio);
        let seq = longest.ceil() as usize * self.model.num_queries + 2 + self.task.max_tokens + 1;
        if seq > self.model.lm_max_seq {
            return Err(UsamError::config(format!(
                "longest sequence ({seq}) exceeds lm_max_seq ({})",
                self.model.lm_max_seq
            )));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.task;
        let r = &mut self.train;
        match key {
            "d_model" => m.d_model = parse(key, value)?,
            "enc1_window" => m.encoders[0].window = parse(key, value)?,
            "enc1_stride" => m.encoders[0].stride = parse(key, value)?,
            "enc1_dim" => m.encoders[0].dim = parse(key, value)?,
            "enc2_window" => m.encoders[1].window = parse(key, value)?,
            "enc2_stride" => m.encoders[1].stride = parse(key, value)?,
            "enc2_dim" => m.encoders[1].dim = parse(key, value)?,
            "enc3_window" => m.encoders[2].window = parse(key, value)?,
            "enc3_stride" => m.encoders[2].stride = parse(key, value)?,
            "enc3_dim" => m.encoders[2].dim = parse(key, value)?,
            "qformer_window" => m.qformer_window = parse(key, value)?,
            "num_queries" => m.num_queries = parse(key, value)?,
            "num_experts" => m.num_experts = parse(key, value)?,
            "expert_hidden" => m.expert_hidden = parse(key, value)?,
            "d_text" => m.d_text = parse(key, value)?,
            "score_hidden" => m.score_hidden = parse(key, value)?,
            "agg_hidden" => m.agg_hidden = parse(key, value)?,
            "lm_layers" => m.lm_layers = parse(key, value)?,
            "lm_heads" => m.lm_heads = parse(key, value)?,
            "lm_ffn" => m.lm_ffn = parse(key, value)?,
            "lm_max_seq" => m.lm_max_seq = parse(key, value)?,
            "lora_rank" => m.lora_rank = parse(key, value)?,
            "lora_scale" => m.lora_scale = parse(key, value)?,
            "lora_init_std" => m.lora_init_std = parse(key, value)?,
            "logit_scale" => m.logit_scale = parse(key, value)?,
            "threshold" => m.threshold = parse(key, value)?,
            "score_bias_init" => m.score_bias_init = parse(key, value)?,
            "init_seed" => m.init_seed = parse(key, value)?,
            "vocab" => t.vocab = parse(key, value)?,
            "motif_frames" => t.motif_frames = parse(key, value)?,
            "frame_samples" => t.frame_samples = parse(key, value)?,
            "noise_ratio" => t.noise_ratio = parse(key, value)?,
            "noise_amplitude" => t.noise_amplitude = parse(key, value)?,
            "min_tokens" => t.min_tokens = parse(key, value)?,
            "max_tokens" => t.max_tokens = parse(key, value)?,
            "data_seed" => t.data_seed = parse(key, value)?,
            "lr" => r.lr = parse(key, value)?,
            "weight_decay" => r.weight_decay = parse(key, value)?,
            "warmup_ratio" => r.warmup_ratio = parse(key, value)?,
            "batch_size" => r.batch_size = parse(key, value)?,
            "total_steps" => r.total_steps = parse(key, value)?,
            "alpha_mix" => r.alpha_mix = parse(key, value)?,
            "lambda" => r.lambda = parse(key, value)?,
            "margin" => r.margin = parse(key, value)?,
            "seed" => r.seed = parse(key, value)?,
            "beta1" => r.beta1 = parse(key, value)?,
            "beta2" => r.beta2 = parse(key, value)?,
            "adam_eps" => r.adam_eps = parse(key, value)?,
            "decay_exempt_vectors" => r.decay_exempt_vectors = parse_bool(key, value)?,
            "disable_tapm" => r.disable_tapm = parse_bool(key, value)?,
            "disable_saclm" => r.disable_saclm = parse_bool(key, value)?,
            "zero_encoder1" => r.zero_encoder[0] = parse_bool(key, value)?,
            "zero_encoder2" => r.zero_encoder[1] = parse_bool(key, value)?,
            "zero_encoder3" => r.zero_encoder[2] = parse_bool(key, value)?,
            "log_every" => r.log_every = parse(key, value)?,
            _ => return Err(UsamError::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.task;
        let r = &self.train;
        let e = &m.encoders;
        vec![
            ("d_model", m.d_model.to_string()),
            ("enc1_window", e[0].window.to_string()),
            ("enc1_stride", e[0].stride.to_string()),
            ("enc1_dim", e[0].dim.to_string()),
            ("enc2_window", e[1].window.to_string()),
            ("enc2_stride", e[1].stride.to_string()),
            ("enc2_dim", e[1].dim.to_string()),
            ("enc3_window", e[2].window.to_string()),
            ("enc3_stride", e[2].stride.to_string()),
            ("enc3_dim", e[2].dim.to_string()),
            ("qformer_window", m.qformer_window.to_string()),
            ("num_queries", m.num_queries.to_string()),
            ("num_experts", m.num_experts.to_string()),
            ("expert_hidden", m.expert_hidden.to_string()),
            ("d_text", m.d_text.to_string()),
            ("score_hidden", m.score_hidden.to_string()),
            ("agg_hidden", m.agg_hidden.to_string()),
            ("lm_layers", m.lm_layers.to_string()),
            ("lm_heads", m.lm_heads.to_string()),
            ("lm_ffn", m.lm_ffn.to_string()),
            ("lm_max_seq", m.lm_max_seq.to_string()),
            ("lora_rank", m.lora_rank.to_string()),
            ("lora_scale", m.lora_scale.to_string()),
            ("lora_init_std", m.lora_init_std.to_string()),
            ("logit_scale", m.logit_scale.to_string()),
            ("threshold", m.threshold.to_string()),
            ("score_bias_init", m.score_bias_init.to_string()),
            ("init_seed", m.init_seed.to_string()),
            ("vocab", t.vocab.to_string()),
            ("motif_frames", t.motif_frames.to_string()),
            ("frame_samples", t.frame_samples.to_string()),
            ("noise_ratio", t.noise_ratio.to_string()),
            ("noise_amplitude", t.noise_amplitude.to_string()),
            ("min_tokens", t.min_tokens.to_string()),
            ("max_tokens", t.max_tokens.to_string()),
            ("data_seed", t.data_seed.to_string()),
            ("lr", r.lr.to_string()),
            ("weight_decay", r.weight_decay.to_string()),
            ("warmup_ratio", r.warmup_ratio.to_string()),
            ("batch_size", r.batch_size.to_string()),
            ("total_steps", r.total_steps.to_string()),
            ("alpha_mix", r.alpha_mix.to_string()),
            ("lambda", r.lambda.to_string()),
            ("margin", r.margin.to_string()),
            ("seed", r.seed.to_string()),
            ("beta1", r.beta1.to_string()),
            ("beta2", r.beta2.to_string()),
            ("adam_eps", r.adam_eps.to_string()),
            ("decay_exempt_vectors", r.decay_exempt_vectors.to_string()),
            ("disable_tapm", r.disable_tapm.to_string()),
            ("disable_saclm", r.disable_saclm.to_string()),
            ("zero_encoder1", r.zero_encoder[0].to_string()),
            ("zero_encoder2", r.zero_encoder[1].to_string()),
            ("zero_encoder3", r.zero_encoder[2].to_string()),
            ("log_every", r.log_every.to_string()),
        ]
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut config = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                UsamError::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of [`Config::to_text`], truncated to 16 bytes.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}
