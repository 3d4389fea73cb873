//! End-to-end finite-difference check of the combined loss.

use usam_numerics::{grad_check, GradCheckReport, TensorError};

use crate::config::{Config, ModelConfig, TaskSpec};
use crate::data::{self, Example};
use crate::encoders::EncoderBank;
use crate::error::Result;
use crate::model::{self, Ablation};
use crate::train::loss_settings;

/// A small double-precision configuration: `d_model = 16`, two short
/// examples with at most 12 projected frames each.
pub fn check_config() -> Config {
    let mut c = Config::default();
    c.model = ModelConfig {
        d_model: 16,
        d_text: 16,
        expert_hidden: 8,
        score_hidden: 8,
        agg_hidden: 8,
        lm_heads: 2,
        lm_ffn: 16,
        lm_max_seq: 32,
        init_seed: 3,
        ..ModelConfig::default()
    };
    c.task = TaskSpec {
        min_tokens: 2,
        max_tokens: 2,
        ..TaskSpec::default()
    };
    c.train.batch_size = 2;
    c
}

pub fn check_examples(config: &Config) -> Vec<Example> {
    data::generate(&config.task, 11, 2)
}

/// Every trainable parameter of the combined loss against central
/// differences. The selection mask is held constant (no straight-through
/// term) so the loss is piecewise smooth in the parameters.
pub fn model_check(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let config = check_config();
    config.validate()?;
    let store = model::init_params(&config.model)?;
    let bank = EncoderBank::from_store(&store, &config.model)?;
    let examples = check_examples(&config);
    let refs: Vec<&Example> = examples.iter().collect();
    let settings = loss_settings(&config, false);
    Ok(grad_check(
        &store,
        |b| {
            model::forward(b, &config.model, &bank, &refs, &[1, 0], Ablation::default(), settings)
                .map(|o| o.loss)
                .map_err(|e| TensorError::Evaluation(e.to_string()))
        },
        eps,
        tol,
    )?)
}
