//! Named desk-scale experiment settings.

use crate::datagen::DistributionSpec;
use crate::error::{config_err, Result};
use crate::freqest::FreqTrainConfig;
use crate::nn_model::{LossKind, ModelConfig};
use crate::trainer::{Ablation, TrainConfig};

pub const NN_PRESETS: &[&str] = &[
    "uniform1d",
    "zipf1d",
    "hard1d",
    "uniform2d",
    "hard2d",
    "sphere30d",
    "extra_space_1d",
    "extra_space_30d",
    "synthetic_rep",
];

pub const FREQ_PRESETS: &[&str] = &["freq_desk", "freq_k32"];

fn train(distribution: DistributionSpec, model: ModelConfig) -> TrainConfig {
    TrainConfig {
        distribution,
        model,
        loss: LossKind::CrossEntropy,
        ablation: Ablation::None,
        batch_size: 128,
        lr: 3e-3,
        weight_decay: 0.0,
        max_steps: 3000,
        eval_every: 250,
        eval_instances: 1000,
        patience: 6,
        seed: 0,
        aux_weight: 1.0,
        log_every: 50,
    }
}

/// Training config for a nearest-neighbor preset.
pub fn nn_preset(name: &str) -> Result<TrainConfig> {
    let c = match name {
        "uniform1d" => train(DistributionSpec::uniform1d(16), ModelConfig::desk(16, 1, 4)),
        "zipf1d" => {
            let mut m = ModelConfig::desk(16, 1, 4);
            m.input_scale = 100.0;
            train(DistributionSpec::zipf(16, 100, crate::datagen::ZIPF_ALPHA), m)
        }
        "hard1d" => {
            let mut m = ModelConfig::desk(15, 1, 3);
            m.input_scale = 1000.0;
            train(DistributionSpec::hard1d(15, crate::datagen::HARD_A), m)
        }
        "uniform2d" => train(DistributionSpec::uniform2d(16), ModelConfig::desk(16, 2, 4)),
        "hard2d" => {
            let mut m = ModelConfig::desk(16, 2, 4);
            m.input_scale = 1000.0;
            train(DistributionSpec::hard2d(16, crate::datagen::HARD_A), m)
        }
        "sphere30d" => train(DistributionSpec::hypersphere(16, 30, 0.8), ModelConfig::desk(16, 30, 4)),
        "extra_space_1d" => {
            let mut m = ModelConfig::desk(16, 1, 1);
            m.extra_tokens = 16;
            let mut c = train(DistributionSpec::uniform1d(16), m);
            c.loss = LossKind::Mse;
            c
        }
        "extra_space_30d" => {
            let mut m = ModelConfig::desk(16, 30, 2);
            m.extra_tokens = 8;
            let mut c = train(DistributionSpec::hypersphere(16, 30, 0.8), m);
            c.loss = LossKind::Mse;
            c
        }
        "synthetic_rep" => train(DistributionSpec::synthetic_rep(16, 128, 64), ModelConfig::desk(16, 128, 4)),
        other => {
            return config_err(format!(
                "unknown preset '{other}'; expected one of {}",
                NN_PRESETS.join(", ")
            ))
        }
    };
    c.validate()?;
    Ok(c)
}

/// Training config for a frequency-estimation preset.
pub fn freq_preset(name: &str) -> Result<FreqTrainConfig> {
    let c = match name {
        "freq_desk" => FreqTrainConfig::desk(8, 1, 50, 1.2, 30),
        "freq_k32" => FreqTrainConfig::desk(32, 1, 1000, 1.2, 100),
        other => {
            return config_err(format!(
                "unknown preset '{other}'; expected one of {}",
                FREQ_PRESETS.join(", ")
            ))
        }
    };
    c.validate()?;
    Ok(c)
}
