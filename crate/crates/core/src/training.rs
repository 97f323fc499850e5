//! Hyperparameter files handed to an external fine-tuning run.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const BASE_MODEL: &str = "LLaVA-7B-v0";
pub const VISION_ENCODER: &str = "CLIP ViT-L/14";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Pretraining,
    Lora,
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretraining" => Ok(Self::Pretraining),
            "lora" => Ok(Self::Lora),
            other => Err(format!("unknown strategy {other:?} (expected pretraining or lora)")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pretraining => "pretraining",
            Self::Lora => "lora",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub strategy: Strategy,
    pub batch_size: u32,
    pub learning_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_rank: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_alpha: Option<u32>,
    pub base_model: String,
    pub vision_encoder: String,
}

impl TrainingConfig {
    pub fn for_strategy(strategy: Strategy) -> Self {
        let (learning_rate, lora_rank, lora_alpha) = match strategy {
            Strategy::Pretraining => (2e-3, None, None),
            Strategy::Lora => (5e-4, Some(64), Some(32)),
        };
        Self {
            strategy,
            batch_size: 32,
            learning_rate,
            lora_rank,
            lora_alpha,
            base_model: BASE_MODEL.into(),
            vision_encoder: VISION_ENCODER.into(),
        }
    }

    /// LoRA fields must be present exactly when the strategy is LoRA.
    pub fn validate(&self) -> Result<(), String> {
        let has_lora = self.lora_rank.is_some() && self.lora_alpha.is_some();
        let any_lora = self.lora_rank.is_some() || self.lora_alpha.is_some();
        match self.strategy {
            Strategy::Lora if !has_lora => Err("lora strategy needs lora_rank and lora_alpha".into()),
            Strategy::Pretraining if any_lora => Err("pretraining must not set lora fields".into()),
            _ => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretraining_has_no_lora_fields() {
        let c = TrainingConfig::for_strategy(Strategy::Pretraining);
        assert_eq!((c.batch_size, c.learning_rate), (32, 2e-3));
        let v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        assert!(v.get("lora_rank").is_none());
        c.validate().unwrap();
    }

    #[test]
    fn lora_fields() {
        let c = TrainingConfig::for_strategy(Strategy::Lora);
        assert_eq!((c.lora_rank, c.lora_alpha, c.learning_rate), (Some(64), Some(32), 5e-4));
        let mut broken = c.clone();
        broken.lora_alpha = None;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn strategy_parses() {
        assert_eq!("lora".parse::<Strategy>(), Ok(Strategy::Lora));
        assert!("full".parse::<Strategy>().is_err());
    }
}
