use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Largest system dimension the embedder accepts; vacant dimensions are
    /// padded up to it.
    pub d_max: usize,
    pub max_target_length: usize,
    /// Feed-forward width as a multiple of `d_emb`.
    pub ffn_mult: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_emb: 64,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 4,
            d_max: 6,
            max_target_length: 512,
            ffn_mult: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("d_emb ({d}) must be divisible by n_heads ({h})")]
    Heads { d: usize, h: usize },
    #[error("{0} must be positive")]
    Zero(&'static str),
    #[error("d_max must be between 1 and {max}, got {got}")]
    DMax { got: usize, max: usize },
}

impl ModelConfig {
    /// Published full-size shape (about 86M parameters).
    pub fn paper() -> Self {
        Self {
            d_emb: 512,
            n_heads: 16,
            enc_layers: 4,
            dec_layers: 16,
            ..Self::default()
        }
    }

    /// Smallest shape used by the gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_emb: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_max: 2,
            max_target_length: 16,
            ffn_mult: 2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (v, name) in [
            (self.d_emb, "d_emb"),
            (self.n_heads, "n_heads"),
            (self.max_target_length, "max_target_length"),
            (self.ffn_mult, "ffn_mult"),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if self.d_emb % self.n_heads != 0 {
            return Err(ConfigError::Heads {
                d: self.d_emb,
                h: self.n_heads,
            });
        }
        let max = odeformer_core::expr::MAX_VARIABLES;
        if self.d_max == 0 || self.d_max > max {
            return Err(ConfigError::DMax { got: self.d_max, max });
        }
        Ok(())
    }

    /// Tokens per observed point: a sign/mantissa/exponent triplet for the
    /// time and for each of `d_max` state slots.
    pub fn tokens_per_point(&self) -> usize {
        3 * (self.d_max + 1)
    }

    pub fn head_dim(&self) -> usize {
        self.d_emb / self.n_heads
    }
}

/// Optimizer, schedule and batching settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_steps: usize,
    /// Length of the first cosine cycle after warmup. Each restart doubles
    /// the length and divides the peak by `restart_damping`.
    pub cycle_steps: usize,
    pub restart_damping: f64,
    /// Budget of target tokens per batch.
    pub tokens_per_batch: usize,
    /// Optional cap on examples per batch.
    pub max_batch_examples: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 2e-4,
            lr_floor: 1e-7,
            warmup_steps: 100,
            cycle_steps: 3000,
            restart_damping: 1.5,
            tokens_per_batch: 1000,
            max_batch_examples: usize::MAX,
            total_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate used for the update at `step` (0-based): linear warmup
    /// from `lr_floor` to `lr_peak`, then damped cosine cycles.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            return self.lr_floor + (self.lr_peak - self.lr_floor) * f;
        }
        let mut s = step - self.warmup_steps;
        let mut period = self.cycle_steps.max(1);
        let mut peak = self.lr_peak;
        while s >= period {
            s -= period;
            period = period.saturating_mul(2);
            peak /= self.restart_damping;
        }
        let progress = s as f64 / period as f64;
        self.lr_floor + 0.5 * (peak - self.lr_floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
