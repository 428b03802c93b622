use std::time::Duration;

use pairsearch_core::embed::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Candidates per query: 2, or 4 (two mirrored pairs).
    pub candidates: usize,
    pub max_steps: usize,
    /// Inflate the answer noise by the candidates' embedding variance.
    pub use_effective_noise: bool,
    /// Sessions idle longer than this are dropped without contributing data.
    #[serde(with = "secs")]
    pub idle_expiry: Duration,
    /// Answer noise in embedding units; re-estimated after each retrain when unset.
    pub sigma_eps: Option<f64>,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            candidates: 4,
            max_steps: 200,
            use_effective_noise: true,
            idle_expiry: Duration::from_secs(24 * 3600),
            sigma_eps: None,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.candidates != 2 && self.candidates != 4 {
            return Err(format!("candidates must be 2 or 4, got {}", self.candidates));
        }
        if self.max_steps == 0 {
            return Err("max_steps must be positive".into());
        }
        if let Some(s) = self.sigma_eps {
            if !(s > 0.0 && s.is_finite()) {
                return Err(format!("sigma_eps must be positive, got {s}"));
            }
        }
        self.train.validate().map_err(|e| e.to_string())
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs(u64::deserialize(d)?))
    }
}
