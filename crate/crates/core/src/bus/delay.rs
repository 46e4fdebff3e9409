use rand::Rng;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

/// Delay distribution in milliseconds. Samples are rounded to whole ms and floored at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayModel {
    Constant { ms: f64 },
    Uniform { lo_ms: f64, hi_ms: f64 },
    Normal { mean_ms: f64, sd_ms: f64 },
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel::Constant { ms: 0.0 }
    }
}

impl DelayModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let ms = match *self {
            DelayModel::Constant { ms } => ms,
            DelayModel::Uniform { lo_ms, hi_ms } => {
                if hi_ms > lo_ms {
                    rng.random_range(lo_ms..hi_ms)
                } else {
                    lo_ms
                }
            }
            DelayModel::Normal { mean_ms, sd_ms } => match Normal::new(mean_ms, sd_ms.max(0.0)) {
                Ok(n) => n.sample(rng),
                Err(_) => mean_ms,
            },
        };
        ms.max(0.0).round() as u64
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            DelayModel::Constant { ms } => ms.is_finite() && ms >= 0.0,
            DelayModel::Uniform { lo_ms, hi_ms } => lo_ms.is_finite() && hi_ms.is_finite() && 0.0 <= lo_ms && lo_ms <= hi_ms,
            DelayModel::Normal { mean_ms, sd_ms } => mean_ms.is_finite() && sd_ms.is_finite() && sd_ms >= 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(DelayModel::Constant { ms: 100.0 }.sample(&mut rng), 100);
        let uni = DelayModel::Uniform { lo_ms: 0.0, hi_ms: 1000.0 };
        for _ in 0..1000 {
            assert!(uni.sample(&mut rng) <= 1000);
        }
        let wide = DelayModel::Normal { mean_ms: 5.0, sd_ms: 50.0 };
        // floor at zero: no panic on negative draws, all samples non-negative by type
        let zeros = (0..1000).filter(|_| wide.sample(&mut rng) == 0).count();
        assert!(zeros > 0);
    }
}
