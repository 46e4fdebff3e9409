use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

/// Value of a simulated analog channel as a function of sim time in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Signal {
    Constant {
        value: f64,
    },
    Ramp {
        start: f64,
        per_s: f64,
        #[serde(default = "neg_inf")]
        min: f64,
        #[serde(default = "pos_inf")]
        max: f64,
    },
    /// Piecewise-linear through `[t_s, value]` points.
    Trace {
        points: Vec<[f64; 2]>,
        #[serde(default)]
        repeat_s: Option<f64>,
    },
}

fn neg_inf() -> f64 {
    f64::MIN
}

fn pos_inf() -> f64 {
    f64::MAX
}

impl Signal {
    /// Rejects traces that are empty, unordered in time or non-finite.
    pub fn check(&self) -> Result<(), String> {
        match self {
            Signal::Trace { points, repeat_s } => {
                if points.is_empty() {
                    return Err("trace has no points".into());
                }
                if points.iter().flatten().any(|v| !v.is_finite()) {
                    return Err("trace point is not finite".into());
                }
                if points.windows(2).any(|w| w[1][0] < w[0][0]) {
                    return Err("trace times must be non-decreasing".into());
                }
                if repeat_s.is_some_and(|p| p.is_nan() || p <= 0.0) {
                    return Err("repeat_s must be positive".into());
                }
                Ok(())
            }
            Signal::Ramp { start, per_s, min, max } if ![*start, *per_s].iter().all(|v| v.is_finite()) || min > max => {
                Err("ramp needs finite start/per_s and min <= max".into())
            }
            _ => Ok(()),
        }
    }

    pub fn at(&self, t_s: f64) -> f64 {
        match self {
            Signal::Constant { value } => *value,
            Signal::Ramp { start, per_s, min, max } => (start + per_s * t_s).clamp(*min, *max),
            Signal::Trace { points, repeat_s } => {
                let t = match repeat_s {
                    Some(p) if *p > 0.0 => t_s.rem_euclid(*p),
                    _ => t_s,
                };
                interpolate(points, t)
            }
        }
    }
}

fn interpolate(points: &[[f64; 2]], t: f64) -> f64 {
    let Some(first) = points.first() else { return 0.0 };
    if t <= first[0] {
        return first[1];
    }
    for w in points.windows(2) {
        let [t0, v0] = w[0];
        let [t1, v1] = w[1];
        if t <= t1 {
            if t1 <= t0 {
                return v1;
            }
            return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
        }
    }
    points[points.len() - 1][1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_interpolates_and_repeats() {
        let s = Signal::Trace {
            points: vec![[0.0, 0.0], [10.0, 100.0]],
            repeat_s: Some(20.0),
        };
        assert_eq!(s.at(5.0), 50.0);
        assert_eq!(s.at(15.0), 100.0);
        assert_eq!(s.at(25.0), 50.0);
    }

    #[test]
    fn ramp_clamps() {
        let s = Signal::Ramp {
            start: 10.0,
            per_s: -1.0,
            min: 0.0,
            max: 100.0,
        };
        assert_eq!(s.at(4.0), 6.0);
        assert_eq!(s.at(40.0), 0.0);
    }
}
