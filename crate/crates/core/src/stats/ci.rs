use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, Normal};

use super::StatsError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum CiMethod {
    /// Normal-approximation binomial interval.
    #[default]
    Wald,
    /// Wilson score interval.
    Wilson,
}

impl CiMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            CiMethod::Wald => "wald",
            CiMethod::Wilson => "wilson",
        }
    }
}

impl FromStr for CiMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wald" => Ok(CiMethod::Wald),
            "wilson" => Ok(CiMethod::Wilson),
            other => Err(format!("unknown CI method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiOptions {
    pub method: CiMethod,
    pub confidence: f64,
}

impl Default for CiOptions {
    fn default() -> Self {
        CiOptions {
            method: CiMethod::Wald,
            confidence: 0.95,
        }
    }
}

/// Two-sided standard normal quantile for `confidence`.
pub fn z_score(confidence: f64) -> Result<f64, StatsError> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(StatsError::InvalidArgument(format!(
            "confidence {confidence} outside (0, 1)"
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(1.0 - (1.0 - confidence) / 2.0))
}

/// Wald interval for a percentage estimate, clipped to [0, 100].
pub fn compute_ci(estimate_pct: f64, n: u64, confidence: f64) -> Result<(f64, f64), StatsError> {
    compute_ci_with(
        estimate_pct,
        n,
        CiOptions {
            method: CiMethod::Wald,
            confidence,
        },
    )
}

pub fn compute_ci_with(
    estimate_pct: f64,
    n: u64,
    options: CiOptions,
) -> Result<(f64, f64), StatsError> {
    if n == 0 {
        return Err(StatsError::NoData("confidence interval with n = 0".into()));
    }
    if !(0.0..=100.0).contains(&estimate_pct) {
        return Err(StatsError::InvalidArgument(format!(
            "estimate {estimate_pct} outside [0, 100]"
        )));
    }
    let z = z_score(options.confidence)?;
    let p = estimate_pct / 100.0;
    let n = n as f64;
    let (low, high) = match options.method {
        CiMethod::Wald => {
            let half = z * (p * (1.0 - p) / n).sqrt();
            (p - half, p + half)
        }
        CiMethod::Wilson => {
            let z2 = z * z;
            let denom = 1.0 + z2 / n;
            let center = (p + z2 / (2.0 * n)) / denom;
            let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
            (center - half, center + half)
        }
    };
    Ok(((low * 100.0).clamp(0.0, 100.0), (high * 100.0).clamp(0.0, 100.0)))
}
