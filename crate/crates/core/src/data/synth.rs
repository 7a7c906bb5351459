//! Seeded synthetic datasets.

use std::f64::consts::TAU;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Frequency, Series, SeriesTable};
use crate::distributions::{standard_sample, Family};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Daily cycle around a per-series level, light Gaussian noise.
    Seasonal,
    /// Level plus a weak daily cycle with t(3) noise.
    HeavyTailed,
    /// Level driven by a binary promotion covariate known in advance.
    FutureDriven,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seasonal" => Ok(SynthKind::Seasonal),
            "heavy_tailed" => Ok(SynthKind::HeavyTailed),
            "future_driven" => Ok(SynthKind::FutureDriven),
            other => Err(Error::InvalidArgument(format!(
                "unknown synthetic kind `{other}` (seasonal, heavy_tailed, future_driven)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub n_series: usize,
    pub length: usize,
    pub seed: u64,
    /// Promotion effect size.
    pub beta: f64,
    /// Steps by which the target anticipates a promotion.
    pub lead: usize,
    /// Covariate rows generated past the last target value.
    pub future_steps: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            n_series: 20,
            length: 1200,
            seed: 0,
            beta: 3.0,
            lead: 3,
            future_steps: 48,
        }
    }
}

/// Generates an hourly table. For `future_driven` the target at `t` is
/// `base + β·promo[t + lead]` plus a small cycle and noise, so the promo
/// column is only useful to a model that looks ahead of `t`.
pub fn synth_generate(kind: SynthKind, opts: &SynthOptions) -> Result<SeriesTable> {
    if opts.n_series == 0 || opts.length == 0 {
        return Err(Error::InvalidArgument("synthetic table needs series and steps".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let start = NaiveDate::from_ymd_opt(2024, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let width = opts.n_series.saturating_sub(1).to_string().len().max(2);
    let cycle = |t: usize| 1.0 + (TAU * t as f64 / 24.0).sin();
    let mut series = Vec::with_capacity(opts.n_series);
    for i in 0..opts.n_series {
        let id = format!("s{i:0width$}");
        let (target, numeric) = match kind {
            SynthKind::Seasonal => {
                let base = rng.random_range(5.0..15.0);
                let amp = rng.random_range(1.0..5.0);
                let noise = Normal::new(0.0, 0.05 * amp).expect("finite");
                let y = (0..opts.length)
                    .map(|t| base + amp * cycle(t) + noise.sample(&mut rng))
                    .collect();
                (y, Vec::new())
            }
            SynthKind::HeavyTailed => {
                let level = rng.random_range(10.0..20.0);
                let amp = rng.random_range(0.5..1.5);
                let scale = rng.random_range(0.5..1.0);
                let y = (0..opts.length)
                    .map(|t| {
                        level + amp * cycle(t) + scale * standard_sample(Family::StudentT3, &mut rng)
                    })
                    .collect();
                (y, Vec::new())
            }
            SynthKind::FutureDriven => {
                let base = rng.random_range(5.0..10.0);
                let amp = rng.random_range(0.5..1.0);
                let noise = Normal::new(0.0, 0.3).expect("finite");
                let rows = opts.length + opts.future_steps.max(opts.lead);
                let promo: Vec<f64> = (0..rows + opts.lead)
                    .map(|_| if rng.random_bool(0.2) { 1.0 } else { 0.0 })
                    .collect();
                let y = (0..opts.length)
                    .map(|t| base + opts.beta * promo[t + opts.lead] + amp * cycle(t) + noise.sample(&mut rng))
                    .collect();
                (y, promo[..opts.length + opts.future_steps].to_vec())
            }
        };
        series.push(Series {
            id,
            start,
            target,
            numeric,
            categorical: Vec::new(),
        });
    }
    let numeric_names = match kind {
        SynthKind::FutureDriven => vec!["promo".to_string()],
        _ => Vec::new(),
    };
    Ok(SeriesTable {
        frequency: Frequency::Hour,
        numeric_names,
        categorical_names: Vec::new(),
        vocabularies: Vec::new(),
        series,
    })
}

/// Sample autocorrelation at `lag`.
pub fn lag_autocorrelation(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    if lag >= n {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let cov: f64 = (lag..n).map(|t| (x[t] - mean) * (x[t - lag] - mean)).sum();
    cov / var
}
