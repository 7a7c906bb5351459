//! Point and quantile metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The nine evaluated quantile levels.
pub const QUANTILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

fn check(actual: &[f64], forecast: &[f64], op: &str) -> Result<()> {
    if actual.is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: empty series")));
    }
    if actual.len() != forecast.len() {
        return Err(Error::InvalidArgument(format!(
            "{op}: {} actuals vs {} forecasts",
            actual.len(),
            forecast.len()
        )));
    }
    Ok(())
}

/// `mean(2|y − ŷ| / (|y| + |ŷ|))`, a `0/0` step counting as 0. In `[0, 2]`.
pub fn smape(actual: &[f64], forecast: &[f64]) -> Result<f64> {
    check(actual, forecast, "smape")?;
    let total: f64 = actual
        .iter()
        .zip(forecast)
        .map(|(y, f)| {
            let den = y.abs() + f.abs();
            if den == 0.0 {
                0.0
            } else {
                2.0 * (y - f).abs() / den
            }
        })
        .sum();
    Ok(total / actual.len() as f64)
}

/// Normalizer of the NRMSE denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NrmseMode {
    /// Mean absolute actual over the horizon.
    #[default]
    Mean,
    /// Sum of absolute actuals over the horizon.
    LiteralSum,
}

/// RMSE over the horizon divided by the mean (or sum) absolute actual;
/// the denominator is 1 when all actuals are zero.
pub fn nrmse(actual: &[f64], forecast: &[f64], mode: NrmseMode) -> Result<f64> {
    check(actual, forecast, "nrmse")?;
    let n = actual.len() as f64;
    let mse = actual.iter().zip(forecast).map(|(y, f)| (y - f).powi(2)).sum::<f64>() / n;
    let abs_sum: f64 = actual.iter().map(|y| y.abs()).sum();
    let den = match (abs_sum == 0.0, mode) {
        (true, _) => 1.0,
        (false, NrmseMode::Mean) => abs_sum / n,
        (false, NrmseMode::LiteralSum) => abs_sum,
    };
    Ok(mse.sqrt() / den)
}

/// `Σ 2·|(y − ŷ)(1{y ≤ ŷ} − p)|`.
pub fn quantile_loss_numerator(actual: &[f64], forecast: &[f64], p: f64) -> Result<f64> {
    check(actual, forecast, "quantile_loss")?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {p} outside (0, 1)")));
    }
    Ok(actual
        .iter()
        .zip(forecast)
        .map(|(&y, &f)| {
            let ind = if y <= f { 1.0 } else { 0.0 };
            2.0 * ((y - f) * (ind - p)).abs()
        })
        .sum())
}

/// Normalized quantile loss pooled over every series and step. Errors when
/// `Σ y ≤ 0`; [`quantile_loss_numerator`] gives the unnormalized value.
pub fn quantile_loss(actual: &[f64], forecast: &[f64], p: f64) -> Result<f64> {
    let num = quantile_loss_numerator(actual, forecast, p)?;
    let den: f64 = actual.iter().sum();
    if !(den > 0.0) {
        return Err(Error::Data(format!("quantile loss normalizer Σy = {den} is not positive")));
    }
    Ok(num / den)
}

/// Arithmetic mean of `Q(0.1) … Q(0.9)` given as `(p, Q(p))` pairs in any
/// order.
pub fn mean_quantile(values: &[(f64, f64)]) -> Result<f64> {
    let mut found = [None; 9];
    for &(p, q) in values {
        let k = QUANTILES
            .iter()
            .position(|&l| (l - p).abs() < 1e-9)
            .ok_or_else(|| Error::InvalidArgument(format!("unexpected quantile level {p}")))?;
        found[k] = Some(q);
    }
    let mut sum = 0.0;
    for (k, q) in found.iter().enumerate() {
        sum += q.ok_or_else(|| Error::InvalidArgument(format!("missing Q({})", QUANTILES[k])))?;
    }
    Ok(sum / 9.0)
}

/// Repeats the last `period` observations across the horizon.
pub fn seasonal_naive(history: &[f64], period: usize, horizon: usize) -> Result<Vec<f64>> {
    if period == 0 || history.len() < period {
        return Err(Error::InvalidArgument(format!(
            "seasonal naive needs {period} steps of history, have {}",
            history.len()
        )));
    }
    let base = history.len() - period;
    Ok((0..horizon).map(|k| history[base + k % period]).collect())
}
