//! Forecast decoding, accuracy metrics and reports.

mod decode;
mod metrics;
mod report;

use std::collections::BTreeMap;

pub use decode::{decode_forecast, empirical_quantile, seasonal_naive_forecasts, DecodeMode, WindowForecast};
pub use metrics::{
    mean_quantile, nrmse, quantile_loss, quantile_loss_numerator, seasonal_naive, smape, NrmseMode, QUANTILES,
};
pub use report::{emit_report, MetricsReport, ReportPaths, SeedMetrics};

use crate::error::Result;

/// Metrics of one set of forecasts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub smape: f64,
    pub nrmse: f64,
    /// `Q(p)` at [`QUANTILES`].
    pub q: [f64; 9],
    pub mq: f64,
    /// False when `Σ y ≤ 0` forced unnormalized quantile losses.
    pub q_normalized: bool,
}

impl Metrics {
    /// sMAPE and NRMSE per series (all of its windows pooled) averaged over
    /// series; quantile losses pooled over everything.
    pub fn compute(forecasts: &[WindowForecast], mode: NrmseMode) -> Result<Self> {
        let mut per_series: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for f in forecasts {
            let e = per_series.entry(f.window.series).or_default();
            e.0.extend_from_slice(&f.actual);
            e.1.extend(f.median());
        }
        let (mut s, mut n) = (0.0, 0.0);
        for (actual, median) in per_series.values() {
            s += smape(actual, median)?;
            n += nrmse(actual, median, mode)?;
        }
        let count = per_series.len().max(1) as f64;
        let actual: Vec<f64> = forecasts.iter().flat_map(|f| f.actual.iter().copied()).collect();
        let normalizer: f64 = actual.iter().sum();
        let q_normalized = normalizer > 0.0;
        let mut q = [0.0; 9];
        for (k, &p) in QUANTILES.iter().enumerate() {
            let fq: Vec<f64> = forecasts.iter().flat_map(|f| f.quantile(k)).collect();
            q[k] = if q_normalized {
                quantile_loss(&actual, &fq, p)?
            } else {
                quantile_loss_numerator(&actual, &fq, p)?
            };
        }
        let pairs: Vec<(f64, f64)> = QUANTILES.iter().copied().zip(q).collect();
        Ok(Metrics {
            smape: if per_series.is_empty() { f64::NAN } else { s / count },
            nrmse: if per_series.is_empty() { f64::NAN } else { n / count },
            q,
            mq: mean_quantile(&pairs)?,
            q_normalized,
        })
    }
}
