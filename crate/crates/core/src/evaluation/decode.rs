//! Autoregressive decoding of forecast windows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::QUANTILES;
use crate::data::{DatasetConfig, SeriesTable, WindowBatch, WindowRef};
use crate::distributions::standard_sample;
use crate::error::{Error, Result};
use crate::model::infer::FrozenModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Feed each step's median forward; quantiles from the predicted
    /// distribution.
    Analytic,
    /// Sample paths, feeding each path's draws forward; empirical quantiles.
    MonteCarlo { samples: usize },
}

impl Default for DecodeMode {
    fn default() -> Self {
        DecodeMode::MonteCarlo { samples: 100 }
    }
}

/// Forecast for one window in the original target space.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowForecast {
    pub window: WindowRef,
    /// Local index of the first forecast step.
    pub forecast_start: usize,
    pub actual: Vec<f64>,
    /// Per step, the quantiles at [`QUANTILES`], nondecreasing.
    pub quantiles: Vec<[f64; 9]>,
}

impl WindowForecast {
    pub fn quantile(&self, k: usize) -> Vec<f64> {
        self.quantiles.iter().map(|q| q[k]).collect()
    }

    pub fn median(&self) -> Vec<f64> {
        self.quantile(4)
    }
}

/// Linear-interpolation order statistic of sorted `xs` at level `p`.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sampling stream of a window: depends only on the seed, the series and
/// the window start.
fn window_rng(seed: u64, w: WindowRef) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((w.series as u64) << 32) | w.start as u64);
    rng
}

/// Decodes the horizon of every window in `refs`. Conditioning lags are
/// observed values; each forecast step's lag is the previous step's median
/// (analytic) or the path's previous draw (Monte Carlo).
pub fn decode_forecast(
    model: &FrozenModel,
    table: &SeriesTable,
    dataset: &DatasetConfig,
    refs: &[WindowRef],
    mode: DecodeMode,
    seed: u64,
) -> Result<Vec<WindowForecast>> {
    let hp = &model.hyper;
    let (t0, t_len) = (hp.t0, hp.window());
    let family = hp.distribution;
    let z: Vec<f64> = QUANTILES
        .iter()
        .map(|&p| family.standard_quantile(p))
        .collect::<Result<_>>()?;
    let unscale = |v: f64, scale: f64| dataset.inverse(v * scale);
    let actual = |w: WindowRef| table.series[w.series].target[w.start + t0..w.start + t_len].to_vec();
    let mut out = Vec::with_capacity(refs.len());
    match mode {
        DecodeMode::Analytic => {
            if refs.is_empty() {
                return Ok(out);
            }
            let batch = WindowBatch::assemble(table, dataset, hp, refs)?;
            let mut state = model.lag_state(batch.inputs())?;
            let b = refs.len();
            let mut quantiles = vec![Vec::with_capacity(hp.horizon); b];
            for t in 0..t_len {
                if t > t0 {
                    for j in 0..b {
                        let median = state.output(t - 1).0[j];
                        state.set_lag(t, j, median);
                    }
                }
                state.compute(t)?;
                if t >= t0 {
                    let (mu, sigma) = state.output(t);
                    for j in 0..b {
                        let mut q = [0.0; 9];
                        for k in 0..9 {
                            q[k] = unscale(mu[j] + sigma[j] * z[k], batch.scale[j]);
                        }
                        quantiles[j].push(q);
                    }
                }
            }
            for (j, (&w, q)) in refs.iter().zip(quantiles).enumerate() {
                debug_assert_eq!(batch.refs[j], w);
                out.push(WindowForecast {
                    window: w,
                    forecast_start: w.start + t0,
                    actual: actual(w),
                    quantiles: q,
                });
            }
        }
        DecodeMode::MonteCarlo { samples } => {
            if samples < 10 {
                return Err(Error::InvalidArgument(format!("monte carlo needs at least 10 samples, got {samples}")));
            }
            for &w in refs {
                let batch = WindowBatch::assemble(table, dataset, hp, &[w])?;
                let scale = batch.scale[0];
                let mut single = model.lag_state(batch.inputs())?;
                for t in 0..t0 {
                    single.compute(t)?;
                }
                let mut state = single.replicate(samples)?;
                let mut rng = window_rng(seed, w);
                let mut draws = vec![0.0; samples];
                let mut quantiles = Vec::with_capacity(hp.horizon);
                for t in t0..t_len {
                    if t > t0 {
                        for (path, &d) in draws.iter().enumerate() {
                            state.set_lag(t, path, d);
                        }
                    }
                    state.compute(t)?;
                    let (mu, sigma) = state.output(t);
                    for (path, d) in draws.iter_mut().enumerate() {
                        *d = mu[path] + sigma[path] * standard_sample(family, &mut rng);
                    }
                    let mut sorted = draws.clone();
                    sorted.sort_by(f64::total_cmp);
                    let mut q = [0.0; 9];
                    for (k, &p) in QUANTILES.iter().enumerate() {
                        q[k] = unscale(empirical_quantile(&sorted, p), scale);
                    }
                    quantiles.push(q);
                }
                out.push(WindowForecast {
                    window: w,
                    forecast_start: w.start + t0,
                    actual: actual(w),
                    quantiles,
                });
            }
        }
    }
    Ok(out)
}

/// Seasonal-naive forecasts for the same windows; all quantiles equal the
/// point forecast.
pub fn seasonal_naive_forecasts(
    table: &SeriesTable,
    refs: &[WindowRef],
    t0: usize,
    horizon: usize,
    period: usize,
) -> Result<Vec<WindowForecast>> {
    refs.iter()
        .map(|&w| {
            let s = &table.series[w.series];
            let history = &s.target[w.start..w.start + t0];
            let point = super::seasonal_naive(history, period, horizon)?;
            Ok(WindowForecast {
                window: w,
                forecast_start: w.start + t0,
                actual: s.target[w.start + t0..w.start + t0 + horizon].to_vec(),
                quantiles: point.into_iter().map(|v| [v; 9]).collect(),
            })
        })
        .collect()
}
