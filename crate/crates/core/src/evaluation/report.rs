//! Key/value report files and plot data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Metrics, WindowForecast};
use crate::error::{Error, Result};
use crate::training::RunRecord;

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: Metrics,
    /// Eval-mode NLL on the validation split; NaN when not computed.
    pub validation_nll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Free-form label, e.g. `bitcn` or `seasonal_naive`.
    pub model: String,
    pub parameters: usize,
    pub build_version: String,
    /// Seeds the run was configured with.
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedMetrics>,
    /// Effective configuration, echoed verbatim.
    pub config: String,
}

const FIELDS: [&str; 12] = ["smape", "nrmse", "q10", "q20", "q30", "q40", "q50", "q60", "q70", "q80", "q90", "mq"];

fn field_values(m: &Metrics) -> [f64; 12] {
    let mut v = [0.0; 12];
    v[0] = m.smape;
    v[1] = m.nrmse;
    v[2..11].copy_from_slice(&m.q);
    v[11] = m.mq;
    v
}

fn from_fields(v: &[f64; 12], q_normalized: bool) -> Metrics {
    let mut q = [0.0; 9];
    q.copy_from_slice(&v[2..11]);
    Metrics {
        smape: v[0],
        nrmse: v[1],
        q,
        mq: v[11],
        q_normalized,
    }
}

impl MetricsReport {
    pub fn missing_seeds(&self) -> Vec<u64> {
        self.seeds
            .iter()
            .copied()
            .filter(|s| !self.per_seed.iter().any(|m| m.seed == *s))
            .collect()
    }

    pub fn is_partial(&self) -> bool {
        !self.missing_seeds().is_empty()
    }

    /// Mean and sample standard deviation over seeds, per field.
    fn moments(&self) -> Option<([f64; 12], [f64; 12])> {
        if self.per_seed.is_empty() {
            return None;
        }
        let n = self.per_seed.len() as f64;
        let rows: Vec<[f64; 12]> = self.per_seed.iter().map(|s| field_values(&s.metrics)).collect();
        let mut mean = [0.0; 12];
        let mut std = [0.0; 12];
        for k in 0..12 {
            mean[k] = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            if rows.len() > 1 {
                let ss: f64 = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum();
                std[k] = (ss / (n - 1.0)).sqrt();
            }
        }
        Some((mean, std))
    }

    pub fn mean(&self) -> Option<Metrics> {
        let normalized = self.per_seed.iter().all(|s| s.metrics.q_normalized);
        self.moments().map(|(m, _)| from_fields(&m, normalized))
    }

    pub fn std(&self) -> Option<Metrics> {
        let normalized = self.per_seed.iter().all(|s| s.metrics.q_normalized);
        self.moments().map(|(_, s)| from_fields(&s, normalized))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "schema_version = {REPORT_SCHEMA}");
        let _ = writeln!(s, "build_version = {}", self.build_version);
        let _ = writeln!(s, "model = {}", self.model);
        let _ = writeln!(s, "parameters = {}", self.parameters);
        let _ = writeln!(s, "seeds = {}", join(&self.seeds));
        let _ = writeln!(s, "missing_seeds = {}", join(&self.missing_seeds()));
        let _ = writeln!(s, "partial = {}", self.is_partial());
        for sm in &self.per_seed {
            for (name, v) in FIELDS.iter().zip(field_values(&sm.metrics)) {
                let _ = writeln!(s, "seed.{}.{name} = {v}", sm.seed);
            }
            let _ = writeln!(s, "seed.{}.q_normalized = {}", sm.seed, sm.metrics.q_normalized);
            let _ = writeln!(s, "seed.{}.validation_nll = {}", sm.seed, sm.validation_nll);
        }
        if let Some((mean, std)) = self.moments() {
            for (k, name) in FIELDS.iter().enumerate() {
                let _ = writeln!(s, "mean.{name} = {}", mean[k]);
                let _ = writeln!(s, "std.{name} = {}", std[k]);
            }
        }
        s += "[config]\n";
        s += &self.config;
        if !self.config.is_empty() && !self.config.ends_with('\n') {
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, m: String| Error::Parse { line, message: m };
        let mut kv: Vec<(usize, &str, &str)> = Vec::new();
        let mut config = String::new();
        let mut in_config = false;
        for (i, line) in text.lines().enumerate() {
            if in_config {
                config.push_str(line);
                config.push('\n');
            } else if line == "[config]" {
                in_config = true;
            } else if !line.trim().is_empty() {
                let (k, v) = line
                    .split_once(" = ")
                    .ok_or_else(|| err(i + 1, format!("expected `key = value`, got `{line}`")))?;
                kv.push((i + 1, k, v));
            }
        }
        let get = |key: &str| kv.iter().find(|(_, k, _)| *k == key).map(|&(l, _, v)| (l, v));
        let need = |key: &str| get(key).ok_or_else(|| err(0, format!("missing key `{key}`")));
        let (l, schema) = need("schema_version")?;
        if schema != REPORT_SCHEMA.to_string() {
            return Err(err(l, format!("unsupported schema version {schema}")));
        }
        let num = |l: usize, v: &str| v.parse::<f64>().map_err(|_| err(l, format!("bad number `{v}`")));
        let seeds_of = |l: usize, v: &str| -> Result<Vec<u64>> {
            v.split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| err(l, format!("bad seed `{s}`"))))
                .collect()
        };
        let (l, seeds) = need("seeds")?;
        let seeds = seeds_of(l, seeds)?;
        let (l, params) = need("parameters")?;
        let parameters = params.parse().map_err(|_| err(l, "bad parameter count".into()))?;

        let mut per: BTreeMap<u64, ([f64; 12], bool, usize, f64)> = BTreeMap::new();
        let mut order = Vec::new();
        for &(l, k, v) in &kv {
            let Some(rest) = k.strip_prefix("seed.") else { continue };
            let (seed, field) = rest.split_once('.').ok_or_else(|| err(l, format!("bad key `{k}`")))?;
            let seed: u64 = seed.parse().map_err(|_| err(l, format!("bad seed in `{k}`")))?;
            if !per.contains_key(&seed) {
                order.push(seed);
            }
            let e = per.entry(seed).or_insert(([f64::NAN; 12], true, 0, f64::NAN));
            if field == "q_normalized" {
                e.1 = v == "true";
            } else if field == "validation_nll" {
                e.3 = num(l, v)?;
            } else {
                let idx = FIELDS
                    .iter()
                    .position(|f| *f == field)
                    .ok_or_else(|| err(l, format!("unknown metric `{field}`")))?;
                e.0[idx] = num(l, v)?;
                e.2 += 1;
            }
        }
        let mut per_seed = Vec::new();
        for seed in order {
            let (vals, normalized, count, validation_nll) = per[&seed];
            if count != FIELDS.len() {
                return Err(err(0, format!("seed {seed} has {count} of {} metrics", FIELDS.len())));
            }
            per_seed.push(SeedMetrics {
                seed,
                metrics: from_fields(&vals, normalized),
                validation_nll,
            });
        }
        Ok(MetricsReport {
            model: need("model")?.1.to_string(),
            parameters,
            build_version: need("build_version")?.1.to_string(),
            seeds,
            per_seed,
            config,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPaths {
    pub report: PathBuf,
    pub forecasts: PathBuf,
    pub curves: PathBuf,
}

/// Writes `report.txt`, `forecasts.csv` (per-step quantile fans) and
/// `curves.csv` (per-epoch losses) into `dir`.
pub fn emit_report(
    report: &MetricsReport,
    forecasts: &[WindowForecast],
    records: &[RunRecord],
    dir: &Path,
) -> Result<ReportPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = ReportPaths {
        report: dir.join("report.txt"),
        forecasts: dir.join("forecasts.csv"),
        curves: dir.join("curves.csv"),
    };
    std::fs::write(&paths.report, report.to_text())?;

    let mut f = String::from("series,window_start,step,actual,median,q10,q90\n");
    for w in forecasts {
        for (h, (a, q)) in w.actual.iter().zip(&w.quantiles).enumerate() {
            let _ = writeln!(f, "{},{},{},{a},{},{},{}", w.window.series, w.window.start, w.forecast_start + h, q[4], q[0], q[8]);
        }
    }
    std::fs::write(&paths.forecasts, f)?;

    let mut c = String::from("seed,epoch,train_nll,val_nll,seconds\n");
    for r in records {
        for e in &r.epochs {
            let _ = writeln!(c, "{},{},{},{},{}", r.seed, e.epoch, e.train_nll, e.val_nll, e.seconds);
        }
    }
    std::fs::write(&paths.curves, c)?;
    Ok(paths)
}
