//! Series tables, calendar covariates, mean scaling and window assembly.

mod csv_io;
mod synth;
mod windows;

use chrono::{Datelike, NaiveDateTime, TimeDelta, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{ingest_csv, parse_timestamp, write_csv};
pub use synth::{lag_autocorrelation, synth_generate, SynthKind, SynthOptions};
pub use windows::{
    build_windows, input_dims, Batches, Split, SplitBoundaries, WindowBatch, WindowIndex, WindowRef,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    #[default]
    Hour,
    Day,
}

impl Frequency {
    pub fn step(self) -> TimeDelta {
        match self {
            Frequency::Hour => TimeDelta::hours(1),
            Frequency::Day => TimeDelta::days(1),
        }
    }
}

/// Calendar attribute turned into a sine/cosine pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalendarFeature {
    HourOfDay,
    DayOfWeek,
    DayOfMonth,
    MonthOfYear,
}

impl CalendarFeature {
    pub fn period(self) -> i64 {
        match self {
            CalendarFeature::HourOfDay => 24,
            CalendarFeature::DayOfWeek => 7,
            CalendarFeature::DayOfMonth => 31,
            CalendarFeature::MonthOfYear => 12,
        }
    }

    pub fn value(self, ts: NaiveDateTime) -> i64 {
        match self {
            CalendarFeature::HourOfDay => ts.hour() as i64,
            CalendarFeature::DayOfWeek => ts.weekday().num_days_from_monday() as i64,
            CalendarFeature::DayOfMonth => ts.day0() as i64,
            CalendarFeature::MonthOfYear => ts.month0() as i64,
        }
    }

    pub fn defaults(freq: Frequency) -> Vec<CalendarFeature> {
        match freq {
            Frequency::Hour => vec![CalendarFeature::HourOfDay, CalendarFeature::DayOfWeek],
            Frequency::Day => vec![CalendarFeature::DayOfWeek, CalendarFeature::MonthOfYear],
        }
    }
}

/// `(sin(2π·value/period), cos(2π·value/period))`.
pub fn fourier_features(value: i64, period: i64) -> Result<(f64, f64)> {
    if period < 1 {
        return Err(Error::InvalidArgument(format!("period must be at least 1, got {period}")));
    }
    let angle = std::f64::consts::TAU * (value.rem_euclid(period)) as f64 / period as f64;
    Ok(angle.sin_cos())
}

/// `1 + mean(history)`; errors when that is not positive.
pub fn mean_scale(history: &[f64]) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("empty scaling history".into()));
    }
    let scale = 1.0 + history.iter().sum::<f64>() / history.len() as f64;
    if !(scale > 0.0) {
        return Err(Error::Data(format!("history mean gives non-positive scale {scale}")));
    }
    Ok(scale)
}

/// Frozen label set of a categorical column; ids are positions in the
/// sorted label list.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    labels: Vec<String>,
}

impl Vocabulary {
    pub fn from_labels<I: IntoIterator<Item = S>, S: Into<String>>(labels: I) -> Self {
        let mut labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        labels.sort();
        labels.dedup();
        Vocabulary { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// One series. Covariate rows may run past the last target value: those
/// are known-in-advance values for steps not yet observed.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub id: String,
    pub start: NaiveDateTime,
    pub target: Vec<f64>,
    /// Row-major `[steps × numeric columns]`.
    pub numeric: Vec<f64>,
    /// Row-major `[steps × categorical columns]`.
    pub categorical: Vec<usize>,
}

impl Series {
    pub fn timestamp(&self, freq: Frequency, t: usize) -> NaiveDateTime {
        self.start + freq.step() * t as i32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub frequency: Frequency,
    pub numeric_names: Vec<String>,
    pub categorical_names: Vec<String>,
    pub vocabularies: Vec<Vocabulary>,
    pub series: Vec<Series>,
}

impl SeriesTable {
    pub fn series_vocabulary(&self) -> Vocabulary {
        Vocabulary::from_labels(self.series.iter().map(|s| s.id.clone()))
    }

    /// Steps with known covariate rows, or `None` when the table has no
    /// covariate columns (calendar features never run out).
    pub fn covariate_len(&self, s: &Series) -> Option<usize> {
        if !self.numeric_names.is_empty() {
            Some(s.numeric.len() / self.numeric_names.len())
        } else if !self.categorical_names.is_empty() {
            Some(s.categorical.len() / self.categorical_names.len())
        } else {
            None
        }
    }

    /// Checks column widths, vocabulary bounds and ordering.
    pub fn validate(&self) -> Result<()> {
        if self.vocabularies.len() != self.categorical_names.len() {
            return Err(Error::Data("one vocabulary per categorical column required".into()));
        }
        let mut ids: Vec<&str> = self.series.iter().map(|s| s.id.as_str()).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data("duplicate series id".into()));
        }
        let (nn, nc) = (self.numeric_names.len(), self.categorical_names.len());
        for s in &self.series {
            let bad = |m: &str| Err(Error::Data(format!("series {}: {m}", s.id)));
            if nn > 0 && s.numeric.len() % nn != 0 || nn == 0 && !s.numeric.is_empty() {
                return bad("ragged numeric covariates");
            }
            if nc > 0 && s.categorical.len() % nc != 0 || nc == 0 && !s.categorical.is_empty() {
                return bad("ragged categorical covariates");
            }
            if nn > 0 && nc > 0 && s.numeric.len() / nn != s.categorical.len() / nc {
                return bad("numeric and categorical covariates differ in length");
            }
            if let Some(len) = self.covariate_len(s) {
                if len < s.target.len() {
                    return bad("covariates end before the target");
                }
            }
            for (i, &id) in s.categorical.iter().enumerate() {
                let vocab = self.vocabularies[i % nc.max(1)].len();
                if id >= vocab {
                    return Err(Error::OutOfVocabulary { id, vocab });
                }
            }
        }
        Ok(())
    }
}

/// Dataset-level options: calendar terms, transforms, split and sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub frequency: Frequency,
    pub numeric_columns: Vec<String>,
    pub categorical_columns: Vec<String>,
    /// Calendar terms; defaults depend on the frequency.
    pub fourier: Option<Vec<CalendarFeature>>,
    /// `log1p` targets before scaling, `expm1` on the way back.
    pub log1p: bool,
    /// Embedding width for each categorical input.
    pub embedding_dim: usize,
    /// Adds the series id as a categorical input.
    pub series_embedding: bool,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub stride: usize,
    /// Stride of validation and test windows; the horizon when unset.
    pub eval_stride: Option<usize>,
    /// Training windows drawn per epoch; all of them when unset.
    pub train_samples: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            frequency: Frequency::Hour,
            numeric_columns: Vec::new(),
            categorical_columns: Vec::new(),
            fourier: None,
            log1p: false,
            embedding_dim: 20,
            series_embedding: true,
            train_fraction: 0.8,
            val_fraction: 0.1,
            stride: 1,
            eval_stride: None,
            train_samples: None,
        }
    }
}

impl DatasetConfig {
    pub fn calendar(&self) -> Vec<CalendarFeature> {
        self.fourier.clone().unwrap_or_else(|| CalendarFeature::defaults(self.frequency))
    }

    pub fn validate(&self) -> Result<()> {
        let f = (self.train_fraction, self.val_fraction);
        if !(f.0 > 0.0 && f.1 >= 0.0 && f.0 + f.1 < 1.0) {
            return Err(Error::Config(format!("bad split fractions {f:?}")));
        }
        if self.stride == 0 || self.eval_stride == Some(0) {
            return Err(Error::Config("strides must be positive".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn transform(&self, y: f64) -> f64 {
        if self.log1p {
            y.ln_1p()
        } else {
            y
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        if self.log1p {
            y.exp_m1()
        } else {
            y
        }
    }
}
