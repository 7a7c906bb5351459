//! Sliding windows, date-based splits and batch assembly.

use chrono::NaiveDateTime;
use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{fourier_features, mean_scale, DatasetConfig, SeriesTable};
use crate::error::{Error, Result};
use crate::model::{CategoricalDim, HyperParams, InputDims, ModelInputs};
use crate::tensor::{IntTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Split boundaries as step indices on the table's global time grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitBoundaries {
    pub origin: NaiveDateTime,
    /// First step that is not training data.
    pub train_end: usize,
    /// First step of the test range.
    pub val_end: usize,
    pub total: usize,
}

impl SplitBoundaries {
    pub fn new(table: &SeriesTable, cfg: &DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        let origin = table
            .series
            .iter()
            .map(|s| s.start)
            .min()
            .ok_or_else(|| Error::Data("empty table".into()))?;
        let mut total = 0;
        for s in &table.series {
            total = total.max(offset(table, origin, s.start)? + s.target.len());
        }
        let train_end = (cfg.train_fraction * total as f64).round() as usize;
        let val_end = ((cfg.train_fraction + cfg.val_fraction) * total as f64).round() as usize;
        Ok(SplitBoundaries {
            origin,
            train_end,
            val_end,
            total,
        })
    }

    /// Split owning a forecast range `[start, end)` of global steps, if any.
    pub fn classify(&self, start: usize, end: usize) -> Option<Split> {
        if end <= self.train_end {
            Some(Split::Train)
        } else if start >= self.train_end && end <= self.val_end {
            Some(Split::Validation)
        } else if start >= self.val_end {
            Some(Split::Test)
        } else {
            None
        }
    }
}

fn offset(table: &SeriesTable, origin: NaiveDateTime, start: NaiveDateTime) -> Result<usize> {
    let step = table.frequency.step().num_seconds();
    let delta = (start - origin).num_seconds();
    if delta % step != 0 {
        return Err(Error::Data(format!("series start {start} is off the {step}s grid")));
    }
    Ok((delta / step) as usize)
}

/// A window: series index and local index of its first step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowRef {
    pub series: usize,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowIndex {
    pub boundaries: SplitBoundaries,
    pub train: Vec<WindowRef>,
    pub validation: Vec<WindowRef>,
    pub test: Vec<WindowRef>,
    /// Series shorter than one window.
    pub short_series: usize,
    /// Windows whose covariate range runs past the known covariates.
    pub uncovered_windows: usize,
}

impl WindowIndex {
    pub fn get(&self, split: Split) -> &[WindowRef] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Training windows for one epoch: a uniform draw without replacement
    /// of at most `cap` windows, in shuffled order.
    pub fn sample_train<R: Rng + ?Sized>(&self, cap: Option<usize>, rng: &mut R) -> Vec<WindowRef> {
        let n = self.train.len();
        match cap {
            Some(c) if c < n => index::sample(rng, n, c).into_iter().map(|i| self.train[i]).collect(),
            _ => {
                let mut all = self.train.clone();
                all.shuffle(rng);
                all
            }
        }
    }
}

/// Enumerates every window of every split. The forecast range of a window
/// starting at local step `s` is `[s + t0, s + t0 + horizon)`; windows are
/// assigned to the split containing that whole range. Training windows use
/// `stride`; validation and test windows are aligned to their split's first
/// step with `eval_stride`.
pub fn build_windows(table: &SeriesTable, cfg: &DatasetConfig, hp: &HyperParams) -> Result<WindowIndex> {
    hp.validate()?;
    table.validate()?;
    let b = SplitBoundaries::new(table, cfg)?;
    let eval_stride = cfg.eval_stride.unwrap_or(hp.horizon);
    let window = hp.window();
    let mut idx = WindowIndex {
        boundaries: b,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        short_series: 0,
        uncovered_windows: 0,
    };
    for (si, s) in table.series.iter().enumerate() {
        if s.target.len() < window {
            idx.short_series += 1;
            continue;
        }
        let off = offset(table, b.origin, s.start)?;
        let cov_len = table.covariate_len(s);
        for start in 0..=s.target.len() - window {
            let fs = off + start + hp.t0;
            let Some(split) = b.classify(fs, fs + hp.horizon) else {
                continue;
            };
            let keep = match split {
                Split::Train => fs.is_multiple_of(cfg.stride),
                Split::Validation => (fs - b.train_end).is_multiple_of(eval_stride),
                Split::Test => (fs - b.val_end).is_multiple_of(eval_stride),
            };
            if !keep {
                continue;
            }
            if cov_len.is_some_and(|n| start + hp.t_cov > n) {
                idx.uncovered_windows += 1;
                continue;
            }
            let r = WindowRef { series: si, start };
            match split {
                Split::Train => idx.train.push(r),
                Split::Validation => idx.validation.push(r),
                Split::Test => idx.test.push(r),
            }
        }
    }
    Ok(idx)
}

/// Input widths implied by a table and dataset config.
pub fn input_dims(table: &SeriesTable, cfg: &DatasetConfig) -> InputDims {
    let mut categorical = Vec::new();
    if cfg.series_embedding {
        categorical.push(CategoricalDim {
            vocab: table.series.len(),
            dim: cfg.embedding_dim,
        });
    }
    for v in &table.vocabularies {
        categorical.push(CategoricalDim {
            vocab: v.len(),
            dim: cfg.embedding_dim,
        });
    }
    InputDims {
        covariates: table.numeric_names.len() + 2 * cfg.calendar().len(),
        categorical,
    }
}

/// Model-ready tensors for a batch of windows, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `[T × b × 1]`, scaled target shifted one step; position 0 is 0.
    pub y_lag: Tensor,
    /// `[T × b × 1]`, scaled target.
    pub y_true: Tensor,
    /// `[T_c × b × d_cov]`: numeric columns then calendar sine/cosine pairs.
    pub a_cov: Tensor,
    /// `[T_c × b × n_cat]`: series id (when embedded) then categorical columns.
    pub a_cat: IntTensor,
    pub scale: Vec<f64>,
    pub t0: usize,
    pub horizon: usize,
    pub refs: Vec<WindowRef>,
}

impl WindowBatch {
    pub fn assemble(
        table: &SeriesTable,
        cfg: &DatasetConfig,
        hp: &HyperParams,
        refs: &[WindowRef],
    ) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::InvalidArgument("empty window batch".into()));
        }
        let (t_len, t_cov, b) = (hp.window(), hp.t_cov, refs.len());
        let calendar = cfg.calendar();
        let n_num = table.numeric_names.len();
        let d_cov = n_num + 2 * calendar.len();
        let n_cat = table.categorical_names.len() + usize::from(cfg.series_embedding);
        let series_vocab = table.series_vocabulary();

        let mut y_true = vec![0.0; t_len * b];
        let mut y_lag = vec![0.0; t_len * b];
        let mut a_cov = vec![0.0; t_cov * b * d_cov];
        let mut a_cat = vec![0usize; t_cov * b * n_cat];
        let mut scale = Vec::with_capacity(b);
        for (j, r) in refs.iter().enumerate() {
            let s = table
                .series
                .get(r.series)
                .ok_or_else(|| Error::InvalidArgument(format!("no series {}", r.series)))?;
            if r.start + t_len > s.target.len() || table.covariate_len(s).is_some_and(|n| r.start + t_cov > n) {
                return Err(Error::Data(format!("window {r:?} runs past series {}", s.id)));
            }
            let ys: Vec<f64> = s.target[r.start..r.start + t_len].iter().map(|&y| cfg.transform(y)).collect();
            let sc = mean_scale(&ys[..hp.t0])?;
            scale.push(sc);
            for t in 0..t_len {
                y_true[t * b + j] = ys[t] / sc;
                if t > 0 {
                    y_lag[t * b + j] = ys[t - 1] / sc;
                }
            }
            let sid = series_vocab.id(&s.id).expect("series vocabulary covers all ids");
            for t in 0..t_cov {
                let step = r.start + t;
                let row = &mut a_cov[(t * b + j) * d_cov..(t * b + j + 1) * d_cov];
                row[..n_num].copy_from_slice(&s.numeric[step * n_num..(step + 1) * n_num]);
                let ts = s.timestamp(table.frequency, step);
                for (k, c) in calendar.iter().enumerate() {
                    let (sin, cos) = fourier_features(c.value(ts), c.period())?;
                    row[n_num + 2 * k] = sin;
                    row[n_num + 2 * k + 1] = cos;
                }
                let cats = &mut a_cat[(t * b + j) * n_cat..(t * b + j + 1) * n_cat];
                let mut k = 0;
                if cfg.series_embedding {
                    cats[0] = sid;
                    k = 1;
                }
                let nc = n_cat - k;
                cats[k..].copy_from_slice(&s.categorical[step * nc..(step + 1) * nc]);
            }
        }
        Ok(WindowBatch {
            y_lag: Tensor::new(vec![t_len, b, 1], y_lag)?,
            y_true: Tensor::new(vec![t_len, b, 1], y_true)?,
            a_cov: Tensor::new(vec![t_cov, b, d_cov], a_cov)?,
            a_cat: IntTensor::new(vec![t_cov, b, n_cat], a_cat)?,
            scale,
            t0: hp.t0,
            horizon: hp.horizon,
            refs: refs.to_vec(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.scale.len()
    }

    pub fn window(&self) -> usize {
        self.t0 + self.horizon
    }

    pub fn inputs(&self) -> ModelInputs<'_> {
        ModelInputs {
            y_lag: &self.y_lag,
            a_cov: &self.a_cov,
            a_cat: &self.a_cat,
        }
    }

    /// Loss mask over `[T × b]`: horizon steps only, or every step.
    pub fn loss_mask(&self, horizon_only: bool) -> Vec<f64> {
        let b = self.batch_size();
        (0..self.window() * b)
            .map(|i| if !horizon_only || i / b >= self.t0 { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Consecutive chunks of at most `size` windows.
pub struct Batches<'a> {
    refs: &'a [WindowRef],
    size: usize,
}

impl<'a> Batches<'a> {
    pub fn new(refs: &'a [WindowRef], size: usize) -> Self {
        Batches { refs, size: size.max(1) }
    }
}

impl<'a> Iterator for Batches<'a> {
    type Item = &'a [WindowRef];

    fn next(&mut self) -> Option<Self::Item> {
        if self.refs.is_empty() {
            return None;
        }
        let n = self.size.min(self.refs.len());
        let (head, tail) = self.refs.split_at(n);
        self.refs = tail;
        Some(head)
    }
}
