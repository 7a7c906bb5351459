//! Exhaustive search over learning rates and batch sizes.

use super::RunRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GridCell {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// One entry per seed; failures keep their message.
    pub runs: Vec<std::result::Result<RunRecord, String>>,
}

impl GridCell {
    /// Mean best-validation NLL when every seed finished with a finite loss.
    pub fn mean_best_val(&self) -> Option<f64> {
        let mut sum = 0.0;
        for r in &self.runs {
            let v = r.as_ref().ok()?.best_val_nll;
            if !v.is_finite() {
                return None;
            }
            sum += v;
        }
        (!self.runs.is_empty()).then(|| sum / self.runs.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    /// Index into `cells` of the selected configuration.
    pub best: Option<usize>,
}

impl GridResult {
    pub fn best_cell(&self) -> Option<&GridCell> {
        self.best.map(|i| &self.cells[i])
    }
}

/// Trains every `(lr, batch size)` cell for every seed through `run`, then
/// picks the lowest mean best-validation NLL. Ties go to the smaller
/// learning rate, then the smaller batch. Cells with any failed seed are
/// not eligible.
pub fn grid_search<F>(learning_rates: &[f64], batch_sizes: &[usize], seeds: &[u64], mut run: F) -> Result<GridResult>
where
    F: FnMut(f64, usize, u64) -> Result<RunRecord>,
{
    if learning_rates.is_empty() || batch_sizes.is_empty() || seeds.is_empty() {
        return Err(Error::Config("grid search needs learning rates, batch sizes and seeds".into()));
    }
    let mut cells = Vec::new();
    for &lr in learning_rates {
        for &bs in batch_sizes {
            let runs = seeds.iter().map(|&s| run(lr, bs, s).map_err(|e| e.to_string())).collect();
            cells.push(GridCell {
                learning_rate: lr,
                batch_size: bs,
                runs,
            });
        }
    }
    let best = select(&cells);
    Ok(GridResult { cells, best })
}

fn select(cells: &[GridCell]) -> Option<usize> {
    cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.mean_best_val().map(|m| (i, m)))
        .min_by(|(i, a), (j, b)| {
            a.total_cmp(b)
                .then(cells[*i].learning_rate.total_cmp(&cells[*j].learning_rate))
                .then(cells[*i].batch_size.cmp(&cells[*j].batch_size))
        })
        .map(|(i, _)| i)
}
