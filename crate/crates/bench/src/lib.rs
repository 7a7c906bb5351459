//! Fixtures shared by the benchmarks: a default-sized model and one batch
//! of seasonal windows.

use bitcn_core::data::{build_windows, input_dims, synth_generate, DatasetConfig, SeriesTable, SynthKind, SynthOptions, WindowBatch, WindowIndex};
use bitcn_core::{BiTCNModel, HyperParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub table: SeriesTable,
    pub dataset: DatasetConfig,
    pub windows: WindowIndex,
    pub model: BiTCNModel,
}

impl Fixture {
    pub fn seasonal(hyper: HyperParams) -> Self {
        let table = synth_generate(SynthKind::Seasonal, &SynthOptions::default()).expect("synthetic table");
        let dataset = DatasetConfig::default();
        let windows = build_windows(&table, &dataset, &hyper).expect("windows");
        let model = BiTCNModel::new(hyper, input_dims(&table, &dataset), &mut ChaCha8Rng::seed_from_u64(0))
            .expect("model");
        Fixture {
            table,
            dataset,
            windows,
            model,
        }
    }

    /// The first `size` training windows as one batch.
    pub fn batch(&self, size: usize) -> WindowBatch {
        let refs = &self.windows.train[..size.min(self.windows.train.len())];
        WindowBatch::assemble(&self.table, &self.dataset, &self.model.hyper, refs).expect("batch")
    }
}

/// Standard-normal tensor of the given shape.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
