//! Run configuration and the train/evaluate/ablate/grid workflows shared by
//! the command-line tool and the test suites.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_windows, ingest_csv, input_dims, synth_generate, write_csv, DatasetConfig, SeriesTable, SynthKind,
    SynthOptions, WindowIndex,
};
use crate::distributions::Family;
use crate::error::{Error, Result};
use crate::evaluation::{
    decode_forecast, emit_report, seasonal_naive_forecasts, DecodeMode, Metrics, MetricsReport, NrmseMode,
    SeedMetrics, WindowForecast,
};
use crate::model::checkpoint::{load_checkpoint_expecting, save_checkpoint, Checkpoint};
use crate::model::infer::FrozenModel;
use crate::model::{BiTCNModel, HyperParams, InputDims};
use crate::training::{evaluate_nll, grid_search, train, GridResult, RunRecord, TrainConfig, TrainData, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    #[default]
    Synth,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    pub source: SourceKind,
    /// CSV input when `source = "csv"`.
    pub path: Option<PathBuf>,
    pub synth_kind: SynthKind,
    pub synth: SynthOptions,
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource {
            source: SourceKind::Synth,
            path: None,
            synth_kind: SynthKind::Seasonal,
            synth: SynthOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodeKind {
    Analytic,
    #[default]
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub decode: DecodeKind,
    pub samples: usize,
    pub nrmse: NrmseMode,
    /// Period of the seasonal-naive baseline.
    pub naive_period: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            decode: DecodeKind::MonteCarlo,
            samples: 100,
            nrmse: NrmseMode::Mean,
            naive_period: 24,
        }
    }
}

impl EvalConfig {
    pub fn mode(&self) -> DecodeMode {
        match self.decode {
            DecodeKind::Analytic => DecodeMode::Analytic,
            DecodeKind::MonteCarlo => DecodeMode::MonteCarlo { samples: self.samples },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// When set, `train` searches the grid first and trains the best cell.
    pub enabled: bool,
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            enabled: false,
            learning_rates: vec![1e-3, 5e-4, 1e-4],
            batch_sizes: vec![128, 256, 512],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads for independent seeds and cells.
    pub threads: usize,
    pub output: PathBuf,
    pub data: DataSource,
    pub dataset: DatasetConfig,
    pub model: HyperParams,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub grid: GridConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            threads: 1,
            output: PathBuf::from("runs/default"),
            data: DataSource::default(),
            dataset: DatasetConfig::default(),
            model: HyperParams::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

/// Parses a `key=value` override; the value is read as TOML and falls back
/// to a bare string.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text and applies `key=value` overrides on top.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| {
            // The merged table has no spans; the file alone does.
            match toml::from_str::<RunConfig>(text) {
                Err(spanned) => Error::Config(spanned.to_string()),
                Ok(_) => Error::Config(format!("after overrides: {e}")),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        self.train.validate()?;
        self.dataset.validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.data.source == SourceKind::Csv && self.data.path.is_none() {
            return Err(Error::Config("data.path is required for csv sources".into()));
        }
        if self.eval.decode == DecodeKind::MonteCarlo && self.eval.samples < 10 {
            return Err(Error::Config("eval.samples must be at least 10".into()));
        }
        Ok(())
    }

    /// Effective configuration as TOML, echoed into every artifact.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Loaded table plus its windows and input widths.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub table: SeriesTable,
    pub windows: WindowIndex,
    pub dims: InputDims,
}

impl Prepared {
    pub fn data<'a>(&'a self, cfg: &'a RunConfig) -> TrainData<'a> {
        TrainData {
            table: &self.table,
            dataset: &cfg.dataset,
            windows: &self.windows,
        }
    }
}

pub fn load_table(cfg: &RunConfig) -> Result<SeriesTable> {
    match cfg.data.source {
        SourceKind::Synth => synth_generate(cfg.data.synth_kind, &cfg.data.synth),
        SourceKind::Csv => ingest_csv(cfg.data.path.as_deref().expect("validated"), &cfg.dataset),
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let table = load_table(cfg)?;
    let windows = build_windows(&table, &cfg.dataset, &cfg.model)?;
    if windows.test.is_empty() {
        return Err(Error::Data("no test windows; series too short for the split".into()));
    }
    let dims = input_dims(&table, &cfg.dataset);
    Ok(Prepared { table, windows, dims })
}

/// A trained model for one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub model: BiTCNModel,
    pub outcome: TrainOutcome,
}

impl SeedRun {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.outcome.optimizer.clone()),
            rng: Some(self.outcome.rng),
            epoch: self.outcome.record.best_epoch,
        }
    }
}

/// Initializes and trains a model; all randomness flows from `seed`.
pub fn train_seed(cfg: &RunConfig, prep: &Prepared, seed: u64) -> Result<SeedRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = BiTCNModel::new(cfg.model.clone(), prep.dims.clone(), &mut rng)?;
    let outcome = train(&mut model, &prep.data(cfg), &cfg.train, seed, &mut rng, cfg.to_toml())?;
    Ok(SeedRun { seed, model, outcome })
}

/// Test-split forecasts and metrics plus the validation NLL.
pub fn evaluate_model(
    cfg: &RunConfig,
    prep: &Prepared,
    model: &BiTCNModel,
    seed: u64,
) -> Result<(SeedMetrics, Vec<WindowForecast>)> {
    let frozen = FrozenModel::new(model);
    let forecasts = decode_forecast(&frozen, &prep.table, &cfg.dataset, &prep.windows.test, cfg.eval.mode(), seed)?;
    let metrics = Metrics::compute(&forecasts, cfg.eval.nrmse)?;
    let validation_nll = if prep.windows.validation.is_empty() {
        f64::NAN
    } else {
        evaluate_nll(model, &prep.data(cfg), &prep.windows.validation, cfg.train.batch_size, cfg.train.loss_range)?
    };
    Ok((
        SeedMetrics {
            seed,
            metrics,
            validation_nll,
        },
        forecasts,
    ))
}

/// Seasonal-naive metrics on the test split.
pub fn naive_metrics(cfg: &RunConfig, prep: &Prepared) -> Result<Metrics> {
    let f = seasonal_naive_forecasts(
        &prep.table,
        &prep.windows.test,
        cfg.model.t0,
        cfg.model.horizon,
        cfg.eval.naive_period,
    )?;
    Metrics::compute(&f, cfg.eval.nrmse)
}

/// Applies `f` to every item on up to `threads` workers; results keep the
/// input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Outcome of training all configured seeds.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub report: MetricsReport,
    pub records: Vec<RunRecord>,
    pub out_dir: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Trains every seed (after a grid search when `grid.enabled`), writing `seed-<s>.ckpt`, `seed-<s>.record.txt`,
/// `config.toml` and the report files into `out`. Stops at the first
/// failing seed.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let prep = prepare(cfg)?;
    let mut tuned;
    let cfg = if cfg.grid.enabled {
        let result = grid_over(cfg, &prep)?;
        write_text(&out.join("grid.txt"), &grid_table(cfg, &result))?;
        let best = result
            .best_cell()
            .ok_or_else(|| Error::numeric("grid search", "every cell failed"))?;
        tuned = cfg.clone();
        tuned.train.learning_rate = best.learning_rate;
        tuned.train.batch_size = best.batch_size;
        tuned.grid.enabled = false;
        &tuned
    } else {
        cfg
    };
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let results = parallel_map(&cfg.train.seeds, cfg.threads, |&seed| -> Result<_> {
        let run = train_seed(cfg, &prep, seed)?;
        let (metrics, forecasts) = evaluate_model(cfg, &prep, &run.model, seed)?;
        Ok((run, metrics, forecasts))
    });
    let mut records = Vec::new();
    let mut per_seed = Vec::new();
    let mut all_forecasts = Vec::new();
    let mut parameters = 0;
    for r in results {
        let (run, metrics, forecasts) = r?;
        let ckpt_name = format!("seed-{}.ckpt", run.seed);
        save_checkpoint(&run.checkpoint(), &out.join(&ckpt_name))?;
        let mut record = run.outcome.record.clone();
        record.checkpoint = Some(ckpt_name);
        write_text(&out.join(format!("seed-{}.record.txt", run.seed)), &record.to_text())?;
        parameters = run.model.count_parameters();
        records.push(record);
        per_seed.push(metrics);
        if all_forecasts.is_empty() {
            all_forecasts = forecasts;
        }
    }
    let report = MetricsReport {
        model: "bitcn".into(),
        parameters,
        build_version: crate::BUILD_VERSION.into(),
        seeds: cfg.train.seeds.clone(),
        per_seed,
        config: cfg.to_toml(),
    };
    emit_report(&report, &all_forecasts, &records, out)?;
    Ok(TrainSummary {
        report,
        records,
        out_dir: out.to_path_buf(),
    })
}

/// Re-evaluates a checkpoint on the configured dataset. The checkpoint's
/// hyperparameters and input widths must match the configuration.
pub fn run_evaluate(cfg: &RunConfig, checkpoint: &Path, seed: u64, out: &Path) -> Result<MetricsReport> {
    let ckpt = load_checkpoint_expecting(checkpoint, &cfg.model)?;
    let prep = prepare(cfg)?;
    if ckpt.model.inputs != prep.dims {
        return Err(Error::Checkpoint {
            path: checkpoint.to_path_buf(),
            message: format!("input dims {:?} do not match dataset {:?}", ckpt.model.inputs, prep.dims),
        });
    }
    let (metrics, forecasts) = evaluate_model(cfg, &prep, &ckpt.model, seed)?;
    let report = MetricsReport {
        model: "bitcn".into(),
        parameters: ckpt.model.count_parameters(),
        build_version: crate::BUILD_VERSION.into(),
        seeds: vec![seed],
        per_seed: vec![metrics],
        config: cfg.to_toml(),
    };
    emit_report(&report, &forecasts, &[], out)?;
    Ok(report)
}

/// One cell of the forward-module × distribution ablation.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub forward_module: bool,
    pub distribution: Family,
    pub parameters: usize,
    pub report: MetricsReport,
    pub records: Vec<RunRecord>,
    /// `(seed, message)` for seeds that failed.
    pub failures: Vec<(u64, String)>,
}

/// Trains and evaluates one configuration for every seed, collecting
/// failures instead of stopping.
pub fn run_cell(cfg: &RunConfig, prep: &Prepared, label: &str) -> Result<AblationCell> {
    let params = BiTCNModel::new(cfg.model.clone(), prep.dims.clone(), &mut ChaCha8Rng::seed_from_u64(0))?
        .count_parameters();
    let results = parallel_map(&cfg.train.seeds, cfg.threads, |&seed| -> Result<_> {
        let run = train_seed(cfg, prep, seed)?;
        let (m, _) = evaluate_model(cfg, prep, &run.model, seed)?;
        Ok((run.outcome.record, m))
    });
    let mut cell = AblationCell {
        forward_module: cfg.model.forward_module,
        distribution: cfg.model.distribution,
        parameters: params,
        report: MetricsReport {
            model: label.to_string(),
            parameters: params,
            build_version: crate::BUILD_VERSION.into(),
            seeds: cfg.train.seeds.clone(),
            per_seed: Vec::new(),
            config: cfg.to_toml(),
        },
        records: Vec::new(),
        failures: Vec::new(),
    };
    for (&seed, r) in cfg.train.seeds.iter().zip(results) {
        match r {
            Ok((record, m)) => {
                cell.records.push(record);
                cell.report.per_seed.push(m);
            }
            Err(e) => cell.failures.push((seed, e.to_string())),
        }
    }
    Ok(cell)
}

/// Runs {forward on, off} × {t(3), Gaussian} with shared seeds and writes
/// `ablation.txt` plus one report directory per cell.
pub fn run_ablation(cfg: &RunConfig, out: &Path) -> Result<Vec<AblationCell>> {
    let prep = prepare(cfg)?;
    let mut cells = Vec::new();
    for forward_module in [true, false] {
        for distribution in [Family::StudentT3, Family::Gaussian] {
            let mut c = cfg.clone();
            c.model.forward_module = forward_module;
            c.model.distribution = distribution;
            let label = format!(
                "bitcn{}_{}",
                if forward_module { "" } else { "_no_forward" },
                distribution.name()
            );
            let cell = run_cell(&c, &prep, &label)?;
            emit_report(&cell.report, &[], &cell.records, &out.join(&label))?;
            cells.push(cell);
        }
    }
    write_text(&out.join("ablation.txt"), &ablation_table(&cells))?;
    Ok(cells)
}

pub fn ablation_table(cells: &[AblationCell]) -> String {
    let mut s = String::from("forward  distribution  parameters  smape     nrmse     q50       mq        failed_seeds\n");
    for c in cells {
        let m = c.report.mean();
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
        s += &format!(
            "{:<8} {:<13} {:<11} {:<9} {:<9} {:<9} {:<9} {}\n",
            if c.forward_module { "on" } else { "off" },
            c.distribution.name(),
            c.parameters,
            f(m.map(|m| m.smape)),
            f(m.map(|m| m.nrmse)),
            f(m.map(|m| m.q[4])),
            f(m.map(|m| m.mq)),
            c.failures.len()
        );
    }
    s
}

/// Grid search over learning rate × batch size on prepared data.
pub fn grid_over(cfg: &RunConfig, prep: &Prepared) -> Result<GridResult> {
    grid_search(&cfg.grid.learning_rates, &cfg.grid.batch_sizes, &cfg.train.seeds, |lr, bs, seed| {
        let mut c = cfg.clone();
        c.train.learning_rate = lr;
        c.train.batch_size = bs;
        Ok(train_seed(&c, prep, seed)?.outcome.record)
    })
}

pub fn grid_table(cfg: &RunConfig, result: &GridResult) -> String {
    let mut s = String::from("learning_rate batch_size mean_best_val_nll failed_seeds\n");
    for (i, c) in result.cells.iter().enumerate() {
        let failed = c.runs.iter().filter(|r| r.is_err()).count();
        let mean = c.mean_best_val().map_or("-".into(), |v| v.to_string());
        let mark = if result.best == Some(i) { " *" } else { "" };
        s += &format!("{} {} {} {}{}\n", c.learning_rate, c.batch_size, mean, failed, mark);
    }
    s += "[config]\n";
    s += &cfg.to_toml();
    s
}

/// Runs the grid and writes `grid.txt`.
pub fn run_grid(cfg: &RunConfig, out: &Path) -> Result<GridResult> {
    let prep = prepare(cfg)?;
    let result = grid_over(cfg, &prep)?;
    write_text(&out.join("grid.txt"), &grid_table(cfg, &result))?;
    Ok(result)
}

/// Writes a synthetic table as CSV.
pub fn run_synth(kind: SynthKind, opts: &SynthOptions, out: &Path) -> Result<SeriesTable> {
    let table = synth_generate(kind, opts)?;
    write_csv(&table, out)?;
    Ok(table)
}
