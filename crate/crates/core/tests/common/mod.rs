//! Helpers shared by the acceptance criteria.

#![allow(dead_code)]

use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use bitcn_core::autodiff::{Graph, Var};
use bitcn_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

/// Criteria run one at a time so that wall-clock budgets measure a single
/// criterion on an otherwise idle machine.
pub fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// One acceptance criterion: records checks and prints a single verdict
/// line straight to stderr (bypassing the test harness capture).
pub struct Criterion {
    id: u32,
    name: &'static str,
    started: Instant,
    budget: Option<Duration>,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Criterion {
    pub fn new(id: u32, name: &'static str) -> Self {
        Criterion {
            id,
            name,
            started: Instant::now(),
            budget: None,
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn with_budget(mut self, budget: Duration) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    /// Prints the verdict and panics if any check failed.
    pub fn finish(mut self) {
        let elapsed = self.started.elapsed();
        if let Some(b) = self.budget {
            if elapsed > b {
                self.failures.push(format!("runtime {elapsed:.1?} over budget {b:?}"));
            }
        }
        let verdict = if self.failures.is_empty() { "PASS" } else { "FAIL" };
        let mut detail = self.notes.join("; ");
        if !self.failures.is_empty() {
            detail = format!("{}; failed: {}", detail, self.failures.join(" | "));
        }
        let line = format!(
            "acceptance {:>2} {:<32} {verdict} [{:.1?}] {detail}\n",
            self.id, self.name, elapsed
        );
        let _ = std::io::stderr().lock().write_all(line.as_bytes());
        assert!(self.failures.is_empty(), "{}", line.trim_end());
    }
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    tensor(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect())
}

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so that gradients which are
/// zero up to rounding do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference check of `sum(f(inputs) ⊙ r)` for a fixed random
/// weighting `r`; returns the worst relative error over every coordinate.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let build = |vals: &[Tensor], g: &mut Graph| {
        let vars: Vec<Var> = vals.iter().map(|v| g.variable(v)).collect();
        let out = f(g, &vars).unwrap();
        let w = random(g.shape(out), &mut ChaCha8Rng::seed_from_u64(99));
        let wv = g.input(&w);
        let prod = g.mul(out, wv).unwrap();
        (vars, g.sum(prod))
    };
    let mut g = Graph::new();
    let (vars, loss) = build(inputs, &mut g);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; input.len()]);
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut vals = inputs.to_vec();
                vals[k].data_mut()[i] += delta;
                let mut g2 = Graph::new();
                let (_, l) = build(&vals, &mut g2);
                g2.value(l)[0]
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance.
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}
