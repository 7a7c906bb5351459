//! The bidirectional TCN: a backward (causal) stack over lagged targets and
//! past covariates, a forward (anticausal) stack over all known covariates,
//! and dense heads producing the location and scale of the output
//! distribution at every step.

mod block;
pub mod checkpoint;
pub mod infer;
mod init;
mod ops_scalar;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use block::{stack_forward, temporal_block_forward, TemporalBlockParams};

use crate::autodiff::{Direction, Graph, ParamId, ParamStore, Var};
use crate::distributions::Family;
use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

/// How the two stacks' skip sums are combined before the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinMode {
    /// Channel concatenation `[o_cov[:T], o_lag]`.
    Concat,
    /// Elementwise sum.
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// State size `d_h`.
    pub d_hidden: usize,
    /// Layers `N` of the backward stack.
    pub layers: usize,
    /// Layers of the forward stack; `N + 1` when unset.
    pub forward_layers: Option<usize>,
    pub kernel_size: usize,
    pub dropout: f64,
    /// Requested conv groups in the forward stack; the largest divisor of
    /// `d_hidden` not above this is used.
    pub groups: usize,
    /// Floor added to the scale head.
    pub epsilon: f64,
    pub distribution: Family,
    pub softplus_mu: bool,
    pub forward_module: bool,
    pub join: JoinMode,
    /// Conditioning length.
    pub t0: usize,
    pub horizon: usize,
    /// Covariate window length `T_c`.
    pub t_cov: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            d_hidden: 12,
            layers: 5,
            forward_layers: None,
            kernel_size: 9,
            dropout: 0.1,
            groups: 4,
            epsilon: 1e-3,
            distribution: Family::StudentT3,
            softplus_mu: true,
            forward_module: true,
            join: JoinMode::Concat,
            t0: 96,
            horizon: 24,
            t_cov: 144,
        }
    }
}

impl HyperParams {
    /// Modeled window length `T = t0 + horizon`.
    pub fn window(&self) -> usize {
        self.t0 + self.horizon
    }

    pub fn forward_depth(&self) -> usize {
        self.forward_layers.unwrap_or(self.layers + 1)
    }

    pub fn effective_groups(&self) -> usize {
        (1..=self.groups.max(1).min(self.d_hidden))
            .rev()
            .find(|g| self.d_hidden.is_multiple_of(*g))
            .unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_hidden == 0 || self.layers == 0 || self.kernel_size == 0 {
            return bad("d_hidden, layers and kernel_size must be positive".into());
        }
        if self.forward_layers == Some(0) {
            return bad("forward_layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.t0 == 0 || self.horizon == 0 {
            return bad("t0 and horizon must be positive".into());
        }
        if self.t_cov < self.window() {
            return bad(format!(
                "t_cov {} shorter than t0 + horizon = {}",
                self.t_cov,
                self.window()
            ));
        }
        if self.layers >= usize::BITS as usize - 2 {
            return bad(format!("{} layers overflow the dilation", self.layers));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalDim {
    pub vocab: usize,
    pub dim: usize,
}

/// Data-dependent input widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct InputDims {
    /// Numeric covariate channels `d_cov`.
    pub covariates: usize,
    pub categorical: Vec<CategoricalDim>,
}

impl InputDims {
    pub fn embedding_width(&self) -> usize {
        self.categorical.iter().map(|c| c.dim).sum()
    }
}

/// Batch inputs in time-major layout.
#[derive(Debug, Clone, Copy)]
pub struct ModelInputs<'a> {
    /// `[T × b × 1]`.
    pub y_lag: &'a Tensor,
    /// `[T_c × b × d_cov]`.
    pub a_cov: &'a Tensor,
    /// `[T_c × b × n_cat]`.
    pub a_cat: &'a IntTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiTCNModel {
    pub hyper: HyperParams,
    pub inputs: InputDims,
    pub params: ParamStore,
    pub(crate) layout: Layout,
}

/// Parameter handles, rebuilt deterministically from the hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub embeddings: Vec<ParamId>,
    pub lag_proj: (ParamId, ParamId),
    pub cov_proj: Option<(ParamId, ParamId)>,
    pub backward_stack: Vec<TemporalBlockParams>,
    pub forward_stack: Vec<TemporalBlockParams>,
    pub head_mu: (ParamId, ParamId),
    pub head_sigma: (ParamId, ParamId),
}

impl PartialEq for TemporalBlockParams {
    fn eq(&self, other: &Self) -> bool {
        self.layer_index == other.layer_index && self.param_ids() == other.param_ids()
    }
}

impl BiTCNModel {
    pub fn new<R: Rng + ?Sized>(hyper: HyperParams, inputs: InputDims, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let d_h = hyper.d_hidden;
        let emb_width = inputs.embedding_width();
        if hyper.forward_module && inputs.covariates + emb_width == 0 {
            return Err(Error::InvalidArgument(
                "forward module needs at least one covariate or categorical input".into(),
            ));
        }
        if inputs.categorical.iter().any(|c| c.vocab == 0 || c.dim == 0) {
            return Err(Error::InvalidArgument("empty categorical vocabulary or dimension".into()));
        }
        let mut params = ParamStore::new();
        let embeddings = inputs
            .categorical
            .iter()
            .enumerate()
            .map(|(i, c)| params.add(format!("emb.{i}"), init::normal(&[c.vocab, c.dim], 0.01, rng)))
            .collect();

        let lag_in = 1 + inputs.covariates + emb_width;
        let lag_proj = init::dense(&mut params, "lag_proj", lag_in, d_h, rng);
        let backward_stack = (1..=hyper.layers)
            .map(|i| {
                TemporalBlockParams::init(
                    &mut params,
                    &format!("bwd.{i}"),
                    i,
                    d_h,
                    hyper.kernel_size,
                    Direction::Backward,
                    1,
                    hyper.dropout,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let (cov_proj, forward_stack) = if hyper.forward_module {
            let proj = init::dense(&mut params, "cov_proj", inputs.covariates + emb_width, d_h, rng);
            let groups = hyper.effective_groups();
            let stack = (1..=hyper.forward_depth())
                .map(|i| {
                    TemporalBlockParams::init(
                        &mut params,
                        &format!("fwd.{i}"),
                        i,
                        d_h,
                        hyper.kernel_size,
                        Direction::Forward,
                        groups,
                        hyper.dropout,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(proj), stack)
        } else {
            (None, Vec::new())
        };

        let head_in = head_width(&hyper);
        let head_mu = init::dense(&mut params, "head_mu", head_in, 1, rng);
        let head_sigma = init::dense(&mut params, "head_sigma", head_in, 1, rng);

        Ok(BiTCNModel {
            hyper,
            inputs,
            params,
            layout: Layout {
                embeddings,
                lag_proj,
                cov_proj,
                backward_stack,
                forward_stack,
                head_mu,
                head_sigma,
            },
        })
    }

    pub fn backward_stack(&self) -> &[TemporalBlockParams] {
        &self.layout.backward_stack
    }

    pub fn forward_stack(&self) -> &[TemporalBlockParams] {
        &self.layout.forward_stack
    }

    pub fn embedding_ids(&self) -> &[ParamId] {
        &self.layout.embeddings
    }

    pub fn lag_projection(&self) -> (ParamId, ParamId) {
        self.layout.lag_proj
    }

    pub fn cov_projection(&self) -> Option<(ParamId, ParamId)> {
        self.layout.cov_proj
    }

    pub fn head_mu(&self) -> (ParamId, ParamId) {
        self.layout.head_mu
    }

    pub fn head_sigma(&self) -> (ParamId, ParamId) {
        self.layout.head_sigma
    }

    /// Exact number of scalar parameters, counting both `v` and `g` of
    /// weight-normalized layers.
    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Number of conv kernel weights (`v`) in the forward stack.
    pub fn forward_conv_weights(&self) -> usize {
        self.layout
            .forward_stack
            .iter()
            .map(|b| self.params.get(b.conv_v).len())
            .sum()
    }

    fn check_inputs(&self, x: &ModelInputs<'_>) -> Result<(usize, usize)> {
        let ys = x.y_lag.shape();
        if ys.len() != 3 || ys[2] != 1 {
            return Err(Error::shape("bitcn_forward", format!("y_lag {ys:?} must be [T, b, 1]")));
        }
        let (t, b) = (ys[0], ys[1]);
        let cs = x.a_cov.shape();
        if cs.len() != 3 || cs[1] != b || cs[2] != self.inputs.covariates {
            return Err(Error::shape(
                "bitcn_forward",
                format!("a_cov {cs:?}, expected [T_c, {b}, {}]", self.inputs.covariates),
            ));
        }
        let ks = x.a_cat.shape();
        let n_cat = self.inputs.categorical.len();
        if ks.len() != 3 || ks[0] != cs[0] || ks[1] != b || ks[2] != n_cat {
            return Err(Error::shape(
                "bitcn_forward",
                format!("a_cat {ks:?}, expected [{}, {b}, {n_cat}]", cs[0]),
            ));
        }
        if cs[0] < t {
            return Err(Error::shape(
                "bitcn_forward",
                format!("covariate length {} shorter than window {t}", cs[0]),
            ));
        }
        Ok((t, b))
    }

    /// Records the full forward pass on `g`; returns `(μ, σ)`, each
    /// `[T × b × 1]`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: ModelInputs<'_>,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let (t_len, batch) = self.check_inputs(&x)?;
        let t_cov = x.a_cov.shape()[0];
        let hp = &self.hyper;
        let p = &self.params;

        let y_lag = g.input(x.y_lag);
        let a_cov = g.input(x.a_cov);
        let mut a_emb = g.input(&Tensor::zeros(&[t_cov, batch, 0]));
        for (f, &table_id) in self.layout.embeddings.iter().enumerate() {
            let ids = categorical_column(x.a_cat, f)?;
            let table = g.param(p, table_id);
            let e = g.embedding(&ids, table)?;
            a_emb = g.concat_channels(a_emb, e)?;
        }

        let cov_past = g.slice_time(a_cov, 0, t_len)?;
        let emb_past = g.slice_time(a_emb, 0, t_len)?;
        let x_lag = g.concat_channels(y_lag, cov_past)?;
        let x_lag = g.concat_channels(x_lag, emb_past)?;
        let h_lag = dense(g, p, self.layout.lag_proj, x_lag)?;
        let h_lag = g.dropout(h_lag, hp.dropout, training, rng)?;
        let o_lag = stack_forward(g, p, &self.layout.backward_stack, h_lag, training, rng)?;

        let o = match self.layout.cov_proj {
            Some(proj) => {
                let x_cov = g.concat_channels(a_cov, a_emb)?;
                let h_cov = dense(g, p, proj, x_cov)?;
                let h_cov = g.dropout(h_cov, hp.dropout, training, rng)?;
                let o_cov = stack_forward(g, p, &self.layout.forward_stack, h_cov, training, rng)?;
                let o_cov = g.slice_time(o_cov, 0, t_len)?;
                match hp.join {
                    JoinMode::Concat => g.concat_channels(o_cov, o_lag)?,
                    JoinMode::Add => g.add(o_cov, o_lag)?,
                }
            }
            None => o_lag,
        };

        let mu = dense(g, p, self.layout.head_mu, o)?;
        let mu = if hp.softplus_mu { g.softplus(mu) } else { mu };
        let sigma = dense(g, p, self.layout.head_sigma, o)?;
        let sigma = g.softplus(sigma);
        let sigma = g.add_scalar(sigma, hp.epsilon);

        for (name, v) in [("mu", mu), ("sigma", sigma)] {
            if let Some(bad) = g.value(v).iter().find(|x| !x.is_finite()) {
                return Err(Error::numeric(format!("bitcn_forward {name}"), format!("output {bad}")));
            }
        }
        Ok((mu, sigma))
    }

    /// Eval-mode forward returning plain `(μ, σ)` buffers.
    pub fn predict(&self, x: ModelInputs<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let (mu, sigma) = self.forward(&mut g, x, false, &mut unused)?;
        Ok((g.value(mu).to_vec(), g.value(sigma).to_vec()))
    }
}

pub(crate) fn head_width(hp: &HyperParams) -> usize {
    match (hp.forward_module, hp.join) {
        (true, JoinMode::Concat) => 2 * hp.d_hidden,
        _ => hp.d_hidden,
    }
}

fn dense(g: &mut Graph, p: &ParamStore, (w, b): (ParamId, ParamId), x: Var) -> Result<Var> {
    let w = g.param(p, w);
    let b = g.param(p, b);
    g.affine(x, w, b)
}

/// Column `f` of a `[T × b × n]` id tensor as `[T × b]`.
pub(crate) fn categorical_column(a_cat: &IntTensor, f: usize) -> Result<IntTensor> {
    let s = a_cat.shape();
    let n = s[2];
    let data = a_cat.data().iter().skip(f).step_by(n).copied().collect();
    IntTensor::new(vec![s[0], s[1]], data)
}

#[cfg(test)]
mod tests;
