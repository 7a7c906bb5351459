//! Graph-free inference.
//!
//! [`FrozenModel`] resolves weight normalization once and evaluates the
//! network directly on buffers. The backward stack is causal, so position
//! `t` of every layer depends only on positions `≤ t` of the layer below;
//! [`LagState`] exploits that to compute one position at a time, which is
//! what autoregressive decoding needs: after a value is drawn for step `t`
//! only position `t + 1` has to be evaluated.

use crate::autodiff::conv::{conv_position, pack_weights};
use crate::autodiff::{ConvSpec, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

use super::ops_scalar::{gelu, softplus};
use super::{BiTCNModel, HyperParams, JoinMode, ModelInputs, TemporalBlockParams};

#[derive(Debug, Clone)]
struct Dense {
    /// `[in × out]`.
    w: Vec<f64>,
    b: Vec<f64>,
    out: usize,
}

impl Dense {
    fn from_store(p: &ParamStore, (w, b): (ParamId, ParamId)) -> Self {
        Dense {
            w: p.get(w).data().to_vec(),
            b: p.get(b).data().to_vec(),
            out: p.get(w).shape()[1],
        }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(&self.b);
        for (&xi, wrow) in x.iter().zip(self.w.chunks_exact(self.out)) {
            for (yo, wo) in y.iter_mut().zip(wrow) {
                *yo += xi * wo;
            }
        }
    }
}

fn weight_normed(p: &ParamStore, v: ParamId, g: ParamId) -> Vec<f64> {
    let v = p.get(v);
    let g = p.get(g).data();
    let fan = v.len() / g.len();
    v.data()
        .chunks_exact(fan)
        .zip(g)
        .flat_map(|(row, gain)| {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter().map(move |x| gain * x / norm)
        })
        .collect()
}

#[derive(Debug, Clone)]
struct FrozenBlock {
    spec: ConvSpec,
    packed: Vec<f64>,
    conv_b: Vec<f64>,
    dense: Dense,
}

impl FrozenBlock {
    fn new(p: &ParamStore, b: &TemporalBlockParams) -> Self {
        let conv_w = weight_normed(p, b.conv_v, b.conv_g);
        let dense_vg = weight_normed(p, b.dense_v, b.dense_g);
        let (rows, cols) = (2 * b.hidden(), 4 * b.hidden());
        // stored [2h × 4h]; the affine wants [4h × 2h]
        let mut w = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                w[c * rows + r] = dense_vg[r * cols + c];
            }
        }
        FrozenBlock {
            spec: b.conv,
            packed: pack_weights(&b.conv, &conv_w),
            conv_b: p.get(b.conv_b).data().to_vec(),
            dense: Dense {
                w,
                b: p.get(b.dense_b).data().to_vec(),
                out: rows,
            },
        }
    }

    /// Evaluates position `t` of this layer for every batch row, reading the
    /// layer input `x [len × batch × h]`; writes the next hidden rows into
    /// `next` and adds skip outputs into `skip` (both `batch × h`).
    #[allow(clippy::too_many_arguments)]
    fn position(
        &self,
        x: &[f64],
        len: usize,
        batch: usize,
        t: usize,
        conv_buf: &mut [f64],
        z_buf: &mut [f64],
        next: &mut [f64],
        skip: &mut [f64],
    ) {
        let h = self.spec.in_channels;
        conv_position(&self.spec, &self.packed, &self.conv_b, x, len, batch, t, conv_buf);
        for v in conv_buf.iter_mut() {
            *v = gelu(*v);
        }
        for b in 0..batch {
            let c = &conv_buf[b * 4 * h..(b + 1) * 4 * h];
            self.dense.apply(c, z_buf);
            let xin = &x[(t * batch + b) * h..(t * batch + b + 1) * h];
            for k in 0..h {
                next[b * h + k] = xin[k] + z_buf[k];
                skip[b * h + k] += z_buf[h + k];
            }
        }
    }
}

/// Weight-normalized parameters resolved into plain buffers for inference.
#[derive(Debug, Clone)]
pub struct FrozenModel {
    pub hyper: HyperParams,
    embeddings: Vec<(Vec<f64>, usize, usize)>,
    covariates: usize,
    lag_proj: Dense,
    cov_proj: Option<Dense>,
    backward: Vec<FrozenBlock>,
    forward: Vec<FrozenBlock>,
    head_mu: Dense,
    head_sigma: Dense,
}

impl FrozenModel {
    pub fn new(model: &BiTCNModel) -> Self {
        let p = &model.params;
        let l = &model.layout;
        FrozenModel {
            hyper: model.hyper.clone(),
            embeddings: l
                .embeddings
                .iter()
                .zip(&model.inputs.categorical)
                .map(|(&id, c)| (p.get(id).data().to_vec(), c.vocab, c.dim))
                .collect(),
            covariates: model.inputs.covariates,
            lag_proj: Dense::from_store(p, l.lag_proj),
            cov_proj: l.cov_proj.map(|c| Dense::from_store(p, c)),
            backward: l.backward_stack.iter().map(|b| FrozenBlock::new(p, b)).collect(),
            forward: l.forward_stack.iter().map(|b| FrozenBlock::new(p, b)).collect(),
            head_mu: Dense::from_store(p, l.head_mu),
            head_sigma: Dense::from_store(p, l.head_sigma),
        }
    }

    fn static_width(&self) -> usize {
        self.covariates + self.embeddings.iter().map(|e| e.2).sum::<usize>()
    }

    /// `concat(a_cov, embed(a_cat))` for every `[T_c × b]` row.
    fn static_features(&self, a_cov: &Tensor, a_cat: &IntTensor) -> Result<Vec<f64>> {
        let rows = a_cov.shape()[0] * a_cov.shape()[1];
        let n_cat = self.embeddings.len();
        if a_cov.shape()[2] != self.covariates || a_cat.data().len() != rows * n_cat {
            return Err(Error::shape(
                "frozen_model",
                format!("a_cov {:?} / a_cat {:?}", a_cov.shape(), a_cat.shape()),
            ));
        }
        let mut out = Vec::with_capacity(rows * self.static_width());
        for r in 0..rows {
            out.extend_from_slice(&a_cov.data()[r * self.covariates..(r + 1) * self.covariates]);
            for (f, (table, vocab, dim)) in self.embeddings.iter().enumerate() {
                let id = a_cat.data()[r * n_cat + f];
                if id >= *vocab {
                    return Err(Error::OutOfVocabulary { id, vocab: *vocab });
                }
                out.extend_from_slice(&table[id * dim..(id + 1) * dim]);
            }
        }
        Ok(out)
    }

    /// Forward-stack skip sum over the first `t_len` steps, or `None` when
    /// the forward module is disabled.
    fn forward_context(&self, statics: &[f64], t_cov: usize, batch: usize, t_len: usize) -> Option<Vec<f64>> {
        let proj = self.cov_proj.as_ref()?;
        let h = self.hyper.d_hidden;
        let width = self.static_width();
        let mut x = vec![0.0; t_cov * batch * h];
        for (row, out) in statics.chunks_exact(width).zip(x.chunks_exact_mut(h)) {
            proj.apply(row, out);
        }
        let mut skip = vec![0.0; t_cov * batch * h];
        let mut conv_buf = vec![0.0; batch * 4 * h];
        let mut z_buf = vec![0.0; 2 * h];
        for block in &self.forward {
            let mut next = vec![0.0; x.len()];
            for t in 0..t_cov {
                let span = t * batch * h..(t + 1) * batch * h;
                block.position(
                    &x,
                    t_cov,
                    batch,
                    t,
                    &mut conv_buf,
                    &mut z_buf,
                    &mut next[span.clone()],
                    &mut skip[span],
                );
            }
            x = next;
        }
        skip.truncate(t_len * batch * h);
        Some(skip)
    }

    /// Sets up the causal stack for a batch with all lags left at zero.
    pub fn lag_state(&self, x: ModelInputs<'_>) -> Result<LagState<'_>> {
        let t_len = x.y_lag.shape()[0];
        let batch = x.y_lag.shape()[1];
        let t_cov = x.a_cov.shape()[0];
        if t_cov < t_len {
            return Err(Error::shape("frozen_model", "covariates shorter than window"));
        }
        let all = self.static_features(x.a_cov, x.a_cat)?;
        let context = self.forward_context(&all, t_cov, batch, t_len);
        let width = self.static_width();
        let h = self.hyper.d_hidden;
        Ok(LagState {
            model: self,
            len: t_len,
            paths: batch,
            statics: all[..t_len * batch * width].to_vec(),
            y_lag: x.y_lag.data().to_vec(),
            layers: vec![vec![0.0; t_len * batch * h]; self.backward.len() + 1],
            skip: vec![0.0; t_len * batch * h],
            context,
            mu: vec![0.0; t_len * batch],
            sigma: vec![0.0; t_len * batch],
        })
    }

    /// Full eval-mode forward pass; matches [`BiTCNModel::predict`].
    pub fn predict(&self, x: ModelInputs<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut state = self.lag_state(x)?;
        for t in 0..state.len {
            state.compute(t)?;
        }
        Ok((state.mu, state.sigma))
    }
}

/// Per-position evaluation state of the causal stack for `paths` rows.
#[derive(Debug, Clone)]
pub struct LagState<'m> {
    model: &'m FrozenModel,
    len: usize,
    paths: usize,
    statics: Vec<f64>,
    y_lag: Vec<f64>,
    layers: Vec<Vec<f64>>,
    skip: Vec<f64>,
    context: Option<Vec<f64>>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl LagState<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn set_lag(&mut self, t: usize, path: usize, value: f64) {
        self.y_lag[t * self.paths + path] = value;
    }

    /// `(μ, σ)` of position `t` for every path; valid once computed.
    pub fn output(&self, t: usize) -> (&[f64], &[f64]) {
        let span = t * self.paths..(t + 1) * self.paths;
        (&self.mu[span.clone()], &self.sigma[span])
    }

    /// Evaluates position `t`. Every position before `t` must already be
    /// computed with its final lag values.
    pub fn compute(&mut self, t: usize) -> Result<()> {
        let m = self.model;
        let (p, h) = (self.paths, m.hyper.d_hidden);
        let width = m.static_width();
        let mut input = Vec::with_capacity(1 + width);
        for path in 0..p {
            let row = t * p + path;
            input.clear();
            input.push(self.y_lag[row]);
            input.extend_from_slice(&self.statics[row * width..(row + 1) * width]);
            m.lag_proj.apply(&input, &mut self.layers[0][row * h..(row + 1) * h]);
        }
        let span = t * p * h..(t + 1) * p * h;
        self.skip[span.clone()].fill(0.0);
        let mut conv_buf = vec![0.0; p * 4 * h];
        let mut z_buf = vec![0.0; 2 * h];
        for (i, block) in m.backward.iter().enumerate() {
            let (below, above) = self.layers.split_at_mut(i + 1);
            block.position(
                &below[i],
                self.len,
                p,
                t,
                &mut conv_buf,
                &mut z_buf,
                &mut above[0][span.clone()],
                &mut self.skip[span.clone()],
            );
        }
        let joined_width = super::head_width(&m.hyper);
        let mut joined = vec![0.0; joined_width];
        let (mut mu, mut sigma) = ([0.0], [0.0]);
        for path in 0..p {
            let row = t * p + path;
            let lag = &self.skip[row * h..(row + 1) * h];
            match (&self.context, m.hyper.join) {
                (Some(ctx), JoinMode::Concat) => {
                    joined[..h].copy_from_slice(&ctx[row * h..(row + 1) * h]);
                    joined[h..].copy_from_slice(lag);
                }
                (Some(ctx), JoinMode::Add) => {
                    for k in 0..h {
                        joined[k] = ctx[row * h + k] + lag[k];
                    }
                }
                (None, _) => joined.copy_from_slice(lag),
            }
            m.head_mu.apply(&joined, &mut mu);
            m.head_sigma.apply(&joined, &mut sigma);
            let mu_v = if m.hyper.softplus_mu { softplus(mu[0]) } else { mu[0] };
            let sigma_v = softplus(sigma[0]) + m.hyper.epsilon;
            if !mu_v.is_finite() || !sigma_v.is_finite() {
                return Err(Error::numeric(
                    format!("inference position {t}"),
                    format!("mu {mu_v}, sigma {sigma_v}"),
                ));
            }
            self.mu[row] = mu_v;
            self.sigma[row] = sigma_v;
        }
        Ok(())
    }

    /// Copies a single-path state (computed through some prefix) into
    /// `paths` identical rows.
    pub fn replicate(&self, paths: usize) -> Result<Self> {
        if self.paths != 1 {
            return Err(Error::InvalidArgument("only single-path states can be replicated".into()));
        }
        let rep = |v: &[f64], width: usize| -> Vec<f64> {
            v.chunks_exact(width)
                .flat_map(|row| std::iter::repeat_n(row, paths).flatten().copied())
                .collect()
        };
        let h = self.model.hyper.d_hidden;
        let width = self.model.static_width();
        Ok(LagState {
            model: self.model,
            len: self.len,
            paths,
            statics: if width == 0 { Vec::new() } else { rep(&self.statics, width) },
            y_lag: rep(&self.y_lag, 1),
            layers: self.layers.iter().map(|l| rep(l, h)).collect(),
            skip: rep(&self.skip, h),
            context: self.context.as_ref().map(|c| rep(c, h)),
            mu: rep(&self.mu, 1),
            sigma: rep(&self.sigma, 1),
        })
    }
}
