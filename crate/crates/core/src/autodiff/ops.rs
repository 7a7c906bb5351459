use rand::Rng;

use super::conv::{self, ConvSpec};
use super::{Graph, ParamId, Var};
use crate::distributions::Family;
use crate::error::{Error, Result};
use crate::tensor::IntTensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;
const SOFTPLUS_THRESHOLD: f64 = 30.0;

pub(crate) enum Op {
    Input,
    Variable,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Var, spec: ConvSpec },
    Gelu(Var),
    Softplus(Var),
    Affine { x: Var, w: Var, b: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    WeightNorm { v: Var, g: Var, norms: Vec<f64> },
    SliceTime { x: Var, start: usize },
    SliceLast { x: Var, start: usize },
    Concat { a: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Sum(Var),
    Transpose(Var),
    Nll { family: Family, mu: Var, sigma: Var, y: Vec<f64>, weight: Vec<f64> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Variable => "variable",
            Op::Param(_) => "param",
            Op::Conv { .. } => "dilated_conv",
            Op::Gelu(_) => "gelu",
            Op::Softplus(_) => "softplus",
            Op::Affine { .. } => "affine",
            Op::Dropout { .. } => "dropout",
            Op::Embedding { .. } => "embedding",
            Op::WeightNorm { .. } => "weight_norm",
            Op::SliceTime { .. } => "slice_time",
            Op::SliceLast { .. } => "slice_channels",
            Op::Concat { .. } => "concat_channels",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddScalar(_) => "add_scalar",
            Op::Sum(_) => "sum",
            Op::Transpose(_) => "transpose",
            Op::Nll { .. } => "nll",
        }
    }

    pub(crate) fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Variable | Op::Param(_))
    }
}

// 0.5·(1 + tanh u) == sigmoid(2u); the sigmoid form keeps the far negative
// tail from rounding to zero.
pub fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    x * sigmoid(2.0 * u)
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let s = sigmoid(2.0 * u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    s + x * s * (1.0 - s) * 2.0 * du
}

pub fn softplus_scalar(x: f64) -> f64 {
    if x > SOFTPLUS_THRESHOLD {
        x
    } else if x < -SOFTPLUS_THRESHOLD {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_grad(x: f64) -> f64 {
    if x > SOFTPLUS_THRESHOLD {
        1.0
    } else if x < -SOFTPLUS_THRESHOLD {
        x.exp()
    } else {
        sigmoid(x)
    }
}

/// `x [m × inner] · w [inner × out]`.
pub(crate) fn matmul(x: &[f64], w: &[f64], inner: usize, out: usize) -> Vec<f64> {
    let m = x.len() / inner;
    let mut y = vec![0.0; m * out];
    for (xrow, yrow) in x.chunks_exact(inner).zip(y.chunks_exact_mut(out)) {
        for (&xi, wrow) in xrow.iter().zip(w.chunks_exact(out)) {
            if xi == 0.0 {
                continue;
            }
            for (yo, wo) in yrow.iter_mut().zip(wrow) {
                *yo += xi * wo;
            }
        }
    }
    y
}

impl Graph {
    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Dilated convolution of `x [T × batch × in]` with weights
    /// `[out × in/groups × k]` and bias `[out]`.
    pub fn dilated_conv(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        spec.validate()?;
        let xs = self.shape(x);
        if xs.len() != 3 || xs[2] != spec.in_channels || xs[0] == 0 {
            return Err(Error::shape(
                "dilated_conv",
                format!("input {xs:?} incompatible with {} input channels", spec.in_channels),
            ));
        }
        if self.shape(w) != spec.weight_shape() {
            return Err(Error::shape(
                "dilated_conv",
                format!("weights {:?}, expected {:?}", self.shape(w), spec.weight_shape()),
            ));
        }
        if self.shape(b) != [spec.out_channels] {
            return Err(Error::shape(
                "dilated_conv",
                format!("bias {:?}, expected [{}]", self.shape(b), spec.out_channels),
            ));
        }
        let (len, batch) = (xs[0], xs[1]);
        let value = conv::conv_forward(&spec, self.value(w), self.value(b), self.value(x), len, batch);
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(
            vec![len, batch, spec.out_channels],
            value,
            Op::Conv { x, w, b, spec },
            needs,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let needs = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Gelu(x), needs)
    }

    /// `log(1 + exp(x))`, switching to the asymptotes beyond |x| > 30.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| softplus_scalar(v)).collect();
        let needs = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Softplus(x), needs)
    }

    /// `x · w + b` over the trailing dimension of `x`; `w` is `[in × out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 2 || xs.last() != Some(&ws[0]) || bs != [ws[1]] {
            return Err(Error::shape(
                "affine",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        let (inner, out) = (ws[0], ws[1]);
        let mut value = matmul(self.value(x), self.value(w), inner, out);
        let bias = self.value(b);
        for row in value.chunks_exact_mut(out) {
            for (r, bb) in row.iter_mut().zip(bias) {
                *r += bb;
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = out;
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(shape, value, Op::Affine { x, w, b }, needs))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 − p)` in training;
    /// identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let needs = self.needs(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Dropout { x, mask }, needs))
    }

    /// Gathers rows of `table [vocab × d]` for `ids [T × batch]`.
    pub fn embedding(&mut self, ids: &IntTensor, table: Var) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(Error::shape("embedding", format!("table {ts:?} is not 2-D")));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if let Some(&bad) = ids.data().iter().find(|&&id| id >= vocab) {
            return Err(Error::OutOfVocabulary { id: bad, vocab });
        }
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.data().len() * dim);
        for &id in ids.data() {
            value.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let mut shape = ids.shape().to_vec();
        shape.push(dim);
        let needs = self.needs(&[table]);
        Ok(self.push(
            shape,
            value,
            Op::Embedding {
                table,
                ids: ids.data().to_vec(),
            },
            needs,
        ))
    }

    /// Weight normalization `w = g · v / ‖v‖`, with one norm per leading
    /// (output-unit) index of `v`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let vs = self.shape(v);
        let units = vs[0];
        if self.shape(g) != [units] {
            return Err(Error::shape(
                "weight_norm",
                format!("v {vs:?} needs g of shape [{units}], got {:?}", self.shape(g)),
            ));
        }
        let fan = self.value(v).len() / units;
        let mut norms = Vec::with_capacity(units);
        let mut value = Vec::with_capacity(self.value(v).len());
        for (u, (row, &gain)) in self.value(v).chunks_exact(fan).zip(self.value(g)).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "weight_norm: unit {u} has norm {norm}"
                )));
            }
            norms.push(norm);
            value.extend(row.iter().map(|x| gain * x / norm));
        }
        let needs = self.needs(&[v, g]);
        Ok(self.push(vs.to_vec(), value, Op::WeightNorm { v, g, norms }, needs))
    }

    /// Contiguous range `[start, start + len)` of the leading (time) axis.
    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if start + len > xs[0] || len == 0 {
            return Err(Error::shape(
                "slice_time",
                format!("range {start}..{} of length {}", start + len, xs[0]),
            ));
        }
        if start == 0 && len == xs[0] {
            return Ok(x);
        }
        let stride: usize = xs[1..].iter().product();
        let value = self.value(x)[start * stride..(start + len) * stride].to_vec();
        let mut shape = xs;
        shape[0] = len;
        let needs = self.needs(&[x]);
        Ok(self.push(shape, value, Op::SliceTime { x, start }, needs))
    }

    /// Range `[start, start + len)` of the trailing (channel) axis.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let width = *xs.last().unwrap();
        if start + len > width || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{} of width {width}", start + len),
            ));
        }
        let mut value = Vec::with_capacity(self.value(x).len() / width * len);
        for row in self.value(x).chunks_exact(width) {
            value.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let needs = self.needs(&[x]);
        Ok(self.push(shape, value, Op::SliceLast { x, start }, needs))
    }

    /// Concatenation along the trailing (channel) axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        let ra = as_.len();
        if ra != bs.len() || as_[..ra - 1] != bs[..ra - 1] {
            return Err(Error::shape(
                "concat_channels",
                format!("leading dims differ: {as_:?} vs {bs:?}"),
            ));
        }
        let (ca, cb) = (as_[ra - 1], bs[ra - 1]);
        if cb == 0 {
            return Ok(a);
        }
        if ca == 0 {
            return Ok(b);
        }
        let mut value = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        for (ra_, rb) in self.value(a).chunks_exact(ca).zip(self.value(b).chunks_exact(cb)) {
            value.extend_from_slice(ra_);
            value.extend_from_slice(rb);
        }
        let mut shape = as_.to_vec();
        shape[ra - 1] = ca + cb;
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, value, Op::Concat { a, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), needs))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v + c).collect();
        let needs = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::AddScalar(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = vec![self.value(x).iter().sum()];
        let needs = self.needs(&[x]);
        self.push(vec![1], value, Op::Sum(x), needs)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::shape("transpose", format!("{xs:?} is not 2-D")));
        }
        let (r, c) = (xs[0], xs[1]);
        let xv = self.value(x);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = xv[i * c + j];
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(vec![c, r], value, Op::Transpose(x), needs))
    }

    /// Mean negative log-likelihood of `y` under `family(mu, sigma)`.
    /// `weight` selects (1) or drops (0) elements; the mean runs over the
    /// selected ones.
    pub(crate) fn nll(
        &mut self,
        family: Family,
        y: &[f64],
        mu: Var,
        sigma: Var,
        weight: Option<&[f64]>,
    ) -> Result<Var> {
        self.check_same_shape("nll", mu, sigma)?;
        let n = self.value(mu).len();
        if y.len() != n || weight.is_some_and(|w| w.len() != n) {
            return Err(Error::shape(
                "nll",
                format!("targets {} vs parameters {n}", y.len()),
            ));
        }
        let weight = weight.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
        let count: f64 = weight.iter().sum();
        if count <= 0.0 {
            return Err(Error::InvalidArgument("nll over an empty selection".into()));
        }
        let (muv, sv) = (self.value(mu), self.value(sigma));
        let mut total = 0.0;
        for i in 0..n {
            if weight[i] == 0.0 {
                continue;
            }
            if sv[i] <= 0.0 || sv[i].is_nan() {
                return Err(Error::InvalidArgument(format!(
                    "nll: scale must be positive, got {} at {i}",
                    sv[i]
                )));
            }
            total += weight[i] * family.nll(y[i], muv[i], sv[i]);
        }
        let needs = self.needs(&[mu, sigma]);
        Ok(self.push(
            vec![1],
            vec![total / count],
            Op::Nll {
                family,
                mu,
                sigma,
                y: y.to_vec(),
                weight: weight.iter().map(|w| w / count).collect(),
            },
            needs,
        ))
    }

    /// Gradient contributions of node `i` to its inputs.
    pub(super) fn op_backward(&self, i: usize, up: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Variable | Op::Param(_) => Vec::new(),
            Op::Conv { x, w, b, spec } => {
                let (len, batch) = (node.shape[0], node.shape[1]);
                let (dx, dw, db) =
                    conv::conv_backward(spec, self.value(*w), self.value(*x), up, len, batch);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Gelu(x) => {
                let dx = self.value(*x).iter().zip(up).map(|(&v, g)| g * gelu_grad(v)).collect();
                vec![(*x, dx)]
            }
            Op::Softplus(x) => {
                let dx = self.value(*x).iter().zip(up).map(|(&v, g)| g * softplus_grad(v)).collect();
                vec![(*x, dx)]
            }
            Op::Affine { x, w, b } => {
                let ws = self.shape(*w);
                let (inner, out) = (ws[0], ws[1]);
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; out];
                for ((xrow, dxrow), grow) in xv
                    .chunks_exact(inner)
                    .zip(dx.chunks_exact_mut(inner))
                    .zip(up.chunks_exact(out))
                {
                    for (d, g) in db.iter_mut().zip(grow) {
                        *d += g;
                    }
                    for k in 0..inner {
                        let wrow = &wv[k * out..(k + 1) * out];
                        dxrow[k] = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        let xk = xrow[k];
                        if xk != 0.0 {
                            for (d, g) in dw[k * out..(k + 1) * out].iter_mut().zip(grow) {
                                *d += xk * g;
                            }
                        }
                    }
                }
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Dropout { x, mask } => {
                vec![(*x, up.iter().zip(mask).map(|(g, m)| g * m).collect())]
            }
            Op::Embedding { table, ids } => {
                let dim = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (k, &id) in ids.iter().enumerate() {
                    for (d, g) in dt[id * dim..(id + 1) * dim].iter_mut().zip(&up[k * dim..(k + 1) * dim]) {
                        *d += g;
                    }
                }
                vec![(*table, dt)]
            }
            Op::WeightNorm { v, g, norms } => {
                let (vv, gv) = (self.value(*v), self.value(*g));
                let fan = vv.len() / norms.len();
                let mut dv = vec![0.0; vv.len()];
                let mut dg = vec![0.0; gv.len()];
                for u in 0..norms.len() {
                    let row = &vv[u * fan..(u + 1) * fan];
                    let grow = &up[u * fan..(u + 1) * fan];
                    let norm = norms[u];
                    // d/dg = <up, v̂>;  d/dv = g/‖v‖ · (up − <up, v̂> v̂)
                    let proj: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>() / norm;
                    dg[u] = proj;
                    let scale = gv[u] / norm;
                    for k in 0..fan {
                        dv[u * fan + k] = scale * (grow[k] - proj * row[k] / norm);
                    }
                }
                vec![(*v, dv), (*g, dg)]
            }
            Op::SliceTime { x, start } => {
                let stride: usize = node.shape[1..].iter().product();
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[start * stride..start * stride + up.len()].copy_from_slice(up);
                vec![(*x, dx)]
            }
            Op::SliceLast { x, start } => {
                let width = *self.shape(*x).last().unwrap();
                let len = *node.shape.last().unwrap();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (drow, grow) in dx.chunks_exact_mut(width).zip(up.chunks_exact(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                vec![(*x, dx)]
            }
            Op::Concat { a, b } => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let mut da = Vec::with_capacity(self.value(*a).len());
                let mut db = Vec::with_capacity(self.value(*b).len());
                for row in up.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, up.to_vec()), (*b, up.to_vec())],
            Op::Mul(a, b) => {
                let da = up.iter().zip(self.value(*b)).map(|(g, v)| g * v).collect();
                let db = up.iter().zip(self.value(*a)).map(|(g, v)| g * v).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::AddScalar(x) => vec![(*x, up.to_vec())],
            Op::Sum(x) => vec![(*x, vec![up[0]; self.value(*x).len()])],
            Op::Transpose(x) => {
                let (r, c) = (node.shape[1], node.shape[0]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = up[j * r + i];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Nll { family, mu, sigma, y, weight } => {
                let (muv, sv) = (self.value(*mu), self.value(*sigma));
                let mut dmu = vec![0.0; muv.len()];
                let mut ds = vec![0.0; sv.len()];
                for k in 0..muv.len() {
                    if weight[k] == 0.0 {
                        continue;
                    }
                    let (gm, gs) = family.nll_grad(y[k], muv[k], sv[k]);
                    dmu[k] = up[0] * weight[k] * gm;
                    ds[k] = up[0] * weight[k] * gs;
                }
                vec![(*mu, dmu), (*sigma, ds)]
            }
        }
    }
}
