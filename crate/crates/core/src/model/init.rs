use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub(crate) fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// `v ~ N(0, 2/fan_in)` with `g = ‖v‖` per output unit, so the initial
/// effective weight equals `v`.
pub(crate) fn weight_normed<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    shape: &[usize],
    rng: &mut R,
) -> (ParamId, ParamId) {
    let fan_in: usize = shape[1..].iter().product();
    let v = normal(shape, (2.0 / fan_in as f64).sqrt(), rng);
    let g: Vec<f64> = v
        .data()
        .chunks_exact(fan_in)
        .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let vid = store.add(format!("{prefix}.v"), v);
    let gid = store.add(format!("{prefix}.g"), Tensor::from_vec(g));
    (vid, gid)
}

/// Plain dense layer `[in × out]` plus zero bias.
pub(crate) fn dense<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let w = normal(&[fan_in, fan_out], (2.0 / fan_in.max(1) as f64).sqrt(), rng);
    let wid = store.add(format!("{prefix}.w"), w);
    let bid = store.add(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    (wid, bid)
}
