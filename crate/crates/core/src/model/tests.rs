use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{
    hyper_mismatch, load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, RngState,
};
use super::infer::FrozenModel;
use super::*;
use crate::autodiff::receptive_field;
use crate::training::AdamState;

struct Batch {
    y: Tensor,
    cov: Tensor,
    cat: IntTensor,
}

impl Batch {
    fn inputs(&self) -> ModelInputs<'_> {
        ModelInputs {
            y_lag: &self.y,
            a_cov: &self.cov,
            a_cat: &self.cat,
        }
    }
}

fn small_hyper(t0: usize, horizon: usize, t_cov: usize) -> HyperParams {
    HyperParams {
        d_hidden: 4,
        layers: 2,
        kernel_size: 3,
        dropout: 0.1,
        t0,
        horizon,
        t_cov,
        ..HyperParams::default()
    }
}

fn dims() -> InputDims {
    InputDims {
        covariates: 2,
        categorical: vec![CategoricalDim { vocab: 5, dim: 3 }],
    }
}

fn batch(t: usize, t_cov: usize, b: usize, d: &InputDims, rng: &mut ChaCha8Rng) -> Batch {
    let n_cat = d.categorical.len();
    let y = (0..t * b).map(|_| rng.random_range(-1.0..2.0)).collect();
    let cov = (0..t_cov * b * d.covariates).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cat = (0..t_cov * b * n_cat)
        .map(|i| rng.random_range(0..d.categorical[i % n_cat].vocab))
        .collect();
    Batch {
        y: Tensor::new(vec![t, b, 1], y).unwrap(),
        cov: Tensor::new(vec![t_cov, b, d.covariates], cov).unwrap(),
        cat: IntTensor::new(vec![t_cov, b, n_cat], cat).unwrap(),
    }
}

fn build(hp: HyperParams, seed: u64) -> BiTCNModel {
    BiTCNModel::new(hp, dims(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn zero_block_is_residual_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let block = TemporalBlockParams::init(&mut store, "b", 2, 3, 3, Direction::Backward, 1, 0.0, &mut rng).unwrap();
    for id in [block.conv_g, block.conv_b, block.dense_g, block.dense_b] {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let x = Tensor::new(vec![6, 2, 3], (0..36).map(|i| i as f64 * 0.1 - 1.0).collect()).unwrap();
    let mut g = Graph::new();
    let xv = g.input(&x);
    let (h, o) = temporal_block_forward(&mut g, &store, &block, xv, true, &mut rng).unwrap();
    assert_eq!(g.value(h), x.data());
    assert!(g.value(o).iter().all(|&v| v == 0.0));
    assert_eq!(g.shape(h), x.shape());
    assert_eq!(g.shape(o), x.shape());

    let skip = stack_forward(&mut g, &store, std::slice::from_ref(&block), xv, false, &mut rng);
    assert!(skip.is_err(), "layer index 2 cannot start a stack");
    assert!(stack_forward(&mut g, &store, &[], xv, false, &mut rng).is_err());
}

#[test]
fn block_rejects_wrong_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let block = TemporalBlockParams::init(&mut store, "b", 1, 3, 3, Direction::Forward, 3, 0.0, &mut rng).unwrap();
    assert_eq!(block.conv.dilation, 1);
    assert_eq!(block.conv.out_channels, 12);
    let mut g = Graph::new();
    let x = g.input(&Tensor::zeros(&[4, 1, 2]));
    assert!(matches!(
        temporal_block_forward(&mut g, &store, &block, x, false, &mut rng),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn block_dilations_double() {
    let m = build(HyperParams { layers: 4, ..small_hyper(8, 2, 12) }, 1);
    let d: Vec<usize> = m.backward_stack().iter().map(|b| b.conv.dilation).collect();
    assert_eq!(d, [1, 2, 4, 8]);
    assert_eq!(m.forward_stack().len(), 5);
    assert_eq!(m.forward_stack()[4].conv.dilation, 16);
    assert!(m.forward_stack().iter().all(|b| b.conv.direction == Direction::Forward && b.conv.groups == 4));
    assert!(m.backward_stack().iter().all(|b| b.conv.groups == 1));
}

#[test]
fn shape_contract_and_sigma_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hp = small_hyper(6, 2, 12);
    let m = build(hp, 2);
    let b = batch(8, 12, 2, &dims(), &mut rng);
    let mut g = Graph::new();
    let (mu, sigma) = m.forward(&mut g, b.inputs(), true, &mut rng).unwrap();
    assert_eq!(g.shape(mu), [8, 2, 1]);
    assert_eq!(g.shape(sigma), [8, 2, 1]);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = batch(8, 12, 3, &dims(), &mut rng);
        let (_, s) = m.predict(b.inputs()).unwrap();
        assert!(s.iter().all(|&v| v >= 1e-3));
    }
}

#[test]
fn forward_rejects_short_covariates_and_oov() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = build(small_hyper(6, 2, 12), 2);
    let b = batch(8, 7, 1, &dims(), &mut rng);
    assert!(matches!(m.predict(b.inputs()), Err(Error::Shape { .. })));
    let mut b = batch(8, 12, 1, &dims(), &mut rng);
    b.cat = IntTensor::new(vec![12, 1, 1], vec![9; 12]).unwrap();
    assert!(matches!(m.predict(b.inputs()), Err(Error::OutOfVocabulary { id: 9, vocab: 5 })));
}

#[test]
fn hyperparams_validate() {
    assert!(HyperParams::default().validate().is_ok());
    assert_eq!(HyperParams::default().window(), 120);
    let bad = HyperParams { t_cov: 100, ..HyperParams::default() };
    assert!(bad.validate().is_err());
    assert!(HyperParams { dropout: 1.0, ..HyperParams::default() }.validate().is_err());
    assert!(HyperParams { epsilon: 0.0, ..HyperParams::default() }.validate().is_err());
    assert_eq!(HyperParams { d_hidden: 12, groups: 4, ..HyperParams::default() }.effective_groups(), 4);
    assert_eq!(HyperParams { d_hidden: 9, groups: 4, ..HyperParams::default() }.effective_groups(), 3);
    assert_eq!(HyperParams { d_hidden: 7, groups: 4, ..HyperParams::default() }.effective_groups(), 1);
}

/// Last-position change of the backward stack when input position
/// `len − back` is perturbed.
fn backward_probe(m: &BiTCNModel, len: usize, back: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = m.hyper.d_hidden;
    let x: Vec<f64> = (0..len * h).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = |x: &[f64]| {
        let mut g = Graph::new();
        let xv = g.input(&Tensor::new(vec![len, 1, h], x.to_vec()).unwrap());
        let s = stack_forward(&mut g, &m.params, m.backward_stack(), xv, false, &mut rng.clone()).unwrap();
        g.value(s)[(len - 1) * h..].to_vec()
    };
    let base = run(&x);
    let mut px = x.clone();
    for v in &mut px[(len - back) * h..(len - back + 1) * h] {
        *v += 0.5;
    }
    let pert = run(&px);
    base.iter().zip(&pert).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[test]
fn receptive_field_k9_n5_is_249() {
    let hp = HyperParams { d_hidden: 2, layers: 5, kernel_size: 9, ..small_hyper(1, 1, 2) };
    let m = build(hp, 4);
    assert_eq!(receptive_field(9, 5), 249);
    assert!(backward_probe(&m, 260, 249) > 0.0);
    assert_eq!(backward_probe(&m, 260, 250), 0.0);
}

#[test]
fn receptive_field_k3_n8_is_511() {
    let hp = HyperParams { d_hidden: 2, layers: 8, kernel_size: 3, ..small_hyper(1, 1, 2) };
    let m = build(hp, 4);
    assert_eq!(receptive_field(3, 8), 511);
    assert!(backward_probe(&m, 520, 511) > 0.0);
    assert_eq!(backward_probe(&m, 520, 512), 0.0);
}

#[test]
fn outputs_depend_on_lags_only_causally() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = build(small_hyper(10, 4, 20), 3);
    let base = batch(14, 20, 1, &dims(), &mut rng);
    let (mu0, s0) = m.predict(base.inputs()).unwrap();
    for probe in 0..14 {
        let mut b = Batch { y: base.y.clone(), cov: base.cov.clone(), cat: base.cat.clone() };
        b.y.data_mut()[probe] += 1.0;
        let (mu, s) = m.predict(b.inputs()).unwrap();
        for t in 0..probe {
            assert_eq!(mu[t], mu0[t]);
            assert_eq!(s[t], s0[t]);
        }
        assert_ne!(mu[probe], mu0[probe]);
    }
}

#[test]
fn covariates_ahead_of_window_matter_only_with_forward_module() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let full = build(small_hyper(8, 2, 16), 5);
    let ablated = build(HyperParams { forward_module: false, ..small_hyper(8, 2, 16) }, 5);
    let base = batch(10, 16, 2, &dims(), &mut rng);
    let (f0, _) = full.predict(base.inputs()).unwrap();
    let (a0, _) = ablated.predict(base.inputs()).unwrap();
    let mut any_change = false;
    for t in 10..16 {
        let mut b = Batch { y: base.y.clone(), cov: base.cov.clone(), cat: base.cat.clone() };
        for v in &mut b.cov.data_mut()[t * 4..(t + 1) * 4] {
            *v += 1.0;
        }
        b.cat.data_mut()[t * 2] = (b.cat.data()[t * 2] + 1) % 5;
        let (f, _) = full.predict(b.inputs()).unwrap();
        let (a, _) = ablated.predict(b.inputs()).unwrap();
        assert_eq!(a, a0);
        any_change |= f != f0;
    }
    assert!(any_change);
}

#[test]
fn ablated_model_equals_plain_tcn() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = build(HyperParams { forward_module: false, softplus_mu: false, ..small_hyper(6, 3, 12) }, 6);
    assert!(m.cov_projection().is_none());
    assert!(m.forward_stack().is_empty());
    let b = batch(9, 12, 2, &dims(), &mut rng);
    let (mu, sigma) = m.predict(b.inputs()).unwrap();

    // Independent wiring: one input matrix per time/batch row, plain dense
    // layers and the backward blocks called one at a time.
    let p = &m.params;
    let (t, bs) = (9, 2);
    let table = p.get(m.embedding_ids()[0]).data();
    let mut rows = Vec::new();
    for r in 0..t * bs {
        rows.push(b.y.data()[r]);
        rows.extend_from_slice(&b.cov.data()[r * 2..r * 2 + 2]);
        let id = b.cat.data()[r];
        rows.extend_from_slice(&table[id * 3..id * 3 + 3]);
    }
    let mut g = Graph::new();
    let x = g.input(&Tensor::new(vec![t, bs, 6], rows).unwrap());
    let (w, bias) = m.lag_projection();
    let (w, bias) = (g.param(p, w), g.param(p, bias));
    let mut h = g.affine(x, w, bias).unwrap();
    let mut skip = None;
    for block in m.backward_stack() {
        let (next, o) = temporal_block_forward(&mut g, p, block, h, false, &mut rng).unwrap();
        skip = Some(match skip {
            None => o,
            Some(s) => g.add(s, o).unwrap(),
        });
        h = next;
    }
    let o = skip.unwrap();
    let (w, bias) = m.head_mu();
    let (w, bias) = (g.param(p, w), g.param(p, bias));
    let mu_ref = g.affine(o, w, bias).unwrap();
    let (w, bias) = m.head_sigma();
    let (w, bias) = (g.param(p, w), g.param(p, bias));
    let s_ref = g.affine(o, w, bias).unwrap();
    let s_ref = g.softplus(s_ref);
    let s_ref = g.add_scalar(s_ref, m.hyper.epsilon);
    assert_eq!(mu, g.value(mu_ref));
    assert_eq!(sigma, g.value(s_ref));
}

#[test]
fn zeroed_network_outputs_head_biases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut m = build(small_hyper(5, 2, 9), 7);
    let (mu_b, sigma_b) = (m.head_mu().1, m.head_sigma().1);
    let gains: Vec<ParamId> = m
        .backward_stack()
        .iter()
        .chain(m.forward_stack())
        .flat_map(|b| [b.conv_g, b.conv_b, b.dense_g, b.dense_b])
        .collect();
    for id in gains {
        m.params.get_mut(id).data_mut().fill(0.0);
    }
    m.params.get_mut(mu_b).data_mut()[0] = 0.7;
    m.params.get_mut(sigma_b).data_mut()[0] = -0.4;
    let b = batch(7, 9, 2, &dims(), &mut rng);
    let (mu, sigma) = m.predict(b.inputs()).unwrap();
    let sp = |x: f64| (1.0 + x.exp()).ln();
    assert!(mu.iter().all(|&v| v == ops_scalar::softplus(0.7)));
    assert!(sigma.iter().all(|&v| v == ops_scalar::softplus(-0.4) + 1e-3));
    assert!((mu[0] - sp(0.7)).abs() < 1e-15);
}

#[test]
fn parameter_accounting() {
    for (d_h, layers, k) in [(12, 5, 9), (4, 2, 3), (8, 3, 5)] {
        let hp = HyperParams { d_hidden: d_h, layers, kernel_size: k, ..small_hyper(4, 2, 8) };
        let full = build(hp.clone(), 1);
        let ablated = build(HyperParams { forward_module: false, ..hp.clone() }, 1);
        assert!(ablated.count_parameters() < full.count_parameters());
        let ungrouped = build(HyperParams { groups: 1, ..hp.clone() }, 1);
        let g = hp.effective_groups();
        assert_eq!(full.forward_conv_weights() * g, ungrouped.forward_conv_weights());
        let doubled = build(HyperParams { d_hidden: 2 * d_h, ..hp }, 1);
        assert!(doubled.count_parameters() > 2 * full.count_parameters());
    }
}

#[test]
fn frozen_model_matches_graph() {
    for (forward_module, join, softplus_mu) in [
        (true, JoinMode::Concat, true),
        (true, JoinMode::Add, false),
        (false, JoinMode::Concat, true),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let hp = HyperParams { forward_module, join, softplus_mu, ..small_hyper(7, 3, 14) };
        let m = build(hp, 8);
        let b = batch(10, 14, 3, &dims(), &mut rng);
        let (mu, sigma) = m.predict(b.inputs()).unwrap();
        let frozen = FrozenModel::new(&m);
        let (fmu, fsigma) = frozen.predict(b.inputs()).unwrap();
        for (a, f) in mu.iter().chain(&sigma).zip(fmu.iter().chain(&fsigma)) {
            assert!((a - f).abs() < 1e-12, "{a} vs {f}");
        }
    }
}

#[test]
fn lag_state_replicates_and_updates_incrementally() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = build(small_hyper(6, 3, 12), 9);
    let frozen = FrozenModel::new(&m);
    let mut b = batch(9, 12, 1, &dims(), &mut rng);
    let mut state = frozen.lag_state(b.inputs()).unwrap();
    for t in 0..9 {
        state.set_lag(t, 0, b.y.data()[t]);
    }
    for t in 0..6 {
        state.compute(t).unwrap();
    }
    let mut many = state.replicate(3).unwrap();
    assert_eq!(many.paths(), 3);
    for t in 6..9 {
        many.set_lag(t, 1, 0.25 * t as f64);
        many.set_lag(t, 0, b.y.data()[t]);
        many.set_lag(t, 2, b.y.data()[t]);
        many.compute(t).unwrap();
    }
    let (full_mu, _) = frozen.predict(b.inputs()).unwrap();
    assert!((many.output(8).0[0] - full_mu[8]).abs() < 1e-12);
    assert_eq!(many.output(8).0[0], many.output(8).0[2]);
    for t in 6..9 {
        b.y.data_mut()[t] = 0.25 * t as f64;
    }
    let (alt_mu, _) = frozen.predict(b.inputs()).unwrap();
    assert!((many.output(8).0[1] - alt_mu[8]).abs() < 1e-12);
}

fn ckpt_fixture(dir: &std::path::Path) -> (Checkpoint, std::path::PathBuf) {
    let m = build(small_hyper(5, 2, 9), 21);
    let mut opt = AdamState::new(&m.params);
    opt.step = 7;
    opt.m[0].data_mut()[0] = 0.125;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let _: u64 = rng.random();
    let ck = Checkpoint {
        model: m,
        optimizer: Some(opt),
        rng: Some(RngState::capture(&rng)),
        epoch: 3,
    };
    (ck, dir.join("sub/model.ckpt"))
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, path) = ckpt_fixture(dir.path());
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = batch(7, 9, 2, &dims(), &mut rng);
    assert_eq!(back.model.predict(b.inputs()).unwrap(), ck.model.predict(b.inputs()).unwrap());
    let mut r1 = ck.rng.unwrap().restore();
    let mut r2 = back.rng.unwrap().restore();
    assert_eq!(r1.random::<u64>(), r2.random::<u64>());
    assert_eq!(ck.to_bytes().unwrap(), back.to_bytes().unwrap());
}

#[test]
fn checkpoint_rejects_corruption_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, path) = ckpt_fixture(dir.path());
    let bytes = ck.to_bytes().unwrap();

    let truncated = &bytes[..bytes.len() - 17];
    assert!(matches!(Checkpoint::from_bytes(truncated, &path), Err(Error::Checkpoint { .. })));
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(Checkpoint::from_bytes(&flipped, &path).is_err());

    let mut versioned = bytes[..bytes.len() - 4].to_vec();
    versioned[8..12].copy_from_slice(&2u32.to_le_bytes());
    let crc = crc32fast::hash(&versioned);
    versioned.extend_from_slice(&crc.to_le_bytes());
    let err = Checkpoint::from_bytes(&versioned, &path).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    save_checkpoint(&ck, &path).unwrap();
    let other = HyperParams { kernel_size: 5, ..ck.model.hyper.clone() };
    let err = load_checkpoint_expecting(&path, &other).unwrap_err();
    assert!(err.to_string().contains("kernel_size"), "{err}");
    assert!(load_checkpoint_expecting(&path, &ck.model.hyper).is_ok());
    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    assert_eq!(hyper_mismatch(&ck.model.hyper, &ck.model.hyper), None);
}
