use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::IntTensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<_>>())
}

/// Central-difference check of `sum(f(inputs) ⊙ r)` for a fixed random `r`.
/// Returns the worst relative error over every input coordinate.
fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let build = |vals: &[Tensor], g: &mut Graph, weights: &mut Option<Tensor>, rng: &mut ChaCha8Rng| {
        let vars: Vec<Var> = vals.iter().map(|v| g.variable(v)).collect();
        let out = f(g, &vars).unwrap();
        let w = weights.get_or_insert_with(|| random(g.shape(out), rng)).clone();
        let wv = g.input(&w);
        let prod = g.mul(out, wv).unwrap();
        (vars, g.sum(prod))
    };
    let mut weights = None;
    let mut g = Graph::new();
    let (vars, loss) = build(inputs, &mut g, &mut weights, &mut rng);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; input.len()]);
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut vals = inputs.to_vec();
                vals[k].data_mut()[i] += delta;
                let mut g2 = Graph::new();
                let mut w = weights.clone();
                let (_, l) = build(&vals, &mut g2, &mut w, &mut ChaCha8Rng::seed_from_u64(0));
                g2.value(l)[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..20 {
        let groups = [1, 2][trial % 2];
        let spec = ConvSpec {
            kernel_size: rng.random_range(1..4),
            dilation: rng.random_range(1..4),
            direction: if trial % 3 == 0 { Direction::Forward } else { Direction::Backward },
            in_channels: 2 * groups,
            out_channels: 2 * groups,
            groups,
        };
        let len = rng.random_range(1..8);
        let x = random(&[len, 2, spec.in_channels], &mut rng);
        let w = random(&spec.weight_shape(), &mut rng);
        let b = random(&[spec.out_channels], &mut rng);
        let err = gradcheck(&[x, w, b], |g, v| g.dilated_conv(v[0], v[1], v[2], spec));
        assert!(err < 1e-4, "trial {trial}: {err}");
    }
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let n = rng.random_range(1..10);
        let x = random(&[n], &mut rng);
        assert!(gradcheck(std::slice::from_ref(&x), |g, v| Ok(g.gelu(v[0]))) < 1e-4);
        assert!(gradcheck(std::slice::from_ref(&x), |g, v| Ok(g.softplus(v[0]))) < 1e-4);
        assert!(gradcheck(&[x.clone(), random(&[n], &mut rng)], |g, v| g.mul(v[0], v[1])) < 1e-4);
        assert!(gradcheck(&[x], |g, v| Ok(g.add_scalar(v[0], 0.3))) < 1e-4);
    }
}

#[test]
fn affine_and_weight_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (m, i, o) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let x = random(&[m, 2, i], &mut rng);
        let w = random(&[i, o], &mut rng);
        let b = random(&[o], &mut rng);
        assert!(gradcheck(&[x, w, b], |g, v| g.affine(v[0], v[1], v[2])) < 1e-4);
        let vv = random(&[o, i, 2], &mut rng);
        let gg = random(&[o], &mut rng);
        assert!(gradcheck(&[vv, gg], |g, v| g.weight_norm(v[0], v[1])) < 1e-4);
    }
}

#[test]
fn shape_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let len = rng.random_range(2..7);
        let (c1, c2) = (rng.random_range(1..4), rng.random_range(1..4));
        let a = random(&[len, 2, c1], &mut rng);
        let b = random(&[len, 2, c2], &mut rng);
        assert!(gradcheck(&[a.clone(), b], |g, v| g.concat_channels(v[0], v[1])) < 1e-4);
        let start = rng.random_range(0..len - 1);
        assert!(gradcheck(std::slice::from_ref(&a), |g, v| g.slice_time(v[0], start, len - start - 1)) < 1e-4);
        assert!(gradcheck(std::slice::from_ref(&a), |g, v| g.slice_channels(v[0], c1 - 1, 1)) < 1e-4);
        let m = random(&[len, c1], &mut rng);
        assert!(gradcheck(&[m], |g, v| g.transpose(v[0])) < 1e-4);
    }
}

#[test]
fn embedding_and_dropout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let table = random(&[4, 3], &mut rng);
        let ids = IntTensor::new(vec![3, 2], (0..6).map(|_| rng.random_range(0..4)).collect()).unwrap();
        assert!(gradcheck(&[table], |g, v| g.embedding(&ids, v[0])) < 1e-4);
        let x = random(&[8], &mut rng);
        // Same seed on every evaluation so the mask is fixed.
        let err = gradcheck(&[x], |g, v| {
            g.dropout(v[0], 0.3, true, &mut ChaCha8Rng::seed_from_u64(trial))
        });
        assert!(err < 1e-4);
    }
}

#[test]
fn nll_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for family in [crate::distributions::Family::StudentT3, crate::distributions::Family::Gaussian] {
        for _ in 0..20 {
            let n = rng.random_range(1..6);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mu = random(&[n], &mut rng);
            let s = t(&[n], &(0..n).map(|_| rng.random_range(0.2..2.0)).collect::<Vec<_>>());
            let err = gradcheck(&[mu, s], |g, v| g.nll(family, &y, v[0], v[1], None));
            assert!(err < 1e-4, "{family:?}: {err}");
        }
    }
}

#[test]
fn gelu_values() {
    let mut g = Graph::new();
    let x = g.input(&Tensor::from_vec(vec![0.0, 1.0, -10.0]));
    let y = g.gelu(x);
    let v = g.value(y);
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 0.84119).abs() < 1e-4);
    assert!(v[2] < 0.0 && v[2] > -1e-3);
}

#[test]
fn softplus_values() {
    let mut g = Graph::new();
    let x = g.input(&Tensor::from_vec(vec![0.0, 50.0, -50.0]));
    let y = g.softplus(x);
    let v = g.value(y);
    assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((v[1] - 50.0).abs() < 1e-9);
    assert!(v[2] > 0.0 && v[2] <= 1e-20);
}

#[test]
fn affine_examples() {
    let mut g = Graph::new();
    let x = g.input(&t(&[1, 2], &[1.0, 2.0]));
    let w = g.input(&t(&[2, 1], &[1.0, 1.0]));
    let b = g.input(&t(&[1], &[3.0]));
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y), &[6.0]);

    let x = g.input(&t(&[2, 2], &[0.5, -1.0, 0.5, -1.0]));
    let eye = g.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zero = g.input(&t(&[2], &[0.0, 0.0]));
    let y = g.affine(x, eye, zero).unwrap();
    assert_eq!(g.value(y), &[0.5, -1.0, 0.5, -1.0]);

    let bad = g.input(&t(&[3, 1], &[1.0; 3]));
    assert!(g.affine(x, bad, b).is_err());
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let x = g.input(&Tensor::full(&[100_000], 1.0));
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.7, false, &mut rng).unwrap(), x);
    let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
    let mean = g.value(y).iter().sum::<f64>() / 100_000.0;
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    assert!(g.dropout(x, -0.1, true, &mut rng).is_err());
}

#[test]
fn embedding_examples() {
    let table = t(&[2, 2], &[1.0, 1.0, 2.0, 2.0]);
    let mut g = Graph::new();
    let tv = g.variable(&table);
    let ids = IntTensor::new(vec![2, 1], vec![0, 1]).unwrap();
    let e = g.embedding(&ids, tv).unwrap();
    assert_eq!(g.value(e), &[1.0, 1.0, 2.0, 2.0]);

    let ids = IntTensor::new(vec![2, 1], vec![0, 0]).unwrap();
    let e = g.embedding(&ids, tv).unwrap();
    let s = g.sum(e);
    g.backward(s).unwrap();
    assert_eq!(g.grad(tv).unwrap(), &[2.0, 2.0, 0.0, 0.0]);

    let bad = IntTensor::new(vec![1, 1], vec![2]).unwrap();
    assert!(matches!(g.embedding(&bad, tv), Err(Error::OutOfVocabulary { id: 2, vocab: 2 })));
}

#[test]
fn weight_norm_examples() {
    let mut g = Graph::new();
    let v = g.input(&t(&[1, 2], &[3.0, 4.0]));
    let gain = g.input(&t(&[1], &[10.0]));
    let w = g.weight_norm(v, gain).unwrap();
    assert_eq!(g.value(w), &[6.0, 8.0]);

    let unit = g.input(&t(&[1, 2], &[0.6, 0.8]));
    let one = g.input(&t(&[1], &[1.0]));
    let w = g.weight_norm(unit, one).unwrap();
    assert_eq!(g.value(w), &[0.6, 0.8]);

    let scaled = g.input(&t(&[1, 2], &[30.0, 40.0]));
    let w2 = g.weight_norm(scaled, gain).unwrap();
    assert!(g.value(w2).iter().zip(&[6.0, 8.0]).all(|(a, b)| (a - b).abs() < 1e-12));

    let zero = g.input(&t(&[1, 2], &[0.0, 0.0]));
    assert!(g.weight_norm(zero, one).is_err());
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.variable(&Tensor::from_vec(vec![1.0, -2.0, 5.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.variable(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    // Accumulates until cleared.
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar_and_nan() {
    let mut g = Graph::new();
    let x = g.variable(&Tensor::from_vec(vec![1.0, 2.0]));
    assert!(g.backward(x).is_err());

    let mut g = Graph::new();
    let x = g.variable(&Tensor::from_vec(vec![f64::NAN, 2.0]));
    let y = g.variable(&Tensor::from_vec(vec![1.0, 1.0]));
    let p = g.mul(x, y).unwrap();
    let s = g.sum(p);
    let err = g.backward(s).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert!(err.to_string().contains("mul"), "{err}");
}

#[test]
fn slice_examples() {
    let mut g = Graph::new();
    let x = g.variable(&t(&[5, 1], &[1.0, 2.0, 3.0, 4.0, 5.0]));
    assert_eq!(g.slice_time(x, 0, 5).unwrap(), x);
    let s = g.slice_time(x, 0, 2).unwrap();
    let l = g.sum(s);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 0.0]);
    assert!(g.slice_time(x, 3, 3).is_err());
}

#[test]
fn concat_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let a = g.variable(&random(&[4, 2, 3], &mut rng));
    let b = g.variable(&random(&[4, 2, 5], &mut rng));
    let empty = g.input(&Tensor::zeros(&[4, 2, 0]));
    assert_eq!(g.concat_channels(a, empty).unwrap(), a);
    let c = g.concat_channels(a, b).unwrap();
    assert_eq!(g.shape(c), &[4, 2, 8]);
    let l = g.sum(c);
    g.backward(l).unwrap();
    assert_eq!(g.grad(a).unwrap(), vec![1.0; 24].as_slice());
    assert_eq!(g.grad(b).unwrap(), vec![1.0; 40].as_slice());
    let short = g.input(&Tensor::zeros(&[3, 2, 1]));
    assert!(g.concat_channels(a, short).is_err());
}

#[test]
fn conv_rejects_bad_shapes() {
    let spec = ConvSpec {
        kernel_size: 2,
        dilation: 1,
        direction: Direction::Backward,
        in_channels: 2,
        out_channels: 2,
        groups: 1,
    };
    let mut g = Graph::new();
    let x = g.input(&Tensor::zeros(&[3, 1, 3]));
    let w = g.input(&Tensor::zeros(&[2, 2, 2]));
    let b = g.input(&Tensor::zeros(&[2]));
    assert!(g.dilated_conv(x, w, b, spec).is_err());
    let bad_groups = ConvSpec { groups: 3, ..spec };
    let x = g.input(&Tensor::zeros(&[3, 1, 2]));
    assert!(g.dilated_conv(x, w, b, bad_groups).is_err());
}

#[test]
fn conv_causality_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for dir in [Direction::Backward, Direction::Forward] {
        let spec = ConvSpec {
            kernel_size: 3,
            dilation: 2,
            direction: dir,
            in_channels: 2,
            out_channels: 2,
            groups: 1,
        };
        let len = 12;
        let x = random(&[len, 1, 2], &mut rng);
        let w = random(&spec.weight_shape(), &mut rng);
        let b = random(&[2], &mut rng);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.input(x), g.input(&w), g.input(&b));
            let y = g.dilated_conv(xv, wv, bv, spec).unwrap();
            g.value(y).to_vec()
        };
        let base = run(&x);
        for probe in 0..len {
            let mut xp = x.clone();
            xp.data_mut()[probe * 2] += 1.0;
            let out = run(&xp);
            for t in 0..len {
                let unaffected = match dir {
                    Direction::Backward => t < probe,
                    Direction::Forward => t > probe,
                };
                if unaffected {
                    assert_eq!(out[t * 2..t * 2 + 2], base[t * 2..t * 2 + 2]);
                }
            }
        }
    }
}

#[test]
fn param_store_accumulates() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_vec(vec![1.0, 2.0]));
    for _ in 0..2 {
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let s = g.sum(w);
        g.backward(s).unwrap();
        store.accumulate_from(&g).unwrap();
    }
    assert_eq!(store.get(id).grad().unwrap(), &[2.0, 2.0]);
    store.zero_grad();
    assert_eq!(store.get(id).grad().unwrap(), &[0.0, 0.0]);
    assert_eq!(store.numel(), 2);
}
