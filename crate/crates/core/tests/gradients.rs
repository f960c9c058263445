mod common;

use adacbm_core::trainer::{flat_params, set_flat_params};
use adacbm_core::{
    backward, cross_entropy_loss, sgd_step, AdaCbmModel, GradientSet, LaboHead, LinearProbe,
    ModelMetadata, TrainedModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{gauss_vec, random_bank, random_model};

const EPS: f64 = 1e-5;

fn mean_loss(model: &TrainedModel, batch: &[(Vec<f64>, usize)]) -> f64 {
    batch
        .iter()
        .map(|(x, y)| cross_entropy_loss(&model.forward_logits(x).unwrap(), *y))
        .sum::<f64>()
        / batch.len() as f64
}

fn finite_differences(model: &TrainedModel, batch: &[(Vec<f64>, usize)]) -> Vec<f64> {
    let params = flat_params(model);
    let mut probe = model.clone();
    (0..params.len())
        .map(|p| {
            let mut shifted = params.clone();
            shifted[p] += EPS;
            set_flat_params(&mut probe, &shifted).unwrap();
            let up = mean_loss(&probe, batch);
            shifted[p] = params[p] - EPS;
            set_flat_params(&mut probe, &shifted).unwrap();
            let down = mean_loss(&probe, batch);
            (up - down) / (2.0 * EPS)
        })
        .collect()
}

fn assert_matches_fd(model: &TrainedModel, batch: &[(Vec<f64>, usize)]) {
    let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let (loss, grads) = backward(model, &refs).unwrap();
    assert!((loss - mean_loss(model, batch)).abs() < 1e-12);
    let analytic = grads.flatten();
    let numeric = finite_differences(model, batch);
    assert_eq!(analytic.len(), numeric.len());
    for (p, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / n.abs().max(1.0);
        assert!(err < 1e-6, "parameter {p}: analytic {a}, numeric {n}");
    }
}

fn random_batch(rng: &mut ChaCha8Rng, d: usize, n: usize, size: usize) -> Vec<(Vec<f64>, usize)> {
    (0..size)
        .map(|_| (gauss_vec(rng, d, 1.0), rng.random_range(0..n)))
        .collect()
}

#[test]
fn small_single_sample_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = TrainedModel::AdaCbm(random_model(&mut rng, 2, 2, 2, 1));
    let batch = random_batch(&mut rng, 2, 2, 1);
    assert_matches_fd(&model, &batch);
}

#[test]
fn adacbm_all_depths() {
    for seed in 0..12 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = [1, 2, 4][seed as usize % 3];
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=6);
        let n = rng.random_range(2..=3);
        let model = TrainedModel::AdaCbm(random_model(&mut rng, d, k, n, layers));
        let batch = random_batch(&mut rng, d, n, 4);
        assert_matches_fd(&model, &batch);
    }
}

#[test]
fn linear_probe_gradients() {
    for seed in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let d = rng.random_range(1..=4);
        let n = rng.random_range(2..=3);
        let mut model = TrainedModel::LinearProbe(LinearProbe::new(d, ModelMetadata::with_default_names(n)));
        let len = flat_params(&model).len();
        set_flat_params(&mut model, &gauss_vec(&mut rng, len, 0.7)).unwrap();
        let batch = random_batch(&mut rng, d, n, 5);
        assert_matches_fd(&model, &batch);
    }
}

#[test]
fn labo_head_gradients() {
    for seed in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=6);
        let n = rng.random_range(2..=3);
        let bank = random_bank(&mut rng, d, k, n);
        let mut model =
            TrainedModel::LaboHead(LaboHead::new(bank, ModelMetadata::with_default_names(n)).unwrap());
        let len = flat_params(&model).len();
        set_flat_params(&mut model, &gauss_vec(&mut rng, len, 0.7)).unwrap();
        let batch = random_batch(&mut rng, d, n, 5);
        assert_matches_fd(&model, &batch);
    }
}

#[test]
fn masked_v_entries_have_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = random_model(&mut rng, 3, 5, 3, 2);
    let mask = m.head().mask().clone();
    let model = TrainedModel::AdaCbm(m);
    let batch = random_batch(&mut rng, 3, 3, 6);
    let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let GradientSet::AdaCbm { v, .. } = backward(&model, &refs).unwrap().1 else {
        panic!("wrong gradient kind");
    };
    // V sits after the adapter weights (9 + 9) and biases (3 + 3).
    let numeric = finite_differences(&model, &batch);
    let v_offset = 2 * 9 + 2 * 3;
    for j in 0..5 {
        for i in 0..3 {
            if !mask.get(j, i) {
                assert_eq!(v.get(j, i), 0.0);
                assert_eq!(numeric[v_offset + j * 3 + i], 0.0);
            }
        }
    }
}

#[test]
fn sgd_step_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = random_model(&mut rng, 3, 4, 2, 2);
    let mask = m.head().mask().clone();
    let model = TrainedModel::AdaCbm(m);
    let batch = random_batch(&mut rng, 3, 2, 4);
    let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let grads = backward(&model, &refs).unwrap().1;
    let (lr, wd) = (0.05, 0.01);
    let mut stepped = model.clone();
    sgd_step(&mut stepped, &grads, lr, wd).unwrap();

    let before = flat_params(&model);
    let g = grads.flatten();
    let after = flat_params(&stepped);
    // Layout: W1 W2 (9 each), b1 b2 (3 each), V (4x2), alpha (4), beta (2).
    for p in 0..before.len() {
        let want = if p < 18 {
            before[p] - lr * (g[p] + wd * before[p])
        } else if p < 24 {
            before[p] - lr * g[p]
        } else if p < 32 {
            let (j, i) = ((p - 24) / 2, (p - 24) % 2);
            if mask.get(j, i) {
                before[p] - lr * (g[p] + wd * before[p])
            } else {
                0.0
            }
        } else {
            before[p] - lr * g[p]
        };
        assert_eq!(after[p], want, "parameter {p}");
    }
}

#[test]
fn zero_lr_step_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = TrainedModel::AdaCbm(random_model(&mut rng, 4, 6, 3, 1));
    let batch = random_batch(&mut rng, 4, 3, 3);
    let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let grads = backward(&model, &refs).unwrap().1;
    let mut stepped = model.clone();
    sgd_step(&mut stepped, &grads, 0.0, 1e-4).unwrap();
    assert_eq!(flat_params(&stepped), flat_params(&model));

    // Parameters move continuously as lr shrinks.
    let mut prev = f64::INFINITY;
    for lr in [1e-2, 1e-4, 1e-6, 1e-8] {
        let mut s = model.clone();
        sgd_step(&mut s, &grads, lr, 1e-4).unwrap();
        let dist: f64 = flat_params(&s)
            .iter()
            .zip(flat_params(&model))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dist < prev);
        prev = dist;
    }
    assert!(prev < 1e-6);
}

#[test]
fn saturated_batch_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bank = random_bank(&mut rng, 2, 2, 2);
    let mut model =
        TrainedModel::AdaCbm(AdaCbmModel::new(bank, ModelMetadata::with_default_names(2), 1).unwrap());
    let mut params = vec![0.0; flat_params(&model).len()];
    // Class 0 bias huge: every sample is confidently class 0.
    let len = params.len();
    params[len - 2] = 1e4;
    set_flat_params(&mut model, &params).unwrap();
    let xs = [vec![0.3, -0.2], vec![1.0, 2.0]];
    let batch: Vec<(&[f64], usize)> = xs.iter().map(|x| (x.as_slice(), 0)).collect();
    let (loss, grads) = backward(&model, &batch).unwrap();
    assert!(loss < 1e-12);
    assert!(grads.flatten().iter().all(|g| g.abs() < 1e-12));
}
