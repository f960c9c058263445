#![allow(dead_code)]

use adacbm_core::model::{LinearLayer, DEFAULT_NEGATIVE_SLOPE};
use adacbm_core::synthetic::{generate, SyntheticConfig, SyntheticData};
use adacbm_core::{
    select_concepts, AdaCbmModel, Adapter, CbmHead, ConceptBank, Mask, Matrix, ModelMetadata,
    SelectionConfig,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gauss_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * gauss(rng)).collect()
}

/// Every concept gets one random class, and with probability 1/4 a second one.
pub fn random_mask(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Mask {
    let rows: Vec<Vec<bool>> = (0..k)
        .map(|_| {
            let mut row = vec![false; n];
            row[rng.random_range(0..n)] = true;
            if rng.random_bool(0.25) {
                row[rng.random_range(0..n)] = true;
            }
            row
        })
        .collect();
    Mask::from_rows(&rows)
}

pub fn random_bank(rng: &mut ChaCha8Rng, d: usize, k: usize, n: usize) -> ConceptBank {
    let mask = random_mask(rng, k, n);
    let rows: Vec<Vec<f64>> = (0..k).map(|_| gauss_vec(rng, d, 1.0)).collect();
    ConceptBank::new(
        (0..k).map(|j| format!("c{j}")).collect(),
        (0..k).map(|j| format!("concept {j}")).collect(),
        Matrix::from_rows(&rows),
        mask,
    )
    .unwrap()
}

/// A model with every parameter drawn at random (masked `V` entries stay 0).
pub fn random_model(rng: &mut ChaCha8Rng, d: usize, k: usize, n: usize, layers: usize) -> AdaCbmModel {
    let bank = random_bank(rng, d, k, n);
    let adapter_layers = (0..layers)
        .map(|_| {
            let w = Matrix::from_vec(d, d, gauss_vec(rng, d * d, 1.0 / (d as f64).sqrt()));
            LinearLayer::new(w, gauss_vec(rng, d, 0.3)).unwrap()
        })
        .collect();
    let adapter = Adapter::new(adapter_layers, DEFAULT_NEGATIVE_SLOPE).unwrap();
    let mask = bank.mask().clone();
    let mut v = Matrix::zeros(k, n);
    for j in 0..k {
        for i in 0..n {
            if mask.get(j, i) {
                v.set(j, i, gauss(rng));
            }
        }
    }
    let head = CbmHead::from_parts(v, mask, gauss_vec(rng, k, 0.5), gauss_vec(rng, n, 0.5)).unwrap();
    AdaCbmModel::from_parts(adapter, head, bank, ModelMetadata::with_default_names(n)).unwrap()
}

/// Small planted (unrotated) synthetic set together with its k=4 selection.
pub fn planted(seed: u64) -> (SyntheticData, ConceptBank) {
    let data = generate(&SyntheticConfig {
        seed,
        ..Default::default()
    })
    .unwrap();
    let bank = bank_for(&data, 4);
    (data, bank)
}

pub fn bank_for(data: &SyntheticData, k: usize) -> ConceptBank {
    let cfg = SelectionConfig {
        k,
        ..Default::default()
    };
    let sel = select_concepts(&data.train, &data.concepts, &data.concept_records, &cfg).unwrap();
    ConceptBank::from_selection(&sel, &data.concepts, &data.concept_records).unwrap()
}
