use adacbm_core::embedding_io::ConceptRecord;
use adacbm_core::synthetic::{generate, SyntheticConfig};
use adacbm_core::{
    concept_responses, pair_dataset, pearson_r, select_concepts, DenominatorMode, EmbeddingMatrix,
    Error, ImageRecord, SelectionConfig, SelectionResult,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn record(id: &str, class_tag: Option<usize>) -> ConceptRecord {
    ConceptRecord {
        id: id.into(),
        text: id.into(),
        class_tag,
        category: None,
    }
}

#[test]
fn planted_concepts_are_selected() {
    // One planted direction per class plus four tagged distractors.
    for seed in 0..10 {
        let data = generate(&SyntheticConfig {
            planted_per_class: 1,
            seed,
            ..Default::default()
        })
        .unwrap();
        let cfg = SelectionConfig {
            k: 2,
            ..Default::default()
        };
        let sel = select_concepts(&data.train, &data.concepts, &data.concept_records, &cfg).unwrap();
        for (class, planted) in data.planted.iter().enumerate() {
            let top = sel.classes[class].selected[0].concept_index;
            assert_eq!(top, planted[0], "seed {seed} class {class}");
        }
    }
}

#[test]
fn duplicate_pair_keeps_lower_index_and_next_best_fills() {
    // Class 0 images point along e0; concepts 0 and 1 are both e0, concept 2
    // is weaker, concept 3 weaker still.
    let rows: Vec<Vec<f32>> = vec![
        vec![1.0, 0.1, 0.0],
        vec![1.2, 0.0, 0.1],
        vec![0.9, 0.2, 0.0],
        vec![0.0, 1.0, 0.3],
        vec![0.1, 1.1, 0.0],
        vec![0.0, 0.9, 0.2],
    ];
    let labels = [0, 0, 0, 1, 1, 1];
    let recs = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| ImageRecord {
            id: format!("x{i}"),
            label: l,
        })
        .collect();
    let ds = pair_dataset(EmbeddingMatrix::from_rows(&rows).unwrap(), recs, 2).unwrap();
    let concepts = EmbeddingMatrix::from_rows(&[
        vec![1.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![0.5, -0.3, 0.4],
        vec![0.0, 0.0, 1.0],
        vec![0.0, 1.0, 0.0],
    ])
    .unwrap();
    let records = vec![
        record("a", Some(0)),
        record("a_copy", Some(0)),
        record("b", Some(0)),
        record("c", Some(0)),
        record("d", Some(1)),
    ];
    let cfg = SelectionConfig {
        k: 2,
        gamma: 0.9,
        mode: DenominatorMode::Paper,
    };
    let sel = select_concepts(&ds, &concepts, &records, &cfg);
    // Class 1 only has one candidate.
    assert!(matches!(sel, Err(Error::NotEnoughCandidates { class: 1, available: 1, k: 2 })));

    let mut records = records;
    records.push(record("e", Some(1)));
    let concepts = EmbeddingMatrix::from_rows(&[
        vec![1.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![0.5, -0.3, 0.4],
        vec![0.0, 0.0, 1.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 1.0, 1.0],
    ])
    .unwrap();
    let sel = select_concepts(&ds, &concepts, &records, &cfg).unwrap();
    let class0: Vec<&str> = sel.classes[0].selected.iter().map(|s| s.concept_id.as_str()).collect();
    assert_eq!(class0[0], "a");
    assert!(!class0.contains(&"a_copy"));
    assert_eq!(sel.classes[0].selected[0].rank, 1);
    assert_eq!(sel.classes[0].selected[1].rank, 2);
}

#[test]
fn shortfall_is_filled_with_warning() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f32>> = (0..20)
        .map(|_| (0..2).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let recs = (0..20)
        .map(|i| ImageRecord {
            id: format!("x{i}"),
            label: i % 2,
        })
        .collect();
    let ds = pair_dataset(EmbeddingMatrix::from_rows(&rows).unwrap(), recs, 2).unwrap();
    // Three proportional concepts: every pair has |r| = 1.
    let concepts = EmbeddingMatrix::from_rows(&[vec![1.0, 0.5], vec![2.0, 1.0], vec![-1.0, -0.5]]).unwrap();
    let records = vec![record("p", None), record("q", None), record("r", None)];
    let cfg = SelectionConfig {
        k: 2,
        gamma: 0.9,
        mode: DenominatorMode::Welch,
    };
    let sel = select_concepts(&ds, &concepts, &records, &cfg).unwrap();
    assert_eq!(sel.warnings.len(), 2);
    for class in &sel.classes {
        assert_eq!(class.selected.len(), 2);
    }
    // Untagged concepts serve every class.
    assert_eq!(sel.mask().cols(), 2);
}

#[test]
fn responses_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<f32>> = (0..5)
        .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let recs = (0..5)
        .map(|i| ImageRecord {
            id: format!("x{i}"),
            label: i % 2,
        })
        .collect();
    let ds = pair_dataset(EmbeddingMatrix::from_rows(&rows).unwrap(), recs, 2).unwrap();
    let t: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
    let got = concept_responses(&ds, &t).unwrap();
    for (i, row) in rows.iter().enumerate() {
        let mut want = 0.0;
        for c in 0..3 {
            want += row[c] as f64 * t[c];
        }
        assert_eq!(got[i], want);
    }
    assert!(matches!(
        concept_responses(&ds, &[1.0]),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn pearson_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let n = rng.random_range(2..30);
        let a: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                0.5 * v + e
            })
            .collect();
        let (ma, mb) = (a.iter().sum::<f64>() / n as f64, b.iter().sum::<f64>() / n as f64);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let sa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>().sqrt();
        let sb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>().sqrt();
        let want = cov / (sa * sb);
        let got = pearson_r(&a, &b).unwrap();
        assert!(!got.degenerate);
        assert!((got.r - want).abs() < 1e-12);
    }
    let flat = pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
    assert!(flat.degenerate);
    assert_eq!(flat.r, 0.0);
    assert!(pearson_r(&[1.0], &[1.0]).is_err());
    assert!(pearson_r(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn selection_json_round_trips() {
    let data = generate(&SyntheticConfig {
        train_per_class: 20,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let sel = select_concepts(&data.train, &data.concepts, &data.concept_records, &SelectionConfig::default())
        .unwrap_err();
    // Default k = 10 exceeds the 8 tagged candidates per class.
    assert!(matches!(sel, Error::NotEnoughCandidates { available: 8, k: 10, .. }));

    let cfg = SelectionConfig {
        k: 3,
        ..Default::default()
    };
    let sel = select_concepts(&data.train, &data.concepts, &data.concept_records, &cfg).unwrap();
    let json = sel.to_json().unwrap();
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(value["k"], 3);
    assert_eq!(value["mode"], "paper");
    let first = &value["classes"][0]["selected"][0];
    assert!(first["concept_id"].is_string());
    assert!(first["t_value"].is_number());
    assert_eq!(first["rank"], 1);
    assert_eq!(SelectionResult::from_json(&json).unwrap(), sel);
}

#[test]
fn invalid_config_is_rejected() {
    let data = generate(&SyntheticConfig {
        train_per_class: 5,
        ..Default::default()
    })
    .unwrap();
    for (k, gamma) in [(0, 0.9), (2, 0.0), (2, 1.5)] {
        let cfg = SelectionConfig {
            k,
            gamma,
            mode: DenominatorMode::Paper,
        };
        assert!(select_concepts(&data.train, &data.concepts, &data.concept_records, &cfg).is_err());
    }
}
