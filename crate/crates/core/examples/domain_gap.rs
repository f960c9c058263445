//! Rotated-domain comparison of adacbm, labo_head and linear_probe, plus the
//! inhibition ablation of the trained adacbm model.
//!
//! `cargo run --release -p adacbm-core --example domain_gap -- [n_seeds]`

use adacbm_core::synthetic::{generate, SyntheticConfig};
use adacbm_core::{
    evaluate, inhibition_report, select_concepts, train, ConceptBank, ModelKind, SelectionConfig,
    TrainConfig,
};

fn main() -> adacbm_core::Result<()> {
    let n_seeds: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    for seed in 0..n_seeds {
        let data = generate(&SyntheticConfig::rotated_domain(seed))?;
        let sel_cfg = SelectionConfig { k: 4, ..Default::default() };
        let sel = select_concepts(&data.train, &data.concepts, &data.concept_records, &sel_cfg)?;
        let bank = ConceptBank::from_selection(&sel, &data.concepts, &data.concept_records)?;

        let mut line = format!("seed {seed}:");
        for kind in [ModelKind::AdaCbm, ModelKind::LaboHead, ModelKind::LinearProbe] {
            let cfg = TrainConfig { epochs: 100, k: 4, seed, model_kind: kind, ..Default::default() };
            let out = train(&data.train, Some(&bank), &cfg)?;
            let acc = evaluate(&out.model, &data.test)?.overall_accuracy;
            line.push_str(&format!(" {kind}={acc:.3}"));
            if let Some(m) = out.model.as_adacbm() {
                let r = inhibition_report(m, &data.test)?;
                line.push_str(&format!(
                    " [inhibit image_norm={:.3} text_norm={:.3} cosine={:.3}]",
                    r.image_norm, r.text_norm, r.cosine
                ));
            }
        }
        println!("{line}");
    }
    Ok(())
}
