//! Simulates a community with known latent structure, trains on 70% of the
//! sites and scores the held-out rest against the generating probabilities.
//!
//! ```text
//! cargo run --release --example train_synthetic
//! ```

use mtec::data::{fit_preprocessor, PreprocessOptions};
use mtec::eval::roc_auc;
use mtec::mtec::{MtecConfig, PredictMode};
use mtec::nn::AdamConfig;
use mtec::synthetic::{generate, SyntheticSpec};
use mtec::train::{balanced_partition, fit_matrices, SplitPlan, TrainSettings};

fn main() -> mtec::Result<()> {
    let seed = 3;
    let (d, truth) = generate(&SyntheticSpec {
        seed,
        ..Default::default()
    })?;
    let n = d.n_sites();

    let outer = balanced_partition(&d.community, 3, n * 7 / 10, seed)?;
    let y_fit = d.community.select_rows(&outer.train_rows);
    let inner = balanced_partition(&y_fit, 2, outer.train_rows.len() * 8 / 10, seed + 1)?;
    let lift = |rows: &[usize]| rows.iter().map(|&k| outer.train_rows[k]).collect();
    let plan = SplitPlan {
        train_rows: lift(&inner.train_rows),
        valid_rows: lift(&inner.valid_rows),
        min_occur: 2,
        seed,
        overflow: false,
    };

    let pre = fit_preprocessor(&d, &PreprocessOptions::default(), &outer.train_rows)?;
    let (e, _) = pre.transform_matrix(&d.covariates)?;
    let cfg = MtecConfig {
        latent_dim: 3,
        embed_dim: 16,
        encoder_widths: vec![32],
        ..Default::default()
    };
    let settings = TrainSettings {
        max_epochs: 400,
        patience: 20,
        seed,
        adam: AdamConfig {
            learning_rate: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = fit_matrices(&e, &d.community, &cfg, &settings, &plan)?;
    println!(
        "stopped after {} epochs, best epoch {}",
        out.log.epochs.len(),
        out.best_epoch
    );

    let test = &outer.valid_rows;
    let probs = out
        .model
        .predict(&e.select_rows(test), PredictMode::PriorMean)?;
    println!(
        "{:<10} {:>10} {:>8} {:>8}",
        "species", "prevalence", "mtec", "truth"
    );
    for (j, name) in d.species_names.iter().enumerate() {
        let labels: Vec<bool> = test.iter().map(|&i| d.community[(i, j)] > 0.5).collect();
        let fitted: Vec<f64> = probs.column(j).iter().copied().collect();
        let oracle: Vec<f64> = test.iter().map(|&i| truth.marginal[(i, j)]).collect();
        let fmt = |v: Option<f64>| v.map_or("n/a".into(), |a| format!("{a:.3}"));
        println!(
            "{name:<10} {:>10.3} {:>8} {:>8}",
            d.community.column(j).mean(),
            fmt(roc_auc(&fitted, &labels)),
            fmt(roc_auc(&oracle, &labels))
        );
    }
    Ok(())
}
