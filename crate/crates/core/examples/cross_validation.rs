//! 5x2 cross-validation of two latent dimensions on the toy landscape, with
//! the paired t test between them.
//!
//! ```text
//! cargo run --release --example cross_validation
//! ```

mod common;

use mtec::config::RunConfig;
use mtec::mtec::MtecConfig;
use mtec::train::cross_validate_5x2;

fn main() -> mtec::Result<()> {
    let run = RunConfig::load(&common::toy_dir().join("config.json"))?;
    let d = run.data.load()?;
    let configs: Vec<(String, MtecConfig)> = [1, 3]
        .into_iter()
        .map(|l| {
            (
                format!("latent{l}"),
                MtecConfig {
                    latent_dim: l,
                    ..run.model.clone()
                },
            )
        })
        .collect();
    let report = cross_validate_5x2(
        &d,
        &run.preprocess,
        &configs,
        &run.train_settings(),
        &run.cv_options(),
    )?;

    for c in &report.configs {
        println!(
            "{:<8} AUC {:.3} ± {:.3}   TSS {:.3} ± {:.3}",
            c.name, c.auc_mean, c.auc_sd, c.tss_mean, c.tss_sd
        );
        for f in &c.folds {
            println!(
                "    rep {} fold {}: AUC {:.3}, {} epochs",
                f.replication, f.fold, f.mean_auc, f.epochs_run
            );
        }
    }
    for t in &report.comparisons {
        println!(
            "{} vs {} on {}: t = {:.3}, p = {:.3}",
            t.a, t.b, t.metric, t.t, t.p_value
        );
    }
    Ok(())
}
