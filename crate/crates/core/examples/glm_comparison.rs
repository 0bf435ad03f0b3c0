//! Scores the fitted model and per-species elastic-net GLMs on the
//! independent evaluation sites.
//!
//! ```text
//! cargo run --release --example glm_comparison
//! ```

mod common;

use mtec::baseline::fit_all;
use mtec::data::{load_community, load_covariates};
use mtec::eval::{
    evaluate_species, select_threshold, wilcoxon_rank_sum, write_summary_table, ThresholdSource,
};
use mtec::mtec::PredictMode;
use mtec::train::tune_thresholds_for;
use nalgebra::DMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let toy = common::fit_toy()?;
    let (d, plan) = (&toy.data, &toy.plan);
    let (e, _) = toy.pre.transform_matrix(&d.covariates)?;
    let thresholds = tune_thresholds_for(&toy.model, &e, &d.community, plan)?;

    let cfg = &toy.run.model;
    let glms = fit_all(
        &d.species_names,
        &e.select_rows(&plan.train_rows),
        &d.community.select_rows(&plan.train_rows),
        cfg.link,
        cfg.lambda_lasso,
        cfg.lambda_ridge,
        &toy.run.glm,
    )?;

    let dir = common::toy_dir();
    let (eval_ids, eval_species, labels) = load_community(&dir.join("eval_community.csv"))?;
    let (cov_ids, raw) = load_covariates(&dir.join("eval_covariates.csv"), &d.schema, false)?;
    assert_eq!(
        eval_ids, cov_ids,
        "evaluation tables list sites in the same order"
    );
    assert_eq!(eval_species, d.species_names);
    let (e_eval, _) = toy.pre.transform_matrix(&raw)?;

    let mtec_scores = toy.model.predict(&e_eval, PredictMode::PriorMean)?;
    let mut glm_scores = DMatrix::zeros(e_eval.nrows(), d.n_species());
    let mut glm_thresholds = Vec::new();
    for (j, g) in glms.iter().enumerate() {
        match g {
            Ok(model) => {
                glm_scores.set_column(j, &nalgebra::DVector::from_vec(model.predict(&e_eval)?));
                let valid = model.predict(&e.select_rows(&plan.valid_rows))?;
                let l: Vec<bool> = plan
                    .valid_rows
                    .iter()
                    .map(|&i| d.community[(i, j)] > 0.5)
                    .collect();
                glm_thresholds.push(select_threshold(&valid, &l).map(|(t, _)| t));
            }
            Err(why) => {
                eprintln!("{}: no GLM, {why}", d.species_names[j]);
                glm_thresholds.push(None);
            }
        }
    }

    let reports = [
        evaluate_species(
            "mtec",
            &d.species_names,
            &mtec_scores,
            &labels,
            ThresholdSource::Given(&thresholds),
            false,
        ),
        evaluate_species(
            "glm",
            &d.species_names,
            &glm_scores,
            &labels,
            ThresholdSource::Given(&glm_thresholds),
            false,
        ),
    ];
    write_summary_table(std::io::stdout(), &reports)?;

    let auc = |r: &mtec::eval::MetricReport| {
        r.per_species
            .iter()
            .filter_map(|s| s.auc)
            .collect::<Vec<_>>()
    };
    let test = wilcoxon_rank_sum(&auc(&reports[0]), &auc(&reports[1]));
    println!(
        "\nrank-sum on species AUCs: U = {}, p = {:.3}",
        test.u, test.p_value
    );
    Ok(())
}
