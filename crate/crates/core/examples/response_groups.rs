//! Groups species by how their SHAP responses to one covariate group vary
//! across sites (Ward linkage, gap statistic, PCA of mean responses).
//!
//! ```text
//! cargo run --release --example response_groups [group]
//! ```

mod common;

use mtec::explain::{background_rows, shap_explain, ShapMode};
use mtec::groups::{build_response_groups, GroupOptions};
use mtec::mtec::PredictMode;
use nalgebra::DMatrix;

fn main() -> mtec::Result<()> {
    let group = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "temperature".into());
    let toy = common::fit_toy()?;
    let d = &toy.data;
    let train = &toy.plan.train_rows;
    let bg: Vec<usize> = background_rows(train.len(), 25, 1)
        .into_iter()
        .map(|r| train[r])
        .collect();
    let names = d.schema.names();
    let groups: Vec<String> = d
        .schema
        .columns
        .iter()
        .map(|c| c.group.clone().unwrap_or_else(|| c.name.clone()))
        .collect();
    let f = |rows: &DMatrix<f64>| {
        let (e, _) = toy.pre.transform_matrix(rows)?;
        toy.model.predict(&e, PredictMode::PriorMean)
    };
    let attr = shap_explain(
        &f,
        &d.covariates,
        &d.site_ids,
        &d.covariates.select_rows(&bg),
        &names,
        &groups,
        &d.species_names,
        ShapMode::Exact,
        3,
    )?;

    let opts = GroupOptions {
        k_max: 5,
        references: 30,
        ..Default::default()
    };
    let result = build_response_groups(&attr, &group, &opts)?;
    println!(
        "group `{group}`: k = {} (gap {}, elbow {:?})",
        result.k, result.gap_k, result.elbow_k
    );
    for (k, gap) in result.gap.gap.iter().enumerate() {
        println!("  k={} gap {gap:.3} ± {:.3}", k + 1, result.gap.s[k]);
    }
    for c in 1..=result.k {
        let members: Vec<&str> = result
            .species
            .iter()
            .zip(&result.labels)
            .filter(|(_, l)| **l == c)
            .map(|(s, _)| s.as_str())
            .collect();
        println!("cluster {c}: {}", members.join(", "));
    }
    let pcs: Vec<String> = result
        .pca
        .explained
        .iter()
        .map(|v| format!("{v:.3}"))
        .collect();
    println!("PCA explained variance: {}", pcs.join(", "));
    Ok(())
}
