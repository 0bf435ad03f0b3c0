//! Kernel SHAP attributions of the toy model on its raw covariates, with
//! global and per-group importance.
//!
//! ```text
//! cargo run --release --example shap_attribution
//! ```

mod common;

use mtec::explain::{
    background_rows, feature_order, global_importance, group_importance, shap_explain, ShapMode,
};
use mtec::mtec::PredictMode;
use nalgebra::DMatrix;

fn main() -> mtec::Result<()> {
    let toy = common::fit_toy()?;
    let d = &toy.data;
    let train = &toy.plan.train_rows;
    let bg: Vec<usize> = background_rows(train.len(), 25, 1)
        .into_iter()
        .map(|r| train[r])
        .collect();
    let sites: Vec<usize> = background_rows(d.n_sites(), 40, 2);

    let names = d.schema.names();
    let groups: Vec<String> = d
        .schema
        .columns
        .iter()
        .map(|c| c.group.clone().unwrap_or_else(|| c.name.clone()))
        .collect();
    let ids: Vec<String> = sites.iter().map(|&i| d.site_ids[i].clone()).collect();
    let f = |rows: &DMatrix<f64>| {
        let (e, _) = toy.pre.transform_matrix(rows)?;
        toy.model.predict(&e, PredictMode::PriorMean)
    };
    let attr = shap_explain(
        &f,
        &d.covariates.select_rows(&sites),
        &ids,
        &d.covariates.select_rows(&bg),
        &names,
        &groups,
        &d.species_names,
        ShapMode::Exact,
        3,
    )?;
    println!(
        "explained {} sites; largest efficiency gap {:.1e}",
        ids.len(),
        attr.max_efficiency_gap()
    );

    let imp = global_importance(&attr);
    let order = feature_order(&imp);
    println!("\nmean |phi| per feature, most important first:");
    print!("{:<10}", "species");
    for &k in &order {
        print!(" {:>9}", names[k]);
    }
    println!();
    for (j, sp) in attr.species.iter().enumerate() {
        print!("{sp:<10}");
        for &k in &order {
            print!(" {:>9.4}", imp[(j, k)]);
        }
        println!();
    }

    let (group_names, shares) = group_importance(&attr)?;
    println!("\nshare of attribution by covariate group:");
    for (j, sp) in attr.species.iter().enumerate() {
        let cells: Vec<String> = group_names
            .iter()
            .enumerate()
            .map(|(g, n)| format!("{n} {:.2}", shares[(j, g)]))
            .collect();
        println!("{sp:<10} {}", cells.join("  "));
    }
    Ok(())
}
