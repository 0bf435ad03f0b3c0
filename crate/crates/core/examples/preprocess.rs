//! Compares the three covariate pipelines on the toy landscape.
//!
//! ```text
//! cargo run --example preprocess
//! ```

use std::path::Path;

use mtec::data::{
    fit_preprocessor, load_dataset, variance_inflation, PreprocessMode, PreprocessOptions,
};

fn main() -> mtec::Result<()> {
    let toy = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy");
    let d = load_dataset(
        &toy.join("community.csv"),
        &toy.join("covariates.csv"),
        &toy.join("schema.json"),
    )?;
    println!(
        "{} sites, {} species, {} covariate columns",
        d.n_sites(),
        d.n_species(),
        d.schema.len()
    );

    let rows: Vec<usize> = (0..d.n_sites()).collect();
    for mode in [
        PreprocessMode::EndToEnd,
        PreprocessMode::Vif,
        PreprocessMode::Pca,
    ] {
        let opts = PreprocessOptions {
            mode,
            ..Default::default()
        };
        let pre = fit_preprocessor(&d, &opts, &rows)?;
        println!("\n{mode:?}: width {}", pre.width());
        println!("  inputs: {}", pre.feature_names().join(", "));
        if let Some(pca) = &pre.pca {
            let shares: Vec<String> = pca.explained.iter().map(|v| format!("{v:.3}")).collect();
            println!("  explained variance: {}", shares.join(", "));
        }
        if pre.vif_fallback {
            println!("  VIF fell back to pairwise correlations");
        }
    }

    let numeric: Vec<usize> = d
        .schema
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_categorical())
        .map(|(i, _)| i)
        .collect();
    let z = d.covariates.select_columns(&numeric);
    if let Some(vif) = variance_inflation(&z) {
        println!();
        for (k, v) in numeric.iter().zip(vif) {
            println!("VIF {:<6} {v:.2}", d.schema.columns[*k].name);
        }
    }

    let (e, unseen) = fit_preprocessor(&d, &PreprocessOptions::default(), &rows)?
        .transform_matrix(&d.covariates)?;
    println!(
        "\nend-to-end design: {} x {} ({unseen} unseen levels)",
        e.nrows(),
        e.ncols()
    );
    Ok(())
}
