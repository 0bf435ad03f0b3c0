//! Regenerates the bundled toy landscape in `data/toy/`.
//!
//! The first 150 sites are the training set; the remaining 50 form an
//! evaluation set, also written as presence-only records.
//!
//!     cargo run --example toy_data [-- <output dir>]

use std::fs;
use std::path::PathBuf;

use mtec::synthetic::toy_landscape;

fn main() -> mtec::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy"));
    fs::create_dir_all(&dir).map_err(|e| mtec::Error::Config(e.to_string()))?;
    let (all, coords) = toy_landscape(200, 8, 11)?;
    let train: Vec<usize> = (0..150).collect();
    let eval: Vec<usize> = (150..200).collect();
    let d = all.select_rows(&train);
    let e = all.select_rows(&eval);
    d.write_community(&dir.join("community.csv"))?;
    d.write_covariates(&dir.join("covariates.csv"))?;
    e.write_community(&dir.join("eval_community.csv"))?;
    e.write_covariates(&dir.join("eval_covariates.csv"))?;

    // presence-only: keep every other recorded occurrence, blank the rest
    let mut po = e.clone();
    let mut k = 0;
    for v in po.community.iter_mut() {
        if *v > 0.5 {
            *v = if k % 2 == 0 { 1.0 } else { 0.0 };
            k += 1;
        }
    }
    po.write_community(&dir.join("eval_presence.csv"))?;

    let schema = serde_json::to_string_pretty(&d.schema).expect("schema serializes");
    fs::write(dir.join("schema.json"), schema + "\n")
        .map_err(|e| mtec::Error::Config(e.to_string()))?;
    let mut w = csv::Writer::from_path(dir.join("coordinates.csv"))
        .map_err(|e| mtec::Error::Config(e.to_string()))?;
    w.write_record(["site_id", "x", "y"]).unwrap();
    for (id, x, y) in &coords[..150] {
        w.write_record([id.clone(), x.to_string(), y.to_string()])
            .unwrap();
    }
    w.flush().unwrap();
    println!("wrote toy data to {}", dir.display());
    for (j, sp) in d.species_names.iter().enumerate() {
        println!("{sp}: prevalence {:.3}", d.community.column(j).mean());
    }
    Ok(())
}
