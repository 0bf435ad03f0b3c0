//! Fits the bundled toy landscape with its shipped configuration.

#![allow(dead_code)]

use std::path::PathBuf;

use mtec::config::RunConfig;
use mtec::data::{Dataset, Preprocessor};
use mtec::mtec::MtecModel;
use mtec::train::{balanced_partition, fit, SplitPlan};

pub struct Toy {
    pub run: RunConfig,
    pub data: Dataset,
    pub plan: SplitPlan,
    pub pre: Preprocessor,
    pub model: MtecModel,
}

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy")
}

pub fn fit_toy() -> mtec::Result<Toy> {
    let run = RunConfig::load(&toy_dir().join("config.json"))?;
    let data = run.data.load()?;
    let tsize = (run.split.train_fraction * data.n_sites() as f64).round() as usize;
    let plan = balanced_partition(&data.community, run.split.min_occur, tsize, run.seed)?;
    let (pre, outcome) = fit(
        &data,
        &run.preprocess,
        &run.model,
        &run.train_settings(),
        &plan,
    )?;
    eprintln!(
        "fitted toy model: best epoch {} of {}",
        outcome.best_epoch,
        outcome.log.epochs.len()
    );
    Ok(Toy {
        run,
        data,
        plan,
        pre,
        model: outcome.model,
    })
}
