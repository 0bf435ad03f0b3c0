//! Training orchestration: imbalance-aware partitioning, class weights,
//! prevalence-based initialization, the mini-batch Adam loop with early
//! stopping, and 5x2 cross-validation.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fit_preprocessor, Dataset, PreprocessOptions, Preprocessor};
use crate::error::{Error, Result};
use crate::eval::{roc_auc, select_threshold, tss};
use crate::mtec::{LossParts, MtecConfig, MtecModel, PredictMode};
use crate::nn::{adam_step, AdamConfig, AdamState};

/// Disjoint training and validation row sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_rows: Vec<usize>,
    pub valid_rows: Vec<usize>,
    pub min_occur: usize,
    pub seed: u64,
    /// Mandatory presence draws alone exceeded the requested training size.
    pub overflow: bool,
}

fn presence_rows(y: &DMatrix<f64>) -> Vec<Vec<usize>> {
    (0..y.ncols())
        .map(|j| (0..y.nrows()).filter(|&i| y[(i, j)] > 0.5).collect())
        .collect()
}

/// Draws a training set in which every species gets `min_occur` presences
/// (or all of its presences when it has fewer), serving the species with
/// the fewest still-available presences first, then tops the set up to
/// `tsize` rows uniformly at random.
pub fn balanced_partition(
    y: &DMatrix<f64>,
    min_occur: usize,
    tsize: usize,
    seed: u64,
) -> Result<SplitPlan> {
    let (n, m) = y.shape();
    if min_occur == 0 {
        return Err(Error::Config("min_occur must be at least 1".into()));
    }
    if tsize > n {
        return Err(Error::Config(format!(
            "training size {tsize} exceeds the {n} available rows"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let presences = presence_rows(y);
    let mut in_train = vec![false; n];
    let mut train_count = vec![0usize; m];
    let mut exhausted = vec![false; m];

    loop {
        let unsatisfied: Vec<usize> = (0..m)
            .filter(|&t| !exhausted[t] && train_count[t] < min_occur)
            .collect();
        if unsatisfied.is_empty() {
            break;
        }
        let potential: Vec<Vec<usize>> = unsatisfied
            .iter()
            .map(|&t| {
                presences[t]
                    .iter()
                    .copied()
                    .filter(|&i| !in_train[i])
                    .collect()
            })
            .collect();
        let smallest = potential.iter().map(Vec::len).min().unwrap_or(0);
        let candidates: Vec<usize> = (0..unsatisfied.len())
            .filter(|&k| potential[k].len() == smallest)
            .collect();
        let pick = candidates[rng.random_range(0..candidates.len())];
        let taxon = unsatisfied[pick];
        let pool = &potential[pick];
        let need = min_occur - train_count[taxon];
        let selected: Vec<usize> = if need >= pool.len() {
            exhausted[taxon] = true;
            pool.clone()
        } else {
            index::sample(&mut rng, pool.len(), need)
                .into_iter()
                .map(|k| pool[k])
                .collect()
        };
        for i in selected {
            in_train[i] = true;
            for (t, c) in train_count.iter_mut().enumerate() {
                if y[(i, t)] > 0.5 {
                    *c += 1;
                }
            }
        }
    }

    let mandatory = in_train.iter().filter(|b| **b).count();
    if mandatory < tsize {
        let remaining: Vec<usize> = (0..n).filter(|&i| !in_train[i]).collect();
        for k in index::sample(&mut rng, remaining.len(), tsize - mandatory) {
            in_train[remaining[k]] = true;
        }
    }
    let train_rows: Vec<usize> = (0..n).filter(|&i| in_train[i]).collect();
    let valid_rows: Vec<usize> = (0..n).filter(|&i| !in_train[i]).collect();
    Ok(SplitPlan {
        overflow: train_rows.len() > tsize,
        train_rows,
        valid_rows,
        min_occur,
        seed,
    })
}

impl SplitPlan {
    /// Recounts presences and checks disjointness, coverage and the
    /// per-species minimum against `y`.
    pub fn check(&self, y: &DMatrix<f64>) -> Result<()> {
        let n = y.nrows();
        let train: BTreeSet<usize> = self.train_rows.iter().copied().collect();
        let valid: BTreeSet<usize> = self.valid_rows.iter().copied().collect();
        if train.len() != self.train_rows.len() || valid.len() != self.valid_rows.len() {
            return Err(Error::Contract("split contains duplicate rows".into()));
        }
        if !train.is_disjoint(&valid)
            || train.len() + valid.len() != n
            || train.iter().chain(&valid).any(|&i| i >= n)
        {
            return Err(Error::Contract("split does not partition the rows".into()));
        }
        for j in 0..y.ncols() {
            let total = (0..n).filter(|&i| y[(i, j)] > 0.5).count();
            let in_train = train.iter().filter(|&&i| y[(i, j)] > 0.5).count();
            if in_train < self.min_occur.min(total) {
                return Err(Error::Contract(format!(
                    "species {j} has {in_train} training presences"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    /// Positive-class weight per species: absences / presences.
    pub weights: Vec<f64>,
    /// Species whose training rows are all present or all absent (weight 1).
    pub degenerate: Vec<bool>,
}

/// Weights presences by their odds relative to absences.
pub fn class_weights(y_train: &DMatrix<f64>) -> ClassWeights {
    let n = y_train.nrows();
    let mut weights = Vec::with_capacity(y_train.ncols());
    let mut degenerate = Vec::with_capacity(y_train.ncols());
    for j in 0..y_train.ncols() {
        let pos = y_train.column(j).iter().filter(|v| **v > 0.5).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            weights.push(1.0);
            degenerate.push(true);
        } else {
            weights.push(neg as f64 / pos as f64);
            degenerate.push(false);
        }
    }
    ClassWeights {
        weights,
        degenerate,
    }
}

/// Glorot-initialized model whose intercepts reproduce each species'
/// training prevalence through the link (prevalence clamped to
/// `[1/(2N), 1 - 1/(2N)]`).
pub fn init_model(
    config: MtecConfig,
    input_width: usize,
    y_train: &DMatrix<f64>,
    seed: u64,
) -> Result<MtecModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MtecModel::glorot(config, input_width, y_train.ncols(), &mut rng)?;
    set_prevalence_intercepts(&mut model, y_train);
    Ok(model)
}

pub(crate) fn set_prevalence_intercepts(model: &mut MtecModel, y_train: &DMatrix<f64>) {
    let n = y_train.nrows().max(1) as f64;
    let lo = 1.0 / (2.0 * n);
    for j in 0..y_train.ncols() {
        let prev = y_train.column(j).sum() / n;
        model.intercepts[j] = model.config.link.apply(prev.clamp(lo, 1.0 - lo));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            max_epochs: 400,
            batch_size: 32,
            patience: 10,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "max_epochs, batch_size and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Summed over the epoch's training batches.
    pub recon: f64,
    pub kl: f64,
    /// Penalty value at the end of the epoch.
    pub reg: f64,
    pub valid_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "recon", "kl", "reg", "valid_total"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.recon.to_string(),
                e.kl.to_string(),
                e.reg.to_string(),
                e.valid_total.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: MtecModel,
    pub class_weights: ClassWeights,
    pub log: TrainingLog,
    pub best_epoch: usize,
    pub best_valid: LossParts,
    /// Set when a non-finite loss or gradient stopped training; `model` is
    /// then the last finite best snapshot.
    pub abort: Option<String>,
}

fn draw_normals(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Mini-batch Adam on the negative ELBO over preprocessed inputs `e` and
/// community `y`. Validation draws use a fixed seed so epochs are comparable.
pub fn fit_matrices(
    e: &DMatrix<f64>,
    y: &DMatrix<f64>,
    config: &MtecConfig,
    settings: &TrainSettings,
    plan: &SplitPlan,
) -> Result<FitOutcome> {
    settings.validate()?;
    if e.nrows() != y.nrows() {
        return Err(Error::shape("training rows", e.nrows(), y.nrows()));
    }
    if plan.train_rows.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if plan
        .train_rows
        .iter()
        .chain(&plan.valid_rows)
        .any(|&i| i >= e.nrows())
    {
        return Err(Error::Contract(
            "split plan refers to rows outside the data".into(),
        ));
    }
    let y_train = y.select_rows(&plan.train_rows);
    let weights = class_weights(&y_train);
    let mut model = init_model(config.clone(), e.ncols(), &y_train, settings.seed)?;
    let mut adam = AdamState::new(settings.adam, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(1));
    let l = config.latent_dim;

    let (e_valid, y_valid) = (
        e.select_rows(&plan.valid_rows),
        y.select_rows(&plan.valid_rows),
    );
    let eps_valid = draw_normals(
        &mut ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(2)),
        plan.valid_rows.len(),
        l,
    );

    let mut log = TrainingLog::default();
    let mut best: Option<(f64, usize, MtecModel, LossParts)> = None;
    let mut order = plan.train_rows.clone();
    let mut abort = None;

    'epochs: for epoch in 1..=settings.max_epochs {
        order.shuffle(&mut rng);
        let (mut recon, mut kl) = (0.0, 0.0);
        let mut train_total = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let eb = e.select_rows(batch);
            let yb = y.select_rows(batch);
            let eps = draw_normals(&mut rng, batch.len(), l);
            let step = model
                .elbo_loss_and_grad(&eb, &yb, &eps, &weights.weights)
                .and_then(|(parts, grads)| adam_step(&mut model, &grads, &mut adam).map(|_| parts));
            match step {
                Ok(parts) => {
                    recon += parts.recon;
                    kl += parts.kl;
                    train_total += parts.recon + parts.kl;
                }
                Err(err @ Error::NonFinite(_)) => {
                    abort = Some(format!("epoch {epoch}: {err}"));
                    break 'epochs;
                }
                Err(err) => return Err(err),
            }
        }
        let reg = model.regularization();
        let valid = if plan.valid_rows.is_empty() {
            Ok(LossParts {
                recon,
                kl,
                reg,
                total: train_total + reg,
            })
        } else {
            model.elbo_loss(&e_valid, &y_valid, &eps_valid, &weights.weights)
        };
        let valid = match valid {
            Ok(v) => v,
            Err(err @ Error::NonFinite(_)) => {
                abort = Some(format!("epoch {epoch}: validation {err}"));
                break;
            }
            Err(err) => return Err(err),
        };
        log.epochs.push(EpochRecord {
            epoch,
            recon,
            kl,
            reg,
            valid_total: valid.total,
        });
        if best.as_ref().is_none_or(|b| valid.total < b.0) {
            best = Some((valid.total, epoch, model.clone(), valid));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch >= settings.patience {
            break;
        }
    }

    let (best_epoch, mut model, best_valid) = match best {
        Some((_, ep, m, parts)) => (ep, m, parts),
        None => {
            return Err(Error::TrainingAborted(
                abort.unwrap_or_else(|| "no epoch completed".into()),
            ))
        }
    };
    model.trained = true;
    Ok(FitOutcome {
        model,
        class_weights: weights,
        log,
        best_epoch,
        best_valid,
        abort,
    })
}

/// Fits the preprocessor on the plan's training rows, then trains.
pub fn fit(
    d: &Dataset,
    preprocess: &PreprocessOptions,
    config: &MtecConfig,
    settings: &TrainSettings,
    plan: &SplitPlan,
) -> Result<(Preprocessor, FitOutcome)> {
    let pre = fit_preprocessor(d, preprocess, &plan.train_rows)?;
    let (e, _) = pre.transform_matrix(&d.covariates)?;
    let outcome = fit_matrices(&e, &d.community, config, settings, plan)?;
    Ok((pre, outcome))
}

/// Per-species max-TSS thresholds from prior-mean predictions on `rows`.
pub fn tune_thresholds(
    model: &MtecModel,
    e: &DMatrix<f64>,
    y: &DMatrix<f64>,
    rows: &[usize],
) -> Result<Vec<Option<f64>>> {
    let probs = model.predict(&e.select_rows(rows), PredictMode::PriorMean)?;
    Ok((0..y.ncols())
        .map(|j| {
            let s: Vec<f64> = probs.column(j).iter().copied().collect();
            let l: Vec<bool> = rows.iter().map(|&i| y[(i, j)] > 0.5).collect();
            select_threshold(&s, &l).map(|(t, _)| t)
        })
        .collect())
}

/// Thresholds tuned on the plan's validation rows; species with a single
/// class there (or an empty validation set) fall back to the training rows.
pub fn tune_thresholds_for(
    model: &MtecModel,
    e: &DMatrix<f64>,
    y: &DMatrix<f64>,
    plan: &SplitPlan,
) -> Result<Vec<Option<f64>>> {
    let mut thr = if plan.valid_rows.is_empty() {
        vec![None; y.ncols()]
    } else {
        tune_thresholds(model, e, y, &plan.valid_rows)?
    };
    if thr.iter().any(Option::is_none) {
        let fallback = tune_thresholds(model, e, y, &plan.train_rows)?;
        for (t, f) in thr.iter_mut().zip(fallback) {
            if t.is_none() {
                *t = f;
            }
        }
    }
    Ok(thr)
}

/// Dietterich's 5x2cv paired t statistic from the per-fold metric
/// differences `diffs[replication][fold]`, with its two-sided p-value on 5
/// degrees of freedom. Zero variance with zero numerator gives `t = 0, p = 1`.
pub fn dietterich_5x2_t(diffs: &[[f64; 2]; 5]) -> (f64, f64) {
    let s2: f64 = diffs
        .iter()
        .map(|d| {
            let mean = 0.5 * (d[0] + d[1]);
            (d[0] - mean).powi(2) + (d[1] - mean).powi(2)
        })
        .sum();
    let num = diffs[0][0];
    if s2 == 0.0 {
        return if num == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(num), 0.0)
        };
    }
    let t = num / (s2 / 5.0).sqrt();
    let dist = statrs::distribution::StudentsT::new(0.0, 1.0, 5.0).expect("valid t distribution");
    let p = 2.0 * (1.0 - statrs::distribution::ContinuousCDF::cdf(&dist, t.abs()));
    (t, p.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub replication: usize,
    pub fold: usize,
    pub mean_auc: f64,
    pub mean_tss: f64,
    /// Species left out of this fold's averages (single-class held-out labels).
    pub excluded_species: Vec<String>,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfigSummary {
    pub name: String,
    pub config: MtecConfig,
    pub folds: Vec<FoldResult>,
    pub auc_mean: f64,
    pub auc_sd: f64,
    pub tss_mean: f64,
    pub tss_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub t: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub configs: Vec<CvConfigSummary>,
    pub comparisons: Vec<PairedTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvOptions {
    pub min_occur: usize,
    /// Share of each training half used for gradient steps; the rest drives
    /// early stopping and threshold tuning.
    pub inner_train_fraction: f64,
    pub seed: u64,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            min_occur: 5,
            inner_train_fraction: 0.8,
            seed: 0,
        }
    }
}

fn run_fold(
    d: &Dataset,
    preprocess: &PreprocessOptions,
    config: &MtecConfig,
    settings: &TrainSettings,
    opts: &CvOptions,
    fit_rows: &[usize],
    test_rows: &[usize],
    seed: u64,
) -> Result<(Vec<Option<f64>>, Vec<Option<f64>>, usize)> {
    let y_fit = d.community.select_rows(fit_rows);
    let tsize = ((fit_rows.len() as f64) * opts.inner_train_fraction).round() as usize;
    let inner = balanced_partition(&y_fit, opts.min_occur, tsize.clamp(1, fit_rows.len()), seed)?;
    let plan = SplitPlan {
        train_rows: inner.train_rows.iter().map(|&k| fit_rows[k]).collect(),
        valid_rows: inner.valid_rows.iter().map(|&k| fit_rows[k]).collect(),
        min_occur: opts.min_occur,
        seed,
        overflow: inner.overflow,
    };
    let pre = fit_preprocessor(d, preprocess, fit_rows)?;
    let (e, _) = pre.transform_matrix(&d.covariates)?;
    let fold_settings = TrainSettings {
        seed,
        ..settings.clone()
    };
    let out = fit_matrices(&e, &d.community, config, &fold_settings, &plan)?;
    let thresholds = tune_thresholds_for(&out.model, &e, &d.community, &plan)?;
    let probs = out
        .model
        .predict(&e.select_rows(test_rows), PredictMode::PriorMean)?;
    let mut aucs = Vec::with_capacity(d.n_species());
    let mut tsss = Vec::with_capacity(d.n_species());
    for j in 0..d.n_species() {
        let s: Vec<f64> = probs.column(j).iter().copied().collect();
        let l: Vec<bool> = test_rows
            .iter()
            .map(|&i| d.community[(i, j)] > 0.5)
            .collect();
        aucs.push(roc_auc(&s, &l));
        tsss.push(thresholds[j].and_then(|t| tss(&s, &l, t)));
    }
    Ok((aucs, tsss, out.log.epochs.len()))
}

/// 5 replications of 2-fold cross-validation. Every configuration sees the
/// same folds; each fold is drawn with [`balanced_partition`] at half size.
pub fn cross_validate_5x2(
    d: &Dataset,
    preprocess: &PreprocessOptions,
    configs: &[(String, MtecConfig)],
    settings: &TrainSettings,
    opts: &CvOptions,
) -> Result<CvReport> {
    if configs.is_empty() {
        return Err(Error::Config(
            "cross-validation needs at least one configuration".into(),
        ));
    }
    let n = d.n_sites();
    let plans: Vec<SplitPlan> = (0..5)
        .map(|r| {
            balanced_partition(
                &d.community,
                opts.min_occur,
                n / 2,
                opts.seed.wrapping_add(r as u64),
            )
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..5).flat_map(move |r| (0..2).map(move |f| (c, r, f))))
        .collect();
    let results: Vec<Result<_>> = jobs
        .par_iter()
        .map(|&(c, r, f)| {
            let plan = &plans[r];
            let (fit_rows, test_rows) = if f == 0 {
                (&plan.train_rows, &plan.valid_rows)
            } else {
                (&plan.valid_rows, &plan.train_rows)
            };
            let seed = opts
                .seed
                .wrapping_mul(31)
                .wrapping_add((r * 2 + f) as u64 + 100);
            run_fold(
                d,
                preprocess,
                &configs[c].1,
                settings,
                opts,
                fit_rows,
                test_rows,
                seed,
            )
        })
        .collect();

    let mut summaries = Vec::with_capacity(configs.len());
    let mut per_species_auc: Vec<Vec<Vec<f64>>> =
        vec![vec![Vec::new(); d.n_species()]; configs.len()];
    let mut per_species_tss: Vec<Vec<Vec<f64>>> =
        vec![vec![Vec::new(); d.n_species()]; configs.len()];
    let mut folds: Vec<Vec<FoldResult>> = vec![Vec::new(); configs.len()];
    for (&(c, r, f), res) in jobs.iter().zip(results) {
        let (aucs, tsss, epochs) = res?;
        let mut excluded = Vec::new();
        for j in 0..d.n_species() {
            match (aucs[j], tsss[j]) {
                (Some(a), Some(t)) => {
                    per_species_auc[c][j].push(a);
                    per_species_tss[c][j].push(t);
                }
                (Some(a), None) => {
                    per_species_auc[c][j].push(a);
                }
                _ => excluded.push(d.species_names[j].clone()),
            }
        }
        let defined_auc: Vec<f64> = aucs.iter().flatten().copied().collect();
        let defined_tss: Vec<f64> = tsss.iter().flatten().copied().collect();
        folds[c].push(FoldResult {
            replication: r,
            fold: f,
            mean_auc: crate::numeric::mean(&defined_auc),
            mean_tss: crate::numeric::mean(&defined_tss),
            excluded_species: excluded,
            epochs_run: epochs,
        });
    }
    for (c, (name, config)) in configs.iter().enumerate() {
        let auc_means: Vec<f64> = per_species_auc[c]
            .iter()
            .filter(|v| !v.is_empty())
            .map(|v| crate::numeric::mean(v))
            .collect();
        let tss_means: Vec<f64> = per_species_tss[c]
            .iter()
            .filter(|v| !v.is_empty())
            .map(|v| crate::numeric::mean(v))
            .collect();
        summaries.push(CvConfigSummary {
            name: name.clone(),
            config: config.clone(),
            folds: folds[c].clone(),
            auc_mean: crate::numeric::mean(&auc_means),
            auc_sd: crate::numeric::sample_sd(&auc_means),
            tss_mean: crate::numeric::mean(&tss_means),
            tss_sd: crate::numeric::sample_sd(&tss_means),
        });
    }

    let mut comparisons = Vec::new();
    for a in 0..summaries.len() {
        for b in (a + 1)..summaries.len() {
            for metric in ["auc", "tss"] {
                let mut diffs = [[0.0; 2]; 5];
                for (fa, fb) in summaries[a].folds.iter().zip(&summaries[b].folds) {
                    let (va, vb) = if metric == "auc" {
                        (fa.mean_auc, fb.mean_auc)
                    } else {
                        (fa.mean_tss, fb.mean_tss)
                    };
                    diffs[fa.replication][fa.fold] = va - vb;
                }
                let (t, p) = dietterich_5x2_t(&diffs);
                comparisons.push(PairedTest {
                    a: summaries[a].name.clone(),
                    b: summaries[b].name.clone(),
                    metric: metric.into(),
                    t,
                    p_value: p,
                });
            }
        }
    }
    Ok(CvReport {
        configs: summaries,
        comparisons,
    })
}
