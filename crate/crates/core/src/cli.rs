//! The `mtec` command line: fit, predict, evaluate, compare, explain,
//! cluster and network.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 training
//! aborted, 4 failure inside explain, cluster or network.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::assoc::{
    ebic, graphical_lasso, network_from, posterior_stats, residual_covariance, select_lambda,
    NetworkSummary,
};
use crate::baseline::{fit_all, load_external_scores};
use crate::config::{ModelFile, RunConfig, MODEL_FILE_VERSION};
use crate::data::{load_community, load_coordinates, load_covariates, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_species, select_threshold, wilcoxon_rank_sum, MetricReport, RankSumResult,
    ThresholdSource,
};
use crate::explain::{
    background_rows, export_local_attribution, read_attribution, shap_explain,
    write_attribution_table, write_global_importance, write_group_importance, write_local_records,
    ShapMode,
};
use crate::groups::{build_response_groups, write_labels};
use crate::mtec::{LossParts, MtecModel, PredictMode};
use crate::nn::TensorDoc;
use crate::train::{
    balanced_partition, cross_validate_5x2, fit, tune_thresholds_for, CvReport, TrainingLog,
};

#[derive(Debug, Parser)]
#[command(
    name = "mtec",
    version,
    about = "Joint species distribution modelling with MTEC"
)]
pub struct Cli {
    /// Seed for every random step. Defaults to the seed stored in the run
    /// configuration or model file (0 for `cluster`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Check inputs and configuration, then stop without computing or writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON run configuration.
    #[command(after_long_help = defaults_help())]
    Fit(FitArgs),
    /// Occurrence probabilities for new sites.
    Predict(PredictArgs),
    /// Score a model on evaluation data.
    Evaluate(EvaluateArgs),
    /// Score a model against stacked GLMs or external scores.
    Compare(CompareArgs),
    /// Kernel SHAP attributions of every species' predictions.
    Explain(ExplainArgs),
    /// Response groups from saved attributions.
    Cluster(ClusterArgs),
    /// Residual association network from the latent factors.
    Network(NetworkArgs),
    /// Print a run configuration with every default filled in.
    Defaults,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Run configuration (JSON). Relative paths inside it are taken from its directory.
    #[arg(long)]
    pub config: PathBuf,
    /// Report 5x2 cross-validation of the configured model.
    #[arg(long = "cv5x2")]
    pub cv5x2: bool,
    /// Regularization strengths (applied to both lasso and ridge) compared by
    /// 5x2 cross-validation; the best mean ROC-AUC is used for the final fit.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub reg_grid: Option<Vec<f64>>,
    /// Output directory, overriding `output_dir` from the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Covariate CSV with the model's schema columns.
    #[arg(long)]
    pub covariates: PathBuf,
    /// Average over N prior draws of the latent factors instead of using the prior mean.
    #[arg(long, value_name = "N")]
    pub sample_prior: Option<usize>,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalData {
    /// Evaluation community CSV (`site_id` then 0/1 per species).
    #[arg(long)]
    pub eval: PathBuf,
    /// Covariates for the evaluation sites; the training covariates when absent.
    #[arg(long)]
    pub eval_covariates: Option<PathBuf>,
    /// Treat 1 as a recorded occurrence and 0 as unknown; only recall is reported.
    #[arg(long)]
    pub presence_only: bool,
    /// Output directory; `<model dir>/compare` when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: EvalData,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Fit stacked GLMs on the model's training sites.
    #[arg(
        long,
        conflicts_with = "external_scores",
        required_unless_present = "external_scores"
    )]
    pub glm: bool,
    /// Long-format `site_id,species,score` table from another model.
    #[arg(long)]
    pub external_scores: Option<PathBuf>,
    /// Label of the external model in reports.
    #[arg(long, default_value = "external")]
    pub external_name: String,
    #[command(flatten)]
    pub data: EvalData,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Enumerate every coalition.
    #[arg(long, conflicts_with = "samples")]
    pub exact: bool,
    /// Sampled Kernel SHAP with N coalitions per site.
    #[arg(long, value_name = "N")]
    pub samples: Option<usize>,
    /// Background size K drawn from the training sites.
    #[arg(long, value_name = "K")]
    pub background: Option<usize>,
    /// Explain at most this many sites.
    #[arg(long)]
    pub sites: Option<usize>,
    /// Sites to explain; the training covariates when absent.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Output directory; `<model dir>/explain` when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Directory written by `explain`.
    #[arg(long)]
    pub attribution: PathBuf,
    /// Feature group whose SHAP responses are clustered.
    #[arg(long)]
    pub group: String,
    #[arg(long, default_value_t = 10)]
    pub kmax: usize,
    /// Average the GAP and elbow choices when they disagree.
    #[arg(long)]
    pub consensus: bool,
    /// Reference datasets for the GAP statistic.
    #[arg(long, default_value_t = 50)]
    pub references: usize,
    /// Scale response columns to unit variance first.
    #[arg(long)]
    pub standardize: bool,
    /// Output directory; the attribution directory when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NetworkArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Graphical lasso penalty. When neither this nor `--lambda-grid` is given,
    /// the run configuration's `network.lambda_grid` (EBIC) or `network.lambda` is used.
    #[arg(long, conflicts_with = "lambda_grid")]
    pub lambda: Option<f64>,
    /// Candidate penalties, chosen by extended BIC.
    #[arg(long, value_delimiter = ',', num_args = 1.., requires = "ebic")]
    pub lambda_grid: Option<Vec<f64>>,
    /// Select the penalty from `--lambda-grid` by extended BIC.
    #[arg(long, requires = "lambda_grid")]
    pub ebic: bool,
    /// Output directory; `<model dir>/network` when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn defaults_help() -> String {
    let text = serde_json::to_string_pretty(&RunConfig::template()).expect("template serializes");
    format!("Run configuration defaults (every key except `data` may be omitted):\n{text}")
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::TrainingAborted(_) | Error::NonFinite(_) => 3,
        Error::Downstream { .. } => 4,
        _ => 2,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, cli.seed, cli.dry_run),
        Command::Predict(a) => cmd_predict(a, cli.seed, cli.dry_run),
        Command::Evaluate(a) => cmd_compare(&a.model, None, &a.data, cli.dry_run),
        Command::Compare(a) => {
            let other = match &a.external_scores {
                Some(p) => Baseline::External(a.external_name.clone(), p.clone()),
                None => Baseline::Glm,
            };
            cmd_compare(&a.model, Some(other), &a.data, cli.dry_run)
        }
        Command::Explain(a) => cmd_explain(a, cli.seed, cli.dry_run),
        Command::Cluster(a) => cmd_cluster(a, cli.seed, cli.dry_run),
        Command::Network(a) => cmd_network(a, cli.dry_run),
        Command::Defaults => {
            println!(
                "{}",
                serde_json::to_string_pretty(&RunConfig::template())
                    .map_err(|e| Error::json("defaults", e))?
            );
            Ok(())
        }
    }
}

fn downstream(module: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Downstream { .. } => e,
        other => Error::Downstream {
            module,
            message: other.to_string(),
        },
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_csv_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn file_stem_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn model_dir(model: &Path) -> PathBuf {
    model.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// `site_id` then one probability column per species.
pub fn write_predictions<W: Write>(
    out: W,
    site_ids: &[String],
    species: &[String],
    probs: &DMatrix<f64>,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["site_id".to_string()];
    header.extend(species.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in site_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(probs.row(i).iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub strength: f64,
    pub auc_mean: f64,
    pub auc_sd: f64,
    pub tss_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub n_sites: usize,
    pub n_species: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub split_overflow: bool,
    pub feature_names: Vec<String>,
    pub vif_fallback: bool,
    pub lambda_lasso: f64,
    pub lambda_ridge: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_valid: LossParts,
    /// Species present (or absent) at every training site.
    pub degenerate_species: Vec<String>,
    /// Species without a tuned threshold (single-class tuning rows).
    pub untuned_species: Vec<String>,
    pub validation: Option<MetricReport>,
    pub reg_grid: Option<Vec<GridPoint>>,
    pub cross_validation: Option<CvReport>,
}

fn cmd_fit(args: &FitArgs, seed: Option<u64>, dry_run: bool) -> Result<()> {
    let mut run = RunConfig::load(&args.config)?;
    if let Some(s) = seed {
        run.seed = s;
    }
    if let Some(out) = &args.out {
        run.output_dir = out.clone();
    }
    if let Some(grid) = &args.reg_grid {
        if grid.is_empty() || grid.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "--reg-grid values must be finite and non-negative".into(),
            ));
        }
    }
    let d = run.data.load()?;
    let n = d.n_sites();
    let tsize = ((n as f64) * run.split.train_fraction)
        .round()
        .clamp(1.0, n as f64) as usize;
    if dry_run {
        eprintln!(
            "configuration ok: {n} sites, {} species, {} covariates, {tsize} training sites",
            d.n_species(),
            d.schema.len()
        );
        return Ok(());
    }
    let settings = run.train_settings();
    let mut grid_points = None;
    let mut cv_report = None;
    if let Some(grid) = &args.reg_grid {
        let configs: Vec<_> = grid
            .iter()
            .map(|&l| {
                let mut c = run.model.clone();
                c.lambda_lasso = l;
                c.lambda_ridge = l;
                (format!("reg={l}"), c)
            })
            .collect();
        eprintln!(
            "cross-validating {} regularization strengths",
            configs.len()
        );
        let report =
            cross_validate_5x2(&d, &run.preprocess, &configs, &settings, &run.cv_options())?;
        let best = report.configs.iter().enumerate().fold(0, |b, (k, c)| {
            if c.auc_mean > report.configs[b].auc_mean {
                k
            } else {
                b
            }
        });
        run.model = report.configs[best].config.clone();
        grid_points = Some(
            grid.iter()
                .zip(&report.configs)
                .map(|(&strength, c)| GridPoint {
                    strength,
                    auc_mean: c.auc_mean,
                    auc_sd: c.auc_sd,
                    tss_mean: c.tss_mean,
                })
                .collect(),
        );
        cv_report = Some(report);
    } else if args.cv5x2 {
        eprintln!("running 5x2 cross-validation");
        cv_report = Some(cross_validate_5x2(
            &d,
            &run.preprocess,
            &[("mtec".into(), run.model.clone())],
            &settings,
            &run.cv_options(),
        )?);
    }

    let plan = balanced_partition(&d.community, run.split.min_occur, tsize, run.seed)?;
    eprintln!(
        "training on {} sites, validating on {}",
        plan.train_rows.len(),
        plan.valid_rows.len()
    );
    let fitted = fit(&d, &run.preprocess, &run.model, &settings, &plan);
    ensure_dir(&run.output_dir)?;
    if let Err(err @ Error::TrainingAborted(_)) = fitted {
        write_csv_file(&run.output_dir.join("training_log.csv"), |w| {
            TrainingLog::default().write_csv(w)
        })?;
        return Err(err);
    }
    let (pre, outcome) = fitted?;
    write_csv_file(&run.output_dir.join("training_log.csv"), |w| {
        outcome.log.write_csv(w)
    })?;
    if let Some(reason) = &outcome.abort {
        return Err(Error::TrainingAborted(reason.clone()));
    }
    let (e, _) = pre.transform_matrix(&d.covariates)?;
    let thresholds = tune_thresholds_for(&outcome.model, &e, &d.community, &plan)?;
    let fitted = outcome.model.predict(&e, PredictMode::PriorMean)?;
    let validation = (!plan.valid_rows.is_empty()).then(|| {
        evaluate_species(
            "mtec",
            &d.species_names,
            &fitted.select_rows(&plan.valid_rows),
            &d.community.select_rows(&plan.valid_rows),
            ThresholdSource::Given(&thresholds),
            false,
        )
    });
    let pick = |flags: &[bool]| {
        d.species_names
            .iter()
            .zip(flags)
            .filter(|(_, f)| **f)
            .map(|(s, _)| s.clone())
            .collect::<Vec<_>>()
    };
    let report = FitReport {
        n_sites: n,
        n_species: d.n_species(),
        n_train: plan.train_rows.len(),
        n_valid: plan.valid_rows.len(),
        split_overflow: plan.overflow,
        feature_names: pre.feature_names(),
        vif_fallback: pre.vif_fallback,
        lambda_lasso: run.model.lambda_lasso,
        lambda_ridge: run.model.lambda_ridge,
        epochs_run: outcome.log.epochs.len(),
        best_epoch: outcome.best_epoch,
        best_valid: outcome.best_valid,
        degenerate_species: pick(&outcome.class_weights.degenerate),
        untuned_species: pick(&thresholds.iter().map(Option::is_none).collect::<Vec<_>>()),
        validation,
        reg_grid: grid_points,
        cross_validation: cv_report,
    };
    let file = ModelFile {
        version: MODEL_FILE_VERSION,
        input_width: outcome.model.input_width(),
        tensors: TensorDoc::export(&outcome.model),
        run: run.clone(),
        species: d.species_names.clone(),
        site_ids: d.site_ids.clone(),
        schema: d.schema.clone(),
        preprocessor: pre,
        class_weights: outcome.class_weights.clone(),
        thresholds,
        split: plan,
        best_epoch: outcome.best_epoch,
    };
    file.save(&run.output_dir.join("model.json"))?;
    write_json_file(&run.output_dir.join("report.json"), &report)?;
    write_csv_file(&run.output_dir.join("fitted.csv"), |w| {
        write_predictions(w, &d.site_ids, &d.species_names, &fitted)
    })?;
    eprintln!(
        "best epoch {} of {}; artifacts in {}",
        report.best_epoch,
        report.epochs_run,
        run.output_dir.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelFile, MtecModel)> {
    let file = ModelFile::load(path)?;
    let model = file.model()?;
    Ok((file, model))
}

fn transform(file: &ModelFile, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (e, unseen) = file.preprocessor.transform_matrix(raw)?;
    if unseen > 0 {
        eprintln!("warning: {unseen} rows carry categorical levels unseen in training");
    }
    Ok(e)
}

fn cmd_predict(args: &PredictArgs, seed: Option<u64>, dry_run: bool) -> Result<()> {
    let (file, model) = load_model(&args.model)?;
    let (ids, raw) = load_covariates(&args.covariates, &file.schema, false)?;
    let e = transform(&file, &raw)?;
    if dry_run {
        eprintln!(
            "inputs ok: {} sites, {} species",
            ids.len(),
            file.species.len()
        );
        return Ok(());
    }
    let mode = match args.sample_prior {
        Some(n_draws) => PredictMode::PriorSample {
            seed: seed.unwrap_or(file.run.seed),
            n_draws,
        },
        None => PredictMode::PriorMean,
    };
    let probs = model.predict(&e, mode)?;
    match &args.out {
        Some(path) => write_csv_file(path, |w| write_predictions(w, &ids, &file.species, &probs)),
        None => {
            write_predictions(std::io::stdout().lock(), &ids, &file.species, &probs).map_err(|e| {
                Error::Csv {
                    path: "<stdout>".into(),
                    message: e.to_string(),
                }
            })
        }
    }
}

enum Baseline {
    Glm,
    External(String, PathBuf),
}

#[derive(Debug, Clone, Serialize)]
pub struct RankSumRow {
    pub metric: String,
    pub model_a: String,
    pub model_b: String,
    #[serde(flatten)]
    pub test: RankSumResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub species: Vec<String>,
    /// Evaluation species the model was not trained on.
    pub unmatched_species: Vec<String>,
    pub n_sites: usize,
    pub presence_only: bool,
    pub models: Vec<String>,
    pub wilcoxon: Vec<RankSumRow>,
}

/// Blanks the metrics of species whose score column holds missing values.
fn blank_missing(report: &mut MetricReport, scores: &DMatrix<f64>) {
    for (j, row) in report.per_species.iter_mut().enumerate() {
        if scores.column(j).iter().any(|v| v.is_nan()) {
            row.threshold = None;
            row.tss = None;
            row.auc = None;
            row.recall = None;
        }
    }
}

fn cmd_compare(
    model_path: &Path,
    baseline: Option<Baseline>,
    data: &EvalData,
    dry_run: bool,
) -> Result<()> {
    let (file, model) = load_model(model_path)?;
    let (eval_ids, eval_species, labels_all) = load_community(&data.eval)?;
    let overlap: Vec<(usize, usize)> = eval_species
        .iter()
        .enumerate()
        .filter_map(|(k, s)| file.species.iter().position(|m| m == s).map(|j| (j, k)))
        .collect();
    if overlap.is_empty() {
        return Err(Error::Validation(format!(
            "{} shares no species with the model",
            data.eval.display()
        )));
    }
    let species: Vec<String> = overlap
        .iter()
        .map(|&(j, _)| file.species[j].clone())
        .collect();
    let unmatched: Vec<String> = eval_species
        .iter()
        .filter(|s| !species.contains(s))
        .cloned()
        .collect();
    let model_cols: Vec<usize> = overlap.iter().map(|&(j, _)| j).collect();
    let labels = labels_all.select_columns(overlap.iter().map(|(_, k)| k));

    let cov_path = data
        .eval_covariates
        .clone()
        .unwrap_or_else(|| file.run.data.covariates.clone());
    let (cov_ids, raw) = load_covariates(&cov_path, &file.schema, false)?;
    let index: std::collections::HashMap<&str, usize> = cov_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let rows = eval_ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Alignment(id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let e = transform(&file, &raw.select_rows(&rows))?;
    if let Some(Baseline::External(_, path)) = &baseline {
        load_external_scores(path, &eval_ids, &species)?;
    }
    if dry_run {
        eprintln!(
            "inputs ok: {} evaluation sites, {} shared species",
            eval_ids.len(),
            species.len()
        );
        return Ok(());
    }

    let mtec_scores = model
        .predict(&e, PredictMode::PriorMean)?
        .select_columns(&model_cols);
    let mtec_thr: Vec<Option<f64>> = model_cols.iter().map(|&j| file.thresholds[j]).collect();
    let mut reports = vec![evaluate_species(
        "mtec",
        &species,
        &mtec_scores,
        &labels,
        ThresholdSource::Given(&mtec_thr),
        data.presence_only,
    )];

    match &baseline {
        None => {}
        Some(Baseline::Glm) => {
            let d: Dataset = file.run.data.load()?;
            if d.species_names != file.species || d.site_ids != file.site_ids {
                return Err(Error::Validation(
                    "training data changed since the model was fitted".into(),
                ));
            }
            let e_all = transform(&file, &d.covariates)?;
            let y = d.community.select_columns(&model_cols);
            let train = &file.split.train_rows;
            let cfg = &file.run.model;
            eprintln!("fitting {} GLMs", species.len());
            let glms = fit_all(
                &species,
                &e_all.select_rows(train),
                &y.select_rows(train),
                cfg.link,
                cfg.lambda_lasso,
                cfg.lambda_ridge,
                &file.run.glm,
            )?;
            let valid = &file.split.valid_rows;
            let mut scores = DMatrix::from_element(e.nrows(), species.len(), f64::NAN);
            let mut thr = vec![None; species.len()];
            for (j, g) in glms.iter().enumerate() {
                let Ok(g) = g else {
                    eprintln!(
                        "warning: no GLM for `{}`: {}",
                        species[j],
                        g.as_ref().unwrap_err()
                    );
                    continue;
                };
                let tune = |rows: &[usize]| -> Result<Option<f64>> {
                    let s = g.predict(&e_all.select_rows(rows))?;
                    let l: Vec<bool> = rows.iter().map(|&i| y[(i, j)] > 0.5).collect();
                    Ok(select_threshold(&s, &l).map(|(t, _)| t))
                };
                thr[j] = match tune(valid)? {
                    Some(t) => Some(t),
                    None => tune(train)?,
                };
                for (i, p) in g.predict(&e)?.into_iter().enumerate() {
                    scores[(i, j)] = p;
                }
            }
            let mut r = evaluate_species(
                "glm",
                &species,
                &scores,
                &labels,
                ThresholdSource::Given(&thr),
                data.presence_only,
            );
            blank_missing(&mut r, &scores);
            reports.push(r);
        }
        Some(Baseline::External(name, path)) => {
            let scores = load_external_scores(path, &eval_ids, &species)?;
            let fixed = vec![Some(0.5); species.len()];
            let source = if data.presence_only {
                ThresholdSource::Given(&fixed)
            } else {
                ThresholdSource::MaxTss
            };
            let mut r = evaluate_species(
                name,
                &species,
                &scores.map(|v| if v.is_nan() { 0.0 } else { v }),
                &labels,
                source,
                data.presence_only,
            );
            blank_missing(&mut r, &scores);
            reports.push(r);
        }
    }

    let mut wilcoxon = Vec::new();
    if reports.len() == 2 {
        type Getter = fn(&crate::eval::SpeciesMetrics) -> Option<f64>;
        let metrics: [(&str, Getter); 3] = [
            ("tss", |s| s.tss),
            ("auc", |s| s.auc),
            ("recall", |s| s.recall),
        ];
        for (name, get) in metrics {
            let a: Vec<f64> = reports[0].per_species.iter().filter_map(get).collect();
            let b: Vec<f64> = reports[1].per_species.iter().filter_map(get).collect();
            if a.is_empty() || b.is_empty() {
                continue;
            }
            wilcoxon.push(RankSumRow {
                metric: name.into(),
                model_a: reports[0].model.clone(),
                model_b: reports[1].model.clone(),
                test: wilcoxon_rank_sum(&a, &b),
            });
        }
    }

    let out = data
        .out
        .clone()
        .unwrap_or_else(|| model_dir(model_path).join("compare"));
    ensure_dir(&out)?;
    write_csv_file(&out.join("species_metrics.csv"), |w| {
        crate::eval::write_species_table(w, &reports)
    })?;
    write_csv_file(&out.join("summary.csv"), |w| {
        crate::eval::write_summary_table(w, &reports)
    })?;
    write_csv_file(&out.join("wilcoxon.csv"), |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record([
            "metric", "model_a", "model_b", "u", "z", "p_value", "reliable",
        ])?;
        for r in &wilcoxon {
            c.write_record([
                r.metric.clone(),
                r.model_a.clone(),
                r.model_b.clone(),
                r.test.u.to_string(),
                r.test.z.to_string(),
                r.test.p_value.to_string(),
                r.test.reliable.to_string(),
            ])?;
        }
        c.flush()?;
        Ok(())
    })?;
    let report = ComparisonReport {
        species,
        unmatched_species: unmatched,
        n_sites: eval_ids.len(),
        presence_only: data.presence_only,
        models: reports.iter().map(|r| r.model.clone()).collect(),
        wilcoxon,
    };
    write_json_file(&out.join("comparison.json"), &report)?;
    eprintln!("comparison written to {}", out.display());
    Ok(())
}

fn cmd_explain(args: &ExplainArgs, seed: Option<u64>, dry_run: bool) -> Result<()> {
    let (file, model) = load_model(&args.model)?;
    let seed = seed.unwrap_or(file.run.seed);
    let (train_ids, train_raw) = load_covariates(&file.run.data.covariates, &file.schema, true)?;
    if train_ids != file.site_ids {
        return Err(Error::Validation(
            "training covariates changed since the model was fitted".into(),
        ));
    }
    let (ids, raw) = match &args.covariates {
        Some(p) => load_covariates(p, &file.schema, false)?,
        None => (train_ids, train_raw.clone()),
    };
    let mode = match (args.exact, args.samples) {
        (true, _) => ShapMode::Exact,
        (false, Some(n_samples)) => ShapMode::Sampled { n_samples },
        (false, None) => file.run.shap.mode,
    };
    let k = args.background.unwrap_or(file.run.shap.background);
    if k == 0 {
        return Err(Error::Config("--background must be at least 1".into()));
    }
    let coordinates = match &file.run.data.coordinates {
        Some(p) => Some(load_coordinates(p)?),
        None => None,
    };
    if dry_run {
        eprintln!(
            "inputs ok: {} sites, {} features, background {k}",
            ids.len(),
            file.schema.len()
        );
        return Ok(());
    }
    let train = &file.split.train_rows;
    let bg_rows: Vec<usize> = background_rows(train.len(), k, seed)
        .into_iter()
        .map(|r| train[r])
        .collect();
    let background = train_raw.select_rows(&bg_rows);
    let site_rows = match args.sites.or(file.run.shap.max_sites) {
        Some(m) => background_rows(ids.len(), m, seed.wrapping_add(1)),
        None => (0..ids.len()).collect(),
    };
    let sites = raw.select_rows(&site_rows);
    let site_ids: Vec<String> = site_rows.iter().map(|&r| ids[r].clone()).collect();
    let names = file.schema.names();
    let groups: Vec<String> = file
        .schema
        .columns
        .iter()
        .map(|c| c.group.clone().unwrap_or_else(|| c.name.clone()))
        .collect();
    let f = |rows: &DMatrix<f64>| {
        let (e, _) = file.preprocessor.transform_matrix(rows)?;
        model.predict(&e, PredictMode::PriorMean)
    };
    eprintln!(
        "explaining {} sites against {} background rows",
        site_ids.len(),
        background.nrows()
    );
    let attr = shap_explain(
        &f,
        &sites,
        &site_ids,
        &background,
        &names,
        &groups,
        &file.species,
        mode,
        seed,
    )
    .map_err(downstream("explain"))?;

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| model_dir(&args.model).join("explain"));
    ensure_dir(&out)?;
    write_csv_file(&out.join("attribution.csv"), |w| {
        write_attribution_table(w, &attr)
    })?;
    write_json_file(&out.join("attribution.json"), &attr.sidecar())?;
    write_csv_file(&out.join("global_importance.csv"), |w| {
        write_global_importance(w, &attr)
    })?;
    let mut buf = Vec::new();
    write_group_importance(&mut buf, &attr).map_err(downstream("explain"))?;
    fs::write(out.join("group_importance.csv"), buf)
        .map_err(|e| Error::io(out.join("group_importance.csv"), e))?;
    if let Some(coords) = coordinates {
        let local = out.join("local");
        ensure_dir(&local)?;
        for sp in &attr.species {
            let (records, skipped) =
                export_local_attribution(&attr, sp, &coords).map_err(downstream("explain"))?;
            if skipped > 0 {
                eprintln!("warning: {skipped} sites lack coordinates");
            }
            write_csv_file(&local.join(format!("{}.csv", file_stem_safe(sp))), |w| {
                write_local_records(w, &records)
            })?;
        }
    }
    eprintln!(
        "attributions written to {} (max efficiency gap {:.2e})",
        out.display(),
        attr.max_efficiency_gap()
    );
    Ok(())
}

fn cmd_cluster(args: &ClusterArgs, seed: Option<u64>, dry_run: bool) -> Result<()> {
    let attr = read_attribution(&args.attribution)?;
    if !attr.feature_groups.contains(&args.group) {
        let mut known: Vec<&String> = attr.feature_groups.iter().collect();
        known.dedup();
        return Err(Error::Validation(format!(
            "unknown feature group `{}`; known groups: {known:?}",
            args.group
        )));
    }
    if dry_run {
        eprintln!(
            "inputs ok: {} species, group `{}`",
            attr.species.len(),
            args.group
        );
        return Ok(());
    }
    let opts = crate::groups::GroupOptions {
        k_max: args.kmax,
        references: args.references,
        seed: seed.unwrap_or(0),
        consensus: args.consensus,
        standardize: args.standardize,
    };
    let result = build_response_groups(&attr, &args.group, &opts).map_err(downstream("cluster"))?;
    let out = args.out.clone().unwrap_or_else(|| args.attribution.clone());
    ensure_dir(&out)?;
    let stem = file_stem_safe(&args.group);
    write_json_file(&out.join(format!("clusters_{stem}.json")), &result)?;
    write_csv_file(&out.join(format!("clusters_{stem}.csv")), |w| {
        write_labels(w, &result)
    })?;
    eprintln!(
        "{} response groups for `{}` (gap {}, elbow {:?})",
        result.k, args.group, result.gap_k, result.elbow_k
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct PenaltyScore {
    pub lambda: f64,
    pub ebic: f64,
    pub edges: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct NetworkReport {
    #[serde(flatten)]
    pub summary: NetworkSummary,
    pub n_sites: usize,
    pub selection: Option<Vec<PenaltyScore>>,
}

fn cmd_network(args: &NetworkArgs, dry_run: bool) -> Result<()> {
    let (file, model) = load_model(&args.model)?;
    let d = file.run.data.load()?;
    if d.species_names != file.species {
        return Err(Error::Validation(
            "training species changed since the model was fitted".into(),
        ));
    }
    let opts = &file.run.network.glasso;
    let grid = args.lambda_grid.clone().or_else(|| {
        args.lambda
            .is_none()
            .then(|| file.run.network.lambda_grid.clone())
            .flatten()
    });
    if let Some(g) = &grid {
        if g.is_empty() || g.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(
                "--lambda-grid values must be finite and non-negative".into(),
            ));
        }
    }
    let lambda = args.lambda.unwrap_or(file.run.network.lambda);
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(
            "--lambda must be finite and non-negative".into(),
        ));
    }
    if dry_run {
        eprintln!(
            "inputs ok: {} sites, {} species",
            d.n_sites(),
            d.n_species()
        );
        return Ok(());
    }
    let stage = downstream("network");
    let stats = posterior_stats(&model, &d.community).map_err(&stage)?;
    let sigma_r = residual_covariance(&stats.sigma_hat, &model.loadings).map_err(&stage)?;
    let n = d.n_sites();
    let (network, selection) = match &grid {
        Some(g) => {
            let mut scores = Vec::with_capacity(g.len());
            for &l in g {
                let fit = graphical_lasso(&sigma_r, l, opts.max_iter, opts.tol).map_err(&stage)?;
                let edges = crate::assoc::partial_correlations(&fit.omega)
                    .map_err(&stage)?
                    .edges
                    .len();
                scores.push(PenaltyScore {
                    lambda: l,
                    ebic: ebic(&sigma_r, &fit.omega, n, opts.ebic_gamma),
                    edges,
                });
            }
            let (chosen, fit) = select_lambda(&sigma_r, g, n, opts).map_err(&stage)?;
            (
                network_from(&file.species, chosen, sigma_r, fit).map_err(&stage)?,
                Some(scores),
            )
        }
        None => {
            let fit = graphical_lasso(&sigma_r, lambda, opts.max_iter, opts.tol).map_err(&stage)?;
            (
                network_from(&file.species, lambda, sigma_r, fit).map_err(&stage)?,
                None,
            )
        }
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| model_dir(&args.model).join("network"));
    ensure_dir(&out)?;
    write_csv_file(&out.join("network_edges.csv"), |w| network.write_edges(w))?;
    let report = NetworkReport {
        summary: network.summary(),
        n_sites: n,
        selection,
    };
    write_json_file(&out.join("network.json"), &report)?;
    eprintln!(
        "{} edges at lambda {} (density {:.4}, {} components)",
        report.summary.n_edges,
        report.summary.lambda,
        report.summary.density,
        report.summary.components
    );
    Ok(())
}
