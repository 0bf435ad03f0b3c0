//! Single-species GLMs on the preprocessed covariates, fitted independently
//! and stacked into a community prediction.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Preprocessor};
use crate::error::{Error, Result};
use crate::mtec::PROB_CLAMP;
use crate::nn::{adam_step, AdamConfig, AdamState, Parameterized, TensorMut, TensorView};
use crate::numeric::Link;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmModel {
    pub species: String,
    pub link: Link,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub lambda_lasso: f64,
    pub lambda_ridge: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlmSettings {
    pub max_iter: usize,
    /// Stop once the largest (sub)gradient component falls below this.
    pub tolerance: f64,
    pub adam: AdamConfig,
}

impl Default for GlmSettings {
    fn default() -> Self {
        GlmSettings {
            max_iter: 50_000,
            tolerance: 1e-6,
            adam: AdamConfig {
                learning_rate: 0.01,
                ..AdamConfig::default()
            },
        }
    }
}

/// Why a species has no GLM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NotFittable {
    NoPresences,
    NoAbsences,
}

impl std::fmt::Display for NotFittable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NotFittable::NoPresences => write!(f, "no presences in the training rows"),
            NotFittable::NoAbsences => write!(f, "no absences in the training rows"),
        }
    }
}

struct GlmParams {
    beta: Vec<f64>,
    intercept: [f64; 1],
}

impl Parameterized for GlmParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            TensorView {
                name: "coefficients".into(),
                rows: self.beta.len(),
                cols: 1,
                data: &self.beta,
            },
            TensorView {
                name: "intercept".into(),
                rows: 1,
                cols: 1,
                data: &self.intercept,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let rows = self.beta.len();
        vec![
            TensorMut {
                name: "coefficients".into(),
                rows,
                cols: 1,
                data: &mut self.beta,
            },
            TensorMut {
                name: "intercept".into(),
                rows: 1,
                cols: 1,
                data: &mut self.intercept,
            },
        ]
    }
}

fn objective(
    e: &DMatrix<f64>,
    y: &[f64],
    link: Link,
    p: &GlmParams,
    l1: f64,
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let beta = DVector::from_column_slice(&p.beta);
    let eta = e * &beta;
    let mut nll = 0.0;
    let mut d_eta = vec![0.0; y.len()];
    for i in 0..y.len() {
        let z = eta[i] + p.intercept[0];
        let raw = link.inverse(z);
        let t = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        nll -= y[i] * t.ln() + (1.0 - y[i]) * (1.0 - t).ln();
        if raw == t {
            d_eta[i] = (t - y[i]) / (t * (1.0 - t)) * link.inverse_derivative(z);
        }
    }
    let pen: f64 = p.beta.iter().map(|b| l1 * b.abs() + l2 * b * b).sum();
    let d = DVector::from_vec(d_eta.clone());
    let g_beta = e.tr_mul(&d);
    let grad: Vec<f64> = g_beta
        .iter()
        .zip(&p.beta)
        .map(|(g, b)| g + l1 * if *b == 0.0 { 0.0 } else { b.signum() } + 2.0 * l2 * b)
        .collect();
    let g_int: f64 = d_eta.iter().sum();
    (nll + pen, grad, g_int)
}

/// Largest component of the minimum-norm subgradient, per site. A zero
/// coefficient whose smooth gradient lies inside `[-l1, l1]` is stationary.
fn stationarity(e: &DMatrix<f64>, y: &[f64], link: Link, p: &GlmParams, l1: f64, l2: f64) -> f64 {
    let (_, grad, g_int) = objective(e, y, link, p, l1, l2);
    let mut worst = g_int.abs();
    for (g, b) in grad.iter().zip(&p.beta) {
        let v = if *b == 0.0 {
            (g.abs() - l1).max(0.0)
        } else {
            g.abs()
        };
        worst = worst.max(v);
    }
    worst / y.len().max(1) as f64
}

/// Penalized maximum likelihood for one species on preprocessed inputs by
/// full-batch Adam. The learning rate halves whenever the objective rises.
pub fn fit_glm_matrix(
    species: &str,
    e: &DMatrix<f64>,
    y: &[f64],
    link: Link,
    lambda_lasso: f64,
    lambda_ridge: f64,
    settings: &GlmSettings,
) -> Result<std::result::Result<GlmModel, NotFittable>> {
    if e.nrows() != y.len() {
        return Err(Error::shape("glm rows", e.nrows(), y.len()));
    }
    let pos = y.iter().filter(|v| **v > 0.5).count();
    if pos == 0 {
        return Ok(Err(NotFittable::NoPresences));
    }
    if pos == y.len() {
        return Ok(Err(NotFittable::NoAbsences));
    }
    let prev = pos as f64 / y.len() as f64;
    let mut params = GlmParams {
        beta: vec![0.0; e.ncols()],
        intercept: [link.apply(prev)],
    };
    let mut state = AdamState::new(settings.adam, &params);
    let (mut last, _, _) = objective(e, y, link, &params, lambda_lasso, lambda_ridge);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=settings.max_iter {
        iterations = it;
        let (_, grad, g_int) = objective(e, y, link, &params, lambda_lasso, lambda_ridge);
        adam_step(&mut params, &[grad, vec![g_int]], &mut state)?;
        if lambda_lasso > 0.0 {
            // snap coefficients that crossed zero
            for b in &mut params.beta {
                if b.abs() < 1e-12 {
                    *b = 0.0;
                }
            }
        }
        let (now, _, _) = objective(e, y, link, &params, lambda_lasso, lambda_ridge);
        if now > last {
            state.config.learning_rate *= 0.5;
        }
        last = now;
        if stationarity(e, y, link, &params, lambda_lasso, lambda_ridge) < settings.tolerance {
            converged = true;
            break;
        }
    }
    Ok(Ok(GlmModel {
        species: species.to_string(),
        link,
        coefficients: params.beta,
        intercept: params.intercept[0],
        lambda_lasso,
        lambda_ridge,
        iterations,
        converged,
    }))
}

/// Fits one species of `d` on `rows`, using `pre` (already fitted) for the inputs.
pub fn fit_glm(
    d: &Dataset,
    species_index: usize,
    pre: &Preprocessor,
    rows: &[usize],
    link: Link,
    lambda_lasso: f64,
    lambda_ridge: f64,
    settings: &GlmSettings,
) -> Result<std::result::Result<GlmModel, NotFittable>> {
    if species_index >= d.n_species() {
        return Err(Error::Validation(format!(
            "species index {species_index} out of range"
        )));
    }
    let (e, _) = pre.transform_matrix(&d.covariates.select_rows(rows))?;
    let y: Vec<f64> = rows
        .iter()
        .map(|&i| d.community[(i, species_index)])
        .collect();
    fit_glm_matrix(
        &d.species_names[species_index],
        &e,
        &y,
        link,
        lambda_lasso,
        lambda_ridge,
        settings,
    )
}

/// Every species in parallel on already-preprocessed inputs.
pub fn fit_all(
    species: &[String],
    e: &DMatrix<f64>,
    y: &DMatrix<f64>,
    link: Link,
    lambda_lasso: f64,
    lambda_ridge: f64,
    settings: &GlmSettings,
) -> Result<Vec<std::result::Result<GlmModel, NotFittable>>> {
    if species.len() != y.ncols() {
        return Err(Error::shape("species names", y.ncols(), species.len()));
    }
    (0..y.ncols())
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = y.column(j).iter().copied().collect();
            fit_glm_matrix(
                &species[j],
                e,
                &col,
                link,
                lambda_lasso,
                lambda_ridge,
                settings,
            )
        })
        .collect()
}

impl GlmModel {
    pub fn predict(&self, e: &DMatrix<f64>) -> Result<Vec<f64>> {
        if e.ncols() != self.coefficients.len() {
            return Err(Error::shape(
                "glm input width",
                self.coefficients.len(),
                e.ncols(),
            ));
        }
        let eta = e * DVector::from_column_slice(&self.coefficients);
        Ok(eta
            .iter()
            .map(|z| self.link.inverse(z + self.intercept))
            .collect())
    }
}

/// Column `j` holds model `j`'s predictions; a missing model gives a NaN column.
pub fn stack(models: &[Option<GlmModel>], e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::from_element(e.nrows(), models.len(), f64::NAN);
    for (j, m) in models.iter().enumerate() {
        if let Some(m) = m {
            for (i, p) in m.predict(e)?.into_iter().enumerate() {
                out[(i, j)] = p;
            }
        }
    }
    Ok(out)
}

/// Expected species richness per site.
pub fn richness(probs: &DMatrix<f64>) -> Vec<f64> {
    probs
        .row_iter()
        .map(|r| r.iter().filter(|v| !v.is_nan()).sum())
        .collect()
}

#[derive(Debug, Deserialize)]
struct ScoreRecord {
    site_id: String,
    species: String,
    score: f64,
}

/// Reads an external `site_id,species,score` table into an
/// `N x M` matrix aligned to `site_ids` and `species`; absent cells are NaN.
pub fn load_external_scores(
    path: &Path,
    site_ids: &[String],
    species: &[String],
) -> Result<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rows: HashMap<&str, usize> = site_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let cols: HashMap<&str, usize> = species
        .iter()
        .enumerate()
        .map(|(j, s)| (s.as_str(), j))
        .collect();
    let mut out = DMatrix::from_element(site_ids.len(), species.len(), f64::NAN);
    for rec in rdr.deserialize::<ScoreRecord>() {
        let rec = rec.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let i = *rows
            .get(rec.site_id.as_str())
            .ok_or_else(|| Error::Alignment(rec.site_id.clone()))?;
        let Some(&j) = cols.get(rec.species.as_str()) else {
            return Err(Error::Validation(format!(
                "unknown species `{}` in external scores",
                rec.species
            )));
        };
        out[(i, j)] = rec.score;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::roc_auc;
    use crate::numeric::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Newton-Raphson / IRLS for the unpenalized logit model with intercept.
    fn irls_logit(e: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
        let (n, p) = e.shape();
        let x = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { e[(i, j - 1)] });
        let mut w = DVector::zeros(p + 1);
        for _ in 0..50 {
            let eta = &x * &w;
            let mu: Vec<f64> = eta.iter().map(|z| sigmoid(*z)).collect();
            let g = x.tr_mul(&DVector::from_fn(n, |i, _| y[i] - mu[i]));
            let mut h = DMatrix::zeros(p + 1, p + 1);
            for i in 0..n {
                let r = x.row(i).transpose();
                h += &r * r.transpose() * (mu[i] * (1.0 - mu[i]));
            }
            w += h.cholesky().unwrap().solve(&g);
        }
        w.iter().copied().collect()
    }

    #[test]
    fn matches_irls_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = DMatrix::from_fn(100, 3, |_, _| rng.random_range(-1.5..1.5));
        let truth = [0.3, 1.2, -0.8, 0.5];
        let y: Vec<f64> = (0..100)
            .map(|i| {
                let z = truth[0] + (0..3).map(|k| truth[k + 1] * e[(i, k)]).sum::<f64>();
                rng.random_bool(sigmoid(z)) as u8 as f64
            })
            .collect();
        let oracle = irls_logit(&e, &y);
        let m = fit_glm_matrix("s", &e, &y, Link::Logit, 0.0, 0.0, &GlmSettings::default())
            .unwrap()
            .unwrap();
        assert!(m.converged, "{} iterations", m.iterations);
        assert!((m.intercept - oracle[0]).abs() < 1e-4);
        for k in 0..3 {
            assert!(
                (m.coefficients[k] - oracle[k + 1]).abs() < 1e-4,
                "{:?} vs {:?}",
                m.coefficients,
                oracle
            );
        }
    }

    #[test]
    fn intercept_only_recovers_prevalence() {
        let e = DMatrix::zeros(40, 0);
        let y: Vec<f64> = (0..40).map(|i| (i % 4 == 0) as u8 as f64).collect();
        for link in [Link::Logit, Link::Probit] {
            let m = fit_glm_matrix("s", &e, &y, link, 0.0, 0.0, &GlmSettings::default())
                .unwrap()
                .unwrap();
            let p = m.predict(&e).unwrap();
            assert!((p[0] - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn separable_data_stays_finite_with_ridge() {
        let e = DMatrix::from_fn(30, 1, |i, _| i as f64 / 10.0 - 1.5);
        let y: Vec<f64> = (0..30).map(|i| (i >= 15) as u8 as f64).collect();
        let m = fit_glm_matrix("s", &e, &y, Link::Probit, 0.0, 0.1, &GlmSettings::default())
            .unwrap()
            .unwrap();
        assert!(m.coefficients[0].is_finite() && m.intercept.is_finite());
        let labels: Vec<bool> = y.iter().map(|v| *v > 0.5).collect();
        assert_eq!(roc_auc(&m.predict(&e).unwrap(), &labels), Some(1.0));
    }

    #[test]
    fn heavy_ridge_shrinks_to_prevalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = DMatrix::from_fn(50, 2, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..50).map(|i| (e[(i, 0)] > 0.2) as u8 as f64).collect();
        let prev = y.iter().sum::<f64>() / 50.0;
        let m = fit_glm_matrix("s", &e, &y, Link::Logit, 0.0, 1e6, &GlmSettings::default())
            .unwrap()
            .unwrap();
        assert!(m.coefficients.iter().all(|c| c.abs() < 1e-4));
        assert!(m
            .predict(&e)
            .unwrap()
            .iter()
            .all(|p| (p - prev).abs() < 1e-3));
    }

    #[test]
    fn single_class_species_are_refused() {
        let e = DMatrix::from_element(5, 1, 1.0);
        let r = fit_glm_matrix(
            "s",
            &e,
            &[0.0; 5],
            Link::Logit,
            0.0,
            0.0,
            &GlmSettings::default(),
        )
        .unwrap();
        assert_eq!(r, Err(NotFittable::NoPresences));
        let r = fit_glm_matrix(
            "s",
            &e,
            &[1.0; 5],
            Link::Logit,
            0.0,
            0.0,
            &GlmSettings::default(),
        )
        .unwrap();
        assert_eq!(r, Err(NotFittable::NoAbsences));
    }

    fn model(species: &str, coef: f64, intercept: f64) -> GlmModel {
        GlmModel {
            species: species.into(),
            link: Link::Logit,
            coefficients: vec![coef],
            intercept,
            lambda_lasso: 0.0,
            lambda_ridge: 0.0,
            iterations: 0,
            converged: true,
        }
    }

    #[test]
    fn stacking_is_columnwise() {
        let e = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 2.0]);
        let a = model("a", 1.0, 0.0);
        let single = stack(&[Some(a.clone())], &e).unwrap();
        assert_eq!(
            single.column(0).iter().copied().collect::<Vec<_>>(),
            a.predict(&e).unwrap()
        );

        let b = model("b", -0.5, 0.3);
        let ab = stack(&[Some(a.clone()), Some(b.clone()), None], &e).unwrap();
        let ba = stack(&[Some(b), Some(a)], &e).unwrap();
        assert_eq!(ab.column(0), ba.column(1));
        assert_eq!(ab.column(1), ba.column(0));
        assert!(ab.column(2).iter().all(|v| v.is_nan()));
    }

    #[test]
    fn richness_sums_probabilities() {
        let e = DMatrix::from_element(1, 1, 0.0);
        let models: Vec<Option<GlmModel>> = (0..4)
            .map(|k| Some(model(&k.to_string(), 1.0, 0.0)))
            .collect();
        assert_eq!(richness(&stack(&models, &e).unwrap()), vec![2.0]);
    }

    #[test]
    fn external_scores_align_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.csv");
        std::fs::write(&p, "site_id,species,score\nb,sp2,0.7\na,sp1,0.1\n").unwrap();
        let sites = vec!["a".to_string(), "b".to_string()];
        let species = vec!["sp1".to_string(), "sp2".to_string()];
        let m = load_external_scores(&p, &sites, &species).unwrap();
        assert_eq!(m[(0, 0)], 0.1);
        assert_eq!(m[(1, 1)], 0.7);
        assert!(m[(0, 1)].is_nan());
        std::fs::write(&p, "site_id,species,score\nz,sp1,0.1\n").unwrap();
        assert!(matches!(
            load_external_scores(&p, &sites, &species),
            Err(Error::Alignment(_))
        ));
    }
}
