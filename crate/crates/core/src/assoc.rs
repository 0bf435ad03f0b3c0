//! Species association network from the latent factors: posterior moments,
//! residual covariance, graphical lasso and partial correlations.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mtec::MtecModel;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    /// `N x L` posterior means.
    pub u: DMatrix<f64>,
    /// `L x L` diagonal matrix of summed posterior variances.
    pub s: DMatrix<f64>,
    /// `(U'U + S) / N`.
    pub sigma_hat: DMatrix<f64>,
}

/// Second moment of the latent factors under the sites' posteriors.
pub fn posterior_stats(model: &MtecModel, y: &DMatrix<f64>) -> Result<PosteriorStats> {
    if !model.trained {
        return Err(Error::Contract(
            "posterior statistics need a trained model".into(),
        ));
    }
    if y.nrows() == 0 {
        return Err(Error::Validation(
            "no sites for posterior statistics".into(),
        ));
    }
    let post = model.encode_posterior(y)?;
    Ok(stats_from_moments(post.mu, &post.var))
}

pub(crate) fn stats_from_moments(u: DMatrix<f64>, var: &DMatrix<f64>) -> PosteriorStats {
    let n = u.nrows() as f64;
    let s = DMatrix::from_diagonal(&DVector::from_fn(var.ncols(), |k, _| var.column(k).sum()));
    let sigma_hat = (u.tr_mul(&u) + &s) / n;
    PosteriorStats { u, s, sigma_hat }
}

/// `A' Sigma A` for `L x M` loadings.
pub fn residual_covariance(
    sigma_hat: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if sigma_hat.nrows() != loadings.nrows() || !sigma_hat.is_square() {
        return Err(Error::shape(
            "latent covariance",
            loadings.nrows(),
            sigma_hat.nrows(),
        ));
    }
    let r = loadings.tr_mul(&(sigma_hat * loadings));
    Ok((&r + r.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlassoResult {
    pub omega: DMatrix<f64>,
    /// Estimated covariance (inverse of `omega`).
    pub w: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Diagonal ridge added to make the input positive definite.
    pub ridge: f64,
}

fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

fn without(m: &DMatrix<f64>, j: usize) -> Vec<usize> {
    (0..m.nrows()).filter(|&k| k != j).collect()
}

/// Block coordinate descent for the l1-penalized Gaussian likelihood with
/// an unpenalized diagonal. Each column's lasso subproblem is solved by
/// coordinate descent; sweeps stop when the mean absolute change of the
/// off-diagonal working covariance drops below `tol`.
pub fn graphical_lasso(
    sigma: &DMatrix<f64>,
    lambda: f64,
    max_iter: usize,
    tol: f64,
) -> Result<GlassoResult> {
    let p = sigma.nrows();
    if !sigma.is_square() || p == 0 {
        return Err(Error::shape("covariance", p * p, sigma.len()));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance".into()));
    }
    if (sigma - sigma.transpose()).abs().max() > 1e-9 * sigma.abs().max().max(1.0) {
        return Err(Error::Contract("covariance is not symmetric".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Config("glasso penalty must be nonnegative".into()));
    }
    let mut s = (sigma + sigma.transpose()) * 0.5;
    let mut ridge = 0.0;
    if s.clone().cholesky().is_none() {
        ridge = 1e-6;
        for i in 0..p {
            s[(i, i)] += ridge;
        }
        if s.clone().cholesky().is_none() {
            return Err(Error::Contract(
                "covariance is not positive semidefinite".into(),
            ));
        }
    }
    if p == 1 {
        return Ok(GlassoResult {
            omega: DMatrix::from_element(1, 1, 1.0 / s[(0, 0)]),
            w: s,
            iterations: 0,
            converged: true,
            ridge,
        });
    }

    let mut w = s.clone();
    let mut beta = DMatrix::<f64>::zeros(p - 1, p);
    let mut converged = false;
    let mut iterations = 0;
    let n_off = (p * (p - 1)) as f64;
    while iterations < max_iter {
        iterations += 1;
        let before = w.clone();
        for j in 0..p {
            let idx = without(&w, j);
            let w11 = w.select_rows(&idx).select_columns(&idx);
            let s12: Vec<f64> = idx.iter().map(|&k| s[(k, j)]).collect();
            let mut b: Vec<f64> = beta.column(j).iter().copied().collect();
            for _ in 0..1000 {
                let mut delta: f64 = 0.0;
                for k in 0..p - 1 {
                    let mut r = s12[k];
                    for l in 0..p - 1 {
                        if l != k {
                            r -= w11[(k, l)] * b[l];
                        }
                    }
                    let new = soft(r, lambda) / w11[(k, k)];
                    delta = delta.max((new - b[k]).abs());
                    b[k] = new;
                }
                if delta < tol * 1e-2 {
                    break;
                }
            }
            let w12 = &w11 * DVector::from_column_slice(&b);
            for (k, &i) in idx.iter().enumerate() {
                w[(i, j)] = w12[k];
                w[(j, i)] = w12[k];
            }
            beta.set_column(j, &DVector::from_vec(b));
        }
        let change = (&w - &before).abs().sum() / n_off;
        if change < tol {
            converged = true;
            break;
        }
    }

    let mut omega = DMatrix::zeros(p, p);
    for j in 0..p {
        let idx = without(&w, j);
        let w12: Vec<f64> = idx.iter().map(|&k| w[(k, j)]).collect();
        let b = beta.column(j);
        let ojj = 1.0 / (w[(j, j)] - w12.iter().zip(b.iter()).map(|(a, c)| a * c).sum::<f64>());
        omega[(j, j)] = ojj;
        for (k, &i) in idx.iter().enumerate() {
            omega[(i, j)] = -b[k] * ojj;
        }
    }
    // symmetric, keeping a zero whenever either column pruned the pair
    for i in 0..p {
        for j in (i + 1)..p {
            let (a, b) = (omega[(i, j)], omega[(j, i)]);
            let v = if a == 0.0 || b == 0.0 {
                0.0
            } else {
                0.5 * (a + b)
            };
            omega[(i, j)] = v;
            omega[(j, i)] = v;
        }
    }
    Ok(GlassoResult {
        omega,
        w,
        iterations,
        converged,
        ridge,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub partial_correlation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialCorrelations {
    pub rho: DMatrix<f64>,
    pub edges: Vec<Edge>,
    pub density: f64,
}

pub fn partial_correlations(omega: &DMatrix<f64>) -> Result<PartialCorrelations> {
    let p = omega.nrows();
    if !omega.is_square() {
        return Err(Error::shape("precision matrix", p * p, omega.len()));
    }
    if let Some(i) = (0..p).find(|&i| omega[(i, i)].is_nan() || omega[(i, i)] <= 0.0) {
        return Err(Error::Contract(format!(
            "precision diagonal entry {i} is not positive"
        )));
    }
    let mut rho = DMatrix::identity(p, p);
    let mut edges = Vec::new();
    for i in 0..p {
        for j in (i + 1)..p {
            let r = (-omega[(i, j)] / (omega[(i, i)] * omega[(j, j)]).sqrt()).clamp(-1.0, 1.0);
            rho[(i, j)] = r;
            rho[(j, i)] = r;
            if r != 0.0 {
                edges.push(Edge {
                    i,
                    j,
                    partial_correlation: r,
                });
            }
        }
    }
    let pairs = (p * p.saturating_sub(1) / 2) as f64;
    Ok(PartialCorrelations {
        density: if pairs > 0.0 {
            edges.len() as f64 / pairs
        } else {
            0.0
        },
        rho,
        edges,
    })
}

/// Connected components of the graph on `p` nodes, isolated nodes included.
pub fn connected_components(p: usize, edges: &[Edge]) -> usize {
    let mut parent: Vec<usize> = (0..p).collect();
    fn find(parent: &mut [usize], mut v: usize) -> usize {
        while parent[v] != v {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        v
    }
    let mut count = p;
    for e in edges {
        let (a, b) = (find(&mut parent, e.i), find(&mut parent, e.j));
        if a != b {
            parent[a] = b;
            count -= 1;
        }
    }
    count
}

/// Extended BIC of a precision estimate for `n` observations.
pub fn ebic(s: &DMatrix<f64>, omega: &DMatrix<f64>, n: usize, gamma: f64) -> f64 {
    let p = s.nrows() as f64;
    let logdet = omega.clone().cholesky().map_or(f64::NEG_INFINITY, |c| {
        2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    });
    let trace = (s * omega).trace();
    let loglik = 0.5 * n as f64 * (logdet - trace);
    let mut edges = 0.0;
    for i in 0..omega.nrows() {
        for j in (i + 1)..omega.ncols() {
            if omega[(i, j)] != 0.0 {
                edges += 1.0;
            }
        }
    }
    -2.0 * loglik + edges * (n as f64).ln() + 4.0 * edges * gamma * p.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlassoOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub ebic_gamma: f64,
}

impl Default for GlassoOptions {
    fn default() -> Self {
        GlassoOptions {
            max_iter: 500,
            tol: 1e-6,
            ebic_gamma: 0.5,
        }
    }
}

/// Fits every penalty in `grid` and keeps the lowest extended BIC (ties go
/// to the larger penalty). Returns the chosen penalty and its fit.
pub fn select_lambda(
    s: &DMatrix<f64>,
    grid: &[f64],
    n: usize,
    opts: &GlassoOptions,
) -> Result<(f64, GlassoResult)> {
    let mut best: Option<(f64, f64, GlassoResult)> = None;
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    for lambda in sorted {
        let fit = graphical_lasso(s, lambda, opts.max_iter, opts.tol)?;
        let score = ebic(s, &fit.omega, n, opts.ebic_gamma);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, lambda, fit));
        }
    }
    best.map(|(_, l, f)| (l, f))
        .ok_or_else(|| Error::Config("empty penalty grid".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationNetwork {
    pub species: Vec<String>,
    pub lambda: f64,
    pub sigma_r: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub partial_corr: DMatrix<f64>,
    pub edges: Vec<Edge>,
    pub density: f64,
    pub components: usize,
    pub converged: bool,
}

/// Residual covariance of the species through the model's loadings,
/// pruned by the graphical lasso.
pub fn association_network(
    model: &MtecModel,
    y: &DMatrix<f64>,
    species: &[String],
    lambda: f64,
    opts: &GlassoOptions,
) -> Result<AssociationNetwork> {
    if species.len() != model.n_species() {
        return Err(Error::shape(
            "species names",
            model.n_species(),
            species.len(),
        ));
    }
    let stats = posterior_stats(model, y)?;
    let sigma_r = residual_covariance(&stats.sigma_hat, &model.loadings)?;
    let fit = graphical_lasso(&sigma_r, lambda, opts.max_iter, opts.tol)?;
    network_from(species, lambda, sigma_r, fit)
}

pub(crate) fn network_from(
    species: &[String],
    lambda: f64,
    sigma_r: DMatrix<f64>,
    fit: GlassoResult,
) -> Result<AssociationNetwork> {
    let pc = partial_correlations(&fit.omega)?;
    Ok(AssociationNetwork {
        species: species.to_vec(),
        lambda,
        components: connected_components(species.len(), &pc.edges),
        sigma_r,
        omega: fit.omega,
        partial_corr: pc.rho,
        edges: pc.edges,
        density: pc.density,
        converged: fit.converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub lambda: f64,
    pub n_species: usize,
    pub n_edges: usize,
    pub density: f64,
    pub components: usize,
    pub converged: bool,
    pub min_abs_partial: Option<f64>,
    pub max_abs_partial: Option<f64>,
}

impl AssociationNetwork {
    pub fn summary(&self) -> NetworkSummary {
        let abs: Vec<f64> = self
            .edges
            .iter()
            .map(|e| e.partial_correlation.abs())
            .collect();
        NetworkSummary {
            lambda: self.lambda,
            n_species: self.species.len(),
            n_edges: self.edges.len(),
            density: self.density,
            components: self.components,
            converged: self.converged,
            min_abs_partial: abs.iter().copied().reduce(f64::min),
            max_abs_partial: abs.iter().copied().reduce(f64::max),
        }
    }

    pub fn write_edges<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["species_i", "species_j", "partial_correlation"])?;
        for e in &self.edges {
            w.write_record([
                &self.species[e.i],
                &self.species[e.j],
                &e.partial_correlation.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
