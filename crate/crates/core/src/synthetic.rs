//! Community simulator following the model's generative story: environmental
//! responses plus latent factors through a probit link.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureColumn, FeatureSchema};
use crate::error::{Error, Result};
use crate::numeric::normal_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResponseShape {
    /// Each species responds linearly to every covariate.
    #[default]
    Linear,
    /// All species respond to two shared unimodal gradients built from
    /// squares and a product of the covariates.
    SharedQuadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_sites: usize,
    pub n_species: usize,
    pub n_covariates: usize,
    pub latent_dim: usize,
    pub shape: ResponseShape,
    /// Standard deviation of the environmental part of the linear predictor.
    pub env_scale: f64,
    /// Scale of the latent loadings.
    pub latent_scale: f64,
    /// Target prevalences run log-evenly from the first to the second value.
    pub prevalence: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_sites: 500,
            n_species: 20,
            n_covariates: 4,
            latent_dim: 3,
            shape: ResponseShape::Linear,
            env_scale: 2.5,
            latent_scale: 0.4,
            prevalence: (0.15, 0.5),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    /// Species-specific environmental part of the linear predictor, `N x M`.
    pub env_effect: DMatrix<f64>,
    pub latent: DMatrix<f64>,
    /// `L x M`.
    pub loadings: DMatrix<f64>,
    pub intercepts: Vec<f64>,
    pub target_prevalence: Vec<f64>,
    /// Occurrence probability given environment and latent factors.
    pub probabilities: DMatrix<f64>,
    /// Occurrence probability given environment only (latent integrated out).
    pub marginal: DMatrix<f64>,
}

fn intercept_for(target: f64, rest: impl Iterator<Item = (f64, f64)> + Clone) -> f64 {
    // rest yields (linear predictor without intercept, extra probit variance)
    let mean = |a: f64| {
        let (s, n) = rest.clone().fold((0.0, 0usize), |(s, n), (eta, v)| {
            (s + normal_cdf((a + eta) / (1.0 + v).sqrt()), n + 1)
        });
        s / n as f64
    };
    let (mut lo, mut hi) = (-12.0, 12.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Draws covariates, latent factors and occurrences. Intercepts are solved
/// so each species' expected prevalence matches its target.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, SyntheticTruth)> {
    let (n, m, p, l) = (
        spec.n_sites,
        spec.n_species,
        spec.n_covariates,
        spec.latent_dim,
    );
    if n == 0 || m == 0 || p == 0 {
        return Err(Error::Config(
            "synthetic data needs sites, species and covariates".into(),
        ));
    }
    if spec.shape == ResponseShape::SharedQuadratic && p < 2 {
        return Err(Error::Config(
            "shared quadratic responses need two covariates".into(),
        ));
    }
    let (p_lo, p_hi) = spec.prevalence;
    if !(0.0 < p_lo && p_lo <= p_hi && p_hi < 1.0) {
        return Err(Error::Config(
            "prevalence bounds must satisfy 0 < lo <= hi < 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal =
        |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = normal(n, p);
    let latent = normal(n, l);
    let raw_b = normal(p.max(2), m);
    let loadings = normal(l, m) * spec.latent_scale;
    let dirs = normal(2, m);

    let features = match spec.shape {
        ResponseShape::Linear => {
            let b = raw_b.rows(0, p).into_owned() / (p as f64).sqrt();
            &x * b
        }
        ResponseShape::SharedQuadratic => {
            // two unimodal gradients, each peaking inside the sampled range
            let g = DMatrix::from_fn(n, 2, |i, k| {
                let (a, b) = (x[(i, 0)], x[(i, 1)]);
                if k == 0 {
                    1.0 - 0.5 * ((a - 0.5).powi(2) + b * b)
                } else {
                    1.0 - 0.5 * ((a + 0.5).powi(2) + (b - 1.0).powi(2)) + 0.5 * a * b
                }
            });
            let mut centered = g.clone();
            for mut col in centered.column_iter_mut() {
                let mu = col.mean();
                let sd = (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64)
                    .sqrt()
                    .max(1e-12);
                col.apply(|v| *v = (*v - mu) / sd);
            }
            let d = DMatrix::from_fn(2, m, |k, j| {
                let norm = (dirs[(0, j)].powi(2) + dirs[(1, j)].powi(2))
                    .sqrt()
                    .max(1e-12);
                dirs[(k, j)].abs() / norm
            });
            centered * d
        }
    };
    let env_effect = features * spec.env_scale;
    let latent_var: Vec<f64> = (0..m).map(|j| loadings.column(j).norm_squared()).collect();
    let target: Vec<f64> = (0..m)
        .map(|j| {
            if m == 1 {
                p_lo
            } else {
                (p_lo.ln() + (p_hi.ln() - p_lo.ln()) * j as f64 / (m - 1) as f64).exp()
            }
        })
        .collect();
    let intercepts: Vec<f64> = (0..m)
        .map(|j| {
            intercept_for(
                target[j],
                (0..n)
                    .map(move |i| (i, j))
                    .map(|(i, j)| (env_effect[(i, j)], latent_var[j])),
            )
        })
        .collect();
    let eta_latent = &latent * &loadings;
    let probabilities = DMatrix::from_fn(n, m, |i, j| {
        normal_cdf(intercepts[j] + env_effect[(i, j)] + eta_latent[(i, j)])
    });
    let marginal = DMatrix::from_fn(n, m, |i, j| {
        normal_cdf((intercepts[j] + env_effect[(i, j)]) / (1.0 + latent_var[j]).sqrt())
    });
    let community = probabilities.map(|q| if rng.random::<f64>() < q { 1.0 } else { 0.0 });

    let schema = FeatureSchema::new(
        (0..p)
            .map(|k| FeatureColumn::numerical(&format!("x{}", k + 1)))
            .collect(),
    )?;
    let width = n.to_string().len();
    let dataset = Dataset::new(
        (0..n).map(|i| format!("site{:0width$}", i + 1)).collect(),
        x,
        community,
        (0..m).map(|j| format!("sp{:02}", j + 1)).collect(),
        schema,
    )?;
    Ok((
        dataset,
        SyntheticTruth {
            env_effect,
            latent,
            loadings,
            intercepts,
            target_prevalence: target,
            probabilities,
            marginal,
        },
    ))
}

pub const LANDCOVER: [&str; 3] = ["forest", "grassland", "cropland"];

/// A small mapped landscape: two temperature, two precipitation and one
/// soil covariate plus a categorical land cover, each tagged with a feature
/// group. Returns the dataset and `(site_id, x, y)` coordinates.
pub fn toy_landscape(
    n_sites: usize,
    n_species: usize,
    seed: u64,
) -> Result<(Dataset, Vec<(String, f64, f64)>)> {
    if n_sites < 10 || n_species == 0 {
        return Err(Error::Config(
            "the toy landscape needs at least 10 sites and one species".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = || -> f64 { rng.sample(StandardNormal) };
    let mut coords = Vec::with_capacity(n_sites);
    let mut raw = DMatrix::zeros(n_sites, 6);
    let mut latent = DMatrix::zeros(n_sites, 2);
    for i in 0..n_sites {
        let (x, y) = (50.0 + 25.0 * z(), 50.0 + 25.0 * z());
        let bio1 = 14.0 - 0.06 * y + 0.8 * z();
        let bio5 = bio1 + 9.0 + 0.7 * z();
        let bio12 = 700.0 + 5.0 * x + 90.0 * z();
        let bio17 = 0.09 * bio12 + 8.0 * z();
        let ph = 6.3 + 0.8 * z();
        let wet = (bio12 - 950.0) / 150.0 + 0.7 * z();
        let cover = if wet > 0.6 {
            0
        } else if wet < -0.6 {
            2
        } else {
            1
        };
        for (c, v) in [bio1, bio5, bio12, bio17, ph, cover as f64]
            .into_iter()
            .enumerate()
        {
            raw[(i, c)] = (v * 1e3).round() / 1e3;
        }
        latent[(i, 0)] = z();
        latent[(i, 1)] = z();
        coords.push(((x * 10.0).round() / 10.0, (y * 10.0).round() / 10.0));
    }
    let standardized: Vec<Vec<f64>> = (0..5)
        .map(|c| {
            let col = raw.column(c);
            let m = col.mean();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n_sites as f64).sqrt();
            col.iter().map(|v| (v - m) / sd).collect()
        })
        .collect();
    let mut effects = Vec::with_capacity(n_species);
    for _ in 0..n_species {
        let temp = 0.8 * z();
        let rain = 0.8 * z();
        let optimum = 0.7 * z();
        let soil = 0.4 * z();
        let cover: Vec<f64> = (0..3).map(|_| 0.6 * z()).collect();
        let load = [0.5 * z(), 0.5 * z()];
        effects.push((temp, rain, optimum, soil, cover, load));
    }
    let mut env = DMatrix::zeros(n_sites, n_species);
    let mut eta_latent = DMatrix::zeros(n_sites, n_species);
    for (j, (temp, rain, optimum, soil, cover, load)) in effects.iter().enumerate() {
        for i in 0..n_sites {
            let t = 0.5 * (standardized[0][i] + standardized[1][i]);
            let r = 0.5 * (standardized[2][i] + standardized[3][i]);
            env[(i, j)] = temp * t + rain * r - 0.5 * (r - optimum).powi(2)
                + soil * standardized[4][i]
                + cover[raw[(i, 5)] as usize];
            eta_latent[(i, j)] = load[0] * latent[(i, 0)] + load[1] * latent[(i, 1)];
        }
    }
    let mut community = DMatrix::zeros(n_sites, n_species);
    for j in 0..n_species {
        let (lo, hi) = (0.08f64, 0.5f64);
        let target = if n_species == 1 {
            hi
        } else {
            (lo.ln() + (hi.ln() - lo.ln()) * j as f64 / (n_species - 1) as f64).exp()
        };
        let var: f64 = effects[j].5.iter().map(|a| a * a).sum();
        let a = intercept_for(target, (0..n_sites).map(|i| (env[(i, j)], var)));
        for i in 0..n_sites {
            let p = normal_cdf(a + env[(i, j)] + eta_latent[(i, j)]);
            community[(i, j)] = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
        }
    }
    let schema = FeatureSchema::new(vec![
        FeatureColumn::numerical("bio1").with_group("temperature"),
        FeatureColumn::numerical("bio5").with_group("temperature"),
        FeatureColumn::numerical("bio12").with_group("precipitation"),
        FeatureColumn::numerical("bio17").with_group("precipitation"),
        FeatureColumn::numerical("ph").with_group("soil"),
        FeatureColumn::categorical("landcover", &LANDCOVER).with_group("landcover"),
    ])?;
    let width = n_sites.to_string().len();
    let ids: Vec<String> = (0..n_sites)
        .map(|i| format!("s{:0width$}", i + 1))
        .collect();
    let coordinates = ids
        .iter()
        .zip(coords)
        .map(|(id, (x, y))| (id.clone(), x, y))
        .collect();
    let dataset = Dataset::new(
        ids,
        raw,
        community,
        (0..n_species)
            .map(|j| format!("taxon{:02}", j + 1))
            .collect(),
        schema,
    )?;
    Ok((dataset, coordinates))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prevalences_hit_targets() {
        let spec = SyntheticSpec {
            n_sites: 4000,
            prevalence: (0.02, 0.5),
            ..Default::default()
        };
        let (d, truth) = generate(&spec).unwrap();
        for j in 0..d.n_species() {
            let expected = truth.marginal.column(j).mean();
            assert!((expected - truth.target_prevalence[j]).abs() < 1e-9);
            let observed = d.community.column(j).mean();
            let se = (expected * (1.0 - expected) / 4000.0).sqrt();
            assert!(
                (observed - expected).abs() < 5.0 * se,
                "species {j}: {observed} vs {expected}"
            );
        }
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SyntheticSpec {
            shape: ResponseShape::SharedQuadratic,
            n_sites: 50,
            ..Default::default()
        };
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        assert_eq!(a.community, b.community);
        let (c, _) = generate(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.community, c.community);
    }

    #[test]
    fn toy_landscape_is_consistent() {
        let (d, coords) = toy_landscape(120, 6, 3).unwrap();
        assert_eq!(d.schema.len(), 6);
        assert_eq!(coords.len(), 120);
        assert!(d
            .covariates
            .column(5)
            .iter()
            .all(|v| (0.0..3.0).contains(v) && v.fract() == 0.0));
        for j in 0..6 {
            let prevalence = d.community.column(j).mean();
            assert!(prevalence > 0.0 && prevalence < 0.9, "{prevalence}");
        }
        let (again, _) = toy_landscape(120, 6, 3).unwrap();
        assert_eq!(again.community, d.community);
    }
}
