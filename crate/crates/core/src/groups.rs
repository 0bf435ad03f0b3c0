//! Response groups: Ward clustering of species on their SHAP profiles, with
//! GAP and WSS cluster-count selection and a PCA projection.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::sorted_eigen;
use crate::error::{Error, Result};
use crate::explain::ShapAttribution;

/// One agglomeration. Clusters `0..n` are the input rows; the cluster
/// created by merge `t` has id `n + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    /// `sqrt(2 * increase in within-cluster sum of squares)`.
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeTree {
    pub n: usize,
    pub merges: Vec<Merge>,
}

/// Ward agglomeration through the Lance-Williams update on squared
/// Euclidean distances. Ties go to the smallest `(i, j)` slot pair; the
/// merged cluster takes slot `i`.
pub fn ward_cluster(x: &DMatrix<f64>) -> Result<MergeTree> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Validation(
            "Ward clustering needs at least two rows".into(),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("response matrix".into()));
    }
    let mut d2 = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (x.row(i) - x.row(j)).norm_squared();
            d2[(i, j)] = v;
            d2[(j, i)] = v;
        }
    }
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut id: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - 1);
    for t in 0..n - 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if active[j] && d2[(i, j)] < best.0 {
                    best = (d2[(i, j)], i, j);
                }
            }
        }
        let (dij, i, j) = best;
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if !active[k] || k == i || k == j {
                continue;
            }
            let nk = size[k] as f64;
            let v = (((ni + nk) * d2[(i, k)] + (nj + nk) * d2[(j, k)] - nk * dij) / (ni + nj + nk))
                .max(0.0);
            d2[(i, k)] = v;
            d2[(k, i)] = v;
        }
        merges.push(Merge {
            a: id[i].min(id[j]),
            b: id[i].max(id[j]),
            height: dij.max(0.0).sqrt(),
            size: size[i] + size[j],
        });
        active[j] = false;
        size[i] += size[j];
        id[i] = n + t;
    }
    Ok(MergeTree { n, merges })
}

impl MergeTree {
    /// Partition into `k` clusters, labelled `1..=k` in order of first
    /// appearance along the rows.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.n {
            return Err(Error::Validation(format!(
                "cannot cut {} rows into {k} clusters",
                self.n
            )));
        }
        let mut parent: Vec<usize> = (0..2 * self.n - 1).collect();
        fn root(parent: &mut [usize], mut v: usize) -> usize {
            while parent[v] != v {
                parent[v] = parent[parent[v]];
                v = parent[v];
            }
            v
        }
        for (t, m) in self.merges.iter().take(self.n - k).enumerate() {
            parent[m.a] = self.n + t;
            parent[m.b] = self.n + t;
        }
        let mut seen: Vec<usize> = Vec::new();
        Ok((0..self.n)
            .map(|i| {
                let r = root(&mut parent, i);
                match seen.iter().position(|s| *s == r) {
                    Some(p) => p + 1,
                    None => {
                        seen.push(r);
                        seen.len()
                    }
                }
            })
            .collect())
    }
}

/// Pooled within-cluster sum of squared distances to cluster centroids.
pub fn within_ss(x: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let k = labels.iter().copied().max().unwrap_or(0);
    let mut total = 0.0;
    for c in 1..=k {
        let rows: Vec<usize> = (0..x.nrows()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        let sub = x.select_rows(&rows);
        let centroid = sub.row_mean();
        total += sub
            .row_iter()
            .map(|r| (r - &centroid).norm_squared())
            .sum::<f64>();
    }
    total
}

fn wss_curve(x: &DMatrix<f64>, k_max: usize) -> Result<Vec<f64>> {
    let tree = ward_cluster(x)?;
    (1..=k_max)
        .map(|k| Ok(within_ss(x, &tree.cut(k)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    /// Entry `k - 1` describes `k` clusters.
    pub log_w: Vec<f64>,
    pub expected_log_w: Vec<f64>,
    pub gap: Vec<f64>,
    pub s: Vec<f64>,
    pub chosen_k: usize,
}

/// All rows coincide up to rounding.
fn degenerate(x: &DMatrix<f64>, w1: f64) -> bool {
    w1 <= 1e-20 * x.norm_squared()
}

fn log_floor(w: f64) -> f64 {
    w.max(1e-300).ln()
}

/// Tibshirani's gap statistic with references drawn uniformly over the
/// principal-axis bounding box of `x`; `k` follows the one-standard-error rule.
pub fn gap_statistic(x: &DMatrix<f64>, k_max: usize, b: usize, seed: u64) -> Result<GapResult> {
    let n = x.nrows();
    if k_max == 0 || k_max >= n {
        return Err(Error::Config(format!("k_max must lie in 1..{n}")));
    }
    if b < 10 {
        return Err(Error::Config(
            "the gap statistic needs at least 10 reference sets".into(),
        ));
    }
    let wss = wss_curve(x, k_max)?;
    let log_w: Vec<f64> = wss.iter().map(|w| log_floor(*w)).collect();
    if degenerate(x, wss[0]) {
        return Ok(GapResult {
            expected_log_w: log_w.clone(),
            gap: vec![0.0; k_max],
            s: vec![0.0; k_max],
            log_w,
            chosen_k: 1,
        });
    }

    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let svd = centered.clone().svd(false, true);
    let v = svd.v_t.expect("requested").transpose();
    let rotated = &centered * &v;
    let lo: Vec<f64> = rotated.column_iter().map(|c| c.min()).collect();
    let hi: Vec<f64> = rotated.column_iter().map(|c| c.max()).collect();
    let refs: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
            let z = DMatrix::from_fn(n, rotated.ncols(), |_, c| {
                if hi[c] > lo[c] {
                    rng.random_range(lo[c]..hi[c])
                } else {
                    lo[c]
                }
            });
            let back = z * v.transpose();
            Ok(wss_curve(&back, k_max)?
                .into_iter()
                .map(log_floor)
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut expected_log_w = vec![0.0; k_max];
    let mut s = vec![0.0; k_max];
    for k in 0..k_max {
        let vals: Vec<f64> = refs.iter().map(|r| r[k]).collect();
        let m = vals.iter().sum::<f64>() / b as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / b as f64).sqrt();
        expected_log_w[k] = m;
        s[k] = sd * (1.0 + 1.0 / b as f64).sqrt();
    }
    let gap: Vec<f64> = (0..k_max).map(|k| expected_log_w[k] - log_w[k]).collect();
    let chosen_k = (0..k_max - 1)
        .find(|&k| gap[k] >= gap[k + 1] - s[k + 1])
        .map_or(k_max, |k| k + 1);
    Ok(GapResult {
        log_w,
        expected_log_w,
        gap,
        s,
        chosen_k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WssResult {
    /// Entry `k - 1` is `W_k`.
    pub wss: Vec<f64>,
    /// `None` below three candidate counts or when the curve has no bend.
    pub elbow: Option<usize>,
    pub inconclusive: bool,
}

/// Elbow of the WSS curve at the largest second difference.
pub fn wss_elbow(x: &DMatrix<f64>, k_max: usize) -> Result<WssResult> {
    let n = x.nrows();
    if k_max == 0 || k_max >= n {
        return Err(Error::Config(format!("k_max must lie in 1..{n}")));
    }
    let wss = wss_curve(x, k_max)?;
    if k_max < 3 {
        return Ok(WssResult {
            wss,
            elbow: None,
            inconclusive: false,
        });
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for k in 2..k_max {
        let d = wss[k - 2] - 2.0 * wss[k - 1] + wss[k];
        if d > best.0 {
            best = (d, k);
        }
    }
    let inconclusive = degenerate(x, wss[0]) || best.0 <= 1e-9 * wss[0];
    Ok(WssResult {
        wss,
        elbow: (!inconclusive).then_some(best.1),
        inconclusive,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Row-major `rows x n_components` scores.
    pub scores: Vec<Vec<f64>>,
    /// Row-major `columns x n_components` unit loadings.
    pub loadings: Vec<Vec<f64>>,
    pub explained: Vec<f64>,
}

/// Principal components of the column-centered matrix. Wide inputs go
/// through the Gram matrix.
pub fn pca_project(x: &DMatrix<f64>, n_components: usize) -> Result<PcaResult> {
    let (n, p) = x.shape();
    if n_components == 0 || n_components > n.min(p) {
        return Err(Error::Config(format!(
            "{n_components} components requested from a {n}x{p} matrix"
        )));
    }
    if n < 2 {
        return Err(Error::Validation("PCA needs at least two rows".into()));
    }
    let mean = x.row_mean();
    let c = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - mean[j]);
    let denom = (n - 1) as f64;
    let (values, loadings) = if p <= n {
        sorted_eigen(c.tr_mul(&c) / denom)
    } else {
        let (vals, u) = sorted_eigen(&c * c.transpose() / denom);
        let mut v = DMatrix::zeros(p, n);
        for k in 0..n {
            if vals[k] > 1e-12 * vals[0].max(f64::MIN_POSITIVE) {
                let mut col = c.tr_mul(&u.column(k)) / (denom * vals[k]).sqrt();
                let pivot = col
                    .iter()
                    .copied()
                    .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
                if pivot < 0.0 {
                    col.neg_mut();
                }
                v.set_column(k, &col);
            }
        }
        (vals, v)
    };
    let trace: f64 = values.iter().sum();
    let lead = loadings.columns(0, n_components).into_owned();
    let scores = &c * &lead;
    Ok(PcaResult {
        scores: scores
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect(),
        loadings: lead
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect(),
        explained: values
            .iter()
            .take(n_components)
            .map(|v| if trace > 0.0 { v / trace } else { 0.0 })
            .collect(),
    })
}

/// Species by (site, feature) SHAP values for one feature group.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    pub species: Vec<String>,
    pub features: Vec<String>,
    /// `(site_id, feature)` per column, site-major.
    pub columns: Vec<(String, String)>,
    pub values: DMatrix<f64>,
}

impl ResponseMatrix {
    pub fn from_attribution(attr: &ShapAttribution, group: &str) -> Result<Self> {
        let feats: Vec<usize> = (0..attr.feature_names.len())
            .filter(|&i| attr.feature_groups[i] == group)
            .collect();
        if feats.is_empty() {
            return Err(Error::Validation(format!("no features in group `{group}`")));
        }
        let n_sites = attr.site_ids.len();
        let mut columns = Vec::with_capacity(n_sites * feats.len());
        for site in &attr.site_ids {
            for &f in &feats {
                columns.push((site.clone(), attr.feature_names[f].clone()));
            }
        }
        let values = DMatrix::from_fn(attr.species.len(), columns.len(), |j, c| {
            attr.values[j][(c / feats.len(), feats[c % feats.len()])]
        });
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("SHAP values of group `{group}`")));
        }
        Ok(ResponseMatrix {
            species: attr.species.clone(),
            features: feats
                .iter()
                .map(|&f| attr.feature_names[f].clone())
                .collect(),
            columns,
            values,
        })
    }

    /// Species by feature mean SHAP value across sites.
    pub fn feature_means(&self) -> DMatrix<f64> {
        let q = self.features.len();
        let n_sites = self.columns.len() / q.max(1);
        DMatrix::from_fn(self.values.nrows(), q, |j, f| {
            (0..n_sites)
                .map(|s| self.values[(j, s * q + f)])
                .sum::<f64>()
                / n_sites.max(1) as f64
        })
    }
}

fn standardize(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let m = col.mean();
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        if sd > 1e-12 {
            col.apply(|v| *v = (*v - m) / sd);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupOptions {
    pub k_max: usize,
    pub references: usize,
    pub seed: u64,
    /// Use the rounded mean of the GAP and elbow choices when they differ.
    pub consensus: bool,
    /// Scale response-matrix columns to unit variance before clustering.
    pub standardize: bool,
}

impl Default for GroupOptions {
    fn default() -> Self {
        GroupOptions {
            k_max: 10,
            references: 50,
            seed: 0,
            consensus: false,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub group: String,
    pub species: Vec<String>,
    pub k: usize,
    pub gap_k: usize,
    pub elbow_k: Option<usize>,
    pub labels: Vec<usize>,
    pub merge_tree: MergeTree,
    pub gap: GapResult,
    pub wss: WssResult,
    /// Computed on per-feature mean SHAP values.
    pub pca: PcaResult,
}

/// Clusters species on one feature group's SHAP responses. `k_max` is
/// capped at one less than the species count.
pub fn build_response_groups(
    attr: &ShapAttribution,
    group: &str,
    opts: &GroupOptions,
) -> Result<ClusterResult> {
    let rm = ResponseMatrix::from_attribution(attr, group)?;
    let n = rm.species.len();
    if n < 2 {
        return Err(Error::Validation(
            "response groups need at least two species".into(),
        ));
    }
    let x = if opts.standardize {
        standardize(&rm.values)
    } else {
        rm.values.clone()
    };
    let k_max = opts.k_max.min(n - 1).max(1);
    let tree = ward_cluster(&x)?;
    let gap = gap_statistic(&x, k_max, opts.references, opts.seed)?;
    let wss = wss_elbow(&x, k_max)?;
    let k = match (opts.consensus, wss.elbow) {
        (true, Some(e)) if e != gap.chosen_k => ((e + gap.chosen_k) as f64 / 2.0).round() as usize,
        _ => gap.chosen_k,
    };
    let means = rm.feature_means();
    let pca = pca_project(&means, 2.min(n).min(means.ncols()))?;
    Ok(ClusterResult {
        group: group.to_string(),
        species: rm.species,
        k,
        gap_k: gap.chosen_k,
        elbow_k: wss.elbow,
        labels: tree.cut(k)?,
        merge_tree: tree,
        gap,
        wss,
        pca,
    })
}

pub fn write_labels<W: Write>(out: W, result: &ClusterResult) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["species", "cluster"])?;
    for (s, l) in result.species.iter().zip(&result.labels) {
        w.write_record([s.as_str(), &l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
