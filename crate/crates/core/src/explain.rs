//! Kernel SHAP attributions of per-species probabilities to raw covariates,
//! with global, group-level and geolocated summaries.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest feature count explained by full coalition enumeration in
/// [`ShapMode::Auto`].
pub const EXACT_MAX_FEATURES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShapMode {
    /// Exact up to [`EXACT_MAX_FEATURES`] features, otherwise 2048 samples.
    #[default]
    Auto,
    Exact,
    Sampled {
        n_samples: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapAttribution {
    pub species: Vec<String>,
    pub site_ids: Vec<String>,
    pub feature_names: Vec<String>,
    /// Group label of each feature, aligned with `feature_names`.
    pub feature_groups: Vec<String>,
    /// Mean background prediction per species.
    pub base_values: Vec<f64>,
    /// One `sites x features` matrix per species.
    pub values: Vec<DMatrix<f64>>,
    /// Model output at each explained site, `sites x species`.
    pub predictions: DMatrix<f64>,
}

/// Uniform subsample of at most `k` row indices, sorted.
pub fn background_rows(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = index::sample(&mut rng, n, k).into_vec();
    rows.sort_unstable();
    rows
}

fn shapley_weight(s: usize, p: usize) -> f64 {
    // s! (p - s - 1)! / p!
    let mut w = 1.0 / p as f64;
    let mut k = s;
    let mut n = p - 1;
    while k > 0 {
        w *= k as f64 / n as f64;
        k -= 1;
        n -= 1;
    }
    w
}

/// Mean model output over the background with coalition members taken from
/// `x`, one row per coalition.
fn coalition_values<F>(
    f: &F,
    x: &[f64],
    background: &DMatrix<f64>,
    masks: &[u64],
    n_out: usize,
) -> Result<DMatrix<f64>>
where
    F: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let (nb, p) = background.shape();
    let mut out = DMatrix::zeros(masks.len(), n_out);
    let chunk = (4096 / nb.max(1)).max(1);
    for (c, group) in masks.chunks(chunk).enumerate() {
        let rows = DMatrix::from_fn(group.len() * nb, p, |r, k| {
            if group[r / nb] >> k & 1 == 1 {
                x[k]
            } else {
                background[(r % nb, k)]
            }
        });
        let preds = f(&rows)?;
        if preds.shape() != (rows.nrows(), n_out) {
            return Err(Error::shape(
                "explained model output",
                rows.nrows() * n_out,
                preds.len(),
            ));
        }
        for (g, _) in group.iter().enumerate() {
            for j in 0..n_out {
                let mut s = 0.0;
                for b in 0..nb {
                    s += preds[(g * nb + b, j)];
                }
                out[(c * chunk + g, j)] = s / nb as f64;
            }
        }
    }
    Ok(out)
}

fn exact_site<F>(
    f: &F,
    x: &[f64],
    background: &DMatrix<f64>,
    n_out: usize,
) -> Result<(DMatrix<f64>, Vec<f64>)>
where
    F: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let p = x.len();
    let masks: Vec<u64> = (0..1u64 << p).collect();
    let v = coalition_values(f, x, background, &masks, n_out)?;
    let mut phi = DMatrix::zeros(p, n_out);
    for mask in 0..1usize << p {
        let s = mask.count_ones() as usize;
        for i in 0..p {
            if mask >> i & 1 == 0 {
                let w = shapley_weight(s, p);
                for j in 0..n_out {
                    phi[(i, j)] += w * (v[(mask | 1 << i, j)] - v[(mask, j)]);
                }
            }
        }
    }
    let full = (1usize << p) - 1;
    Ok((phi, (0..n_out).map(|j| v[(full, j)]).collect()))
}

fn sample_coalitions(p: usize, n_samples: usize, rng: &mut ChaCha8Rng) -> BTreeMap<u64, f64> {
    let size_weights: Vec<f64> = (1..p)
        .map(|s| (p - 1) as f64 / (s * (p - s)) as f64)
        .collect();
    let total: f64 = size_weights.iter().sum();
    let mut counts = BTreeMap::new();
    for _ in 0..n_samples {
        let mut u = rng.random::<f64>() * total;
        let mut size = p - 1;
        for (k, w) in size_weights.iter().enumerate() {
            if u < *w {
                size = k + 1;
                break;
            }
            u -= w;
        }
        let mask = index::sample(rng, p, size)
            .into_iter()
            .fold(0u64, |m, i| m | 1 << i);
        *counts.entry(mask).or_insert(0.0) += 1.0;
    }
    counts
}

fn sampled_site<F>(
    f: &F,
    x: &[f64],
    background: &DMatrix<f64>,
    n_out: usize,
    n_samples: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<f64>)>
where
    F: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let p = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = sample_coalitions(p, n_samples, &mut rng);
    let full = (1u64 << p) - 1;
    let mut masks: Vec<u64> = vec![0, full];
    masks.extend(counts.keys().copied());
    let v = coalition_values(f, x, background, &masks, n_out)?;

    // efficiency imposed by eliminating the last feature
    let q = p - 1;
    let z = DMatrix::from_fn(counts.len(), q, |r, i| {
        let m = masks[r + 2];
        (m >> i & 1) as f64 - (m >> q & 1) as f64
    });
    let w: Vec<f64> = counts.values().copied().collect();
    let mut zt_w_z = DMatrix::zeros(q, q);
    for r in 0..z.nrows() {
        let row = z.row(r).transpose();
        zt_w_z += &row * row.transpose() * w[r];
    }
    let svd = zt_w_z.svd(true, true);
    let mut phi = DMatrix::zeros(p, n_out);
    for j in 0..n_out {
        let delta = v[(1, j)] - v[(0, j)];
        let target = DVector::from_fn(z.nrows(), |r, _| {
            let m = masks[r + 2];
            w[r] * (v[(r + 2, j)] - v[(0, j)] - (m >> q & 1) as f64 * delta)
        });
        let sol = svd
            .solve(&z.tr_mul(&target), 1e-12)
            .map_err(|e| Error::Contract(format!("shap regression: {e}")))?;
        let mut rest = delta;
        for i in 0..q {
            phi[(i, j)] = sol[i];
            rest -= sol[i];
        }
        phi[(q, j)] = rest;
    }
    Ok((phi, (0..n_out).map(|j| v[(1, j)]).collect()))
}

/// Kernel SHAP for every row of `sites` against `background`, attributing
/// each of the model's outputs. `f` maps raw covariate rows to per-species
/// probabilities.
pub fn shap_explain<F>(
    f: &F,
    sites: &DMatrix<f64>,
    site_ids: &[String],
    background: &DMatrix<f64>,
    feature_names: &[String],
    feature_groups: &[String],
    species: &[String],
    mode: ShapMode,
    seed: u64,
) -> Result<ShapAttribution>
where
    F: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>> + Sync,
{
    let p = sites.ncols();
    if background.nrows() == 0 {
        return Err(Error::Config("empty SHAP background".into()));
    }
    if background.ncols() != p || feature_names.len() != p || feature_groups.len() != p {
        return Err(Error::shape("feature count", p, background.ncols()));
    }
    if site_ids.len() != sites.nrows() {
        return Err(Error::shape("site ids", sites.nrows(), site_ids.len()));
    }
    if p == 0 || p > 63 {
        return Err(Error::Config(format!("cannot explain {p} features")));
    }
    let sampled = match mode {
        ShapMode::Exact => None,
        ShapMode::Auto if p <= EXACT_MAX_FEATURES => None,
        ShapMode::Auto => Some(2048),
        ShapMode::Sampled { n_samples } => Some(n_samples),
    };
    if let Some(n) = sampled {
        if n < p + 2 {
            return Err(Error::Config(format!(
                "{n} SHAP samples is too few for {p} features (need at least {})",
                p + 2
            )));
        }
    }
    let m = species.len();
    let per_site: Vec<(DMatrix<f64>, Vec<f64>)> = (0..sites.nrows())
        .into_par_iter()
        .map(|s| {
            let x: Vec<f64> = sites.row(s).iter().copied().collect();
            match sampled {
                None => exact_site(f, &x, background, m),
                Some(n) => sampled_site(f, &x, background, m, n, seed.wrapping_add(s as u64)),
            }
        })
        .collect::<Result<_>>()?;
    let base = coalition_values(f, &vec![0.0; p], background, &[0], m)?;
    let mut values = vec![DMatrix::zeros(sites.nrows(), p); m];
    let mut predictions = DMatrix::zeros(sites.nrows(), m);
    for (s, (phi, pred)) in per_site.iter().enumerate() {
        for j in 0..m {
            predictions[(s, j)] = pred[j];
            for i in 0..p {
                values[j][(s, i)] = phi[(i, j)];
            }
        }
    }
    Ok(ShapAttribution {
        species: species.to_vec(),
        site_ids: site_ids.to_vec(),
        feature_names: feature_names.to_vec(),
        feature_groups: feature_groups.to_vec(),
        base_values: base.row(0).iter().copied().collect(),
        values,
        predictions,
    })
}

impl ShapAttribution {
    /// Largest `|base + sum(phi) - prediction|` over all sites and species.
    pub fn max_efficiency_gap(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, v) in self.values.iter().enumerate() {
            for s in 0..v.nrows() {
                let gap = self.base_values[j] + v.row(s).sum() - self.predictions[(s, j)];
                worst = worst.max(gap.abs());
            }
        }
        worst
    }
}

/// `species x features` matrix of mean absolute attribution.
pub fn global_importance(attr: &ShapAttribution) -> DMatrix<f64> {
    let p = attr.feature_names.len();
    let mut out = DMatrix::zeros(attr.values.len(), p);
    for (j, v) in attr.values.iter().enumerate() {
        let n = v.nrows().max(1) as f64;
        for i in 0..p {
            out[(j, i)] = v.column(i).iter().map(|x| x.abs()).sum::<f64>() / n;
        }
    }
    out
}

/// Feature indices by decreasing importance averaged over species; ties keep
/// schema order.
pub fn feature_order(importance: &DMatrix<f64>) -> Vec<usize> {
    let means: Vec<f64> = importance.column_iter().map(|c| c.mean()).collect();
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|a, b| means[*b].total_cmp(&means[*a]));
    order
}

/// Features sorted by cross-species importance: `feature, group, mean`,
/// then one column per species.
pub fn write_global_importance<W: Write>(out: W, attr: &ShapAttribution) -> csv::Result<()> {
    let imp = global_importance(attr);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "feature".to_string(),
        "group".to_string(),
        "mean".to_string(),
    ];
    header.extend(attr.species.iter().cloned());
    w.write_record(&header)?;
    for i in feature_order(&imp) {
        let mut rec = vec![
            attr.feature_names[i].clone(),
            attr.feature_groups[i].clone(),
            imp.column(i).mean().to_string(),
        ];
        rec.extend(imp.column(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-species share of importance carried by each group (rows sum to 1;
/// a species with zero total importance gets a zero row). Groups appear in
/// order of first use.
pub fn group_importance(attr: &ShapAttribution) -> Result<(Vec<String>, DMatrix<f64>)> {
    if attr.feature_groups.len() != attr.feature_names.len() {
        return Err(Error::Config("every feature needs a group".into()));
    }
    if let Some(i) = attr.feature_groups.iter().position(|g| g.trim().is_empty()) {
        return Err(Error::Config(format!(
            "feature `{}` has no group",
            attr.feature_names[i]
        )));
    }
    let mut groups: Vec<String> = Vec::new();
    for g in &attr.feature_groups {
        if !groups.contains(g) {
            groups.push(g.clone());
        }
    }
    let imp = global_importance(attr);
    let mut out = DMatrix::zeros(imp.nrows(), groups.len());
    for (i, g) in attr.feature_groups.iter().enumerate() {
        let k = groups
            .iter()
            .position(|x| x == g)
            .expect("group collected above");
        for j in 0..imp.nrows() {
            out[(j, k)] += imp[(j, i)];
        }
    }
    for j in 0..out.nrows() {
        let total = out.row(j).sum();
        if total > 0.0 {
            out.row_mut(j).scale_mut(1.0 / total);
        }
    }
    Ok((groups, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalRecord {
    pub site_id: String,
    pub x: f64,
    pub y: f64,
    pub feature: String,
    pub phi: f64,
}

/// Signed contributions for one species at every site with coordinates;
/// returns the records and the number of sites skipped for lack of them.
pub fn export_local_attribution(
    attr: &ShapAttribution,
    species: &str,
    coordinates: &HashMap<String, (f64, f64)>,
) -> Result<(Vec<LocalRecord>, usize)> {
    let j = attr
        .species
        .iter()
        .position(|s| s == species)
        .ok_or_else(|| Error::Validation(format!("species `{species}` was not explained")))?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for (s, site) in attr.site_ids.iter().enumerate() {
        let Some(&(x, y)) = coordinates.get(site) else {
            skipped += 1;
            continue;
        };
        for (i, feature) in attr.feature_names.iter().enumerate() {
            records.push(LocalRecord {
                site_id: site.clone(),
                x,
                y,
                feature: feature.clone(),
                phi: attr.values[j][(s, i)],
            });
        }
    }
    Ok((records, skipped))
}

pub fn write_local_records<W: Write>(out: W, records: &[LocalRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format `species, site_id, feature, phi` table.
pub fn write_attribution_table<W: Write>(out: W, attr: &ShapAttribution) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["species", "site_id", "feature", "phi"])?;
    for (j, sp) in attr.species.iter().enumerate() {
        for (s, site) in attr.site_ids.iter().enumerate() {
            for (i, f) in attr.feature_names.iter().enumerate() {
                w.write_record([sp, site, f, &attr.values[j][(s, i)].to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSidecar {
    pub base_values: BTreeMap<String, f64>,
    pub feature_groups: BTreeMap<String, String>,
}

impl ShapAttribution {
    pub fn sidecar(&self) -> AttributionSidecar {
        AttributionSidecar {
            base_values: self
                .species
                .iter()
                .cloned()
                .zip(self.base_values.iter().copied())
                .collect(),
            feature_groups: self
                .feature_names
                .iter()
                .cloned()
                .zip(self.feature_groups.iter().cloned())
                .collect(),
        }
    }
}

/// `species` then one share column per group.
pub fn write_group_importance<W: Write>(out: W, attr: &ShapAttribution) -> Result<()> {
    let (groups, shares) = group_importance(attr)?;
    let to_err = |e: csv::Error| Error::Csv {
        path: "group importance".into(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["species".to_string()];
    header.extend(groups);
    w.write_record(&header).map_err(to_err)?;
    for (j, sp) in attr.species.iter().enumerate() {
        let mut rec = vec![sp.clone()];
        rec.extend(shares.row(j).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io("group importance", e))
}

#[derive(Debug, Deserialize)]
struct PhiRecord {
    species: String,
    site_id: String,
    feature: String,
    phi: f64,
}

fn first_seen(list: &mut Vec<String>, index: &mut HashMap<String, usize>, key: &str) -> usize {
    if let Some(&k) = index.get(key) {
        return k;
    }
    list.push(key.to_string());
    index.insert(key.to_string(), list.len() - 1);
    list.len() - 1
}

/// Reads back `attribution.csv` and `attribution.json` from a directory
/// written by the explain step. Predictions are rebuilt from efficiency.
pub fn read_attribution(dir: &std::path::Path) -> Result<ShapAttribution> {
    let table = dir.join("attribution.csv");
    let side = dir.join("attribution.json");
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: AttributionSidecar =
        serde_json::from_str(&text).map_err(|e| Error::json(side.display().to_string(), e))?;
    let csv_err = |e: csv::Error| Error::Csv {
        path: table.clone(),
        message: e.to_string(),
    };
    let mut rdr = csv::Reader::from_path(&table).map_err(csv_err)?;
    let (mut species, mut sites, mut features) = (Vec::new(), Vec::new(), Vec::new());
    let (mut si, mut ti, mut fi) = (HashMap::new(), HashMap::new(), HashMap::new());
    let mut cells = Vec::new();
    for rec in rdr.deserialize::<PhiRecord>() {
        let rec = rec.map_err(csv_err)?;
        let j = first_seen(&mut species, &mut si, &rec.species);
        let s = first_seen(&mut sites, &mut ti, &rec.site_id);
        let i = first_seen(&mut features, &mut fi, &rec.feature);
        cells.push((j, s, i, rec.phi));
    }
    let (m, n, p) = (species.len(), sites.len(), features.len());
    if cells.len() != m * n * p || m == 0 {
        return Err(Error::Validation(format!(
            "{}: expected a full species x site x feature table, found {} rows",
            table.display(),
            cells.len()
        )));
    }
    let mut values = vec![DMatrix::zeros(n, p); m];
    for (j, s, i, phi) in cells {
        values[j][(s, i)] = phi;
    }
    let lookup = |map: &BTreeMap<String, f64>, key: &String| {
        map.get(key).copied().ok_or_else(|| {
            Error::Validation(format!("{}: no base value for `{key}`", side.display()))
        })
    };
    let base_values = species
        .iter()
        .map(|sp| lookup(&sidecar.base_values, sp))
        .collect::<Result<Vec<_>>>()?;
    let feature_groups = features
        .iter()
        .map(|f| {
            sidecar.feature_groups.get(f).cloned().ok_or_else(|| {
                Error::Validation(format!("{}: no group for feature `{f}`", side.display()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let predictions = DMatrix::from_fn(n, m, |s, j| base_values[j] + values[j].row(s).sum());
    Ok(ShapAttribution {
        species,
        site_ids: sites,
        feature_names: features,
        feature_groups,
        base_values,
        values,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|i| format!("x{i}")).collect()
    }

    fn explain<F>(
        f: &F,
        x: &DMatrix<f64>,
        bg: &DMatrix<f64>,
        m: usize,
        mode: ShapMode,
    ) -> ShapAttribution
    where
        F: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>> + Sync,
    {
        let p = x.ncols();
        let ids: Vec<String> = (0..x.nrows()).map(|i| i.to_string()).collect();
        let sp: Vec<String> = (0..m).map(|j| format!("s{j}")).collect();
        shap_explain(f, x, &ids, bg, &names(p), &names(p), &sp, mode, 7).unwrap()
    }

    fn additive(rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_fn(rows.nrows(), 1, |r, _| {
            rows[(r, 0)] + rows[(r, 1)]
        }))
    }

    #[test]
    fn additive_model_gives_differences() {
        let x = DMatrix::from_row_slice(1, 2, &[3.0, -1.0]);
        let bg = DMatrix::from_row_slice(1, 2, &[0.5, 2.0]);
        let a = explain(&additive, &x, &bg, 1, ShapMode::Exact);
        assert!((a.values[0][(0, 0)] - 2.5).abs() < 1e-12);
        assert!((a.values[0][(0, 1)] + 3.0).abs() < 1e-12);
        assert!((a.base_values[0] - 2.5).abs() < 1e-12);
    }

    fn interacting(rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_fn(rows.nrows(), 2, |r, j| {
            let v: Vec<f64> = rows.row(r).iter().copied().collect();
            let z = if j == 0 {
                v[0] * v[1] + (v[2] * 2.0).sin() - 0.3 * v[4] * v[4] + v[1] * v[4] * v[5]
            } else {
                (v[0] - v[2]).tanh() + v[5]
            };
            crate::numeric::normal_cdf(z)
        }))
    }

    fn permutation_oracle<F>(f: &F, x: &[f64], bg: &DMatrix<f64>, out: usize) -> Vec<f64>
    where
        F: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>,
    {
        let p = x.len();
        let value = |set: &[bool]| {
            let rows =
                DMatrix::from_fn(bg.nrows(), p, |b, k| if set[k] { x[k] } else { bg[(b, k)] });
            f(&rows).unwrap().column(out).mean()
        };
        fn perms(items: Vec<usize>) -> Vec<Vec<usize>> {
            if items.len() <= 1 {
                return vec![items];
            }
            let mut all = Vec::new();
            for (k, &first) in items.iter().enumerate() {
                let mut rest = items.clone();
                rest.remove(k);
                for mut tail in perms(rest) {
                    tail.insert(0, first);
                    all.push(tail);
                }
            }
            all
        }
        let orders = perms((0..p).collect());
        let mut phi = vec![0.0; p];
        for order in &orders {
            let mut set = vec![false; p];
            let mut prev = value(&set);
            for &i in order {
                set[i] = true;
                let now = value(&set);
                phi[i] += now - prev;
                prev = now;
            }
        }
        phi.iter().map(|v| v / orders.len() as f64).collect()
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn exact_matches_permutation_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_rows(&mut rng, 2, 6);
        let bg = random_rows(&mut rng, 5, 6);
        let a = explain(&interacting, &x, &bg, 2, ShapMode::Exact);
        for s in 0..2 {
            let xs: Vec<f64> = x.row(s).iter().copied().collect();
            for j in 0..2 {
                let oracle = permutation_oracle(&interacting, &xs, &bg, j);
                for i in 0..6 {
                    assert!((a.values[j][(s, i)] - oracle[i]).abs() < 1e-8);
                }
            }
        }
        assert!(a.max_efficiency_gap() < 1e-12);
        // x3 is unused by both outputs
        assert!(a
            .values
            .iter()
            .all(|v| v.column(3).iter().all(|p| p.abs() < 1e-12)));
    }

    #[test]
    fn symmetric_features_share_credit() {
        let f = |rows: &DMatrix<f64>| {
            Ok(DMatrix::from_fn(rows.nrows(), 1, |r, _| {
                (rows[(r, 0)] * rows[(r, 1)]).exp() + rows[(r, 2)]
            }))
        };
        let x = DMatrix::from_row_slice(1, 3, &[0.7, 0.7, 0.1]);
        let bg = DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 1.0, -0.4, -0.4, 0.3]);
        let a = explain(&f, &x, &bg, 1, ShapMode::Exact);
        assert!((a.values[0][(0, 0)] - a.values[0][(0, 1)]).abs() < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn exact_mode_is_locally_accurate(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_rows(&mut rng, 1, 6);
            let bg = random_rows(&mut rng, 3, 6);
            let a = explain(&interacting, &x, &bg, 2, ShapMode::Exact);
            prop_assert!(a.max_efficiency_gap() < 1e-6);
        }
    }

    fn eight_features(rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_fn(rows.nrows(), 1, |r, _| {
            let v: Vec<f64> = rows.row(r).iter().copied().collect();
            crate::numeric::sigmoid(
                v[0] * v[1] - v[2] + 0.5 * v[3] * v[4] * v[5] + v[6].sin() - 0.2 * v[7],
            )
        }))
    }

    #[test]
    fn sampled_mode_converges_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_rows(&mut rng, 3, 8);
        let bg = random_rows(&mut rng, 10, 8);
        let exact = explain(&eight_features, &x, &bg, 1, ShapMode::Exact);
        let mut errors = Vec::new();
        for n in [32, 256, 2048, 16384] {
            let s = explain(
                &eight_features,
                &x,
                &bg,
                1,
                ShapMode::Sampled { n_samples: n },
            );
            assert!(s.max_efficiency_gap() < 1e-9);
            errors.push((&s.values[0] - &exact.values[0]).abs().max());
        }
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
        assert!(errors[3] < 0.01, "{errors:?}");
    }

    #[test]
    fn too_few_samples_is_a_configuration_error() {
        let x = DMatrix::zeros(1, 4);
        let r = shap_explain(
            &|r: &DMatrix<f64>| Ok(DMatrix::zeros(r.nrows(), 1)),
            &x,
            &["a".into()],
            &x,
            &names(4),
            &names(4),
            &["s".into()],
            ShapMode::Sampled { n_samples: 5 },
            0,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    fn attribution(values: Vec<DMatrix<f64>>, groups: &[&str]) -> ShapAttribution {
        let p = values[0].ncols();
        let n = values[0].nrows();
        ShapAttribution {
            species: (0..values.len()).map(|j| format!("s{j}")).collect(),
            site_ids: (0..n).map(|i| format!("site{i}")).collect(),
            feature_names: names(p),
            feature_groups: groups.iter().map(|g| g.to_string()).collect(),
            base_values: vec![0.0; values.len()],
            predictions: DMatrix::zeros(n, values.len()),
            values,
        }
    }

    #[test]
    fn importance_summaries() {
        let a = attribution(
            vec![DMatrix::from_row_slice(2, 2, &[0.2, 3.0, -0.2, -3.0])],
            &["g", "h"],
        );
        let imp = global_importance(&a);
        assert!((imp[(0, 0)] - 0.2).abs() < 1e-15);
        assert_eq!(feature_order(&imp), vec![1, 0]);
        let zero = attribution(vec![DMatrix::zeros(2, 2)], &["g", "h"]);
        assert_eq!(global_importance(&zero), DMatrix::zeros(1, 2));

        let b = attribution(
            vec![DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0])],
            &["t", "t", "p"],
        );
        let (groups, share) = group_importance(&b).unwrap();
        assert_eq!(groups, vec!["t", "p"]);
        assert!((share[(0, 0)] - 0.75).abs() < 1e-15 && (share[(0, 1)] - 0.25).abs() < 1e-15);
        let one = attribution(
            vec![
                DMatrix::from_row_slice(1, 2, &[1.0, 5.0]),
                DMatrix::from_row_slice(1, 2, &[0.1, 0.0]),
            ],
            &["g", "g"],
        );
        let (_, share) = group_importance(&one).unwrap();
        assert_eq!(share, DMatrix::from_element(2, 1, 1.0));
        let bad = attribution(vec![DMatrix::zeros(1, 2)], &["g", " "]);
        assert!(group_importance(&bad).is_err());
    }

    #[test]
    fn local_records() {
        let a = attribution(vec![DMatrix::from_row_slice(1, 1, &[-0.3])], &["g"]);
        let coords: HashMap<String, (f64, f64)> = [("site0".to_string(), (1.0, 2.0))].into();
        let (recs, skipped) = export_local_attribution(&a, "s0", &coords).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].phi, -0.3);

        let b = attribution(vec![DMatrix::from_element(3, 4, 0.1)], &["g"; 4]);
        let coords: HashMap<String, (f64, f64)> =
            (0..3).map(|i| (format!("site{i}"), (0.0, 0.0))).collect();
        assert_eq!(
            export_local_attribution(&b, "s0", &coords).unwrap().0.len(),
            12
        );
        let partial: HashMap<String, (f64, f64)> = [("site1".to_string(), (0.0, 0.0))].into();
        let (recs, skipped) = export_local_attribution(&b, "s0", &partial).unwrap();
        assert_eq!((recs.len(), skipped), (4, 2));
    }

    #[test]
    fn background_is_seeded_subsample() {
        assert_eq!(background_rows(5, 100, 0), vec![0, 1, 2, 3, 4]);
        let a = background_rows(1000, 100, 9);
        assert_eq!(a.len(), 100);
        assert_eq!(a, background_rows(1000, 100, 9));
        assert_ne!(a, background_rows(1000, 100, 10));
    }

    #[test]
    fn attribution_directory_round_trips() {
        let f = |rows: &DMatrix<f64>| {
            Ok(DMatrix::from_fn(rows.nrows(), 2, |r, j| {
                (rows[(r, 0)] * (j + 1) as f64 + rows[(r, 1)] * rows[(r, 2)]).tanh()
            }))
        };
        let x = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 / 7.0 - 0.5);
        let bg = DMatrix::from_fn(5, 3, |i, j| ((i + 2 * j) % 5) as f64 / 4.0);
        let attr = explain(&f, &x, &bg, 2, ShapMode::Exact);
        let dir = tempfile::tempdir().unwrap();
        write_attribution_table(
            std::fs::File::create(dir.path().join("attribution.csv")).unwrap(),
            &attr,
        )
        .unwrap();
        std::fs::write(
            dir.path().join("attribution.json"),
            serde_json::to_string(&attr.sidecar()).unwrap(),
        )
        .unwrap();
        let back = read_attribution(dir.path()).unwrap();
        assert_eq!(back.values, attr.values);
        assert_eq!(back.feature_groups, attr.feature_groups);
        assert_eq!(back.base_values, attr.base_values);
        assert!(
            (back.predictions.clone() - attr.predictions.clone())
                .abs()
                .max()
                < 1e-9
        );
    }
}
