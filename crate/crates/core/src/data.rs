//! Tabular ingestion, the typed feature schema, and covariate preprocessing.
//!
//! Raw covariates keep one column per schema column. Numerical and ordinal
//! columns hold their numeric value; categorical columns hold the index of
//! the level in the schema's level list. A [`Preprocessor`] fitted on the
//! training rows turns a raw row into the dense model input.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnKind {
    Numerical,
    Ordinal,
    Categorical { levels: Vec<String> },
}

/// One covariate column. `group` is an optional label used to aggregate
/// attributions (e.g. "precipitation", "landcover").
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawColumn", into = "RawColumn")]
pub struct FeatureColumn {
    pub name: String,
    pub kind: ColumnKind,
    pub group: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawColumn {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    levels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<String>,
}

impl TryFrom<RawColumn> for FeatureColumn {
    type Error = String;

    fn try_from(raw: RawColumn) -> std::result::Result<Self, String> {
        let kind = match (raw.kind.as_str(), raw.levels) {
            ("numerical", None) => ColumnKind::Numerical,
            ("ordinal", None) => ColumnKind::Ordinal,
            ("categorical", Some(levels)) => ColumnKind::Categorical { levels },
            ("categorical", None) => {
                return Err(format!("column `{}`: categorical without levels", raw.name))
            }
            ("numerical" | "ordinal", Some(_)) => {
                return Err(format!(
                    "column `{}`: levels given for non-categorical kind",
                    raw.name
                ))
            }
            (other, _) => return Err(format!("column `{}`: unknown kind `{other}`", raw.name)),
        };
        Ok(FeatureColumn {
            name: raw.name,
            kind,
            group: raw.group,
        })
    }
}

impl From<FeatureColumn> for RawColumn {
    fn from(col: FeatureColumn) -> Self {
        let (kind, levels) = match col.kind {
            ColumnKind::Numerical => ("numerical", None),
            ColumnKind::Ordinal => ("ordinal", None),
            ColumnKind::Categorical { levels } => ("categorical", Some(levels)),
        };
        RawColumn {
            name: col.name,
            kind: kind.to_string(),
            levels,
            group: col.group,
        }
    }
}

impl FeatureColumn {
    pub fn numerical(name: &str) -> Self {
        FeatureColumn {
            name: name.to_string(),
            kind: ColumnKind::Numerical,
            group: None,
        }
    }

    pub fn categorical(name: &str, levels: &[&str]) -> Self {
        FeatureColumn {
            name: name.to_string(),
            kind: ColumnKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
            },
            group: None,
        }
    }

    pub fn with_group(mut self, group: &str) -> Self {
        self.group = Some(group.to_string());
        self
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ColumnKind::Categorical { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub columns: Vec<FeatureColumn>,
}

impl FeatureSchema {
    pub fn new(columns: Vec<FeatureColumn>) -> Result<Self> {
        let schema = FeatureSchema { columns };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for col in &self.columns {
            if col.name.is_empty() || col.name == "site_id" {
                return Err(Error::Schema(format!("invalid column name `{}`", col.name)));
            }
            if !seen.insert(col.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column `{}`", col.name)));
            }
            if let ColumnKind::Categorical { levels } = &col.kind {
                if levels.is_empty() {
                    return Err(Error::Schema(format!(
                        "column `{}`: categorical level list is empty",
                        col.name
                    )));
                }
                let mut lv = HashSet::new();
                for l in levels {
                    if !lv.insert(l.as_str()) {
                        return Err(Error::Schema(format!(
                            "column `{}`: duplicate level `{l}`",
                            col.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let schema: FeatureSchema =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Group label for each column, falling back to the column name.
    pub fn group_map(&self) -> HashMap<String, String> {
        self.columns
            .iter()
            .map(|c| {
                (
                    c.name.clone(),
                    c.group.clone().unwrap_or_else(|| c.name.clone()),
                )
            })
            .collect()
    }
}

/// Site-by-covariate raw table plus the aligned site-by-species 0/1 matrix.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub site_ids: Vec<String>,
    pub covariates: DMatrix<f64>,
    pub community: DMatrix<f64>,
    pub species_names: Vec<String>,
    pub schema: FeatureSchema,
}

impl Dataset {
    pub fn new(
        site_ids: Vec<String>,
        covariates: DMatrix<f64>,
        community: DMatrix<f64>,
        species_names: Vec<String>,
        schema: FeatureSchema,
    ) -> Result<Self> {
        schema.validate()?;
        let n = site_ids.len();
        if covariates.nrows() != n {
            return Err(Error::shape("covariate rows", n, covariates.nrows()));
        }
        if community.nrows() != n {
            return Err(Error::shape("community rows", n, community.nrows()));
        }
        if covariates.ncols() != schema.len() {
            return Err(Error::shape(
                "covariate columns",
                schema.len(),
                covariates.ncols(),
            ));
        }
        if community.ncols() != species_names.len() {
            return Err(Error::shape(
                "community columns",
                species_names.len(),
                community.ncols(),
            ));
        }
        for i in 0..n {
            for j in 0..community.ncols() {
                let v = community[(i, j)];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Validation(format!(
                        "community cell at row {} column `{}` is {v}, expected 0 or 1",
                        i + 1,
                        species_names[j]
                    )));
                }
            }
        }
        Ok(Dataset {
            site_ids,
            covariates,
            community,
            species_names,
            schema,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.site_ids.len()
    }

    pub fn n_species(&self) -> usize {
        self.species_names.len()
    }

    /// Presence counts per species over the given rows.
    pub fn presences(&self, rows: &[usize]) -> Vec<usize> {
        (0..self.n_species())
            .map(|j| {
                rows.iter()
                    .filter(|&&i| self.community[(i, j)] > 0.5)
                    .count()
            })
            .collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            site_ids: rows.iter().map(|&i| self.site_ids[i].clone()).collect(),
            covariates: self.covariates.select_rows(rows),
            community: self.community.select_rows(rows),
            species_names: self.species_names.clone(),
            schema: self.schema.clone(),
        }
    }
}

fn write_table(
    path: &Path,
    header: Vec<String>,
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn write_community(&self, path: &Path) -> Result<()> {
        let mut header = vec!["site_id".to_string()];
        header.extend(self.species_names.iter().cloned());
        write_table(
            path,
            header,
            (0..self.n_sites()).map(|i| {
                let mut r = vec![self.site_ids[i].clone()];
                r.extend(self.community.row(i).iter().map(|v| (*v as u8).to_string()));
                r
            }),
        )
    }

    /// Categorical cells are written as their level names.
    pub fn write_covariates(&self, path: &Path) -> Result<()> {
        let mut header = vec!["site_id".to_string()];
        header.extend(self.schema.names());
        write_table(
            path,
            header,
            (0..self.n_sites()).map(|i| {
                let mut r = vec![self.site_ids[i].clone()];
                for (c, col) in self.schema.columns.iter().enumerate() {
                    let v = self.covariates[(i, c)];
                    r.push(match &col.kind {
                        ColumnKind::Categorical { levels } => levels[v as usize].clone(),
                        _ => v.to_string(),
                    });
                }
                r
            }),
        )
    }
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(String::from)
        .collect();
    if headers.first().map(String::as_str) != Some("site_id") {
        return Err(Error::Validation(format!(
            "{}: first column must be `site_id`",
            path.display()
        )));
    }
    let records = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(csv_err)?;
    Ok((headers, records))
}

/// Community CSV: `site_id` then one 0/1 column per species.
pub fn load_community(path: &Path) -> Result<(Vec<String>, Vec<String>, DMatrix<f64>)> {
    let (headers, records) = read_csv(path)?;
    let species: Vec<String> = headers[1..].to_vec();
    let mut ids = Vec::with_capacity(records.len());
    let mut values = DMatrix::zeros(records.len(), species.len());
    for (r, rec) in records.iter().enumerate() {
        ids.push(rec[0].to_string());
        for (j, name) in species.iter().enumerate() {
            values[(r, j)] = match &rec[j + 1] {
                "0" => 0.0,
                "1" => 1.0,
                other => {
                    return Err(Error::Validation(format!(
                    "{}: community cell at row {} column `{name}` is `{other}`, expected 0 or 1",
                    path.display(),
                    r + 2
                )))
                }
            };
        }
    }
    Ok((ids, species, values))
}

/// Covariate CSV: `site_id` then one column per schema column (any order).
/// With `strict_levels` an unknown categorical level is a schema error;
/// otherwise it is stored as NaN and later mapped to an all-zero block.
pub fn load_covariates(
    path: &Path,
    schema: &FeatureSchema,
    strict_levels: bool,
) -> Result<(Vec<String>, DMatrix<f64>)> {
    let (headers, records) = read_csv(path)?;
    let mut position = Vec::with_capacity(schema.len());
    for col in &schema.columns {
        match headers.iter().position(|h| h == &col.name) {
            Some(p) => position.push(p),
            None => {
                return Err(Error::Schema(format!(
                    "column `{}` missing from {}",
                    col.name,
                    path.display()
                )))
            }
        }
    }
    if let Some(extra) = headers[1..]
        .iter()
        .find(|h| !schema.columns.iter().any(|c| &&c.name == h))
    {
        return Err(Error::Schema(format!(
            "column `{extra}` in {} is not declared in the schema",
            path.display()
        )));
    }
    let mut ids = Vec::with_capacity(records.len());
    let mut values = DMatrix::zeros(records.len(), schema.len());
    for (r, rec) in records.iter().enumerate() {
        ids.push(rec[0].to_string());
        for (c, col) in schema.columns.iter().enumerate() {
            let cell = &rec[position[c]];
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                return Err(Error::Validation(format!(
                    "{}: missing value at row {} column `{}`",
                    path.display(),
                    r + 2,
                    col.name
                )));
            }
            values[(r, c)] = match &col.kind {
                ColumnKind::Numerical | ColumnKind::Ordinal => cell
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Error::Validation(format!(
                            "{}: non-numeric value `{cell}` at row {} column `{}`",
                            path.display(),
                            r + 2,
                            col.name
                        ))
                    })?,
                ColumnKind::Categorical { levels } => match levels.iter().position(|l| l == cell) {
                    Some(k) => k as f64,
                    None if strict_levels => {
                        return Err(Error::Schema(format!(
                            "unknown level `{cell}` for categorical column `{}` at row {}",
                            col.name,
                            r + 2
                        )))
                    }
                    None => f64::NAN,
                },
            };
        }
    }
    Ok((ids, values))
}

/// Site coordinates from a `site_id,x,y` table.
pub fn load_coordinates(path: &Path) -> Result<HashMap<String, (f64, f64)>> {
    let (headers, records) = read_csv(path)?;
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Schema(format!("column `{name}` missing from {}", path.display()))
        })
    };
    let (cx, cy) = (col("x")?, col("y")?);
    let mut out = HashMap::with_capacity(records.len());
    for (r, rec) in records.iter().enumerate() {
        let parse = |c: usize| {
            rec[c].parse::<f64>().map_err(|_| {
                Error::Validation(format!(
                    "{}: non-numeric coordinate `{}` at row {}",
                    path.display(),
                    &rec[c],
                    r + 2
                ))
            })
        };
        out.insert(rec[0].to_string(), (parse(cx)?, parse(cy)?));
    }
    Ok(out)
}

/// Loads and aligns the community and covariate files. Rows follow the
/// covariate file order; community rows are matched by `site_id`.
pub fn load_dataset(
    community_path: &Path,
    covariates_path: &Path,
    schema_path: &Path,
) -> Result<Dataset> {
    let schema = FeatureSchema::load(schema_path)?;
    let (cov_ids, covariates) = load_covariates(covariates_path, &schema, true)?;
    let (com_ids, species, community) = load_community(community_path)?;
    let mut index = HashMap::with_capacity(com_ids.len());
    for (r, id) in com_ids.iter().enumerate() {
        if index.insert(id.as_str(), r).is_some() {
            return Err(Error::Validation(format!(
                "duplicate site_id `{id}` in community file"
            )));
        }
    }
    let mut seen = HashSet::new();
    let mut rows = Vec::with_capacity(cov_ids.len());
    for id in &cov_ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate site_id `{id}` in covariates file"
            )));
        }
        rows.push(
            *index
                .get(id.as_str())
                .ok_or_else(|| Error::Alignment(id.clone()))?,
        );
    }
    if let Some(id) = com_ids.iter().find(|id| !seen.contains(id.as_str())) {
        return Err(Error::Alignment(id.clone()));
    }
    let community = community.select_rows(&rows);
    Dataset::new(cov_ids, covariates, community, species, schema)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessMode {
    #[default]
    EndToEnd,
    Vif,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessOptions {
    pub mode: PreprocessMode,
    pub vif_threshold: f64,
    pub pca_variance: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            mode: PreprocessMode::EndToEnd,
            vif_threshold: 10.0,
            pca_variance: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    /// Column means of the expanded standardized training matrix.
    pub center: Vec<f64>,
    /// Row-major `expanded_width x n_components`.
    pub loadings: Vec<Vec<f64>>,
    pub explained: Vec<f64>,
}

/// Fitted preprocessing state. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub mode: PreprocessMode,
    pub schema: FeatureSchema,
    /// Per schema column; `None` for categorical columns.
    pub scalers: Vec<Option<Scaler>>,
    /// Per schema column; false for numerical columns removed by VIF.
    pub retained: Vec<bool>,
    /// Set when VIF fell back to the pairwise-correlation rule on a singular design.
    pub vif_fallback: bool,
    pub pca: Option<PcaProjection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformedRow {
    pub values: Vec<f64>,
    /// A categorical value outside the schema levels was mapped to zeros.
    pub unseen_level: bool,
}

impl Preprocessor {
    /// Width after standardization and one-hot expansion, before PCA.
    pub fn expanded_width(&self) -> usize {
        self.schema
            .columns
            .iter()
            .zip(&self.retained)
            .filter(|(_, keep)| **keep)
            .map(|(c, _)| match &c.kind {
                ColumnKind::Categorical { levels } => levels.len(),
                _ => 1,
            })
            .sum()
    }

    pub fn width(&self) -> usize {
        match &self.pca {
            Some(p) => p.explained.len(),
            None => self.expanded_width(),
        }
    }

    pub fn feature_names(&self) -> Vec<String> {
        if let Some(p) = &self.pca {
            return (1..=p.explained.len()).map(|k| format!("PC{k}")).collect();
        }
        let mut names = Vec::new();
        for (col, keep) in self.schema.columns.iter().zip(&self.retained) {
            if !keep {
                continue;
            }
            match &col.kind {
                ColumnKind::Categorical { levels } => {
                    names.extend(levels.iter().map(|l| format!("{}={l}", col.name)));
                }
                _ => names.push(col.name.clone()),
            }
        }
        names
    }

    fn expand(&self, raw: &[f64], out: &mut Vec<f64>) -> bool {
        let mut unseen = false;
        for (c, col) in self.schema.columns.iter().enumerate() {
            if !self.retained[c] {
                continue;
            }
            match &col.kind {
                ColumnKind::Categorical { levels } => {
                    let v = raw[c];
                    let start = out.len();
                    out.extend(std::iter::repeat_n(0.0, levels.len()));
                    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && (v as usize) < levels.len()
                    {
                        out[start + v as usize] = 1.0;
                    } else {
                        unseen = true;
                    }
                }
                _ => {
                    let s = self.scalers[c].expect("numerical column without scaler");
                    out.push((raw[c] - s.mean) / s.sd);
                }
            }
        }
        unseen
    }

    /// Maps one raw covariate row to the model input.
    pub fn transform(&self, raw: &[f64]) -> Result<TransformedRow> {
        if raw.len() != self.schema.len() {
            return Err(Error::shape(
                "raw covariate row",
                self.schema.len(),
                raw.len(),
            ));
        }
        let mut expanded = Vec::with_capacity(self.expanded_width());
        let unseen = self.expand(raw, &mut expanded);
        let values = match &self.pca {
            None => expanded,
            Some(p) => {
                let k = p.explained.len();
                let mut out = vec![0.0; k];
                for (r, (&v, c)) in expanded.iter().zip(&p.center).enumerate() {
                    let centered = v - c;
                    for (o, l) in out.iter_mut().zip(&p.loadings[r]) {
                        *o += centered * l;
                    }
                }
                out
            }
        };
        Ok(TransformedRow {
            values,
            unseen_level: unseen,
        })
    }

    /// Transforms every row; returns the matrix and the number of rows that hit an unseen level.
    pub fn transform_matrix(&self, raw: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
        let mut out = DMatrix::zeros(raw.nrows(), self.width());
        let mut unseen = 0;
        let mut row = vec![0.0; raw.ncols()];
        for i in 0..raw.nrows() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = raw[(i, c)];
            }
            let t = self.transform(&row)?;
            unseen += t.unseen_level as usize;
            for (k, v) in t.values.iter().enumerate() {
                out[(i, k)] = *v;
            }
        }
        Ok((out, unseen))
    }
}

/// Variance inflation factor of every column, each from an OLS fit (with
/// intercept) of that column on the others. `None` when a regression is singular.
pub fn variance_inflation(z: &DMatrix<f64>) -> Option<Vec<f64>> {
    let (n, q) = z.shape();
    let mut vifs = Vec::with_capacity(q);
    for j in 0..q {
        if q == 1 {
            vifs.push(1.0);
            continue;
        }
        let mut design = DMatrix::from_element(n, q, 1.0);
        let mut c = 1;
        for k in 0..q {
            if k != j {
                design.set_column(c, &z.column(k));
                c += 1;
            }
        }
        let target: DVector<f64> = z.column(j).into_owned();
        let gram = design.transpose() * &design;
        let chol = gram.cholesky()?;
        let coef = chol.solve(&(design.transpose() * &target));
        let resid = &target - &design * coef;
        let mean = target.mean();
        let ss_tot: f64 = target.iter().map(|v| (v - mean).powi(2)).sum();
        let ss_res = resid.norm_squared();
        if ss_res <= 1e-12 * ss_tot {
            vifs.push(f64::INFINITY);
        } else {
            vifs.push(ss_tot / ss_res);
        }
    }
    Some(vifs)
}

fn pairwise_drop(z: &DMatrix<f64>) -> usize {
    let q = z.ncols();
    let n = z.nrows() as f64;
    let corr = |a: usize, b: usize| -> f64 {
        let (ca, cb) = (z.column(a), z.column(b));
        let (ma, mb) = (ca.mean(), cb.mean());
        let cov: f64 = ca
            .iter()
            .zip(cb.iter())
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / n;
        let sa = (ca.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
        let sb = (cb.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n).sqrt();
        cov / (sa * sb)
    };
    let mut best = (0, 1, f64::NEG_INFINITY);
    for a in 0..q {
        for b in (a + 1)..q {
            let r = corr(a, b).abs();
            if r > best.2 {
                best = (a, b, r);
            }
        }
    }
    best.1
}

/// Fits standardization, one-hot maps and the optional VIF / PCA stage on `train_rows`.
pub fn fit_preprocessor(
    d: &Dataset,
    opts: &PreprocessOptions,
    train_rows: &[usize],
) -> Result<Preprocessor> {
    if train_rows.is_empty() {
        return Err(Error::Config(
            "preprocessor needs at least one training row".into(),
        ));
    }
    match opts.mode {
        PreprocessMode::Vif if opts.vif_threshold <= 1.0 => {
            return Err(Error::Config(format!(
                "vif_threshold must exceed 1, got {}",
                opts.vif_threshold
            )))
        }
        PreprocessMode::Pca if !(opts.pca_variance > 0.0 && opts.pca_variance <= 1.0) => {
            return Err(Error::Config(format!(
                "pca_variance must be in (0, 1], got {}",
                opts.pca_variance
            )))
        }
        _ => {}
    }
    let n = train_rows.len() as f64;
    let mut scalers = Vec::with_capacity(d.schema.len());
    for (c, col) in d.schema.columns.iter().enumerate() {
        if col.is_categorical() {
            scalers.push(None);
            continue;
        }
        let mean = train_rows
            .iter()
            .map(|&i| d.covariates[(i, c)])
            .sum::<f64>()
            / n;
        let var = train_rows
            .iter()
            .map(|&i| (d.covariates[(i, c)] - mean).powi(2))
            .sum::<f64>()
            / n;
        if var.sqrt() < 1e-12 {
            return Err(Error::ZeroVariance(col.name.clone()));
        }
        scalers.push(Some(Scaler {
            mean,
            sd: var.sqrt(),
        }));
    }
    let mut pre = Preprocessor {
        mode: opts.mode,
        schema: d.schema.clone(),
        scalers,
        retained: vec![true; d.schema.len()],
        vif_fallback: false,
        pca: None,
    };

    if opts.mode == PreprocessMode::Vif {
        let mut active: Vec<usize> = (0..d.schema.len())
            .filter(|&c| pre.scalers[c].is_some())
            .collect();
        while active.len() > 1 {
            let mut z = DMatrix::zeros(train_rows.len(), active.len());
            for (k, &c) in active.iter().enumerate() {
                let s = pre.scalers[c].unwrap();
                for (r, &i) in train_rows.iter().enumerate() {
                    z[(r, k)] = (d.covariates[(i, c)] - s.mean) / s.sd;
                }
            }
            let drop = match variance_inflation(&z) {
                Some(vifs) => {
                    let (k, v) =
                        vifs.iter()
                            .enumerate()
                            .fold(
                                (0, f64::NEG_INFINITY),
                                |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
                            );
                    if v <= opts.vif_threshold {
                        break;
                    }
                    k
                }
                None => {
                    pre.vif_fallback = true;
                    pairwise_drop(&z)
                }
            };
            pre.retained[active[drop]] = false;
            active.remove(drop);
        }
    }

    if opts.mode == PreprocessMode::Pca {
        let width = pre.expanded_width();
        let mut x = DMatrix::zeros(train_rows.len(), width);
        let mut buf = Vec::with_capacity(width);
        for (r, &i) in train_rows.iter().enumerate() {
            buf.clear();
            let raw: Vec<f64> = d.covariates.row(i).iter().copied().collect();
            pre.expand(&raw, &mut buf);
            for (k, v) in buf.iter().enumerate() {
                x[(r, k)] = *v;
            }
        }
        let center: Vec<f64> = (0..width).map(|k| x.column(k).mean()).collect();
        for k in 0..width {
            let m = center[k];
            x.column_mut(k).add_scalar_mut(-m);
        }
        let denom = (train_rows.len().max(2) - 1) as f64;
        let cov = x.transpose() * &x / denom;
        let (values, vectors) = sorted_eigen(cov);
        let trace: f64 = values.iter().sum();
        let mut cum = 0.0;
        let mut k = 0;
        while k < values.len() {
            cum += values[k];
            k += 1;
            if cum / trace >= opts.pca_variance - 1e-12 {
                break;
            }
        }
        let loadings = (0..width)
            .map(|r| (0..k).map(|c| vectors[(r, c)]).collect())
            .collect();
        pre.pca = Some(PcaProjection {
            center,
            loadings,
            explained: values[..k].iter().map(|v| v / trace).collect(),
        });
    }
    Ok(pre)
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order (negatives clamped to zero) and each eigenvector signed
/// so that its largest-magnitude entry is positive.
pub(crate) fn sorted_eigen(sym: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let p = sym.nrows();
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let mut vectors = DMatrix::zeros(p, p);
    for (c, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.neg_mut();
        }
        vectors.set_column(c, &v);
    }
    (values, vectors)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::io::Write;

    fn numeric_dataset(cols: &[&[f64]]) -> Dataset {
        let n = cols[0].len();
        let schema = FeatureSchema::new(
            (0..cols.len())
                .map(|c| FeatureColumn::numerical(&format!("v{c}")))
                .collect(),
        )
        .unwrap();
        let cov = DMatrix::from_fn(n, cols.len(), |i, c| cols[c][i]);
        Dataset::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            cov,
            DMatrix::zeros(n, 1),
            vec!["sp".into()],
            schema,
        )
        .unwrap()
    }

    fn all(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn standardizes_numerical_column() {
        let d = numeric_dataset(&[&[1.0, 2.0, 3.0]]);
        let p = fit_preprocessor(&d, &PreprocessOptions::default(), &all(3)).unwrap();
        let (x, _) = p.transform_matrix(&d.covariates).unwrap();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for i in 0..3 {
            assert!((x[(i, 0)] - expect[i]).abs() < 1e-12);
        }
        // value equal to the training mean maps to zero
        assert_eq!(p.transform(&[2.0]).unwrap().values, vec![0.0]);
    }

    #[test]
    fn standardized_columns_have_unit_variance() {
        let a: Vec<f64> = (0..40)
            .map(|i| (i as f64 * 0.37).sin() * 5.0 + 3.0)
            .collect();
        let b: Vec<f64> = (0..40).map(|i| (i as f64).sqrt()).collect();
        let d = numeric_dataset(&[&a, &b]);
        let p = fit_preprocessor(&d, &PreprocessOptions::default(), &all(40)).unwrap();
        let (x, _) = p.transform_matrix(&d.covariates).unwrap();
        for c in 0..2 {
            let col = x.column(c);
            let m = col.mean();
            let v = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 40.0;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn one_hot_block_and_unseen_level() {
        let schema =
            FeatureSchema::new(vec![FeatureColumn::categorical("lc", &["a", "b", "c"])]).unwrap();
        let d = Dataset::new(
            vec!["1".into(), "2".into()],
            DMatrix::from_row_slice(2, 1, &[0.0, 2.0]),
            DMatrix::zeros(2, 1),
            vec!["sp".into()],
            schema,
        )
        .unwrap();
        let p = fit_preprocessor(&d, &PreprocessOptions::default(), &[0, 1]).unwrap();
        // level 2 (1-based) is index 1
        assert_eq!(p.transform(&[1.0]).unwrap().values, vec![0.0, 1.0, 0.0]);
        let unseen = p.transform(&[f64::NAN]).unwrap();
        assert!(unseen.unseen_level);
        assert_eq!(unseen.values, vec![0.0, 0.0, 0.0]);
        assert_eq!(p.feature_names(), vec!["lc=a", "lc=b", "lc=c"]);
    }

    #[test]
    fn zero_variance_column_is_named() {
        let d = numeric_dataset(&[&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]]);
        match fit_preprocessor(&d, &PreprocessOptions::default(), &all(3)) {
            Err(Error::ZeroVariance(name)) => assert_eq!(name, "v1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    // Oracle: VIF_j is the j-th diagonal entry of the inverse correlation matrix.
    fn vif_oracle(z: &DMatrix<f64>) -> Vec<f64> {
        let n = z.nrows() as f64;
        let q = z.ncols();
        let mut c = z.clone();
        for k in 0..q {
            let m = c.column(k).mean();
            c.column_mut(k).add_scalar_mut(-m);
            let s = (c.column(k).norm_squared() / n).sqrt();
            c.column_mut(k).scale_mut(1.0 / s);
        }
        let r = c.transpose() * &c / n;
        let inv = r.try_inverse().unwrap();
        (0..q).map(|j| inv[(j, j)]).collect()
    }

    #[test]
    fn vif_matches_inverse_correlation_oracle() {
        let a: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64).collect();
        let b: Vec<f64> = (0..30).map(|i| a[i] * 0.5 + ((i * 3) % 5) as f64).collect();
        let c: Vec<f64> = (0..30)
            .map(|i| ((i * 13) % 17) as f64 - b[i] * 0.2)
            .collect();
        let z = DMatrix::from_fn(30, 3, |i, k| [&a, &b, &c][k][i]);
        let got = variance_inflation(&z).unwrap();
        let want = vif_oracle(&z);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-8 * w.max(1.0), "{g} vs {w}");
        }
    }

    #[test]
    fn vif_drops_one_of_collinear_pair() {
        let a: Vec<f64> = (0..20).map(|i| (i as f64 * 1.3).cos()).collect();
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v + 1.0).collect();
        let d = numeric_dataset(&[&a, &b]);
        let opts = PreprocessOptions {
            mode: PreprocessMode::Vif,
            vif_threshold: 10.0,
            ..Default::default()
        };
        let p = fit_preprocessor(&d, &opts, &all(20)).unwrap();
        assert_eq!(p.retained.iter().filter(|k| **k).count(), 1);
        assert_eq!(p.width(), 1);
    }

    #[test]
    fn vif_singular_design_falls_back() {
        let a: Vec<f64> = (0..25).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..25).map(|i| (i as f64 * 0.3).cos()).collect();
        let c: Vec<f64> = (0..25).map(|i| a[i] + b[i]).collect();
        let e: Vec<f64> = (0..25).map(|i| ((i * 5) % 7) as f64).collect();
        let d = numeric_dataset(&[&a, &b, &c, &e]);
        let opts = PreprocessOptions {
            mode: PreprocessMode::Vif,
            ..Default::default()
        };
        let p = fit_preprocessor(&d, &opts, &all(25)).unwrap();
        let kept = p.retained.iter().filter(|k| **k).count();
        assert!(kept <= 3 && kept >= 1);
        // remaining design is well conditioned
        let rows = all(25);
        let cols: Vec<usize> = (0..4).filter(|&c| p.retained[c]).collect();
        let z = DMatrix::from_fn(25, cols.len(), |i, k| d.covariates[(rows[i], cols[k])]);
        for v in variance_inflation(&z).unwrap() {
            assert!(v <= 10.0);
        }
    }

    // Jacobi eigenvalue iteration, independent of nalgebra's solver.
    pub(crate) fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..200 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[p][q] * a[p][q];
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    #[test]
    fn pca_keeps_rank_components() {
        // third column is a combination of the first two -> rank 2
        let a: Vec<f64> = (0..15).map(|i| (i as f64 * 0.9).sin()).collect();
        let b: Vec<f64> = (0..15).map(|i| (i as f64 * 0.4).cos() * 2.0).collect();
        let c: Vec<f64> = (0..15).map(|i| a[i] - 0.5 * b[i]).collect();
        let d = numeric_dataset(&[&a, &b, &c]);
        let opts = PreprocessOptions {
            mode: PreprocessMode::Pca,
            pca_variance: 1.0,
            ..Default::default()
        };
        let p = fit_preprocessor(&d, &opts, &all(15)).unwrap();
        assert_eq!(p.width(), 2);

        // explained fractions against an independent eigen oracle
        let e2e = fit_preprocessor(&d, &PreprocessOptions::default(), &all(15)).unwrap();
        let (x, _) = e2e.transform_matrix(&d.covariates).unwrap();
        let cov = x.transpose() * &x / 14.0;
        let rows = (0..3)
            .map(|i| (0..3).map(|j| cov[(i, j)]).collect())
            .collect();
        let ev = jacobi_eigenvalues(rows);
        let trace: f64 = ev.iter().sum();
        let pca = p.pca.as_ref().unwrap();
        for (k, f) in pca.explained.iter().enumerate() {
            assert!((f - ev[k] / trace).abs() < 1e-8);
        }
        assert!(pca.explained.iter().sum::<f64>() >= 1.0 - 1e-9);
    }

    #[test]
    fn training_row_round_trips() {
        let a: Vec<f64> = (0..10).map(|i| i as f64 * 1.5).collect();
        let b: Vec<f64> = (0..10).map(|i| ((i * 3) % 4) as f64).collect();
        let d = numeric_dataset(&[&a, &b]);
        for mode in [PreprocessMode::EndToEnd, PreprocessMode::Pca] {
            let opts = PreprocessOptions {
                mode,
                ..Default::default()
            };
            let p = fit_preprocessor(&d, &opts, &[0, 2, 4, 6, 8]).unwrap();
            let (x, _) = p.transform_matrix(&d.covariates).unwrap();
            for i in 0..10 {
                let row: Vec<f64> = d.covariates.row(i).iter().copied().collect();
                let t = p.transform(&row).unwrap();
                assert_eq!(t.values.len(), p.width());
                for (k, v) in t.values.iter().enumerate() {
                    assert_eq!(*v, x[(i, k)]);
                }
            }
        }
    }

    #[test]
    fn schema_rejects_bad_definitions() {
        assert!(FeatureSchema::from_json_str(
            r#"{"columns":[{"name":"a","kind":"numerical"},{"name":"a","kind":"ordinal"}]}"#
        )
        .is_err());
        assert!(FeatureSchema::from_json_str(
            r#"{"columns":[{"name":"lc","kind":"categorical","levels":[]}]}"#
        )
        .is_err());
        assert!(FeatureSchema::from_json_str(
            r#"{"columns":[{"name":"lc","kind":"categorical","levels":["x","x"]}]}"#
        )
        .is_err());
        let err = FeatureSchema::from_json_str(r#"{"columns":[{"name":"soil","kind":"weird"}]}"#)
            .unwrap_err();
        assert!(err.to_string().contains("soil"));
        let ok = FeatureSchema::from_json_str(
            r#"{"columns":[{"name":"t","kind":"numerical","group":"temperature"},{"name":"lc","kind":"categorical","levels":["f","g"]}]}"#,
        )
        .unwrap();
        assert_eq!(ok.group_map()["t"], "temperature");
        assert_eq!(ok.group_map()["lc"], "lc");
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn loads_and_aligns_toy_files() {
        let dir = tempfile::tempdir().unwrap();
        let schema = write(
            dir.path(),
            "schema.json",
            r#"{"columns":[{"name":"temp","kind":"numerical"},{"name":"lc","kind":"categorical","levels":["crop","forest"]}]}"#,
        );
        let cov = write(
            dir.path(),
            "cov.csv",
            "site_id,lc,temp\na,crop,1.5\nb,forest,2.0\nc,crop,3.5\n",
        );
        let com = write(
            dir.path(),
            "com.csv",
            "site_id,sp1,sp2\nc,1,0\na,0,1\nb,1,1\n",
        );
        let d = load_dataset(&com, &cov, &schema).unwrap();
        assert_eq!((d.n_sites(), d.n_species()), (3, 2));
        assert_eq!(d.site_ids, vec!["a", "b", "c"]);
        assert_eq!(
            d.community.row(0).iter().copied().collect::<Vec<_>>(),
            vec![0.0, 1.0]
        );
        assert_eq!(d.covariates[(1, 1)], 1.0);
        assert_eq!(d.covariates[(2, 0)], 3.5);

        let bad = write(
            dir.path(),
            "bad.csv",
            "site_id,sp1,sp2\na,0,2\nb,1,1\nc,0,0\n",
        );
        let err = load_dataset(&bad, &cov, &schema).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("sp2"), "{err}");

        let missing = write(dir.path(), "missing.csv", "site_id,sp1,sp2\na,0,1\nb,1,1\n");
        assert!(
            matches!(load_dataset(&missing, &cov, &schema), Err(Error::Alignment(id)) if id == "c")
        );

        let level = write(
            dir.path(),
            "level.csv",
            "site_id,temp,lc\na,1,urban\nb,2,crop\nc,3,crop\n",
        );
        assert!(matches!(
            load_dataset(&com, &level, &schema),
            Err(Error::Schema(_))
        ));
    }
}
