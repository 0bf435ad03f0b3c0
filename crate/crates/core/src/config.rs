//! Run configuration and the saved model file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assoc::GlassoOptions;
use crate::baseline::GlmSettings;
use crate::data::{load_dataset, Dataset, FeatureSchema, PreprocessOptions, Preprocessor};
use crate::error::{Error, Result};
use crate::explain::ShapMode;
use crate::groups::GroupOptions;
use crate::mtec::{MtecConfig, MtecModel};
use crate::nn::TensorDoc;
use crate::train::{ClassWeights, CvOptions, SplitPlan, TrainSettings};

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub community: PathBuf,
    pub covariates: PathBuf,
    pub schema: PathBuf,
    /// Optional `site_id,x,y` table used for local attribution exports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinates: Option<PathBuf>,
}

impl DataPaths {
    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.community);
        join(&mut self.covariates);
        join(&mut self.schema);
        if let Some(c) = &mut self.coordinates {
            join(c);
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        load_dataset(&self.community, &self.covariates, &self.schema)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitOptions {
    pub min_occur: usize,
    /// Share of sites drawn into the training set; the rest drives early
    /// stopping and threshold tuning.
    pub train_fraction: f64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            min_occur: 5,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapOptions {
    pub mode: ShapMode,
    pub background: usize,
    /// Explain at most this many sites (seeded subsample); all when absent.
    pub max_sites: Option<usize>,
}

impl Default for ShapOptions {
    fn default() -> Self {
        ShapOptions {
            mode: ShapMode::Auto,
            background: 100,
            max_sites: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkOptions {
    pub lambda: f64,
    /// Candidate penalties for extended-BIC selection.
    pub lambda_grid: Option<Vec<f64>>,
    pub glasso: GlassoOptions,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        NetworkOptions {
            lambda: 0.05,
            lambda_grid: None,
            glasso: GlassoOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub preprocess: PreprocessOptions,
    #[serde(default)]
    pub model: MtecConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub split: SplitOptions,
    #[serde(default)]
    pub cv: CvOptions,
    #[serde(default)]
    pub glm: GlmSettings,
    #[serde(default)]
    pub shap: ShapOptions,
    #[serde(default)]
    pub groups: GroupOptions,
    #[serde(default)]
    pub network: NetworkOptions,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// A config with every default filled in and placeholder data paths.
    pub fn template() -> Self {
        RunConfig {
            data: DataPaths {
                community: "community.csv".into(),
                covariates: "covariates.csv".into(),
                schema: "schema.json".into(),
                coordinates: None,
            },
            output_dir: default_output_dir(),
            seed: 0,
            preprocess: PreprocessOptions::default(),
            model: MtecConfig::default(),
            train: TrainSettings::default(),
            split: SplitOptions::default(),
            cv: CvOptions::default(),
            glm: GlmSettings::default(),
            shap: ShapOptions::default(),
            groups: GroupOptions::default(),
            network: NetworkOptions::default(),
        }
    }

    /// Parses a config; relative paths are taken from `base`.
    pub fn from_json_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.data.resolve(base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json_str(&text, &base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Nested seeds must stay at zero: the top-level `seed` drives every stage.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        for (name, seed) in [
            ("train.seed", self.train.seed),
            ("cv.seed", self.cv.seed),
            ("groups.seed", self.groups.seed),
        ] {
            if seed != 0 {
                return Err(Error::Config(format!(
                    "`{name}` is set; use the top-level `seed` instead"
                )));
            }
        }
        if self.split.min_occur == 0 || self.cv.min_occur == 0 {
            return Err(Error::Config("min_occur must be at least 1".into()));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction <= 1.0) {
            return Err(Error::Config(
                "split.train_fraction must lie in (0, 1]".into(),
            ));
        }
        if !(self.cv.inner_train_fraction > 0.0 && self.cv.inner_train_fraction <= 1.0) {
            return Err(Error::Config(
                "cv.inner_train_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.shap.background == 0 {
            return Err(Error::Config("shap.background must be at least 1".into()));
        }
        let mut lambdas = std::iter::once(self.network.lambda)
            .chain(self.network.lambda_grid.iter().flatten().copied());
        if lambdas.any(|l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(
                "network penalties must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn cv_options(&self) -> CvOptions {
        CvOptions {
            seed: self.seed,
            ..self.cv.clone()
        }
    }

    pub fn group_options(&self) -> GroupOptions {
        GroupOptions {
            seed: self.seed,
            ..self.groups.clone()
        }
    }
}

/// Everything needed to reuse a fitted model: the run that produced it,
/// the preprocessing, the tensors and the tuned thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub run: RunConfig,
    pub species: Vec<String>,
    pub site_ids: Vec<String>,
    pub schema: FeatureSchema,
    pub preprocessor: Preprocessor,
    pub input_width: usize,
    pub tensors: TensorDoc,
    pub class_weights: ClassWeights,
    pub thresholds: Vec<Option<f64>>,
    pub split: SplitPlan,
    pub best_epoch: usize,
}

impl ModelFile {
    pub fn model(&self) -> Result<MtecModel> {
        let mut model =
            MtecModel::zeroed(self.run.model.clone(), self.input_width, self.species.len())?;
        self.tensors.import_into(&mut model)?;
        model.trained = true;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("model file", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if file.version != MODEL_FILE_VERSION {
            return Err(Error::Contract(format!(
                "unsupported model file version {}",
                file.version
            )));
        }
        if file.thresholds.len() != file.species.len() {
            return Err(Error::shape(
                "thresholds",
                file.species.len(),
                file.thresholds.len(),
            ));
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str =
        r#"{"data": {"community": "y.csv", "covariates": "x.csv", "schema": "s.json"}}"#;

    #[test]
    fn paths_resolve_against_config_dir() {
        let cfg = RunConfig::from_json_str(MINIMAL, Path::new("/tmp/run")).unwrap();
        assert_eq!(cfg.data.community, PathBuf::from("/tmp/run/y.csv"));
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/run/out"));
        assert_eq!(cfg.model, MtecConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let text = "{\n  \"data\": {\"community\": \"y.csv\", \"covariates\": \"x.csv\", \"schema\": \"s.json\"},\n  \"modle\": {}\n}";
        let err = RunConfig::from_json_str(text, Path::new("."))
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("modle") && err.contains("line 3 column"),
            "{err}"
        );
        let nested = r#"{"data": {"community": "y", "covariates": "x", "schema": "s"}, "model": {"latent": 2}}"#;
        assert!(RunConfig::from_json_str(nested, Path::new(".")).is_err());
    }

    #[test]
    fn nested_seeds_are_refused() {
        let text = r#"{"data": {"community": "y", "covariates": "x", "schema": "s"}, "train": {"seed": 4}}"#;
        let err = RunConfig::from_json_str(text, Path::new("."))
            .unwrap_err()
            .to_string();
        assert!(err.contains("train.seed"));
    }

    #[test]
    fn template_round_trips() {
        let t = RunConfig::template();
        let text = serde_json::to_string(&t).unwrap();
        let back = RunConfig::from_json_str(&text, Path::new("")).unwrap();
        assert_eq!(back, t);
    }
}
