//! Run configuration: defaults, optional preset, JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use idsf::data::{SplitRatios, SplitStrategy, SyntheticSpec};
use idsf::model::{AblationFlags, DatasetPreset, ModalitySet, ModelConfig};
use idsf::train::TrainConfig;
use idsf::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Everything one command needs. Unknown keys anywhere are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset whose tuned β and γ seed the model defaults.
    pub preset: Option<DatasetPreset>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub analysis: AnalysisConfig,
}

/// Input locations. Relative paths resolve against `dir`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    /// TSV of `user<TAB>item` rows.
    pub interactions: Option<PathBuf>,
    pub text_features: Option<PathBuf>,
    /// Defaults to the matrix path with `.ids` appended.
    pub text_ids: Option<PathBuf>,
    pub visual_features: Option<PathBuf>,
    pub visual_ids: Option<PathBuf>,
    /// A split written by `prepare`; when set, no re-splitting happens.
    pub split_manifest: Option<PathBuf>,
    pub split: SplitConfig,
    /// Generate a clustered synthetic dataset instead of reading files.
    pub synthetic: Option<SyntheticSpec>,
}

impl DataConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub ratios: SplitRatios,
    pub strategy: SplitStrategy,
    /// Falls back to the model seed.
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: SplitRatios::default(),
            strategy: SplitStrategy::PerUser,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: idsf::eval::DEFAULT_KS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub gammas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let grid = vec![0.0, 0.1, 0.3, 0.5, 1.0];
        SweepConfig {
            gammas: grid.clone(),
            betas: grid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub users: usize,
    pub retries: usize,
    pub top_k: usize,
    /// Embedding selectors to export; empty means every one the model has.
    pub exports: Vec<String>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            users: 10,
            retries: 100,
            top_k: 10,
            exports: Vec::new(),
        }
    }
}

/// Flag values that replace individual keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<DatasetPreset>,
    pub seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub gamma: Option<f64>,
    pub beta: Option<f64>,
    pub modalities: Option<ModalitySet>,
    pub enhanced: Option<bool>,
    /// Replaces the file's ablation switches wholesale.
    pub ablation: Option<AblationFlags>,
    pub max_epochs: Option<usize>,
}

fn config_error(source: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {e}", source.display()))
}

/// Recursively overlays `patch` onto `base`; objects merge, everything
/// else replaces.
pub fn deep_merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults, then the preset (flag wins over file), then the file, then
    /// the remaining flags.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let file: Option<(PathBuf, Value)> = match path {
            Some(p) => {
                let text = fs::read_to_string(p)?;
                let v: Value = serde_json::from_str(&text).map_err(|e| config_error(p, e))?;
                if !v.is_object() {
                    return Err(config_error(p, "top level must be an object"));
                }
                Some((p.to_path_buf(), v))
            }
            None => None,
        };
        let file_preset = match file.as_ref().and_then(|(_, v)| v.get("preset")) {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                serde_json::from_value::<DatasetPreset>(v.clone())
                    .map_err(|e| config_error(&file.as_ref().unwrap().0, e))?,
            ),
        };
        let preset = overrides.preset.or(file_preset);
        let mut base = RunConfig {
            preset,
            ..Default::default()
        };
        if let Some(p) = preset {
            base.model = ModelConfig::for_dataset(p);
        }
        let mut value = serde_json::to_value(&base)?;
        let source = match file {
            Some((p, v)) => {
                deep_merge(&mut value, v);
                p
            }
            None => PathBuf::from("<defaults>"),
        };
        // A flag preset replaces whatever the file named.
        if let Some(p) = overrides.preset {
            value["preset"] = serde_json::to_value(p)?;
        }
        let mut config: RunConfig = serde_json::from_value(value).map_err(|e| config_error(&source, e))?;
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.model.seed = s;
            if let Some(spec) = self.data.synthetic.as_mut() {
                spec.seed = s;
            }
        }
        if let Some(d) = &o.data_dir {
            self.data.dir = Some(d.clone());
        }
        if let Some(g) = o.gamma {
            self.model.gamma = g;
        }
        if let Some(b) = o.beta {
            self.model.beta = b;
        }
        if let Some(m) = o.modalities {
            self.model.modalities = m;
        }
        if let Some(e) = o.enhanced {
            self.model.enhanced = e;
        }
        if let Some(a) = o.ablation {
            self.model.ablation = a;
        }
        if let Some(n) = o.max_epochs {
            self.train.max_epochs = n;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.split.ratios.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be non-empty positive cut-offs".into()));
        }
        if self.sweep.gammas.is_empty() || self.sweep.betas.is_empty() {
            return Err(Error::Config("sweep grids must not be empty".into()));
        }
        if self.analysis.top_k == 0 {
            return Err(Error::Config("analysis.top_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Pretty JSON that reloads to an identical config.
    pub fn snapshot(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn split_seed(&self) -> u64 {
        self.data.split.seed.unwrap_or(self.model.seed)
    }
}
