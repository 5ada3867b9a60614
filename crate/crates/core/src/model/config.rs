use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};

/// Which salient modalities are available to the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModalitySet {
    #[serde(rename = "t")]
    Text,
    #[serde(rename = "v")]
    Visual,
    #[default]
    #[serde(rename = "tv")]
    Both,
}

impl ModalitySet {
    pub fn contains(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (ModalitySet::Both, _) | (ModalitySet::Text, Modality::Text) | (ModalitySet::Visual, Modality::Visual)
        )
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "t" => Some(ModalitySet::Text),
            "v" => Some(ModalitySet::Visual),
            "tv" | "vt" => Some(ModalitySet::Both),
            _ => None,
        }
    }
}

/// Where the in-batch contrastive loss finds its negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    #[default]
    InBatch,
    FullCatalog,
}

/// How the temperature enters the contrastive terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperaturePlacement {
    /// `exp(f(a, b) / τ)`.
    #[default]
    Scaled,
    /// `exp(f(a, b)) / τ`; τ cancels from every ratio.
    Literal,
}

/// Source of the users' layer-0 modal embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserLayerZero {
    /// One user ID table feeds both modalities.
    #[default]
    SharedId,
    /// A separate user table per modality.
    PerModality,
}

/// Model variants that remove one component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoContent,
    ContentNoContrast,
    ContentNoId,
    StructureNoId,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::NoContent,
        Ablation::ContentNoContrast,
        Ablation::ContentNoId,
        Ablation::StructureNoId,
    ];

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::NoContent => "w/o content",
            Ablation::ContentNoContrast => "content w/o contrast",
            Ablation::ContentNoId => "content w/o ID",
            Ablation::StructureNoId => "structure w/o ID",
        }
    }

    pub fn parse(s: &str) -> Option<Option<Ablation>> {
        match s {
            "none" => Some(None),
            "no_content" => Some(Some(Ablation::NoContent)),
            "no_contrast" | "content_no_contrast" => Some(Some(Ablation::ContentNoContrast)),
            "content_no_id" => Some(Some(Ablation::ContentNoId)),
            "structure_no_id" => Some(Some(Ablation::StructureNoId)),
            _ => None,
        }
    }
}

/// Individual ablation switches; at most one may be set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub no_content: bool,
    pub content_no_contrast: bool,
    pub content_no_id: bool,
    pub structure_no_id: bool,
}

impl AblationFlags {
    pub fn only(a: Option<Ablation>) -> Self {
        let mut f = AblationFlags::default();
        match a {
            Some(Ablation::NoContent) => f.no_content = true,
            Some(Ablation::ContentNoContrast) => f.content_no_contrast = true,
            Some(Ablation::ContentNoId) => f.content_no_id = true,
            Some(Ablation::StructureNoId) => f.structure_no_id = true,
            None => {}
        }
        f
    }

    pub fn active(&self) -> Result<Option<Ablation>> {
        let set: Vec<Ablation> = [
            (self.no_content, Ablation::NoContent),
            (self.content_no_contrast, Ablation::ContentNoContrast),
            (self.content_no_id, Ablation::ContentNoId),
            (self.structure_no_id, Ablation::StructureNoId),
        ]
        .into_iter()
        .filter_map(|(on, a)| on.then_some(a))
        .collect();
        match set.as_slice() {
            [] => Ok(None),
            [one] => Ok(Some(*one)),
            many => Err(Error::Config(format!(
                "at most one ablation may be active, got {many:?}"
            ))),
        }
    }
}

/// Known datasets with tuned β and γ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetPreset {
    Baby,
    Sports,
    Clothing,
}

impl DatasetPreset {
    /// `(β, γ)` tuned for this dataset.
    pub fn beta_gamma(self) -> (f64, f64) {
        match self {
            DatasetPreset::Baby => (0.3, 0.3),
            DatasetPreset::Sports => (1.0, 0.3),
            DatasetPreset::Clothing => (1.0, 1.0),
        }
    }
}

/// Hyperparameters and switches for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width `d`.
    pub dim: usize,
    /// Propagation layers `K`.
    pub layers: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Contrastive loss weight.
    pub beta: f64,
    /// ID retention weight during propagation.
    pub gamma: f64,
    /// L2 weight on all trainable parameters.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub ablation: AblationFlags,
    pub modalities: ModalitySet,
    /// Enhance salient features with ID embeddings. Off gives the
    /// "original" modality variants.
    pub enhanced: bool,
    pub negatives: NegativeMode,
    pub temperature: TemperaturePlacement,
    pub user_layer_zero: UserLayerZero,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let (beta, gamma) = DatasetPreset::Baby.beta_gamma();
        ModelConfig {
            dim: 128,
            layers: 2,
            tau: 0.5,
            beta,
            gamma,
            lambda: 1e-4,
            learning_rate: 0.0005,
            batch_size: 1024,
            ablation: AblationFlags::default(),
            modalities: ModalitySet::Both,
            enhanced: true,
            negatives: NegativeMode::InBatch,
            temperature: TemperaturePlacement::Scaled,
            user_layer_zero: UserLayerZero::SharedId,
            seed: 2023,
        }
    }
}

impl ModelConfig {
    pub fn for_dataset(preset: DatasetPreset) -> Self {
        let (beta, gamma) = preset.beta_gamma();
        ModelConfig {
            beta,
            gamma,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("learning_rate", self.learning_rate),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        self.ablation.active()?;
        Ok(())
    }

    pub fn ablation(&self) -> Option<Ablation> {
        self.ablation.active().ok().flatten()
    }

    pub fn uses_content(&self) -> bool {
        self.ablation() != Some(Ablation::NoContent)
    }

    /// Whether content fusion mixes in the modal ID tables.
    pub fn content_uses_ids(&self) -> bool {
        self.enhanced && self.ablation() != Some(Ablation::ContentNoId)
    }

    pub fn uses_contrast(&self) -> bool {
        self.uses_content() && self.ablation() != Some(Ablation::ContentNoContrast) && self.beta > 0.0
    }

    /// γ as applied during propagation.
    pub fn effective_gamma(&self) -> f64 {
        if !self.enhanced || self.ablation() == Some(Ablation::StructureNoId) {
            0.0
        } else {
            self.gamma
        }
    }
}
