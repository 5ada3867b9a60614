//! Turns a [`RunConfig`] into a dataset, feature tables and the list of
//! files they came from.

use std::path::PathBuf;
use std::sync::Arc;

use idsf::data::{
    align_features, generate_synthetic, load_interactions, read_matrix_file, read_sidecar, sidecar_path,
    split_dataset_with_catalog, Dataset, Modality, SplitManifest, SyntheticData,
};
use idsf::graph::BipartiteGraph;
use idsf::model::ModalFeatures;
use idsf::{Error, Result};

use crate::config::RunConfig;

/// Loaded inputs shared by every command.
pub struct Inputs {
    pub dataset: Dataset,
    pub graph: Arc<BipartiteGraph>,
    pub features: ModalFeatures,
    /// Files read, for checksumming.
    pub files: Vec<PathBuf>,
    pub synthetic: Option<SyntheticData>,
}

impl Inputs {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let data = &config.data;
        let mut files = Vec::new();
        let synthetic = data.synthetic.as_ref().map(generate_synthetic).transpose()?;

        // Feature sidecars are read up front: their items join the catalog.
        let mut sources = Vec::new();
        if synthetic.is_none() {
            for m in Modality::ALL
                .into_iter()
                .filter(|&m| config.model.modalities.contains(m))
            {
                let (matrix, ids) = match m {
                    Modality::Text => (&data.text_features, &data.text_ids),
                    Modality::Visual => (&data.visual_features, &data.visual_ids),
                };
                let matrix = matrix.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "modality {m:?} is requested but data.{}_features is not set; restrict model.modalities instead",
                        name(m)
                    ))
                })?;
                let matrix = data.resolve(matrix);
                let ids = ids
                    .as_ref()
                    .map(|p| data.resolve(p))
                    .unwrap_or_else(|| sidecar_path(&matrix));
                let raw_ids = read_sidecar(&ids)?;
                sources.push((m, matrix, ids, raw_ids));
            }
        }

        let dataset = if let Some(p) = &data.split_manifest {
            let p = data.resolve(p);
            let ds = SplitManifest::load(&p)?.to_dataset()?;
            files.push(p);
            ds
        } else {
            let (records, catalog) = match &synthetic {
                Some(syn) => (syn.records.clone(), syn.item_ids.clone()),
                None => {
                    let p = data.interactions.as_ref().ok_or_else(|| {
                        Error::Config("data.interactions, data.split_manifest or data.synthetic is required".into())
                    })?;
                    let p = data.resolve(p);
                    let records = load_interactions(&p)?;
                    files.push(p);
                    let catalog = sources.iter().flat_map(|s| s.3.iter().cloned()).collect();
                    (records, catalog)
                }
            };
            let split = &data.split;
            split_dataset_with_catalog(&records, &catalog, split.ratios, split.strategy, config.split_seed())?
        };

        let mut features = ModalFeatures::default();
        let mut put = |m: Modality, t| match m {
            Modality::Text => features.text = Some(t),
            Modality::Visual => features.visual = Some(t),
        };
        if let Some(syn) = &synthetic {
            for m in Modality::ALL
                .into_iter()
                .filter(|&m| config.model.modalities.contains(m))
            {
                put(m, syn.aligned(m, dataset.items()));
            }
        }
        for (m, matrix, ids, raw_ids) in sources {
            let table = align_features(read_matrix_file(&matrix)?, &raw_ids, m, dataset.items(), &ids)?;
            put(m, table.matrix);
            files.push(matrix);
            files.push(ids);
        }

        let graph = Arc::new(BipartiteGraph::build(&dataset)?);
        Ok(Inputs {
            dataset,
            graph,
            features,
            files,
            synthetic,
        })
    }
}

pub fn name(m: Modality) -> &'static str {
    match m {
        Modality::Text => "text",
        Modality::Visual => "visual",
    }
}
