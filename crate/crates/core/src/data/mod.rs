//! Interaction ingestion, dense re-indexing, splitting and feature files.

mod features;
mod manifest;
mod records;
mod split;
mod synthetic;

pub use features::{
    align_features, load_features, read_matrix, read_matrix_file, read_sidecar, sidecar_path, write_matrix,
    write_matrix_file, write_sidecar, ModalFeatureTable, Modality, FORMAT_VERSION, HEADER_LEN, MAGIC,
};
pub use manifest::SplitManifest;
pub use records::{load_interactions, parse_interactions, write_interactions, InteractionRecord};
pub use split::{split_dataset, split_dataset_with_catalog, Dataset, IdMap, Split, SplitRatios, SplitStrategy};
pub use synthetic::{generate_synthetic, item_id, user_id, SyntheticData, SyntheticSpec};
