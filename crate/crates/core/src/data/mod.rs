//! Two-domain image data: directory ingestion, preprocessing, splits and the
//! procedural sketch/photo generator.

pub mod generate;
pub mod loader;
pub mod manifest;
pub mod preprocess;
pub mod synthetic;

pub use generate::{generate_synthetic_dataset, mean_dataset_landmark_offset, SyntheticDatasetConfig};
pub use loader::{load_domain, load_unpaired, UnpairedData};
pub use manifest::{resplit_dataset, split_identities, train_count, DatasetManifest, Domain, PairEntry, Split, Splits};
pub use preprocess::{decode_image, preprocess, save_png, to_rgb_image};
pub use synthetic::{SyntheticFace, SyntheticFaceParams, TextureStyle};
