//! Class x domain datasets, dual-axis splits and episode sampling.
//!
//! Items live in cells indexed by `(domain, class)`. Splits partition the
//! class axis and the domain axis independently; a split part only ever
//! serves items whose class *and* domain both belong to that part.

mod episode;
mod grid;
mod split;
mod synthetic;

pub use episode::{sample_episode, Episode, EpisodeConfig, EpisodeSampler};
pub use grid::{CellIndex, DatasetManifest, GridDataset, DATASET_FORMAT, DATASET_VERSION};
pub use split::{make_split, Partition, SplitFractions, SplitPart, SplitSpec};
pub use synthetic::{generate_synthetic, DomainTransform, ShiftGenerator};
