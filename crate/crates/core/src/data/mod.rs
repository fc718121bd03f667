//! Synthetic datasets: Gaussian-cluster classification, a shifted public
//! set, Dirichlet-skewed client partitions and toy segmentation grids.

pub mod dataset;
pub mod distance;
pub mod partition;
pub mod samples;
pub mod segmentation;
pub mod synth;

pub use dataset::LabeledDataset;
pub use distance::distance_transforms;
pub use partition::{partition, ClientPlan, ClientShard, PartitionPlan};
pub use samples::{Batch, Samples};
pub use segmentation::{make_segmentation, SegDataset, SegmentationSpec};
pub use synth::{make_classification, make_public_set, ClassificationSpec, PublicSetSpec};
