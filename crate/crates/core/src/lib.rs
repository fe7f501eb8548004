//! Scoring, ensembling and dataset assembly for volumetric tumor segmentation
//! in longitudinal MRI-guided radiotherapy.
//!
//! - [`volume`]: voxel lattices, label masks, probability maps, exact counts
//! - [`nifti`]: NIfTI-1 reading and writing
//! - [`metrics`]: per-case and aggregated Dice, cohort statistics, confusion counts
//! - [`ensemble`]: probability-map alignment, averaging and argmax
//! - [`dataset`]: challenge-tree scanning, training layouts, folds
//! - [`report`]: result tables and score reports

pub mod dataset;
pub mod ensemble;
pub mod metrics;
pub mod nifti;
pub mod report;
pub mod volume;

pub use metrics::{cohort_stats, dice_agg, dice_case, score_cohort, CasePair};
pub use volume::{Geometry, Label, LabelMask, LabelSet, ProbabilityMap, VoxelGrid};
