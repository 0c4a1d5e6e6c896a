//! Dataset, region grid and labeling pool.

pub mod dataset;
pub mod grid;
pub mod pool;

pub use dataset::{Dataset, DatasetSplits, Image, LabelMap, Sample, IGNORE_INDEX};
pub use grid::{Region, RegionGrid, RegionId};
pub use pool::{Acquisition, ClassDistribution, PoolImage, PoolState, Selection, Status};
