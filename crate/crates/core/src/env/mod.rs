//! Desk-scale environments and offline dataset generation.

pub mod dataset;
pub mod grid;
pub mod pointmass;

pub use dataset::{trajectory_returns, DatasetArrays, DatasetMeta, OfflineDataset, Transition};
pub use grid::{
    exact_count_oracle, generate_grid_dataset, CountTable, GridAction, GridLayout, GridMap, GridQuantizer, GridTask,
    GridWorld,
};
pub use pointmass::{generate_pointmass_dataset, BehaviorPolicy, PointMass, PointMassConfig, PointMassData};
