//! Decentralized SGD and its distributionally robust variant over gossip
//! networks, together with the graph, data and model plumbing needed to
//! simulate them on one machine.
//!
//! A run wires the pieces together as follows:
//!
//! 1. [`topology`] builds a connected [`Graph`] and its Metropolis
//!    [`MixingMatrix`].
//! 2. [`datagen`] produces a [`LabeledDataset`] and deals it to devices with
//!    the label-sorted shard split.
//! 3. [`trainer::Simulation`] runs synchronous rounds of local steps and
//!    neighbor averaging, with [`robust`] supplying the exponential tilt for
//!    the robust variant.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod model;
pub mod robust;
pub mod topology;
pub mod trainer;

pub use datagen::{
    gaussian_mixture, gaussian_mixture_with_spreads, partition_pathological, DevicePartition, DeviceRng, LabeledDataset,
};
pub use model::{ModelKind, ModelSpec, ParamVector};
pub use robust::{RobustConfig, WeightVector};
pub use topology::{metropolis_weights, Graph, MixingMatrix};
pub use trainer::{Algorithm, EvalMode, MetricsRow, ParamMatrix, ScheduleMode, Simulation, TrainConfig};
