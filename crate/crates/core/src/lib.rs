//! Reconstruction of 2-D reservoir temperature fields from a handful of
//! point sensors.
//!
//! Two estimators share one data model: Gappy-POD least squares over a
//! truncated POD basis ([`pod`]) and L1-sparse coding over a snapshot or mode
//! dictionary ([`sparse`]). [`experiment`] drives configurable error studies
//! on synthetic ([`synth`]) or file-based ([`grid`]) snapshot data.

pub mod error;
pub mod experiment;
pub mod grid;
pub mod metrics;
pub mod pod;
pub mod reconstruction;
pub mod seeds;
pub mod sensing;
pub mod sparse;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{FieldGrid, Snapshot, SnapshotLibrary};
pub use pod::{compute_pod, gappy_reconstruct, GappyOptions, PodBasis};
pub use reconstruction::ReconstructionResult;
pub use sensing::{MeasurementOperator, NoiseModel, Placement};
pub use sparse::{
    assemble, bpdn_solve, choose_epsilon, robust_solve, sparse_reconstruct, Dictionary,
    DictionaryKind, SolverOptions, SparseSolution,
};
