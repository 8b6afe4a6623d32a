//! Latent-space discretization by atomic analogy.
//!
//! Each data point is modeled as an atom whose components carry learnable
//! charges; training penalizes the interatomic Coulomb potential so nearby
//! points with similar intra-structure repel. The crate bundles the pieces
//! needed to study the method end to end:
//!
//! * [`tensor`] — dense 2-D arrays and a reverse-mode differentiation graph
//! * [`gradcheck`] — finite-difference verification of every gradient path
//! * [`atom`] — charges, masses, nucleus position/radius, pair distances
//! * [`loss`] — Coulomb / charge-balance / neutron-count losses, p-norm
//!   baselines, batch pairing, and the combined objective
//! * [`data`] — the synthetic Gaussian-mixture classification dataset
//! * [`model`] — the two-linear-layer classifier with its atom view
//! * [`train`] — seeded training runs, evaluation, and multi-seed sweeps
//! * [`balance`] — closed-form vs numeric balance distance of the two-atom
//!   potential
//! * [`analysis`] — latent-space and charge exports for trained checkpoints
//!
//! The numeric core is generic over the scalar type via [`num::Real`];
//! the aliases below fix the default `f64` instantiation used by the
//! training harness and the CLI.

pub mod analysis;
pub mod atom;
pub mod balance;
pub mod data;
pub mod gradcheck;
pub mod loss;
pub mod manifest;
pub mod model;
pub mod num;
pub mod rng;
pub mod tensor;
pub mod train;

/// Default scalar type for the experiment harness.
pub type Scalar = f64;
/// Dense matrix over the default scalar.
pub type Mat = tensor::Mat<Scalar>;
/// Computation graph over the default scalar.
pub type Graph = tensor::Graph<Scalar>;
