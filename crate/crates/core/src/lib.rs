//! Internal model control with stable deep GRU networks.
//!
//! The crate learns a δISS deep GRU model of a stable plant, learns a δISS
//! GRU controller that approximates the model inverse, and runs the resulting
//! internal model control loop on a quadruple-tank process simulation.

#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::type_complexity
)]

pub mod datagen;
pub mod error;
pub mod gru;
pub mod hash;
pub mod imc_loop;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod plant;
pub mod stability;
pub mod training;
pub mod weights;

pub use error::{ImcError, Result};
pub use gru::{GruLayerWeights, GruNetwork, GruState, OutputActivation, OutputMap, Topology, Trajectory};
pub use stability::{certify, Penalty, StabilityCertificate};
