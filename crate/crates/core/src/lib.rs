//! Gated graph propagation networks with budgeted subgraph expansion.
//!
//! The crate is organized bottom-up:
//!
//! - [`kgraph`]: the knowledge-graph data model, construction from
//!   co-occurrence counts, taxonomy fusion and (de)serialization.
//! - [`numeric`]: dense tensors, differentiable layer primitives with
//!   analytic gradients, losses, optimizers and checkpointing.
//! - [`propagation`]: the gated recurrence over typed edges, the output
//!   network with per-node bias, and the importance scorer.
//! - [`search`]: the budgeted expansion controller, the dense all-nodes
//!   baseline, the classification pipeline and training.
//! - [`synthdata`]: deterministic synthetic scenes and random graphs.
//! - [`eval`]: multi-label metrics, sensitivity analysis, the scaling
//!   benchmark and the low-data sweep.

pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod kgraph;
pub mod numeric;
pub mod propagation;
pub mod rng;
pub mod search;
pub mod synthdata;
