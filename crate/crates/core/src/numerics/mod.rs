//! Reverse-mode scalar numerics used by the model.
//!
//! The design is a flat tape: every operation appends a node holding its
//! output tensor and the ids of its inputs, and [`graph::Graph::backward`]
//! walks the tape once in reverse. Everything is generic over [`Real`] so
//! training runs in `f32` while gradient checks run the identical code in
//! `f64`.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::Adam;
pub use graph::{Graph, NodeId};
pub use params::{GradStore, ParamBinder, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
