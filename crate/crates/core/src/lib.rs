//! Slice-to-shape registration: cross-modal patch embeddings, assignment,
//! Procrustes and KDE-guided refinement.

pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod localization;
pub mod patching;
pub mod registration;
pub mod scalar;
pub mod seeding;
pub mod shape_model;
pub mod synth;

pub use error::{Error, Result};

pub type Mesh = geometry::TriangleMesh<f64>;
pub type Volume = geometry::ScalarVolume<f64>;
pub type Encoder = encoder::EncoderModel<f64>;
pub type Pdm = shape_model::PdmModel<f64>;
pub type Transform = registration::RigidTransform<f64>;
pub type Mesh32 = geometry::TriangleMesh<f32>;
pub type Volume32 = geometry::ScalarVolume<f32>;
