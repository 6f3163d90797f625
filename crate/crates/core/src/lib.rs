//! Geometry problem solving by generating solution programs: a joint
//! text/diagram encoder, a problem-type classifier, a decoder that alternates
//! between operators and operands, and a two-level beam search.

pub mod beam;
pub mod classifier;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod generator;
pub mod model;
pub mod numerics;
pub mod program;
pub mod registry;
pub mod trainer;
