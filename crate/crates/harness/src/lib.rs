//! Simulation harness: data generators, a private regression baseline,
//! experiment drivers and the `gvdp` command line tool.

pub mod adassp;
pub mod bounds;
pub mod data;
pub mod experiment;
