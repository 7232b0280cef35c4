//! Post-deployment data pipeline for rangeland survey robots: geo-referenced
//! landmark projection, within-season clustering, cross-season association
//! with a persistence filter, and a deterministic field simulator.

pub mod association;
pub mod config;
pub mod geo;
pub mod io;
pub mod octree;
pub mod perception;
pub mod pipeline;
pub mod report;
pub mod season_map;
pub mod session;
pub mod simulator;

