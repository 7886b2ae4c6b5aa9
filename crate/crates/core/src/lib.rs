//! Budget-constrained informative path planning for target search.
//!
//! An agent flies a graph of minimum-jerk motion primitives over a 2D grid,
//! senses the ground with a noisy binary camera, and maintains a log-odds
//! target map. The crate provides the map, sensor, primitive library,
//! scenario generator, episode engine, five baseline planners, an
//! actor-critic learner, and the benchmark harness around them.

pub mod bench;
pub mod envgen;
pub mod episode;
pub mod error;
pub mod grid;
pub mod learn;
pub mod planners;
pub mod primitives;
pub mod sensor;

pub use error::{Error, Result};
