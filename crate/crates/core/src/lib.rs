//! Discrete-token traffic simulation.
//!
//! Trajectories are tokenized into a small vocabulary of relative state
//! changes, modelled with an autoregressive encoder-decoder, and sampled in
//! closed loop.

pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod rollout;
pub mod sampling;
pub mod tokenizer;

pub use data::{Agent, MapObject, MapObjectKind, Scenario};
pub use error::{Error, Result};
pub use geometry::{AgentClass, AgentMeta, AgentState, BoxCorners};
