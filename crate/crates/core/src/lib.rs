pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gmm;
pub mod graph;
pub mod linalg;
pub mod pipeline;
pub mod seed;
pub mod sketch;
pub mod subgraph;
pub mod synth;

pub use error::{Error, Result};
