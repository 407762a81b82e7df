//! Gait recognition from skeletons and silhouettes.
//!
//! The crate contains a small reverse-mode differentiation engine, the
//! three-scale skeleton graph and its graph network, a part-based silhouette
//! encoder, the part-wise fusion head with its losses and SGD training loops,
//! a synthetic gait dataset generator, and the gallery/probe evaluation
//! protocol.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod extract;
pub mod fusion;
pub mod gradsuite;
pub mod graph;
pub mod loss;
pub mod msgg;
pub mod optim;
pub mod params;
pub mod rng;
pub mod silhouette;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
