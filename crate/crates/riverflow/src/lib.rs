//! End-to-end river discharge forecasting on gauge networks.
//!
//! The crate covers the full pipeline: DAG preprocessing of the gauge
//! network, adjacency construction and normalization, windowed dataset
//! handling with relevancy scoring, a small reverse-mode autodiff engine,
//! three residual GNN architectures, relevancy-weighted training, weighted
//! Nash-Sutcliffe evaluation across train-test splits, and a deterministic
//! synthetic data generator for development and testing.

pub mod adjacency;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod graph;
pub mod models;
pub mod report;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
