//! Desk-scale pipeline that distills pedestrian-behavior semantics from a
//! text teacher into small vision encoders, combines specialist encoders
//! with mixture-of-experts and learnable-query ensembles, decodes
//! open-vocabulary labels, and feeds the distilled embedding into an RNN
//! trajectory predictor.

pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
