pub mod algorithms;
pub mod ensembles;
pub mod error;
pub mod error_model;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod moments;
pub mod onsager;
pub mod se;

pub use error::{Error, Result};
