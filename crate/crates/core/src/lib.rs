pub mod dataio;
pub mod effects;
pub mod error;
pub mod graph;
pub mod inference;
pub mod panel;
pub mod propensity;
pub mod random_fields;
pub mod scalar;
pub mod sir;
pub mod study;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type SparsePrecisionF64 = graph::SparsePrecision<f64>;
pub type SparsePrecisionF32 = graph::SparsePrecision<f32>;
pub type CarParamsF64 = random_fields::CarParams<f64>;
pub type CarParamsF32 = random_fields::CarParams<f32>;
pub type StcarParamsF64 = random_fields::StcarParams<f64>;
pub type StcarParamsF32 = random_fields::StcarParams<f32>;
pub type EpidemicStateF64 = sir::EpidemicState<f64>;
pub type EpidemicStateF32 = sir::EpidemicState<f32>;
