pub mod error;
pub mod alignment;
pub mod bias;
pub mod corr;
pub mod css;
pub mod exec;
pub mod gateway;
pub mod gbvs;
pub mod human;
pub mod mask;
pub mod pipeline;
pub mod plot;
pub mod raster;
pub mod stats;
pub mod store;
pub mod synth;
pub mod util;
pub mod whitebox;

pub use error::{Error, Result};
