pub mod config;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod pipeline;
pub mod preprocess;
pub mod strain;
pub mod synth;
pub mod viz;

pub use error::{Error, Result};
pub use grid::{BinaryMask, FlowField, ScalarGrid};
