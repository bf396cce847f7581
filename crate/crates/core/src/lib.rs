pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod model;
pub mod numerics;
pub mod preproc;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
