pub mod autodiff;
pub mod cli;
pub mod config;
pub mod cropper;
pub mod dataio;
pub mod encoder;
pub mod masker;
pub mod objectives;
pub mod plot;
pub mod probe;
pub mod trainer;
pub mod error;
pub mod util;

pub use error::{Error, Result};
