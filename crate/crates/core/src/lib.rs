pub mod error;
pub mod fft;
pub mod field;
pub mod filters;
pub mod gradcheck;
pub mod io;
pub mod metasurface;
pub mod metrics;
pub mod psf;
pub mod synthesis;
pub mod sensor;
pub mod surrogate;

pub use error::{Error, Result};
