pub mod audio;
pub mod augment;
pub mod checkpoint;
pub mod clustering;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod formats;
pub mod losses;
pub mod model;
pub mod optim;
pub mod seed;
pub mod train;

pub use error::{Result, SlicerError};
