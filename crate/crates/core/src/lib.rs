pub mod datagen;
pub mod dpl;
pub mod error;
pub mod ica;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod protocol;
pub mod seed;

pub use error::{Error, Result};
pub use labels::{Annotation, ClassSet};
