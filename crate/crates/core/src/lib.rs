pub mod attention;
pub mod cli;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod image;
pub mod layout;
pub mod losses;
pub mod model;
pub mod numeric;

pub use error::{Error, Result};
