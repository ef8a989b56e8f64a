pub mod admm;
pub mod cover;
pub mod error;
pub mod geom;
pub mod io;
pub mod nview;
pub mod register;
pub mod synth;

pub use error::{Error, Result};
