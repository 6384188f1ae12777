pub mod cascade;
pub mod coincidence;
pub mod error;
pub mod fit;
pub mod photon_mc;
pub mod stream;
pub mod table;

pub use error::{Error, Result};
