pub mod analysis;
pub mod attrib;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod lpca;
pub mod robust;

pub use error::{Error, Result};
