pub mod analysis;
pub mod closed_loop;
pub mod decomposition;
pub mod error;
pub mod jordan;
pub mod linalg;
pub mod quantizer;
pub mod system;
pub mod transforms;

pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use linalg::{Matrix, Vector};
