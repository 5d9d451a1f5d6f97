pub mod error;
pub mod curvature;
pub mod data;
pub mod driver;
pub mod io;
pub mod linalg;
pub mod net;
pub mod oracle;
pub mod penalty;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Matrix;
