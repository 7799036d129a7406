pub mod bench;
pub mod cli;
pub mod energy;
pub mod error;
pub mod geometry;
pub mod registration;
pub mod solver;
pub mod uncertainty;

pub use error::{Error, Result};
pub use geometry::{PointCloud, PoseParams, RigidTransform};
pub use registration::{register, RegistrationConfig, RegistrationResult};
