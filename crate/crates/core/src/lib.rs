pub mod artifact;
pub mod curvature;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod glm;
pub mod gp;
pub mod likelihood;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod posterior;
pub mod reference;
pub mod training;

pub use error::{Error, Result};
