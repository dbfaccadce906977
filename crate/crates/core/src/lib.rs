//! Surface state-space modelling on icospheres.

pub mod analysis;
pub mod data;
pub mod geometry;
pub mod model;
pub mod ssm;
pub mod tensor;
pub mod training;
