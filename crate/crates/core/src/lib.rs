pub mod attention;
pub mod cli;
pub mod conversion;
pub mod error;
pub mod evalbench;
pub mod model;
pub mod tensor;
