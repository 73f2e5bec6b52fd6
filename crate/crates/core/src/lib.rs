pub mod augment;
pub mod bench;
pub mod corruption;
pub mod error;
pub mod fsutil;
pub mod fusion;
pub mod geom;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
