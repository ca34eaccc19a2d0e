pub mod bc;
pub mod demos;
pub mod env;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod plots;
pub mod policy;
pub mod seeding;
pub mod tensor;
pub mod value;

pub use error::{Result, RftfError};
