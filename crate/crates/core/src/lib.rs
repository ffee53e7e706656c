pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod importance;
pub mod losses;
pub mod model;
pub mod pruner;
pub mod tensor;
pub mod trainer;
