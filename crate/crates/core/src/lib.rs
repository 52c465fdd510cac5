pub mod augmentation;
pub mod autodiff;
pub mod cli;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod extraction;
pub mod gradcheck;
pub mod injection;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod text;
