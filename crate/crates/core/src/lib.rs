pub mod augment;
pub mod eval;
pub mod experiment;
pub mod image;
pub mod scaling;
pub mod seed;
pub mod ssl;
pub mod stream;
pub mod tensor;
pub mod world;
