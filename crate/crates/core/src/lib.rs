pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod infer;
pub mod kb;
pub mod model;
pub mod qa;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod transe;
