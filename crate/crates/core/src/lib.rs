pub mod eval;
pub mod grid;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;
pub mod vocab;
pub mod world;
