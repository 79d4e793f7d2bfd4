pub mod augment;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod external;
pub mod geometry;
pub mod nn;
pub mod queue;
pub mod rng;
pub mod synth;
pub mod teacher;
pub mod tensor;
pub mod train;
pub mod vocab;
