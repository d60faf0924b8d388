pub mod numerics;
pub mod corpus;
pub mod sampler;
pub mod model;
pub mod trainer;
pub mod metrics;
pub mod backend;
pub mod experiment;
pub mod rng;
