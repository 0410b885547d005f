pub mod approximator;
pub mod archspace;
pub mod baselines;
pub mod digest;
pub mod encoder;
pub mod harness;
pub mod layers;
pub mod numerics;
pub mod sampler;
pub mod zoo;
