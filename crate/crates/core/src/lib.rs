pub mod autodiff;
pub mod fusion;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod nifti;
pub mod pipeline;
pub mod resunet;
pub mod synth;
pub mod volume;
