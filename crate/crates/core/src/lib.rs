pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod ops;
pub mod optim;
pub mod params;
pub mod resample;
pub mod saam;
pub mod scale;
pub mod simam;
pub mod tensor;
pub mod train;
pub mod upsampler;

pub use autodiff::{Gradients, Tape, Var};
pub use config::{RunConfig, TrainConfig};
pub use error::{CheckpointError, Error, Result};
pub use model::{Model, ModelConfig};
pub use scale::{RoundMode, ScalePair};
pub use tensor::{Activation, ConvGeometry, ConvSpec, Real, Shape, Tensor};
