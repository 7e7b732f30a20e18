pub mod container;
pub mod datapipe;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod params;
pub mod refiner;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod tape;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use tape::{Tape, Var};

pub type Tensor = tensor::Tensor<f64>;
pub type Model = model::DitModel<f64>;
pub type ConditionBundle = model::ConditionBundle<f64>;
pub use model::ModelConfig;
pub use flow::{SamplerConfig, VelocityField};
