//! Learns globally linear latent dynamics for nonlinear systems by training an
//! extended Kalman filter / RTS smoother end to end. The filter acts as an
//! implicit encoder: only a decoder network is learned, and the latent state
//! evolves under a block-companion linear map whose spectrum is then used for
//! prediction and eigenfunction analysis.

pub mod analysis;
pub mod autodiff;
pub mod baselines;
pub mod inference;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod systems;
pub mod tensor;
pub mod training;

pub use autodiff::{ParamId, ParamStore, Parameter, Tape, Var};
pub use model::{DecoderVariant, KalikoModel, ModelConfig};
pub use systems::{Dataset, NormStats, OdeSystem, Trajectory};
pub use tensor::Tensor;
