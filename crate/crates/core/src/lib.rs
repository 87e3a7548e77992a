//! Generative ConvNet: an energy-based image model obtained by tilting
//! Gaussian white noise with the score of a ReLU ConvNet.
//!
//! On every activation pattern the score is affine in the image, so the
//! density is a truncated Gaussian whose mean is the top-down reconstruction
//! `σ²B`. The crate provides the network, that linearization, Langevin
//! sampling, maximum-likelihood and contrastive-divergence learning, and
//! brute-force oracles that check those structural facts numerically.

pub mod error;
pub mod fixtures;
pub mod learner;
pub mod linearize;
pub mod net;
pub mod oracle;
pub mod prototype;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use learner::{train, Growth, GrowthStage, ParamGrad, TrainConfig, TrainMode, TrainOutcome};
pub use linearize::{energy, grad_score, top_down, LinearPiece};
pub use net::{forward, init_network, score_conv, ActivationPattern, ArchSpec, LayerShape, Network, TopMode};
pub use sampler::{descend, langevin_run, langevin_step, ChainState, LangevinConfig};
pub use tensor::{SeededRng, Shape, Tensor3};
