//! Two-stage complex graph neural network for joint fluid-antenna placement
//! and hybrid MRT/ZF beamforming in a multi-user MISO downlink.
//!
//! Stage 1 maps the users' steering angles to antenna positions that are
//! feasible by construction; stage 2 maps the resulting channels to
//! per-user powers and MRT/ZF mixing coefficients. Both stages are trained
//! jointly without labels by maximizing sum rate or energy efficiency.

pub mod baselines;
pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod layers;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod stage1;
pub mod stage2;
pub mod training;

pub use channel::{
    channel_matrix, check_feasibility, energy_efficiency, equidistant_positions, sinr_all,
    steering_vector, sum_rate, AntennaPositions, BeamformingSolution, ChannelMatrix, ChannelSample,
    EquidistantMode, FeasibilityReport, Utility,
};
pub use config::SystemConfig;
pub use dataset::{sample_dataset, Dataset, Split};
pub use error::{FasError, Result};
pub use model::{ArchConfig, TwoStageModel};
pub use pipeline::{infer, PositionSource, Solution};
pub use training::{evaluate, fit, Metrics, TrainConfig, TrainReport};

pub use fas_autodiff as autodiff;
pub use fas_autodiff::{CTensor, C64};
