//! Wideband movable-antenna channel estimation.
//!
//! The crate simulates a point-to-point OFDM link whose transmit and receive
//! antennas can move inside square regions, measures pilots at a planned set
//! of positions, and reconstructs the channel at every position pair and
//! subcarrier from a sparse multipath description:
//!
//! 1. [`somp`] recovers transmit angles, receive angles and delays on
//!    discrete grids;
//! 2. [`prt`] solves the two-sided least-squares problem for the path-response
//!    tensor;
//! 3. [`refine`] moves the angles and delays off the grid by projected
//!    gradient descent;
//! 4. [`metrics`] scores the estimate by NMSE and achievable rate.
//!
//! [`experiment`] ties everything together into seeded Monte-Carlo sweeps.

// negated float comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod pilot;
pub mod prt;
pub mod refine;
pub mod scene;
pub mod somp;

pub use channel::{
    cfr, devectorize_x, drv, frv, matricize_prt, ChannelScene, PathResponseTensor, Position,
    Region, SystemParams, VirtualAngle,
};
pub use error::{Error, Result};
pub use experiment::{AxisValue, Estimates, ExperimentConfig, RunOptions, SweepAxis, TrialDetail, TrialRecord};
pub use linalg::{c64, CMat};
pub use metrics::GridSpec;
pub use pilot::{LayoutKind, MeasurementPlan, PilotGrid, PilotMatrices};
pub use prt::EstimatedMpcs;
pub use refine::{ParamVectors, RefineConfig};
pub use scene::SceneConfig;
pub use somp::{AngleGrid, DelayGrid, SompResult};
