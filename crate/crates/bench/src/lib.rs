//! Fixtures shared by the benchmarks.

use machest_core::experiment::{estimate, simulate_trial, trial_rng, Estimates};
use machest_core::pilot::PilotRecord;
use machest_core::{ChannelScene, ExperimentConfig};

/// Scene and pilots of trial `trial` under `cfg`.
pub fn fixture(cfg: &ExperimentConfig, trial: u32) -> (ChannelScene, PilotRecord) {
    let mut rng = trial_rng(cfg.sweep.seed, 0, trial);
    simulate_trial(cfg, &mut rng).expect("reference configuration is valid")
}

/// Reference setup with the given number of joint measurements.
pub fn config_with_mc(mc: usize) -> ExperimentConfig {
    ExperimentConfig {
        num_joint_positions: mc,
        ..ExperimentConfig::default()
    }
}

/// Both estimation stages on a fixture.
pub fn estimates(cfg: &ExperimentConfig, rec: &PilotRecord) -> Estimates {
    estimate(cfg, rec).expect("estimation succeeds on reference fixtures")
}
