#![allow(dead_code)]

use std::f64::consts::PI;

use machest_core::experiment::{simulate_trial, trial_rng};
use machest_core::linalg::{c64, CMat};
use machest_core::pilot::PilotRecord;
use machest_core::{ChannelScene, ExperimentConfig, Position};

/// CFR summed path by path, written out from the physical model.
pub fn cfr_path_sum(scene: &ChannelScene, t: Position, r: Position, k: usize) -> c64 {
    let sys = &scene.system;
    let period = sys.num_subcarriers as f64 * sys.sample_period;
    let prt = &scene.prt;
    let mut h = c64::new(0.0, 0.0);
    for ld in 0..prt.num_delays() {
        let delay_phase = -2.0 * PI * k as f64 * prt.delays()[ld] / period;
        for lt in 0..prt.num_tx() {
            let at = scene.tx_virtual_angles[lt];
            let tx_phase = 2.0 * PI * (t.x * at.azimuth + t.y * at.elevation);
            for lr in 0..prt.num_rx() {
                let ar = scene.rx_virtual_angles[lr];
                let rx_phase = -2.0 * PI * (r.x * ar.azimuth + r.y * ar.elevation);
                let phase = delay_phase + tx_phase + rx_phase;
                h += prt.get(lr, lt, ld) * c64::new(phase.cos(), phase.sin());
            }
        }
    }
    h
}

pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            worst = worst.max((a[(i, j)] - b[(i, j)]).norm());
        }
    }
    worst
}

pub fn rel_err(a: &CMat, b: &CMat) -> f64 {
    (a - b).norm_l2() / b.norm_l2()
}

pub fn fixture(cfg: &ExperimentConfig, trial: u32) -> (ChannelScene, PilotRecord) {
    let mut rng = trial_rng(cfg.sweep.seed, 0, trial);
    simulate_trial(cfg, &mut rng).unwrap()
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
