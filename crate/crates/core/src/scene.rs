//! Random ground-truth scenes: `L` independent paths, each with its own
//! departure angle, arrival angle and delay, so the path-response tensor is
//! diagonal.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelScene, PathResponseTensor, SystemParams, VirtualAngle};
use crate::error::{invalid, Result};
use crate::linalg::c64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub num_paths: usize,
    /// Upper bound of the delay distribution in seconds.
    pub tau_max: f64,
    /// Variance of each diagonal gain; `None` means `1 / num_paths`.
    pub gain_variance: Option<f64>,
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_paths: 6,
            tau_max: SystemParams::default().tau_max,
            gain_variance: None,
            rng_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_paths == 0 {
            return Err(invalid("a scene needs at least one path"));
        }
        if !(self.tau_max.is_finite() && self.tau_max > 0.0) {
            return Err(invalid("tau_max must be positive"));
        }
        if let Some(v) = self.gain_variance {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid("gain variance must be positive"));
            }
        }
        Ok(())
    }

    pub fn per_path_variance(&self) -> f64 {
        self.gain_variance
            .unwrap_or(1.0 / self.num_paths as f64)
    }
}

/// Sample a scene from `cfg.rng_seed`.
pub fn sample_scene(cfg: &SceneConfig, sys: &SystemParams) -> Result<ChannelScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    sample_scene_with(cfg, sys, &mut rng)
}

/// Sample a scene from a caller-owned generator (`cfg.rng_seed` is ignored).
///
/// Draw order: delays, Tx angles, Rx angles, gains.
pub fn sample_scene_with<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    sys: &SystemParams,
    rng: &mut R,
) -> Result<ChannelScene> {
    cfg.validate()?;
    sys.validate()?;
    if cfg.tau_max > sys.tau_max {
        return Err(invalid("scene tau_max exceeds the system tau_max"));
    }
    let l = cfg.num_paths;
    let delays = sample_delays(l, cfg.tau_max, sys.sample_period / 1000.0, rng);
    let tx = (0..l).map(|_| sample_virtual_angle(rng)).collect();
    let rx = (0..l).map(|_| sample_virtual_angle(rng)).collect();
    let gains: Vec<c64> = (0..l)
        .map(|_| complex_normal(rng, cfg.per_path_variance()))
        .collect();
    let prt = PathResponseTensor::diagonal(&gains, delays)?;
    ChannelScene::new(prt, tx, rx, *sys)
}

/// `n` uniform delays on `[0, tau_max)`, pairwise at least `min_gap` apart,
/// sorted ascending. Rejection sampling: keep `n * min_gap` far below
/// `tau_max` or this may not terminate.
pub fn sample_delays<R: Rng + ?Sized>(n: usize, tau_max: f64, min_gap: f64, rng: &mut R) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(n);
    while out.len() < n {
        let tau = rng.gen_range(0.0..tau_max);
        if out.iter().all(|&d| (d - tau).abs() >= min_gap) {
            out.push(tau);
        }
    }
    out.sort_by(f64::total_cmp);
    out
}

/// Physical angles with density `cos θ / 2π`: `sin θ ~ U(-1, 1)` and
/// `φ ~ U(-π/2, π/2)`.
pub fn sample_virtual_angle<R: Rng + ?Sized>(rng: &mut R) -> VirtualAngle {
    let sin_theta: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(-FRAC_PI_2..=FRAC_PI_2);
    VirtualAngle::new(sin_theta.asin().cos() * phi.sin(), sin_theta)
}

/// Circularly-symmetric complex Gaussian with the given variance.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> c64 {
    let s = (0.5 * variance).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    c64::new(s * re, s * im)
}
