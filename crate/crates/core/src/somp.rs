//! Grid dictionaries and simultaneous orthogonal matching pursuit.

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelScene, PathResponseTensor, Position, VirtualAngle};
use crate::error::{invalid, Result};
use crate::linalg::{c64, pinv, CMat};
use crate::pilot::{stack_vd, MeasurementPlan, PilotGrid, PilotMatrices};

use std::f64::consts::PI;

/// `G × G` grid of virtual angles, values `-1 + (2g - 1)/G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AngleGrid {
    pub resolution: usize,
}

impl AngleGrid {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(invalid("angle grid needs a positive resolution"));
        }
        Ok(Self { resolution })
    }

    pub fn num_atoms(&self) -> usize {
        self.resolution * self.resolution
    }

    /// Grid value for the zero-based coordinate `i`.
    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        -1.0 + (2 * i + 1) as f64 / self.resolution as f64
    }

    /// Angle for the zero-based atom index (azimuth varies fastest).
    pub fn atom(&self, idx: usize) -> VirtualAngle {
        let g = self.resolution;
        VirtualAngle::new(self.value(idx % g), self.value(idx / g))
    }

    fn nearest_coord(&self, v: f64) -> usize {
        let g = self.resolution as f64;
        (((v + 1.0) * g - 1.0) / 2.0).round().clamp(0.0, g - 1.0) as usize
    }

    /// Zero-based index of the atom nearest to `a`.
    pub fn nearest(&self, a: VirtualAngle) -> usize {
        self.nearest_coord(a.azimuth) + self.resolution * self.nearest_coord(a.elevation)
    }
}

/// One-based atom index `g` of a `G × G` grid to its virtual angle.
pub fn decode_angle_index(g: usize, resolution: usize) -> Result<VirtualAngle> {
    let grid = AngleGrid::new(resolution)?;
    if g == 0 || g > grid.num_atoms() {
        return Err(invalid(format!(
            "angle index {g} outside 1..={}",
            grid.num_atoms()
        )));
    }
    Ok(grid.atom(g - 1))
}

/// `G_d` delays `τ_max/(2G_d) + τ_max/G_d·(g - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayGrid {
    pub resolution: usize,
    pub tau_max: f64,
}

impl DelayGrid {
    pub fn new(resolution: usize, tau_max: f64) -> Result<Self> {
        if resolution == 0 || !(tau_max > 0.0) {
            return Err(invalid("delay grid needs a positive resolution and tau_max"));
        }
        Ok(Self { resolution, tau_max })
    }

    /// Zero-based atom.
    #[inline]
    pub fn atom(&self, i: usize) -> f64 {
        let step = self.tau_max / self.resolution as f64;
        0.5 * step + step * i as f64
    }

    pub fn nearest(&self, tau: f64) -> usize {
        let g = self.resolution as f64;
        (tau / self.tau_max * g - 0.5).round().clamp(0.0, g - 1.0) as usize
    }
}

/// Discretized field-response dictionary: row `m` holds the response of
/// every grid atom at `positions[m]`; conjugated when `conjugate` is set.
pub fn build_angle_dictionary(grid: AngleGrid, positions: &[Position], conjugate: bool) -> Result<CMat> {
    if positions.is_empty() {
        return Err(invalid("angle dictionary needs at least one position"));
    }
    let g = grid.resolution;
    let sign = if conjugate { -1.0 } else { 1.0 };
    let mut dict = CMat::zeros(positions.len(), grid.num_atoms());
    let mut ex = vec![c64::new(0.0, 0.0); g];
    let mut ey = vec![c64::new(0.0, 0.0); g];
    for (m, p) in positions.iter().enumerate() {
        for i in 0..g {
            ex[i] = c64::cis(sign * 2.0 * PI * p.x * grid.value(i));
            ey[i] = c64::cis(sign * 2.0 * PI * p.y * grid.value(i));
        }
        for gy in 0..g {
            for gx in 0..g {
                dict[(m, gx + g * gy)] = ex[gx] * ey[gy];
            }
        }
    }
    Ok(dict)
}

/// Discretized delay dictionary, `M_d × G_d`.
pub fn build_delay_dictionary(
    grid: DelayGrid,
    pilot_indices: &[usize],
    num_subcarriers: usize,
    sample_period: f64,
) -> Result<CMat> {
    if let Some(&k) = pilot_indices.iter().find(|&&k| k >= num_subcarriers) {
        return Err(invalid(format!("pilot subcarrier {k} out of range")));
    }
    let w = -2.0 * PI / (num_subcarriers as f64 * sample_period);
    Ok(CMat::from_fn(pilot_indices.len(), grid.resolution, |m, g| {
        c64::cis(w * pilot_indices[m] as f64 * grid.atom(g))
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SompConfig {
    /// Minimum decrement `ε_0` of the normalized residual.
    pub threshold: f64,
    pub max_iter: usize,
}

impl Default for SompConfig {
    fn default() -> Self {
        Self {
            threshold: 0.02,
            max_iter: 10,
        }
    }
}

impl SompConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || !(self.threshold >= 0.0) {
            return Err(invalid("SOMP needs max_iter >= 1 and a nonnegative threshold"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SompResult {
    /// Zero-based column indices in selection order.
    pub support: Vec<usize>,
    /// Normalized residual after each accepted step, starting from 1.
    pub residual_history: Vec<f64>,
    /// Least-squares coefficients over `support` (`|support| × P`).
    pub coefficients: CMat,
    /// Column picked in the first iteration, even if it was not accepted.
    pub first_choice: Option<usize>,
    pub rank_deficient: bool,
}

/// Greedy joint-sparse recovery of `observations ≈ √p_t · measurement · Q`.
///
/// Each iteration picks the column maximizing `Σ_p |φ_n^H r_p|`, solves the
/// least-squares problem on the extended support and keeps the extension
/// only if the normalized residual drops by more than `cfg.threshold`.
pub fn somp(measurement: &CMat, observations: &CMat, tx_power: f64, cfg: &SompConfig) -> Result<SompResult> {
    cfg.validate()?;
    let (m, n) = (measurement.nrows(), measurement.ncols());
    let p = observations.ncols();
    if m == 0 || n == 0 || p == 0 || observations.nrows() != m {
        return Err(invalid(format!(
            "SOMP shapes: measurement {m}x{n}, observations {}x{p}",
            observations.nrows()
        )));
    }
    if !(tx_power > 0.0) {
        return Err(invalid("tx power must be positive"));
    }
    let y_norm = observations.norm_l2();
    let mut result = SompResult {
        support: Vec::new(),
        residual_history: vec![1.0],
        coefficients: CMat::zeros(0, p),
        first_choice: None,
        rank_deficient: false,
    };
    if y_norm == 0.0 {
        return Ok(result);
    }

    let c0 = measurement.adjoint() * observations;
    // Φ^H Φ_S, grown one column per accepted atom
    let mut gram_cols: Vec<Vec<c64>> = Vec::new();
    let mut corr = c0.clone();
    let mut selected = vec![false; n];
    let mut eps_prev = 1.0;

    while result.support.len() < cfg.max_iter.min(n) {
        let mut best = None;
        let mut best_score = f64::NEG_INFINITY;
        for col in 0..n {
            if selected[col] {
                continue;
            }
            let score: f64 = (0..p).map(|j| corr[(col, j)].norm()).sum();
            if score > best_score {
                best_score = score;
                best = Some(col);
            }
        }
        let Some(pick) = best else { break };
        result.first_choice.get_or_insert(pick);

        let mut trial = result.support.clone();
        trial.push(pick);
        let sub = CMat::from_fn(m, trial.len(), |i, j| measurement[(i, trial[j])]);
        let pi = pinv(sub.as_ref())?;
        let q = &pi.matrix * observations;
        let resid = observations - &sub * &q;
        let eps = resid.norm_l2() / y_norm;
        if eps_prev - eps <= cfg.threshold {
            break;
        }

        selected[pick] = true;
        let new_col = measurement.adjoint() * sub.subcols(trial.len() - 1, 1);
        gram_cols.push((0..n).map(|i| new_col[(i, 0)]).collect());
        result.support = trial;
        result.residual_history.push(eps);
        result.rank_deficient |= pi.rank_deficient;
        let scale = 1.0 / tx_power.sqrt();
        result.coefficients = CMat::from_fn(q.nrows(), q.ncols(), |i, j| q[(i, j)] * scale);
        eps_prev = eps;

        // Φ^H R = Φ^H Y - (Φ^H Φ_S) Q
        corr = c0.clone();
        for (s, gc) in gram_cols.iter().enumerate() {
            for j in 0..p {
                let qs = q[(s, j)];
                for (i, &gv) in gc.iter().enumerate() {
                    corr[(i, j)] -= gv * qs;
                }
            }
        }
    }
    Ok(result)
}

/// Angle and delay grids used by the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    pub angle: AngleGrid,
    pub delay: DelayGrid,
}

/// Grid atoms selected by the three SOMP runs.
#[derive(Debug, Clone)]
pub struct AngleDelayEstimate {
    pub tx_angles: Vec<VirtualAngle>,
    pub rx_angles: Vec<VirtualAngle>,
    pub delays: Vec<f64>,
    pub rank_deficient: bool,
    /// Set when some run accepted no atom and fell back to its first pick.
    pub empty_support: bool,
}

fn support_or_first(r: &SompResult, empty: &mut bool) -> Vec<usize> {
    if r.support.is_empty() {
        *empty = true;
        r.first_choice.into_iter().collect()
    } else {
        r.support.clone()
    }
}

/// Departure angles from step 1, arrival angles from step 2, delays from all
/// three steps.
pub fn estimate_angles_delays(
    pilots: &PilotMatrices,
    plan: &MeasurementPlan,
    pilot_grid: &PilotGrid,
    grids: &Grids,
    sample_period: f64,
    cfg: &SompConfig,
) -> Result<AngleDelayEstimate> {
    let pt = pilots.tx_power;
    let mut empty = false;

    let g_t = build_angle_dictionary(grids.angle, &plan.tx_positions, false)?;
    let aod = somp(&g_t, &pilots.v_t, pt, cfg)?;
    let f_r = build_angle_dictionary(grids.angle, &plan.rx_positions, true)?;
    let aoa = somp(&f_r, &pilots.v_r, pt, cfg)?;
    let d = build_delay_dictionary(
        grids.delay,
        pilot_grid.pilot_indices(),
        pilot_grid.num_subcarriers(),
        sample_period,
    )?;
    let del = somp(&d, &stack_vd(pilots), pt, cfg)?;

    let tx = support_or_first(&aod, &mut empty);
    let rx = support_or_first(&aoa, &mut empty);
    let dl = support_or_first(&del, &mut empty);
    if tx.is_empty() || rx.is_empty() || dl.is_empty() {
        return Err(invalid("pilot observations are identically zero"));
    }
    Ok(AngleDelayEstimate {
        tx_angles: tx.iter().map(|&i| grids.angle.atom(i)).collect(),
        rx_angles: rx.iter().map(|&i| grids.angle.atom(i)).collect(),
        delays: dl.iter().map(|&i| grids.delay.atom(i)).collect(),
        rank_deficient: aod.rank_deficient || aoa.rank_deficient || del.rank_deficient,
        empty_support: empty,
    })
}

/// Move every angle and delay of `scene` to its nearest grid atom.
///
/// Fails when two delays land on the same atom.
pub fn snap_scene_to_grids(scene: &ChannelScene, grids: &Grids) -> Result<ChannelScene> {
    let snap = |v: &[VirtualAngle]| -> Vec<VirtualAngle> {
        v.iter().map(|&a| grids.angle.atom(grids.angle.nearest(a))).collect()
    };
    let delays: Vec<f64> = scene
        .prt
        .delays()
        .iter()
        .map(|&t| grids.delay.atom(grids.delay.nearest(t)))
        .collect();
    let prt = PathResponseTensor::new(
        scene.prt.num_rx(),
        scene.prt.num_tx(),
        scene.prt.gains().to_vec(),
        delays,
    )
    .map_err(|_| invalid("two delays snap to the same grid atom"))?;
    ChannelScene::new(
        prt,
        snap(&scene.tx_virtual_angles),
        snap(&scene.rx_virtual_angles),
        scene.system,
    )
}
