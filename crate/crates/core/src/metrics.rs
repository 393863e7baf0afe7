//! NMSE over a dense position grid and achievable rate with max-rate
//! position selection.

use serde::{Deserialize, Serialize};

use crate::channel::{drv_unchecked, ChannelScene, Position, Region};
use crate::error::{invalid, Result};
use crate::linalg::{c64, CMat};
use crate::prt::{cfr_slice, EstimatedMpcs, ResponseFactors};

/// `D × D` cell-centered grid over a region, `D² = points_per_region`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points_per_region: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points_per_region: 256,
        }
    }
}

impl GridSpec {
    pub fn side(&self) -> Result<usize> {
        let d = (self.points_per_region as f64).sqrt().round() as usize;
        if d < 2 || d * d != self.points_per_region {
            return Err(invalid(format!(
                "metric grid needs D^2 points with D >= 2, got {}",
                self.points_per_region
            )));
        }
        Ok(d)
    }

    /// Row-major positions (x fastest).
    pub fn positions(&self, region: Region) -> Result<Vec<Position>> {
        let d = self.side()?;
        let s = region.normalized_size;
        let c = |i: usize| -0.5 * s + s / d as f64 * (i as f64 + 0.5);
        Ok((0..d * d).map(|m| Position::new(c(m % d), c(m / d))).collect())
    }

    /// Index of the grid point nearest the origin, lowest index on ties.
    pub fn nearest_to_origin(&self, region: Region) -> Result<usize> {
        let pts = self.positions(region)?;
        let mut best = 0;
        for (i, p) in pts.iter().enumerate() {
            let q = pts[best];
            if p.x * p.x + p.y * p.y < q.x * q.x + q.y * q.y {
                best = i;
            }
        }
        Ok(best)
    }
}

/// `blkdiag(Σ_k, −Σ̂_k)`.
fn stacked_slices(true_slice: &CMat, est_slice: &CMat) -> CMat {
    let (r1, t1) = (true_slice.nrows(), true_slice.ncols());
    let (r2, t2) = (est_slice.nrows(), est_slice.ncols());
    CMat::from_fn(r1 + r2, t1 + t2, |i, j| {
        if i < r1 && j < t1 {
            true_slice[(i, j)]
        } else if i >= r1 && j >= t1 {
            -est_slice[(i - r1, j - t1)]
        } else {
            c64::new(0.0, 0.0)
        }
    })
}

/// `‖F M G^T‖²` given `A = F^H F` and `B = G^T conj(G)`.
fn factored_norm2(m: &CMat, a: &CMat, b: &CMat) -> f64 {
    // tr(M^H A M B) = Σ conj(M) ∘ (A M B)
    let amb = a * m * b;
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            acc += (m[(i, j)].conj() * amb[(i, j)]).re;
        }
    }
    acc.max(0.0)
}

fn stacked_factors(parts: &[&ResponseFactors]) -> (CMat, CMat) {
    let nr = parts[0].rx.nrows();
    let nt = parts[0].tx.nrows();
    let lr: usize = parts.iter().map(|p| p.rx.ncols()).sum();
    let lt: usize = parts.iter().map(|p| p.tx.ncols()).sum();
    let mut f = CMat::zeros(nr, lr);
    let mut g = CMat::zeros(nt, lt);
    let (mut cr, mut ct) = (0, 0);
    for p in parts {
        for j in 0..p.rx.ncols() {
            for i in 0..nr {
                f[(i, cr + j)] = p.rx[(i, j)];
            }
        }
        for j in 0..p.tx.ncols() {
            for i in 0..nt {
                g[(i, ct + j)] = p.tx[(i, j)];
            }
        }
        cr += p.rx.ncols();
        ct += p.tx.ncols();
    }
    let a = f.adjoint() * &f;
    let b = (g.adjoint() * &g).conjugate().to_owned();
    (a, b)
}

/// `Σ_k ‖H_k − Ĥ_k‖² / Σ_k ‖H_k‖²` over all `D² × D²` position pairs and all
/// `K` subcarriers, evaluated through Gram matrices of the response factors.
pub fn nmse(scene: &ChannelScene, est: &EstimatedMpcs, grid: &GridSpec, region: Region) -> Result<f64> {
    est.validate(f64::INFINITY)?;
    let pos = grid.positions(region)?;
    let truth = EstimatedMpcs::from_scene(scene);
    let sys = &scene.system;
    let ts = sys.symbol_time();
    let tf = ResponseFactors::new(&truth, &pos, &pos);
    let shared = est.tx_angles == truth.tx_angles
        && est.rx_angles == truth.rx_angles
        && est.delays == truth.delays;

    let (at, bt) = stacked_factors(&[&tf]);
    let (mut num, mut den) = (0.0, 0.0);
    if shared {
        for k in 0..sys.num_subcarriers {
            let st = truth.slice_at(k, ts);
            let se = est.slice_at(k, ts);
            let diff = &st - &se;
            num += factored_norm2(&diff, &at, &bt);
            den += factored_norm2(&st, &at, &bt);
        }
    } else {
        let ef = ResponseFactors::new(est, &pos, &pos);
        let (a, b) = stacked_factors(&[&tf, &ef]);
        for k in 0..sys.num_subcarriers {
            let st = truth.slice_at(k, ts);
            let se = est.slice_at(k, ts);
            num += factored_norm2(&stacked_slices(&st, &se), &a, &b);
            den += factored_norm2(&st, &at, &bt);
        }
    }
    if den == 0.0 {
        return Err(invalid("true channel is identically zero on the grid"));
    }
    Ok(num / den)
}

/// Brute-force NMSE that materializes every CFR slice.
pub fn nmse_dense(scene: &ChannelScene, est: &EstimatedMpcs, grid: &GridSpec, region: Region) -> Result<f64> {
    let pos = grid.positions(region)?;
    let truth = EstimatedMpcs::from_scene(scene);
    let ts = scene.system.symbol_time();
    let tf = ResponseFactors::new(&truth, &pos, &pos);
    let ef = ResponseFactors::new(est, &pos, &pos);
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..scene.system.num_subcarriers {
        let h = cfr_slice(&truth, &tf, k, ts);
        let he = cfr_slice(est, &ef, k, ts);
        num += (&h - &he).squared_norm_l2();
        den += h.squared_norm_l2();
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    /// bits/s/Hz including the cyclic-prefix overhead.
    pub rate: f64,
    pub tx: Position,
    pub rx: Position,
    /// Number of position pairs whose exact rate was evaluated.
    pub pairs_evaluated: usize,
}

/// Per-delay coupling `c_ij[l] = f_i^H Σ_l g_j` for every Tx point `j` and
/// Rx point `i`, stored as one `N_r × N_t` matrix per delay.
struct Coupling {
    per_delay: Vec<CMat>,
    delays: Vec<f64>,
}

impl Coupling {
    fn new(csi: &EstimatedMpcs, pos: &[Position]) -> Self {
        let f = ResponseFactors::new(csi, pos, pos);
        let (lt, lr) = (csi.num_tx(), csi.num_rx());
        let per_delay = (0..csi.num_delays())
            .map(|l| {
                let s = CMat::from_fn(lr, lt, |r, t| csi.x_hat[(t * lr + r, l)]);
                &f.rx * s * f.tx.transpose()
            })
            .collect();
        Self {
            per_delay,
            delays: csi.delays.clone(),
        }
    }

    fn coeffs(&self, r: usize, t: usize) -> Vec<c64> {
        self.per_delay.iter().map(|m| m[(r, t)]).collect()
    }
}

fn spectral_efficiency_sum(c: &[c64], dvecs: &[Vec<c64>], snr: f64) -> f64 {
    dvecs
        .iter()
        .map(|d| {
            let h: c64 = c.iter().zip(d).map(|(a, b)| a * b).sum();
            (1.0 + snr * h.norm_sqr()).log2()
        })
        .sum()
}

/// Rate evaluation on one scene's metric grid. The true channel is
/// tabulated once and shared by every CSI scored against it, so the
/// perfect-CSI rate is exactly the maximum over the grid of the same values
/// every other selection is scored with.
pub struct RateContext {
    pos: Vec<Position>,
    truth: Coupling,
    dvecs: Vec<Vec<c64>>,
    snr: f64,
    symbol_time: f64,
    num_subcarriers: usize,
    cp_length: usize,
    fpa_index: usize,
}

impl RateContext {
    pub fn new(scene: &ChannelScene, grid: &GridSpec, region: Region, tx_power: f64, noise_power: f64) -> Result<Self> {
        if !(tx_power > 0.0 && noise_power >= 0.0) {
            return Err(invalid("tx power must be positive and noise power nonnegative"));
        }
        let pos = grid.positions(region)?;
        let sys = &scene.system;
        let ts = sys.symbol_time();
        let truth = Coupling::new(&EstimatedMpcs::from_scene(scene), &pos);
        let dvecs = (0..sys.num_subcarriers)
            .map(|k| drv_unchecked(k, &truth.delays, ts))
            .collect();
        Ok(Self {
            pos,
            truth,
            dvecs,
            snr: tx_power / noise_power,
            symbol_time: ts,
            num_subcarriers: sys.num_subcarriers,
            cp_length: sys.cp_length,
            fpa_index: grid.nearest_to_origin(region)?,
        })
    }

    fn n(&self) -> usize {
        self.pos.len()
    }

    fn true_rate(&self, idx: usize) -> f64 {
        let n = self.n();
        let c = self.truth.coeffs(idx % n, idx / n);
        spectral_efficiency_sum(&c, &self.dvecs, self.snr) / (self.num_subcarriers + self.cp_length) as f64
    }

    fn result(&self, idx: usize, evaluated: usize) -> RateResult {
        let n = self.n();
        RateResult {
            rate: self.true_rate(idx),
            tx: self.pos[idx / n],
            rx: self.pos[idx % n],
            pairs_evaluated: evaluated,
        }
    }

    /// Pair index `t·N + r` maximizing the rate predicted by `csi`.
    ///
    /// Exact: pairs are visited in decreasing order of the Jensen bound
    /// `K log2(1 + snr·E/K)`, `E = Σ_k |h_k|²`, and the search stops once the
    /// bound falls below the best exact value found.
    fn select(&self, csi: &EstimatedMpcs) -> (usize, usize) {
        let n = self.n();
        let kk = self.num_subcarriers;
        let coupling = Coupling::new(csi, &self.pos);
        let dvecs: Vec<Vec<c64>> = (0..kk)
            .map(|k| drv_unchecked(k, &coupling.delays, self.symbol_time))
            .collect();
        let ld = coupling.delays.len();
        // Σ_k |c^T d(k)|² = c^H Q c with Q = Σ_k conj(d) d^T
        let mut q = CMat::zeros(ld, ld);
        for d in &dvecs {
            for a in 0..ld {
                for b in 0..ld {
                    q[(a, b)] += d[a].conj() * d[b];
                }
            }
        }
        let mut bounds: Vec<(f64, usize)> = Vec::with_capacity(n * n);
        for t in 0..n {
            for r in 0..n {
                let c = coupling.coeffs(r, t);
                let mut e = 0.0;
                for a in 0..ld {
                    let mut row = c64::new(0.0, 0.0);
                    for b in 0..ld {
                        row += q[(a, b)] * c[b];
                    }
                    e += (c[a].conj() * row).re;
                }
                let upper = kk as f64 * (1.0 + self.snr * e.max(0.0) / kk as f64).log2();
                bounds.push((upper, t * n + r));
            }
        }
        bounds.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

        let mut best = f64::NEG_INFINITY;
        let mut best_idx = usize::MAX;
        let mut evaluated = 0;
        for &(upper, idx) in &bounds {
            if upper * (1.0 + 1e-12) + 1e-12 < best {
                break;
            }
            let c = coupling.coeffs(idx % n, idx / n);
            let val = spectral_efficiency_sum(&c, &dvecs, self.snr);
            evaluated += 1;
            if val > best || (val == best && idx < best_idx) {
                best = val;
                best_idx = idx;
            }
        }
        (best_idx, evaluated)
    }

    /// Select positions with `csi`, score them on the true channel.
    pub fn achievable_rate(&self, csi: &EstimatedMpcs) -> Result<RateResult> {
        csi.validate(f64::INFINITY)?;
        let (idx, evaluated) = self.select(csi);
        Ok(self.result(idx, evaluated))
    }

    /// Both antennas fixed at the grid point nearest the origin.
    pub fn fpa(&self) -> RateResult {
        self.result(self.fpa_index * self.n() + self.fpa_index, 1)
    }

    /// Exhaustive argmax of the true rate, for cross-checking [`Self::select`].
    pub fn brute_force_perfect(&self) -> RateResult {
        let n = self.n();
        let mut best = (f64::NEG_INFINITY, 0);
        for idx in 0..n * n {
            let r = self.true_rate(idx);
            if r > best.0 {
                best = (r, idx);
            }
        }
        self.result(best.1, n * n)
    }
}

/// Select the position pair maximizing the rate under `csi`, then report the
/// rate the true channel delivers at that pair.
pub fn achievable_rate(
    scene: &ChannelScene,
    csi: &EstimatedMpcs,
    grid: &GridSpec,
    region: Region,
    tx_power: f64,
    noise_power: f64,
) -> Result<RateResult> {
    RateContext::new(scene, grid, region, tx_power, noise_power)?.achievable_rate(csi)
}

/// Fixed-position baseline.
pub fn fpa_rate(scene: &ChannelScene, grid: &GridSpec, region: Region, tx_power: f64, noise_power: f64) -> Result<RateResult> {
    Ok(RateContext::new(scene, grid, region, tx_power, noise_power)?.fpa())
}

/// Achievable rate of the true channel at an arbitrary position pair.
pub fn rate_at(scene: &ChannelScene, t: Position, r: Position, tx_power: f64, noise_power: f64) -> f64 {
    let sys = &scene.system;
    let coupling = Coupling::new(&EstimatedMpcs::from_scene(scene), &[t, r]);
    let c = coupling.coeffs(1, 0);
    let dvecs: Vec<Vec<c64>> = (0..sys.num_subcarriers)
        .map(|k| drv_unchecked(k, scene.prt.delays(), sys.symbol_time()))
        .collect();
    spectral_efficiency_sum(&c, &dvecs, tx_power / noise_power) / (sys.num_subcarriers + sys.cp_length) as f64
}
