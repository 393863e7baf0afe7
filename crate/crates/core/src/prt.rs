//! Two-sided least-squares estimation of the matricized path-response
//! tensor and CFR reconstruction from estimated multipath components.

use serde::{Deserialize, Serialize};

use crate::channel::{
    devectorize_x, drv_unchecked, frv_unchecked, matricize_prt, ChannelScene, PathResponseTensor,
    Position, SystemParams, VirtualAngle,
};
use crate::error::{ensure_dim, invalid, Result, Warnings};
use crate::linalg::{c64, pinv, serde_cmat, CMat};
use crate::pilot::{MeasurementPlan, PilotGrid, PilotMatrices};
use crate::somp::{estimate_angles_delays, Grids, SompConfig};

/// Estimated angles, delays and matricized path responses. Enough to
/// reconstruct the CFR at any position pair and subcarrier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedMpcs {
    pub tx_angles: Vec<VirtualAngle>,
    pub rx_angles: Vec<VirtualAngle>,
    /// Seconds.
    pub delays: Vec<f64>,
    /// `L_t·L_r × L_d`, row `lt·L_r + lr`.
    #[serde(with = "serde_cmat")]
    pub x_hat: CMat,
}

impl EstimatedMpcs {
    /// Exact multipath description of a ground-truth scene.
    pub fn from_scene(scene: &ChannelScene) -> Self {
        Self {
            tx_angles: scene.tx_virtual_angles.clone(),
            rx_angles: scene.rx_virtual_angles.clone(),
            delays: scene.prt.delays().to_vec(),
            x_hat: matricize_prt(&scene.prt),
        }
    }

    pub fn validate(&self, tau_max: f64) -> Result<()> {
        if self.tx_angles.is_empty() || self.rx_angles.is_empty() || self.delays.is_empty() {
            return Err(invalid("estimate needs at least one angle per side and one delay"));
        }
        ensure_dim("x_hat rows", self.tx_angles.len() * self.rx_angles.len(), self.x_hat.nrows())?;
        ensure_dim("x_hat columns", self.delays.len(), self.x_hat.ncols())?;
        if self.delays.iter().any(|&d| !(0.0..=tau_max).contains(&d)) {
            return Err(invalid("estimated delays must lie in [0, tau_max]"));
        }
        Ok(())
    }

    pub fn num_tx(&self) -> usize {
        self.tx_angles.len()
    }

    pub fn num_rx(&self) -> usize {
        self.rx_angles.len()
    }

    pub fn num_delays(&self) -> usize {
        self.delays.len()
    }

    /// Reshape `x_hat` into a tensor (delays sorted).
    pub fn to_tensor(&self) -> Result<PathResponseTensor> {
        devectorize_x(&self.x_hat, self.num_tx(), self.num_rx(), &self.delays)
    }

    /// `Σ_k = X d(k)` arranged as an `L_r × L_t` matrix.
    pub fn slice_at(&self, k: usize, symbol_time: f64) -> CMat {
        let d = drv_unchecked(k, &self.delays, symbol_time);
        let lr = self.num_rx();
        CMat::from_fn(lr, self.num_tx(), |r, t| {
            let row = t * lr + r;
            d.iter().enumerate().map(|(j, dj)| self.x_hat[(row, j)] * dj).sum()
        })
    }
}

/// Stacked measurement operator: one row `g(t)^T ⊗ f(r)^H` per measurement.
pub fn build_psi(tx_angles: &[VirtualAngle], rx_angles: &[VirtualAngle], plan: &MeasurementPlan) -> Result<CMat> {
    if tx_angles.is_empty() || rx_angles.is_empty() {
        return Err(invalid("measurement operator needs at least one angle per side"));
    }
    Ok(psi_rows(tx_angles, rx_angles, plan.pairs()))
}

pub(crate) fn psi_rows(
    tx_angles: &[VirtualAngle],
    rx_angles: &[VirtualAngle],
    pairs: impl Iterator<Item = (Position, Position)>,
) -> CMat {
    let (lt, lr) = (tx_angles.len(), rx_angles.len());
    let pairs: Vec<_> = pairs.collect();
    let mut psi = CMat::zeros(pairs.len(), lt * lr);
    for (m, &(t, r)) in pairs.iter().enumerate() {
        let g = frv_unchecked(t, tx_angles);
        let f = frv_unchecked(r, rx_angles);
        for (it, gt) in g.iter().enumerate() {
            for (ir, fr) in f.iter().enumerate() {
                psi[(m, it * lr + ir)] = gt * fr.conj();
            }
        }
    }
    psi
}

/// Delay operator `D = [d(k_1), …, d(k_{M_d})]` (`L_d × M_d`).
pub fn build_dmat(delays: &[f64], pilot_indices: &[usize], num_subcarriers: usize, sample_period: f64) -> Result<CMat> {
    if delays.is_empty() {
        return Err(invalid("delay operator needs at least one delay"));
    }
    if delays.iter().any(|d| !(*d >= 0.0)) {
        return Err(invalid("delays must be nonnegative"));
    }
    if pilot_indices.iter().any(|&k| k >= num_subcarriers) {
        return Err(invalid("pilot subcarrier out of range"));
    }
    let ts = num_subcarriers as f64 * sample_period;
    Ok(dmat_unchecked(delays, pilot_indices, ts))
}

pub(crate) fn dmat_unchecked(delays: &[f64], pilot_indices: &[usize], symbol_time: f64) -> CMat {
    let cols: Vec<Vec<c64>> = pilot_indices
        .iter()
        .map(|&k| drv_unchecked(k, delays, symbol_time))
        .collect();
    CMat::from_fn(delays.len(), pilot_indices.len(), |l, m| cols[m][l])
}

#[derive(Debug, Clone)]
pub struct LsEstimate {
    pub x: CMat,
    pub rank_deficient: bool,
    pub underdetermined: bool,
}

impl LsEstimate {
    pub fn warnings(&self) -> Warnings {
        let mut w = Warnings::empty();
        w.insert_if(Warnings::RANK_DEFICIENT, self.rank_deficient);
        w.insert_if(Warnings::UNDERDETERMINED, self.underdetermined);
        w
    }
}

/// `X̂ = Ψ^+ V_d^T D^+`.
pub fn ls_estimate_x(v_d_t: &CMat, psi: &CMat, dmat: &CMat) -> Result<LsEstimate> {
    if psi.ncols() == 0 || dmat.nrows() == 0 || v_d_t.nrows() == 0 || v_d_t.ncols() == 0 {
        return Err(invalid("least-squares inputs must be non-empty"));
    }
    ensure_dim("measurement rows", v_d_t.nrows(), psi.nrows())?;
    ensure_dim("pilot columns", v_d_t.ncols(), dmat.ncols())?;
    let pp = pinv(psi.as_ref())?;
    let pd = pinv(dmat.as_ref())?;
    let x = &pp.matrix * v_d_t * &pd.matrix;
    Ok(LsEstimate {
        x,
        rank_deficient: pp.rank_deficient || pd.rank_deficient,
        underdetermined: psi.ncols() > psi.nrows() || dmat.nrows() > dmat.ncols(),
    })
}

/// `ĥ(t, r, k) = (ĝ(t)^T ⊗ f̂(r)^H) X̂ d̂(k)`.
pub fn reconstruct_cfr(est: &EstimatedMpcs, sys: &SystemParams, t: Position, r: Position, k: usize) -> Result<c64> {
    if k >= sys.num_subcarriers {
        return Err(invalid(format!("subcarrier {k} out of range")));
    }
    let g = frv_unchecked(t, &est.tx_angles);
    let f = frv_unchecked(r, &est.rx_angles);
    let d = drv_unchecked(k, &est.delays, sys.symbol_time());
    let lr = f.len();
    let mut acc = c64::new(0.0, 0.0);
    for (j, dj) in d.iter().enumerate() {
        let mut s = c64::new(0.0, 0.0);
        for (it, gt) in g.iter().enumerate() {
            for (ir, fr) in f.iter().enumerate() {
                s += gt * fr.conj() * est.x_hat[(it * lr + ir, j)];
            }
        }
        acc += s * dj;
    }
    Ok(acc)
}

/// Position-dependent response factors of one CSI, evaluated on fixed
/// position lists.
pub struct ResponseFactors {
    /// `conj(f_lr(r_i))`, `N_r × L_r`.
    pub rx: CMat,
    /// `g_lt(t_j)`, `N_t × L_t`.
    pub tx: CMat,
}

impl ResponseFactors {
    pub fn new(est: &EstimatedMpcs, tx_positions: &[Position], rx_positions: &[Position]) -> Self {
        let rows = |pos: &[Position], angles: &[VirtualAngle], conj: bool| {
            let v: Vec<Vec<c64>> = pos.iter().map(|&p| frv_unchecked(p, angles)).collect();
            CMat::from_fn(pos.len(), angles.len(), |i, l| if conj { v[i][l].conj() } else { v[i][l] })
        };
        Self {
            rx: rows(rx_positions, &est.rx_angles, true),
            tx: rows(tx_positions, &est.tx_angles, false),
        }
    }
}

/// CFR over all (Rx position, Tx position) pairs at subcarrier `k`.
pub fn cfr_slice(est: &EstimatedMpcs, factors: &ResponseFactors, k: usize, symbol_time: f64) -> CMat {
    let s = est.slice_at(k, symbol_time);
    &factors.rx * s * factors.tx.transpose()
}

/// Grid-based SOMP estimate followed by the least-squares PRT solve.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub estimate: EstimatedMpcs,
    pub warnings: Warnings,
}

pub fn somp_pipeline(
    pilots: &PilotMatrices,
    plan: &MeasurementPlan,
    pilot_grid: &PilotGrid,
    grids: &Grids,
    sys: &SystemParams,
    cfg: &SompConfig,
) -> Result<PipelineOutput> {
    let ad = estimate_angles_delays(pilots, plan, pilot_grid, grids, sys.sample_period, cfg)?;
    let psi = build_psi(&ad.tx_angles, &ad.rx_angles, plan)?;
    let dmat = build_dmat(&ad.delays, pilot_grid.pilot_indices(), sys.num_subcarriers, sys.sample_period)?;
    let ls = ls_estimate_x(&pilots.stacked_transpose(), &psi, &dmat)?;
    let mut warnings = ls.warnings();
    warnings.insert_if(Warnings::RANK_DEFICIENT, ad.rank_deficient);
    warnings.insert_if(Warnings::EMPTY_SUPPORT, ad.empty_support);
    Ok(PipelineOutput {
        estimate: EstimatedMpcs {
            tx_angles: ad.tx_angles,
            rx_angles: ad.rx_angles,
            delays: ad.delays,
            x_hat: ls.x,
        },
        warnings,
    })
}
