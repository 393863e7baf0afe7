//! Alternating refinement of angles and delays by projected gradient
//! descent on the normalized pilot-fit residual
//! `g(a, b) = ‖V − P_Ψ V P_D‖² / ‖V‖²`, where `V = V_d^T`, `P_Ψ` projects
//! onto the columns of `Ψ(a)` and `P_D` onto the rows of `D(b)`.
//!
//! The residual splits into two orthogonal parts,
//! `‖V (I − P_D)‖² + ‖(I − P_Ψ) V Q‖²` with `Q` an orthonormal basis of the
//! row space of `D`. Perturbing one angle leaves the delay part untouched,
//! and perturbing one delay leaves `Ψ` untouched, so each finite-difference
//! evaluation only rebuilds one side.

use serde::{Deserialize, Serialize};

use crate::channel::{Position, SystemParams, VirtualAngle};
use crate::error::{invalid, Result, Warnings};
use crate::linalg::{c64, column_basis, CMat, ColumnProjector};
use crate::pilot::{MeasurementPlan, PilotGrid};
use crate::prt::{dmat_unchecked, ls_estimate_x, psi_rows, EstimatedMpcs};

use std::f64::consts::PI;

/// Delays are stepped and differentiated in microseconds.
pub const DELAY_UNIT: f64 = 1e-6;

/// Angle vector `a = [φ_t, ϑ_t, φ_r, ϑ_r]` and delay vector `b` (seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVectors {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub num_tx: usize,
    pub num_rx: usize,
}

impl ParamVectors {
    pub fn new(tx: &[VirtualAngle], rx: &[VirtualAngle], delays: &[f64]) -> Self {
        let mut a = Vec::with_capacity(2 * (tx.len() + rx.len()));
        a.extend(tx.iter().map(|v| v.azimuth));
        a.extend(tx.iter().map(|v| v.elevation));
        a.extend(rx.iter().map(|v| v.azimuth));
        a.extend(rx.iter().map(|v| v.elevation));
        Self {
            a,
            b: delays.to_vec(),
            num_tx: tx.len(),
            num_rx: rx.len(),
        }
    }

    pub fn from_estimate(est: &EstimatedMpcs) -> Self {
        Self::new(&est.tx_angles, &est.rx_angles, &est.delays)
    }

    pub fn tx_angles(&self) -> Vec<VirtualAngle> {
        let lt = self.num_tx;
        (0..lt).map(|l| VirtualAngle::new(self.a[l], self.a[lt + l])).collect()
    }

    pub fn rx_angles(&self) -> Vec<VirtualAngle> {
        let (o, lr) = (2 * self.num_tx, self.num_rx);
        (0..lr)
            .map(|l| VirtualAngle::new(self.a[o + l], self.a[o + lr + l]))
            .collect()
    }

    pub fn is_feasible(&self, tau_max: f64) -> bool {
        self.a.iter().all(|v| (-1.0..=1.0).contains(v)) && self.b.iter().all(|v| (0.0..=tau_max).contains(v))
    }

    /// Clamp into the feasible box.
    pub fn project(&mut self, tau_max: f64) {
        project_angles(&mut self.a);
        project_delays(&mut self.b, tau_max);
    }
}

/// Clamp every entry to `[-1, 1]`.
pub fn project_angles(a: &mut [f64]) {
    for v in a {
        *v = v.clamp(-1.0, 1.0);
    }
}

/// Clamp every entry to `[0, tau_max]`.
pub fn project_delays(b: &mut [f64], tau_max: f64) {
    for v in b {
        *v = v.clamp(0.0, tau_max);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Initial angle step `δ_a⁰`.
    pub step_a0: f64,
    /// Initial delay step `δ_d⁰`, in microseconds.
    pub step_d0: f64,
    pub step_min: f64,
    pub max_outer: usize,
    pub armijo_xi: f64,
    pub shrink_kappa: f64,
    /// Finite-difference step for angles; delays use `fd_step · tau_max`.
    pub fd_step: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            step_a0: 0.06,
            step_d0: 1.5e-3,
            step_min: 1e-15,
            max_outer: 40,
            armijo_xi: 0.6,
            shrink_kappa: 0.5,
            fd_step: 1e-6,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shrink_kappa > 0.0 && self.shrink_kappa < 1.0) {
            return Err(invalid("shrink factor must lie in (0, 1)"));
        }
        if !(self.armijo_xi > 0.0 && self.step_min > 0.0 && self.fd_step > 0.0) {
            return Err(invalid("Armijo constant, minimum step and finite-difference step must be positive"));
        }
        if !(self.step_a0 >= 0.0 && self.step_d0 >= 0.0) {
            return Err(invalid("initial steps must be nonnegative"));
        }
        Ok(())
    }
}

struct AngleSide {
    psi: CMat,
    gram: CMat,
    proj: ColumnProjector,
}

struct DelaySide {
    /// `V Q`
    vq: CMat,
    /// `‖V − V Q Q^H‖²`
    outer: f64,
}

/// Pilot-fit objective for fixed pilots and measurement plan.
pub struct Objective<'a> {
    v: &'a CMat,
    v_norm2: f64,
    pairs: Vec<(Position, Position)>,
    pilot_indices: &'a [usize],
    symbol_time: f64,
    tau_max: f64,
    num_tx: usize,
    num_rx: usize,
}

impl<'a> Objective<'a> {
    pub fn new(
        v_d_t: &'a CMat,
        plan: &MeasurementPlan,
        pilot_grid: &'a PilotGrid,
        sys: &SystemParams,
        num_tx: usize,
        num_rx: usize,
    ) -> Result<Self> {
        let v_norm2 = v_d_t.squared_norm_l2();
        if v_norm2 == 0.0 || !v_norm2.is_finite() {
            return Err(invalid("pilot matrix is zero or non-finite, objective is undefined"));
        }
        if v_d_t.nrows() != plan.total() || v_d_t.ncols() != pilot_grid.num_pilots() {
            return Err(invalid("pilot matrix does not match the plan and pilot grid"));
        }
        if num_tx == 0 || num_rx == 0 {
            return Err(invalid("need at least one angle per side"));
        }
        Ok(Self {
            v: v_d_t,
            v_norm2,
            pairs: plan.pairs().collect(),
            pilot_indices: pilot_grid.pilot_indices(),
            symbol_time: sys.symbol_time(),
            tau_max: sys.tau_max,
            num_tx,
            num_rx,
        })
    }

    fn check(&self, p: &ParamVectors) -> Result<()> {
        if p.num_tx != self.num_tx || p.num_rx != self.num_rx || p.a.len() != 2 * (self.num_tx + self.num_rx) {
            return Err(invalid("parameter vector does not match the objective's path counts"));
        }
        if p.b.is_empty() {
            return Err(invalid("need at least one delay"));
        }
        Ok(())
    }

    fn angle_side(&self, p: &ParamVectors) -> Result<AngleSide> {
        let psi = psi_rows(&p.tx_angles(), &p.rx_angles(), self.pairs.iter().copied());
        let gram = psi.adjoint() * &psi;
        let proj = ColumnProjector::from_gram(psi.clone(), &gram)?;
        Ok(AngleSide { psi, gram, proj })
    }

    /// Angle side with coordinate `i` of `a` shifted by `delta`.
    fn perturbed_angle_side(&self, base: &AngleSide, i: usize, delta: f64) -> Result<AngleSide> {
        let (lt, lr) = (self.num_tx, self.num_rx);
        let mut psi = base.psi.clone();
        // the column factor for the perturbed path picks up exp(±j 2π coord·delta)
        let (cols, along_x, sign): (Vec<usize>, bool, f64) = if i < 2 * lt {
            let l = i % lt;
            ((0..lr).map(|r| l * lr + r).collect(), i < lt, 1.0)
        } else {
            let j = i - 2 * lt;
            let l = j % lr;
            ((0..lt).map(|t| t * lr + l).collect(), j < lr, -1.0)
        };
        let tx_side = i < 2 * lt;
        for (m, &(t, r)) in self.pairs.iter().enumerate() {
            let p = if tx_side { t } else { r };
            let coord = if along_x { p.x } else { p.y };
            let rot = c64::cis(sign * 2.0 * PI * coord * delta);
            for &c in &cols {
                psi[(m, c)] *= rot;
            }
        }
        let mut gram = base.gram.clone();
        for &c in &cols {
            let col = psi.adjoint() * psi.col(c);
            for k in 0..gram.nrows() {
                gram[(k, c)] = col[k];
                gram[(c, k)] = col[k].conj();
            }
        }
        let proj = ColumnProjector::from_gram(psi.clone(), &gram)?;
        Ok(AngleSide { psi, gram, proj })
    }

    fn delay_side(&self, b: &[f64]) -> Result<DelaySide> {
        let d = dmat_unchecked(b, self.pilot_indices, self.symbol_time);
        let q = column_basis(d.adjoint().to_owned().as_ref())?;
        let vq = self.v * &q;
        let outer = (self.v - &vq * q.adjoint()).squared_norm_l2();
        Ok(DelaySide { vq, outer })
    }

    fn combine(&self, angle: &AngleSide, delay: &DelaySide) -> f64 {
        let inner = (&delay.vq - angle.proj.apply(delay.vq.as_ref())).squared_norm_l2();
        (delay.outer + inner) / self.v_norm2
    }

    /// `g(a, b)`.
    pub fn value(&self, p: &ParamVectors) -> Result<f64> {
        self.check(p)?;
        Ok(self.combine(&self.angle_side(p)?, &self.delay_side(&p.b)?))
    }

    /// Central-difference gradient. The delay part is per microsecond.
    /// Coordinates are perturbed without projection.
    pub fn gradient(&self, p: &ParamVectors, h_angle: f64, h_delay: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(p)?;
        let angle = self.angle_side(p)?;
        let delay = self.delay_side(&p.b)?;
        let mut grad_a = Vec::with_capacity(p.a.len());
        for i in 0..p.a.len() {
            let plus = self.perturbed_angle_side(&angle, i, h_angle)?;
            let minus = self.perturbed_angle_side(&angle, i, -h_angle)?;
            grad_a.push((self.combine(&plus, &delay) - self.combine(&minus, &delay)) / (2.0 * h_angle));
        }
        let mut grad_b = Vec::with_capacity(p.b.len());
        let mut b = p.b.clone();
        for j in 0..b.len() {
            let orig = b[j];
            b[j] = orig + h_delay;
            let gp = self.combine(&angle, &self.delay_side(&b)?);
            b[j] = orig - h_delay;
            let gm = self.combine(&angle, &self.delay_side(&b)?);
            b[j] = orig;
            grad_b.push((gp - gm) / (2.0 * h_delay / DELAY_UNIT));
        }
        Ok((grad_a, grad_b))
    }

    /// Forward-difference gradient, same units as [`Objective::gradient`].
    pub fn forward_gradient(&self, p: &ParamVectors, h_angle: f64, h_delay: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let g0 = self.value(p)?;
        let mut q = p.clone();
        let mut grad_a = Vec::with_capacity(p.a.len());
        for i in 0..p.a.len() {
            q.a[i] += h_angle;
            grad_a.push((self.value(&q)? - g0) / h_angle);
            q.a[i] = p.a[i];
        }
        let mut grad_b = Vec::with_capacity(p.b.len());
        for j in 0..p.b.len() {
            q.b[j] += h_delay;
            grad_b.push((self.value(&q)? - g0) / (h_delay / DELAY_UNIT));
            q.b[j] = p.b[j];
        }
        Ok((grad_a, grad_b))
    }

    pub fn tau_max(&self) -> f64 {
        self.tau_max
    }
}

/// `g(a, b)` for the given parameters.
pub fn objective(
    p: &ParamVectors,
    v_d_t: &CMat,
    plan: &MeasurementPlan,
    pilot_grid: &PilotGrid,
    sys: &SystemParams,
) -> Result<f64> {
    Objective::new(v_d_t, plan, pilot_grid, sys, p.num_tx, p.num_rx)?.value(p)
}

/// `(∂g/∂a, ∂g/∂b)`, the delay part per microsecond.
pub fn numerical_gradient(
    p: &ParamVectors,
    v_d_t: &CMat,
    plan: &MeasurementPlan,
    pilot_grid: &PilotGrid,
    sys: &SystemParams,
    h: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Objective::new(v_d_t, plan, pilot_grid, sys, p.num_tx, p.num_rx)?.gradient(p, h, h * sys.tau_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Objective at the iterate kept after this iteration.
    pub objective: f64,
    pub step_a: f64,
    pub step_d: f64,
    pub accepted: bool,
    pub feasible: bool,
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub estimate: EstimatedMpcs,
    pub params: ParamVectors,
    /// Entry 0 is the starting point.
    pub trace: Vec<TraceEntry>,
    pub warnings: Warnings,
}

impl RefineOutput {
    pub fn initial_objective(&self) -> f64 {
        self.trace[0].objective
    }

    pub fn final_objective(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |t| t.objective)
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Projected gradient descent with Armijo backtracking, starting from `init`;
/// `x_hat` is re-solved at the final angles and delays.
pub fn refine(
    init: &EstimatedMpcs,
    v_d_t: &CMat,
    plan: &MeasurementPlan,
    pilot_grid: &PilotGrid,
    sys: &SystemParams,
    cfg: &RefineConfig,
) -> Result<RefineOutput> {
    cfg.validate()?;
    let tau_max = sys.tau_max;
    let obj = Objective::new(v_d_t, plan, pilot_grid, sys, init.num_tx(), init.num_rx())?;
    let mut cur = ParamVectors::from_estimate(init);
    cur.project(tau_max);
    let mut g_cur = obj.value(&cur)?;
    let mut trace = vec![TraceEntry {
        iteration: 0,
        objective: g_cur,
        step_a: 0.0,
        step_d: 0.0,
        accepted: true,
        feasible: cur.is_feasible(tau_max),
    }];
    let (h_a, h_d) = (cfg.fd_step, cfg.fd_step * tau_max);
    // a rejected step leaves the point, and hence every later step, unchanged
    let mut stalled: Option<(f64, f64)> = None;

    for it in 1..=cfg.max_outer {
        if let Some((sa, sd)) = stalled {
            trace.push(TraceEntry {
                iteration: it,
                objective: g_cur,
                step_a: sa,
                step_d: sd,
                accepted: false,
                feasible: cur.is_feasible(tau_max),
            });
            continue;
        }
        let (grad_a, grad_b) = obj.gradient(&cur, h_a, h_d)?;
        let (na, nb) = (sq_norm(&grad_a), sq_norm(&grad_b));
        let (mut da, mut dd) = (cfg.step_a0, cfg.step_d0);
        let mut accepted = false;
        if na + nb > 0.0 && (na + nb).is_finite() {
            while da > cfg.step_min || dd > cfg.step_min {
                let mut cand = cur.clone();
                for (x, g) in cand.a.iter_mut().zip(&grad_a) {
                    *x -= da * g;
                }
                for (x, g) in cand.b.iter_mut().zip(&grad_b) {
                    *x -= dd * g * DELAY_UNIT;
                }
                cand.project(tau_max);
                let g_new = obj.value(&cand)?;
                if g_new.is_finite() && g_new <= g_cur - cfg.armijo_xi * (da * na + dd * nb) {
                    cur = cand;
                    g_cur = g_new;
                    accepted = true;
                    break;
                }
                da *= cfg.shrink_kappa;
                dd *= cfg.shrink_kappa;
            }
        }
        if !accepted {
            stalled = Some((da, dd));
        }
        trace.push(TraceEntry {
            iteration: it,
            objective: g_cur,
            step_a: da,
            step_d: dd,
            accepted,
            feasible: cur.is_feasible(tau_max),
        });
    }

    let tx = cur.tx_angles();
    let rx = cur.rx_angles();
    let psi = crate::prt::build_psi(&tx, &rx, plan)?;
    let dmat = dmat_unchecked(&cur.b, pilot_grid.pilot_indices(), sys.symbol_time());
    let ls = ls_estimate_x(v_d_t, &psi, &dmat)?;
    Ok(RefineOutput {
        estimate: EstimatedMpcs {
            tx_angles: tx,
            rx_angles: rx,
            delays: cur.b.clone(),
            x_hat: ls.x.clone(),
        },
        params: cur,
        trace,
        warnings: ls.warnings(),
    })
}
