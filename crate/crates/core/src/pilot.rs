//! Pilot subcarriers, three-step measurement plans, and noisy pilot
//! synthesis.
//!
//! Step 1 moves the Tx antenna with the Rx antenna parked at the origin,
//! step 2 does the opposite, and step 3 moves both jointly to random pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{drv_unchecked, frv_unchecked, ChannelScene, Position, Region, SystemParams};
use crate::error::{ensure_dim, invalid, Result};
use crate::linalg::{c64, serde_cmat, CMat};
use crate::scene::complex_normal;

/// Uniformly spaced pilot subcarriers `0, k_d, 2k_d, …`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PilotGridSpec", into = "PilotGridSpec")]
pub struct PilotGrid {
    num_subcarriers: usize,
    spacing: usize,
    pilot_indices: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct PilotGridSpec {
    num_subcarriers: usize,
    num_pilots: usize,
}

impl TryFrom<PilotGridSpec> for PilotGrid {
    type Error = crate::Error;
    fn try_from(s: PilotGridSpec) -> Result<Self> {
        PilotGrid::new(s.num_subcarriers, s.num_pilots)
    }
}

impl From<PilotGrid> for PilotGridSpec {
    fn from(g: PilotGrid) -> Self {
        PilotGridSpec {
            num_subcarriers: g.num_subcarriers,
            num_pilots: g.num_pilots(),
        }
    }
}

impl PilotGrid {
    /// Requires `num_pilots` to divide `num_subcarriers`.
    pub fn new(num_subcarriers: usize, num_pilots: usize) -> Result<Self> {
        if num_pilots == 0 || !num_subcarriers.is_multiple_of(num_pilots) {
            return Err(invalid(format!(
                "{num_pilots} pilots do not evenly divide {num_subcarriers} subcarriers"
            )));
        }
        let spacing = num_subcarriers / num_pilots;
        Ok(Self {
            num_subcarriers,
            spacing,
            pilot_indices: (0..num_pilots).map(|m| m * spacing).collect(),
        })
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_subcarriers
    }

    pub fn spacing(&self) -> usize {
        self.spacing
    }

    pub fn num_pilots(&self) -> usize {
        self.pilot_indices.len()
    }

    pub fn pilot_indices(&self) -> &[usize] {
        &self.pilot_indices
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutKind {
    Upa,
    Edge,
    Random,
}

impl LayoutKind {
    pub const ALL: [LayoutKind; 3] = [LayoutKind::Upa, LayoutKind::Edge, LayoutKind::Random];

    pub fn name(self) -> &'static str {
        match self {
            LayoutKind::Upa => "upa",
            LayoutKind::Edge => "edge",
            LayoutKind::Random => "random",
        }
    }
}

impl std::str::FromStr for LayoutKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "upa" => Ok(LayoutKind::Upa),
            "edge" => Ok(LayoutKind::Edge),
            "random" => Ok(LayoutKind::Random),
            other => Err(invalid(format!("unknown layout '{other}'"))),
        }
    }
}

impl std::fmt::Display for LayoutKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `count` positions inside `region` following `layout`, seeded.
pub fn gen_positions(region: Region, count: usize, layout: LayoutKind, seed: u64) -> Result<Vec<Position>> {
    gen_positions_with(region, count, layout, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Only the random layout draws from `rng`.
pub fn gen_positions_with<R: Rng + ?Sized>(
    region: Region,
    count: usize,
    layout: LayoutKind,
    rng: &mut R,
) -> Result<Vec<Position>> {
    let s = region.normalized_size;
    let h = region.half_side();
    match layout {
        LayoutKind::Upa => {
            let n = (count as f64).sqrt().round() as usize;
            if n * n != count {
                return Err(invalid(format!("UPA layout needs a square count, got {count}")));
            }
            let step = s / n as f64;
            let coord = |i: usize| -h + step * (i as f64 + 0.5);
            Ok((0..count)
                .map(|m| Position::new(coord(m % n), coord(m / n)))
                .collect())
        }
        LayoutKind::Edge => {
            if count == 0 || !count.is_multiple_of(4) {
                return Err(invalid(format!(
                    "edge layout needs a count divisible by 4, got {count}"
                )));
            }
            let step = 4.0 * s / count as f64;
            Ok((0..count)
                .map(|m| {
                    let arc = step * m as f64;
                    let side = ((arc / s).floor() as usize).min(3);
                    let u = arc - side as f64 * s;
                    match side {
                        0 => Position::new(-h + u, -h),
                        1 => Position::new(h, -h + u),
                        2 => Position::new(h - u, h),
                        _ => Position::new(-h, h - u),
                    }
                })
                .collect())
        }
        LayoutKind::Random => Ok((0..count).map(|_| uniform_position(region, rng)).collect()),
    }
}

fn uniform_position<R: Rng + ?Sized>(region: Region, rng: &mut R) -> Position {
    let h = region.half_side();
    Position::new(rng.gen_range(-h..=h), rng.gen_range(-h..=h))
}

/// Positions visited in the three measurement steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPlan {
    pub region: Region,
    pub tx_positions: Vec<Position>,
    pub rx_positions: Vec<Position>,
    pub joint_positions: Vec<(Position, Position)>,
    pub layout_kind: LayoutKind,
}

impl MeasurementPlan {
    /// Steps 1 and 2 follow `layout`; step 3 draws uniform random pairs.
    pub fn generate<R: Rng + ?Sized>(
        region: Region,
        num_tx: usize,
        num_rx: usize,
        num_joint: usize,
        layout: LayoutKind,
        rng: &mut R,
    ) -> Result<Self> {
        let tx_positions = gen_positions_with(region, num_tx, layout, rng)?;
        let rx_positions = gen_positions_with(region, num_rx, layout, rng)?;
        let joint_positions = (0..num_joint)
            .map(|_| {
                let t = uniform_position(region, rng);
                (t, uniform_position(region, rng))
            })
            .collect();
        let plan = Self {
            region,
            tx_positions,
            rx_positions,
            joint_positions,
            layout_kind: layout,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let inside = self
            .tx_positions
            .iter()
            .chain(&self.rx_positions)
            .chain(self.joint_positions.iter().flat_map(|(t, r)| [t, r]))
            .all(|&p| self.region.contains(p));
        if !inside {
            return Err(invalid("measurement position outside its region"));
        }
        if self.total() == 0 {
            return Err(invalid("measurement plan is empty"));
        }
        Ok(())
    }

    /// `M_a = M_t + M_r + M_c`.
    pub fn total(&self) -> usize {
        self.tx_positions.len() + self.rx_positions.len() + self.joint_positions.len()
    }

    /// Every measurement as a (Tx, Rx) pair, in step order.
    pub fn pairs(&self) -> impl Iterator<Item = (Position, Position)> + '_ {
        let o = Position::ORIGIN;
        self.tx_positions
            .iter()
            .map(move |&t| (t, o))
            .chain(self.rx_positions.iter().map(move |&r| (o, r)))
            .chain(self.joint_positions.iter().copied())
    }
}

/// Received pilots of the three steps; rows are positions, columns pilots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PilotMatrices {
    #[serde(with = "serde_cmat")]
    pub v_t: CMat,
    #[serde(with = "serde_cmat")]
    pub v_r: CMat,
    #[serde(with = "serde_cmat")]
    pub v_c: CMat,
    pub noise_power: f64,
    pub tx_power: f64,
}

impl PilotMatrices {
    pub fn num_pilots(&self) -> usize {
        self.v_t.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let md = self.v_t.ncols();
        ensure_dim("v_r columns", md, self.v_r.ncols())?;
        ensure_dim("v_c columns", md, self.v_c.ncols())?;
        if !(self.tx_power > 0.0 && self.noise_power >= 0.0) {
            return Err(invalid("tx power must be positive and noise power nonnegative"));
        }
        Ok(())
    }

    /// `V_d^T = [V_t; V_r; V_c]` (`M_a × M_d`).
    pub fn stacked_transpose(&self) -> CMat {
        let (mt, mr, mc) = (self.v_t.nrows(), self.v_r.nrows(), self.v_c.nrows());
        let md = self.num_pilots();
        CMat::from_fn(mt + mr + mc, md, |i, j| {
            if i < mt {
                self.v_t[(i, j)]
            } else if i < mt + mr {
                self.v_r[(i - mt, j)]
            } else {
                self.v_c[(i - mt - mr, j)]
            }
        })
    }
}

/// `V_d = [V_t^T, V_r^T, V_c^T]` (`M_d × M_a`).
pub fn stack_vd(p: &PilotMatrices) -> CMat {
    p.stacked_transpose().transpose().to_owned()
}

/// Split `V_d` back into its three blocks.
pub fn split_vd(vd: &CMat, mt: usize, mr: usize, noise_power: f64, tx_power: f64) -> Result<PilotMatrices> {
    if mt + mr > vd.ncols() {
        return Err(invalid("block sizes exceed the stacked matrix"));
    }
    let block = |start: usize, len: usize| vd.subcols(start, len).transpose().to_owned();
    Ok(PilotMatrices {
        v_t: block(0, mt),
        v_r: block(mt, mr),
        v_c: block(mt + mr, vd.ncols() - mt - mr),
        noise_power,
        tx_power,
    })
}

/// One pilot symbol per position.
pub fn synthesize_pilots<R: Rng + ?Sized>(
    scene: &ChannelScene,
    plan: &MeasurementPlan,
    grid: &PilotGrid,
    tx_power: f64,
    noise_power: f64,
    rng: &mut R,
) -> Result<PilotMatrices> {
    synthesize_pilots_averaged(scene, plan, grid, tx_power, noise_power, 1, rng)
}

/// Received pilots averaged over `symbols` repetitions per position.
///
/// Noise samples are drawn for every entry even when `noise_power` is zero,
/// so the generator state after this call does not depend on the SNR.
pub fn synthesize_pilots_averaged<R: Rng + ?Sized>(
    scene: &ChannelScene,
    plan: &MeasurementPlan,
    grid: &PilotGrid,
    tx_power: f64,
    noise_power: f64,
    symbols: usize,
    rng: &mut R,
) -> Result<PilotMatrices> {
    if !(tx_power > 0.0 && noise_power >= 0.0) || symbols == 0 {
        return Err(invalid("need positive power, nonnegative noise and at least one symbol"));
    }
    ensure_dim("pilot grid subcarriers", scene.system.num_subcarriers, grid.num_subcarriers())?;
    let [t, r, c] = noiseless_pilots(scene, plan, grid);
    let amp = tx_power.sqrt();
    let mut noisy = |m: CMat| {
        let mut out = m;
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                let mut n = c64::new(0.0, 0.0);
                for _ in 0..symbols {
                    n += complex_normal(rng, noise_power);
                }
                out[(i, j)] = amp * out[(i, j)] + n / symbols as f64;
            }
        }
        out
    };
    Ok(PilotMatrices {
        v_t: noisy(t),
        v_r: noisy(r),
        v_c: noisy(c),
        noise_power: noise_power / symbols as f64,
        tx_power,
    })
}

/// Noise-free CFR at every (measurement, pilot) pair, one matrix per step.
pub fn noiseless_pilots(scene: &ChannelScene, plan: &MeasurementPlan, grid: &PilotGrid) -> [CMat; 3] {
    let sys: &SystemParams = &scene.system;
    let prt = &scene.prt;
    let ld = prt.num_delays();
    let ts = sys.symbol_time();
    let dmat: Vec<Vec<c64>> = grid
        .pilot_indices()
        .iter()
        .map(|&k| drv_unchecked(k, prt.delays(), ts))
        .collect();
    let row = |t: Position, r: Position| -> Vec<c64> {
        let g = frv_unchecked(t, &scene.tx_virtual_angles);
        let f = frv_unchecked(r, &scene.rx_virtual_angles);
        // per-delay effective gains f^H Σ_ld g
        let eff: Vec<c64> = (0..ld)
            .map(|d| {
                let mut acc = c64::new(0.0, 0.0);
                for (lt, gt) in g.iter().enumerate() {
                    let mut col = c64::new(0.0, 0.0);
                    for (lr, fr) in f.iter().enumerate() {
                        col += prt.get(lr, lt, d) * fr.conj();
                    }
                    acc += col * gt;
                }
                acc
            })
            .collect();
        dmat.iter()
            .map(|dk| eff.iter().zip(dk).map(|(e, d)| e * d).sum())
            .collect()
    };
    let build = |pairs: Vec<(Position, Position)>| {
        let rows: Vec<Vec<c64>> = pairs.into_iter().map(|(t, r)| row(t, r)).collect();
        CMat::from_fn(rows.len(), grid.num_pilots(), |i, j| rows[i][j])
    };
    let o = Position::ORIGIN;
    [
        build(plan.tx_positions.iter().map(|&t| (t, o)).collect()),
        build(plan.rx_positions.iter().map(|&r| (o, r)).collect()),
        build(plan.joint_positions.clone()),
    ]
}

/// Self-contained pilot measurement: everything an estimator needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PilotRecord {
    pub system: SystemParams,
    pub grid: PilotGrid,
    pub plan: MeasurementPlan,
    pub pilots: PilotMatrices,
}

impl PilotRecord {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.plan.validate()?;
        self.pilots.validate()?;
        ensure_dim("pilot grid subcarriers", self.system.num_subcarriers, self.grid.num_subcarriers())?;
        ensure_dim("pilot columns", self.grid.num_pilots(), self.pilots.num_pilots())?;
        ensure_dim("step-1 rows", self.plan.tx_positions.len(), self.pilots.v_t.nrows())?;
        ensure_dim("step-2 rows", self.plan.rx_positions.len(), self.pilots.v_r.nrows())?;
        ensure_dim("step-3 rows", self.plan.joint_positions.len(), self.pilots.v_c.nrows())?;
        Ok(())
    }
}
