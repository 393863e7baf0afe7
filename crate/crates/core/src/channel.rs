//! Field-response channel model.
//!
//! Positions are in wavelength units, so a response phase is simply
//! `2π (x·azimuth + y·elevation)`. The path-response tensor stores its gains
//! with the Rx-path index fastest, then the Tx-path index, then the delay
//! index, which makes each delay slice a contiguous column of the matricized
//! form `X`.

use std::f64::consts::PI;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ensure_dim, invalid, Result};
use crate::linalg::{c64, CMat};

/// Antenna position in wavelengths.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const ORIGIN: Position = Position { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Square movement region of side `normalized_size` wavelengths, centered at
/// the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub normalized_size: f64,
}

impl Region {
    pub fn new(normalized_size: f64) -> Result<Self> {
        if !(normalized_size.is_finite() && normalized_size > 0.0) {
            return Err(invalid(format!(
                "region size must be positive, got {normalized_size}"
            )));
        }
        Ok(Self { normalized_size })
    }

    pub fn half_side(&self) -> f64 {
        0.5 * self.normalized_size
    }

    pub fn contains(&self, p: Position) -> bool {
        let h = self.half_side() * (1.0 + 1e-12);
        p.x.abs() <= h && p.y.abs() <= h
    }
}

/// Virtual angle pair `(cos θ sin φ, sin θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VirtualAngle {
    #[serde(rename = "azimuth_v")]
    pub azimuth: f64,
    #[serde(rename = "elevation_v")]
    pub elevation: f64,
}

impl VirtualAngle {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self { azimuth, elevation }
    }

    /// Map physical elevation `theta` and azimuth `phi` (radians).
    pub fn from_physical(theta: f64, phi: f64) -> Self {
        Self {
            azimuth: theta.cos() * phi.sin(),
            elevation: theta.sin(),
        }
    }

    /// Clamp both components to `[-1, 1]`.
    pub fn clamped(self) -> Self {
        Self {
            azimuth: self.azimuth.clamp(-1.0, 1.0),
            elevation: self.elevation.clamp(-1.0, 1.0),
        }
    }

    /// Phase `2π (x·azimuth + y·elevation)` seen at `pos`.
    #[inline]
    pub fn phase_at(&self, pos: Position) -> f64 {
        2.0 * PI * (pos.x * self.azimuth + pos.y * self.elevation)
    }
}

/// Complex path gains `Σ` of shape `L_r × L_t × L_d` plus the `L_d` delays.
#[derive(Debug, Clone, PartialEq)]
pub struct PathResponseTensor {
    lr: usize,
    lt: usize,
    gains: Vec<c64>,
    delays: Vec<f64>,
}

impl PathResponseTensor {
    /// `gains` is indexed as `lr + L_r·(lt + L_t·ld)`.
    pub fn new(lr: usize, lt: usize, gains: Vec<c64>, delays: Vec<f64>) -> Result<Self> {
        if lr == 0 || lt == 0 || delays.is_empty() {
            return Err(invalid("path-response tensor needs at least one path per axis"));
        }
        ensure_dim("path-response tensor gains", lr * lt * delays.len(), gains.len())?;
        if delays.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(invalid("delays must be finite and nonnegative"));
        }
        if delays.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("delays must be strictly increasing"));
        }
        if gains.iter().any(|g| !(g.re.is_finite() && g.im.is_finite())) {
            return Err(invalid("path gains must be finite"));
        }
        Ok(Self { lr, lt, gains, delays })
    }

    /// Zero tensor with the given delays.
    pub fn zeros(lr: usize, lt: usize, delays: Vec<f64>) -> Result<Self> {
        let n = lr * lt * delays.len();
        Self::new(lr, lt, vec![c64::new(0.0, 0.0); n], delays)
    }

    /// Tensor with `gains[l]` at `[l, l, l]`.
    pub fn diagonal(gains: &[c64], delays: Vec<f64>) -> Result<Self> {
        let l = gains.len();
        ensure_dim("diagonal tensor delays", l, delays.len())?;
        let mut t = Self::zeros(l, l, delays)?;
        for (i, &g) in gains.iter().enumerate() {
            *t.get_mut(i, i, i) = g;
        }
        Ok(t)
    }

    pub fn num_rx(&self) -> usize {
        self.lr
    }

    pub fn num_tx(&self) -> usize {
        self.lt
    }

    pub fn num_delays(&self) -> usize {
        self.delays.len()
    }

    pub fn delays(&self) -> &[f64] {
        &self.delays
    }

    pub fn gains(&self) -> &[c64] {
        &self.gains
    }

    #[inline]
    fn offset(&self, lr: usize, lt: usize, ld: usize) -> usize {
        lr + self.lr * (lt + self.lt * ld)
    }

    #[inline]
    pub fn get(&self, lr: usize, lt: usize, ld: usize) -> c64 {
        self.gains[self.offset(lr, lt, ld)]
    }

    #[inline]
    pub fn get_mut(&mut self, lr: usize, lt: usize, ld: usize) -> &mut c64 {
        let o = self.offset(lr, lt, ld);
        &mut self.gains[o]
    }

    pub fn total_power(&self) -> f64 {
        self.gains.iter().map(|g| g.norm_sqr()).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct PrtRecord {
    /// `gains[lr][lt][ld]`
    gains: Vec<Vec<Vec<c64>>>,
    delays: Vec<f64>,
}

impl Serialize for PathResponseTensor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let gains = (0..self.lr)
            .map(|r| {
                (0..self.lt)
                    .map(|t| (0..self.num_delays()).map(|d| self.get(r, t, d)).collect())
                    .collect()
            })
            .collect();
        PrtRecord {
            gains,
            delays: self.delays.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PathResponseTensor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = PrtRecord::deserialize(d)?;
        let lr = rec.gains.len();
        let lt = rec.gains.first().map_or(0, Vec::len);
        let ld = rec.delays.len();
        let mut flat = vec![c64::new(0.0, 0.0); lr * lt * ld];
        for (r, plane) in rec.gains.iter().enumerate() {
            if plane.len() != lt {
                return Err(D::Error::custom("ragged gain tensor"));
            }
            for (t, fiber) in plane.iter().enumerate() {
                if fiber.len() != ld {
                    return Err(D::Error::custom("gain fiber length differs from delay count"));
                }
                for (k, &g) in fiber.iter().enumerate() {
                    flat[r + lr * (t + lt * k)] = g;
                }
            }
        }
        PathResponseTensor::new(lr, lt, flat, rec.delays).map_err(D::Error::custom)
    }
}

/// OFDM and propagation constants shared by every scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemParams {
    /// Carrier wavelength in meters.
    pub wavelength: f64,
    /// Sampling period `T_s` in seconds.
    pub sample_period: f64,
    pub num_subcarriers: usize,
    pub cp_length: usize,
    /// Maximum path delay in seconds.
    pub tau_max: f64,
}

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            wavelength: SPEED_OF_LIGHT / 28e9,
            sample_period: 12.5e-9,
            num_subcarriers: 256,
            cp_length: 16,
            tau_max: 0.15e-6,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength > 0.0 && self.sample_period > 0.0 && self.tau_max > 0.0) {
            return Err(invalid("wavelength, sample period and tau_max must be positive"));
        }
        if self.num_subcarriers == 0 {
            return Err(invalid("need at least one subcarrier"));
        }
        if self.cp_length as f64 * self.sample_period <= self.tau_max {
            return Err(invalid(format!(
                "cyclic prefix ({} samples of {} s) must exceed tau_max = {} s",
                self.cp_length, self.sample_period, self.tau_max
            )));
        }
        Ok(())
    }

    /// OFDM symbol duration without prefix, `K·T_s`.
    pub fn symbol_time(&self) -> f64 {
        self.num_subcarriers as f64 * self.sample_period
    }
}

/// Ground-truth multipath channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScene {
    pub prt: PathResponseTensor,
    pub tx_virtual_angles: Vec<VirtualAngle>,
    pub rx_virtual_angles: Vec<VirtualAngle>,
    #[serde(flatten)]
    pub system: SystemParams,
}

impl ChannelScene {
    pub fn new(
        prt: PathResponseTensor,
        tx_virtual_angles: Vec<VirtualAngle>,
        rx_virtual_angles: Vec<VirtualAngle>,
        system: SystemParams,
    ) -> Result<Self> {
        let scene = Self {
            prt,
            tx_virtual_angles,
            rx_virtual_angles,
            system,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        ensure_dim("tx angles", self.prt.num_tx(), self.tx_virtual_angles.len())?;
        ensure_dim("rx angles", self.prt.num_rx(), self.rx_virtual_angles.len())?;
        if self.prt.delays().iter().any(|&d| d >= self.system.tau_max) {
            return Err(invalid("every delay must be below tau_max"));
        }
        let in_square = |a: &VirtualAngle| a.azimuth.abs() <= 1.0 && a.elevation.abs() <= 1.0;
        if !self.tx_virtual_angles.iter().all(in_square)
            || !self.rx_virtual_angles.iter().all(in_square)
        {
            return Err(invalid("virtual angles must lie in [-1, 1]^2"));
        }
        Ok(())
    }

    pub fn cfr(&self, t: Position, r: Position, k: usize) -> Result<c64> {
        cfr(self, t, r, k)
    }
}

/// Field-response vector `[exp(j 2π (x·az_l + y·el_l))]_l`.
pub fn frv(pos: Position, angles: &[VirtualAngle]) -> Result<Vec<c64>> {
    if angles.is_empty() {
        return Err(invalid("field-response vector needs at least one angle"));
    }
    Ok(frv_unchecked(pos, angles))
}

pub(crate) fn frv_unchecked(pos: Position, angles: &[VirtualAngle]) -> Vec<c64> {
    angles.iter().map(|a| c64::cis(a.phase_at(pos))).collect()
}

/// Delay-response vector `[exp(-j 2π k τ_l / (K T_s))]_l`.
pub fn drv(k: usize, delays: &[f64], num_subcarriers: usize, sample_period: f64) -> Result<Vec<c64>> {
    if k >= num_subcarriers {
        return Err(invalid(format!(
            "subcarrier {k} out of range for K = {num_subcarriers}"
        )));
    }
    if delays.iter().any(|d| !(*d >= 0.0)) {
        return Err(invalid("delays must be nonnegative"));
    }
    Ok(drv_unchecked(k, delays, num_subcarriers as f64 * sample_period))
}

pub(crate) fn drv_unchecked(k: usize, delays: &[f64], symbol_time: f64) -> Vec<c64> {
    let w = -2.0 * PI * k as f64 / symbol_time;
    delays.iter().map(|&tau| c64::cis(w * tau)).collect()
}

/// Channel frequency response `f(r)^H (Σ ×₃ d(k)) g(t)`.
pub fn cfr(scene: &ChannelScene, t: Position, r: Position, k: usize) -> Result<c64> {
    let sys = &scene.system;
    let d = drv(k, scene.prt.delays(), sys.num_subcarriers, sys.sample_period)?;
    let g = frv(t, &scene.tx_virtual_angles)?;
    let f = frv(r, &scene.rx_virtual_angles)?;
    Ok(contract(&scene.prt, &f, &g, &d))
}

/// `Σ_{r,t,d} Σ[r,t,d]·conj(f_r)·g_t·d_d`.
pub(crate) fn contract(prt: &PathResponseTensor, f: &[c64], g: &[c64], d: &[c64]) -> c64 {
    let mut acc = c64::new(0.0, 0.0);
    for (ld, &dk) in d.iter().enumerate() {
        let mut slice = c64::new(0.0, 0.0);
        for (lt, &gt) in g.iter().enumerate() {
            let mut col = c64::new(0.0, 0.0);
            for (lr, &fr) in f.iter().enumerate() {
                col += prt.get(lr, lt, ld) * fr.conj();
            }
            slice += col * gt;
        }
        acc += slice * dk;
    }
    acc
}

/// Matricized tensor `X` (`L_t·L_r × L_d`); row `lt·L_r + lr`, column `ld`.
pub fn matricize_prt(prt: &PathResponseTensor) -> CMat {
    let rows = prt.num_tx() * prt.num_rx();
    CMat::from_fn(rows, prt.num_delays(), |i, j| prt.gains()[i + rows * j])
}

/// Inverse of [`matricize_prt`]. Delays are sorted ascending and the columns
/// permuted with them.
pub fn devectorize_x(x: &CMat, lt: usize, lr: usize, delays: &[f64]) -> Result<PathResponseTensor> {
    if lt == 0 || lr == 0 || x.nrows() != lt * lr {
        return Err(invalid(format!(
            "matrix with {} rows does not split into {lt} x {lr} path pairs",
            x.nrows()
        )));
    }
    ensure_dim("devectorize delays", x.ncols(), delays.len())?;
    let mut order: Vec<usize> = (0..delays.len()).collect();
    order.sort_by(|&a, &b| delays[a].total_cmp(&delays[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| delays[i]).collect();
    let rows = x.nrows();
    let mut gains = Vec::with_capacity(rows * order.len());
    for &j in &order {
        gains.extend((0..rows).map(|i| x[(i, j)]));
    }
    PathResponseTensor::new(lr, lt, gains, sorted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: c64, b: c64, tol: f64) -> bool {
        (a - b).norm() <= tol * b.norm().max(1.0)
    }

    #[test]
    fn frv_examples() {
        let ones = frv(Position::ORIGIN, &[VirtualAngle::new(0.3, -0.8); 3]).unwrap();
        assert!(ones.iter().all(|&v| v == c64::new(1.0, 0.0)));

        let half = frv(Position::new(0.5, 0.0), &[VirtualAngle::new(1.0, 0.0)]).unwrap();
        assert!(close(half[0], c64::new(-1.0, 0.0), 1e-15));

        let angles = [VirtualAngle::new(0.2, -0.5), VirtualAngle::new(-0.9, 0.1)];
        let v = frv(Position::new(0.3, -0.7), &angles).unwrap();
        let p0 = 2.0 * PI * (0.3 * 0.2 - 0.7 * -0.5);
        let p1 = 2.0 * PI * (0.3 * -0.9 - 0.7 * 0.1);
        assert!(close(v[0], c64::new(p0.cos(), p0.sin()), 1e-14));
        assert!(close(v[1], c64::new(p1.cos(), p1.sin()), 1e-14));
    }

    #[test]
    fn frv_rejects_empty_angles() {
        assert!(frv(Position::ORIGIN, &[]).is_err());
    }

    #[test]
    fn drv_examples() {
        let sys = SystemParams::default();
        let at_dc = drv(0, &[0.02e-6, 0.1e-6], 256, sys.sample_period).unwrap();
        assert!(at_dc.iter().all(|&v| v == c64::new(1.0, 0.0)));

        let half = drv(128, &[sys.sample_period], 256, sys.sample_period).unwrap();
        assert!(close(half[0], c64::new(-1.0, 0.0), 1e-14));

        let v = drv(17, &[0.05e-6, 0.12e-6], 256, 12.5e-9).unwrap();
        for (i, tau) in [0.05e-6, 0.12e-6].iter().enumerate() {
            let p = -2.0 * PI * 17.0 * tau / 3.2e-6;
            assert!(close(v[i], c64::new(p.cos(), p.sin()), 1e-13));
        }
        assert!(drv(256, &[0.0], 256, 12.5e-9).is_err());
    }

    fn sample_tensor(lr: usize, lt: usize, ld: usize) -> PathResponseTensor {
        let gains = (0..lr * lt * ld)
            .map(|i| c64::new((i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()))
            .collect();
        let delays = (0..ld).map(|i| 1e-8 * (i + 1) as f64).collect();
        PathResponseTensor::new(lr, lt, gains, delays).unwrap()
    }

    #[test]
    fn cfr_at_origin_dc_sums_tensor() {
        let prt = sample_tensor(2, 3, 2);
        let total: c64 = prt.gains().iter().sum();
        let scene = ChannelScene::new(
            prt,
            vec![VirtualAngle::new(0.1, 0.2); 3],
            vec![VirtualAngle::new(-0.4, 0.5); 2],
            SystemParams::default(),
        )
        .unwrap();
        let h = scene.cfr(Position::ORIGIN, Position::ORIGIN, 0).unwrap();
        assert!(close(h, total, 1e-14));
    }

    #[test]
    fn cfr_single_path() {
        let mut prt = PathResponseTensor::zeros(2, 2, vec![1e-8, 5e-8]).unwrap();
        let gamma = c64::new(0.3, -1.1);
        *prt.get_mut(1, 0, 1) = gamma;
        let tx = vec![VirtualAngle::new(0.3, 0.1), VirtualAngle::new(-0.2, 0.6)];
        let rx = vec![VirtualAngle::new(0.5, -0.5), VirtualAngle::new(0.9, 0.0)];
        let scene = ChannelScene::new(prt, tx.clone(), rx.clone(), SystemParams::default()).unwrap();
        let (t, r, k) = (Position::new(0.4, -1.0), Position::new(1.2, 0.3), 33);
        let f = frv(r, &rx).unwrap();
        let g = frv(t, &tx).unwrap();
        let d = drv(k, &[1e-8, 5e-8], 256, 12.5e-9).unwrap();
        let want = gamma * f[1].conj() * g[0] * d[1];
        assert!(close(scene.cfr(t, r, k).unwrap(), want, 1e-13));
    }

    #[test]
    fn matricize_examples() {
        let one = PathResponseTensor::new(1, 1, vec![c64::new(2.0, 1.0)], vec![0.0]).unwrap();
        let x = matricize_prt(&one);
        assert_eq!((x.nrows(), x.ncols()), (1, 1));
        assert_eq!(x[(0, 0)], c64::new(2.0, 1.0));

        // Σ[2,1,1] in one-based indexing sits on row 2 of X
        let mut t = PathResponseTensor::zeros(2, 2, vec![0.0]).unwrap();
        *t.get_mut(1, 0, 0) = c64::new(5.0, 0.0);
        let x = matricize_prt(&t);
        assert_eq!(x[(1, 0)], c64::new(5.0, 0.0));
        assert_eq!(x.squared_norm_l2(), 25.0);
    }

    #[test]
    fn devectorize_round_trip() {
        let t = sample_tensor(4, 6, 3);
        let x = matricize_prt(&t);
        let back = devectorize_x(&x, 6, 4, t.delays()).unwrap();
        assert_eq!(back, t);
        assert!(devectorize_x(&x, 5, 4, t.delays()).is_err());
    }

    #[test]
    fn devectorize_sorts_delays() {
        let x = CMat::from_fn(1, 2, |_, j| c64::new(j as f64, 0.0));
        let t = devectorize_x(&x, 1, 1, &[3e-8, 1e-8]).unwrap();
        assert_eq!(t.delays(), &[1e-8, 3e-8]);
        assert_eq!(t.get(0, 0, 0), c64::new(1.0, 0.0));
    }

    #[test]
    fn tensor_rejects_unsorted_delays() {
        assert!(PathResponseTensor::zeros(1, 1, vec![2e-8, 1e-8]).is_err());
        assert!(PathResponseTensor::zeros(1, 1, vec![1e-8, 1e-8]).is_err());
    }

    #[test]
    fn scene_rejects_short_cyclic_prefix() {
        let sys = SystemParams {
            cp_length: 8,
            ..SystemParams::default()
        };
        assert!(sys.validate().is_err());
    }

    #[test]
    fn tensor_json_uses_nested_rx_tx_delay_order() {
        let mut t = PathResponseTensor::zeros(2, 1, vec![0.0, 1e-8]).unwrap();
        *t.get_mut(1, 0, 1) = c64::new(1.5, -2.0);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(
            s,
            r#"{"gains":[[[[0.0,0.0],[0.0,0.0]]],[[[0.0,0.0],[1.5,-2.0]]]],"delays":[0.0,1e-8]}"#
        );
        let back: PathResponseTensor = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}
