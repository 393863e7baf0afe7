//! Seeded Monte-Carlo trials and parameter sweeps with CSV output.
//!
//! Every trial owns one ChaCha8 generator seeded with the master seed and
//! the stream `(sweep_index << 32) | trial_index`. The generator is consumed
//! in a fixed order (scene, measurement plan, pilot noise), so results do not
//! depend on how trials are scheduled across threads.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelScene, Region, SystemParams};
use crate::error::{invalid, Error, Result, Warnings};
use crate::metrics::{nmse, GridSpec, RateContext};
use crate::pilot::{synthesize_pilots_averaged, LayoutKind, MeasurementPlan, PilotGrid, PilotRecord};
use crate::prt::{somp_pipeline, EstimatedMpcs};
use crate::refine::{refine, RefineConfig, TraceEntry};
use crate::scene::{sample_scene_with, SceneConfig};
use crate::somp::{snap_scene_to_grids, AngleGrid, DelayGrid, Grids, SompConfig};

/// Total number of measurements kept fixed by the region sweep.
pub const REGION_SWEEP_TOTAL: usize = 328;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Snr,
    Mc,
    Region,
    Layout,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Snr => "snr",
            SweepAxis::Mc => "mc",
            SweepAxis::Region => "region",
            SweepAxis::Layout => "layout",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "snr" => Ok(SweepAxis::Snr),
            "mc" => Ok(SweepAxis::Mc),
            "region" => Ok(SweepAxis::Region),
            "layout" => Ok(SweepAxis::Layout),
            other => Err(invalid(format!("unknown sweep axis '{other}'"))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One sweep value: a number, or a layout name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Number(f64),
    Text(String),
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Number(v) => write!(f, "{v}"),
            AxisValue::Text(s) => f.write_str(s),
        }
    }
}

impl AxisValue {
    /// Numbers when possible, text otherwise.
    pub fn parse(s: &str) -> Self {
        match s.trim().parse::<f64>() {
            Ok(v) => AxisValue::Number(v),
            Err(_) => AxisValue::Text(s.trim().to_string()),
        }
    }

    fn number(&self, axis: SweepAxis) -> Result<f64> {
        match self {
            AxisValue::Number(v) if v.is_finite() => Ok(*v),
            _ => Err(invalid(format!("axis {axis} needs finite numeric values, got '{self}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    pub axis: Option<SweepAxis>,
    pub values: Vec<AxisValue>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            axis: None,
            values: Vec::new(),
            trials: 20,
            seed: 0,
        }
    }
}

/// Full simulation setup. Every field defaults to the reference setup, so
/// an empty configuration file reproduces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub system: SystemParams,
    pub num_paths: usize,
    /// `None` means `1 / num_paths` per path.
    pub gain_variance: Option<f64>,
    /// Normalized side `S` of both movement regions.
    pub region_size: f64,
    pub num_tx_positions: usize,
    pub num_rx_positions: usize,
    pub num_joint_positions: usize,
    pub layout: LayoutKind,
    pub num_pilots: usize,
    pub angle_grid: usize,
    pub delay_grid: usize,
    pub metric_points: usize,
    pub somp: SompConfig,
    pub refine: RefineConfig,
    pub snr_db: f64,
    pub tx_power: f64,
    pub symbols_per_position: usize,
    /// Drop the pilot noise entirely.
    pub noiseless: bool,
    /// Snap the sampled angles and delays to the estimator's grids.
    pub on_grid: bool,
    pub sweep: SweepSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemParams::default(),
            num_paths: 6,
            gain_variance: None,
            region_size: 3.0,
            num_tx_positions: 64,
            num_rx_positions: 64,
            num_joint_positions: 200,
            layout: LayoutKind::Upa,
            num_pilots: 32,
            angle_grid: 100,
            delay_grid: 100,
            metric_points: 256,
            somp: SompConfig::default(),
            refine: RefineConfig::default(),
            snr_db: 20.0,
            tx_power: 1.0,
            symbols_per_position: 1,
            noiseless: false,
            on_grid: false,
            sweep: SweepSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Read TOML or JSON, chosen by file extension (TOML otherwise).
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::from_str_with_format(&text, is_json)
    }

    pub fn from_str_with_format(text: &str, json: bool) -> Result<Self> {
        let cfg: Self = if json {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text).map_err(|e| invalid(format!("bad TOML config: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.scene_config(0).validate()?;
        Region::new(self.region_size)?;
        PilotGrid::new(self.system.num_subcarriers, self.num_pilots)?;
        AngleGrid::new(self.angle_grid)?;
        DelayGrid::new(self.delay_grid, self.system.tau_max)?;
        GridSpec {
            points_per_region: self.metric_points,
        }
        .side()?;
        self.somp.validate()?;
        self.refine.validate()?;
        if !(self.tx_power > 0.0) || self.symbols_per_position == 0 {
            return Err(invalid("tx power must be positive and symbols per position at least 1"));
        }
        if !self.noiseless && !self.snr_db.is_finite() {
            return Err(invalid("SNR must be finite unless the run is noiseless"));
        }
        if self.num_tx_positions + self.num_rx_positions + self.num_joint_positions == 0 {
            return Err(invalid("measurement plan is empty"));
        }
        if self.sweep.trials == 0 {
            return Err(invalid("need at least one trial"));
        }
        Ok(())
    }

    pub fn noise_power(&self) -> f64 {
        if self.noiseless {
            0.0
        } else {
            self.tx_power * 10f64.powf(-self.snr_db / 10.0)
        }
    }

    fn scene_config(&self, seed: u64) -> SceneConfig {
        SceneConfig {
            num_paths: self.num_paths,
            tau_max: self.system.tau_max,
            gain_variance: self.gain_variance,
            rng_seed: seed,
        }
    }

    pub fn grids(&self) -> Result<Grids> {
        Ok(Grids {
            angle: AngleGrid::new(self.angle_grid)?,
            delay: DelayGrid::new(self.delay_grid, self.system.tau_max)?,
        })
    }

    pub fn metric_grid(&self) -> GridSpec {
        GridSpec {
            points_per_region: self.metric_points,
        }
    }

    /// The configuration used for one sweep value.
    pub fn with_axis_value(&self, axis: SweepAxis, value: &AxisValue) -> Result<Self> {
        let mut cfg = self.clone();
        match axis {
            SweepAxis::Snr => cfg.snr_db = value.number(axis)?,
            SweepAxis::Mc => {
                let v = value.number(axis)?;
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(invalid(format!("M_c must be a nonnegative integer, got {v}")));
                }
                cfg.num_joint_positions = v as usize;
            }
            SweepAxis::Region => {
                let s = value.number(axis)?;
                let n = region_grid_side(s);
                let per_step = n * n;
                if 2 * per_step > REGION_SWEEP_TOTAL {
                    return Err(invalid(format!(
                        "region size {s} needs {per_step} positions per step, more than the {REGION_SWEEP_TOTAL} total"
                    )));
                }
                cfg.region_size = s;
                cfg.num_tx_positions = per_step;
                cfg.num_rx_positions = per_step;
                cfg.num_joint_positions = REGION_SWEEP_TOTAL - 2 * per_step;
            }
            SweepAxis::Layout => {
                let name = match value {
                    AxisValue::Text(s) => s.clone(),
                    AxisValue::Number(v) => v.to_string(),
                };
                cfg.layout = name.parse()?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Points per side of the 0.4-wavelength grid covering a region of side `s`.
pub fn region_grid_side(s: f64) -> usize {
    (s / 0.4 + 1e-9).floor() as usize + 1
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub axis_value: String,
    pub trial: usize,
    pub nmse_somp: f64,
    pub nmse_refined: f64,
    pub rate_somp: f64,
    pub rate_refined: f64,
    pub rate_perfect: f64,
    pub rate_fpa: f64,
    pub lt_hat: usize,
    pub lr_hat: usize,
    pub ld_hat: usize,
    pub warn_flags: String,
    pub wall_ms: f64,
}

pub const RAW_COLUMNS: [&str; 13] = [
    "axis_value",
    "trial",
    "nmse_somp",
    "nmse_refined",
    "rate_somp",
    "rate_refined",
    "rate_perfect",
    "rate_fpa",
    "lt_hat",
    "lr_hat",
    "ld_hat",
    "warn_flags",
    "wall_ms",
];

/// Everything a single trial produced.
#[derive(Debug, Clone)]
pub struct TrialDetail {
    pub record: TrialRecord,
    pub scene: ChannelScene,
    pub pilots: PilotRecord,
    pub somp: EstimatedMpcs,
    pub refined: EstimatedMpcs,
    pub trace: Vec<TraceEntry>,
}

/// Generator for one trial.
pub fn trial_rng(master_seed: u64, sweep_index: u32, trial_index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((sweep_index as u64) << 32) | trial_index as u64);
    rng
}

const ON_GRID_ATTEMPTS: usize = 1000;

/// Sample the scene, plan and pilots of one trial.
pub fn simulate_trial(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<(ChannelScene, PilotRecord)> {
    let sys = cfg.system;
    let scene_cfg = cfg.scene_config(0);
    let scene = if cfg.on_grid {
        let grids = cfg.grids()?;
        let mut snapped = None;
        for _ in 0..ON_GRID_ATTEMPTS {
            let s = sample_scene_with(&scene_cfg, &sys, rng)?;
            if let Ok(s) = snap_scene_to_grids(&s, &grids) {
                snapped = Some(s);
                break;
            }
        }
        snapped.ok_or_else(|| invalid("could not draw a scene with distinct on-grid delays"))?
    } else {
        sample_scene_with(&scene_cfg, &sys, rng)?
    };
    let region = Region::new(cfg.region_size)?;
    let plan = MeasurementPlan::generate(
        region,
        cfg.num_tx_positions,
        cfg.num_rx_positions,
        cfg.num_joint_positions,
        cfg.layout,
        rng,
    )?;
    let grid = PilotGrid::new(sys.num_subcarriers, cfg.num_pilots)?;
    let pilots = synthesize_pilots_averaged(
        &scene,
        &plan,
        &grid,
        cfg.tx_power,
        cfg.noise_power(),
        cfg.symbols_per_position,
        rng,
    )?;
    Ok((
        scene,
        PilotRecord {
            system: sys,
            grid,
            plan,
            pilots,
        },
    ))
}

/// Output of the two estimation stages.
#[derive(Debug, Clone)]
pub struct Estimates {
    pub somp: EstimatedMpcs,
    pub refined: EstimatedMpcs,
    pub trace: Vec<TraceEntry>,
    pub warnings: Warnings,
}

/// SOMP followed by refinement. A failed refinement keeps the SOMP estimate
/// and sets `refine_failed`.
pub fn estimate(cfg: &ExperimentConfig, rec: &PilotRecord) -> Result<Estimates> {
    let sys = rec.system;
    let grids = cfg.grids()?;
    let out = somp_pipeline(&rec.pilots, &rec.plan, &rec.grid, &grids, &sys, &cfg.somp)?;
    let mut warnings = out.warnings;
    let v_d_t = rec.pilots.stacked_transpose();
    let (refined, trace) = match refine(&out.estimate, &v_d_t, &rec.plan, &rec.grid, &sys, &cfg.refine) {
        Ok(r) => {
            warnings |= r.warnings;
            (r.estimate, r.trace)
        }
        Err(_) => {
            warnings |= Warnings::REFINE_FAILED;
            (out.estimate.clone(), Vec::new())
        }
    };
    Ok(Estimates {
        somp: out.estimate,
        refined,
        trace,
        warnings,
    })
}

/// Run one trial end to end.
pub fn run_trial_detailed(
    cfg: &ExperimentConfig,
    axis_value: &str,
    sweep_index: u32,
    trial_index: u32,
) -> Result<TrialDetail> {
    let start = Instant::now();
    let mut rng = trial_rng(cfg.sweep.seed, sweep_index, trial_index);
    let (scene, rec) = simulate_trial(cfg, &mut rng)?;
    let est = estimate(cfg, &rec)?;

    let region = rec.plan.region;
    let metric = cfg.metric_grid();
    let rates = RateContext::new(&scene, &metric, region, cfg.tx_power, cfg.noise_power())?;
    let record = TrialRecord {
        axis_value: axis_value.to_string(),
        trial: trial_index as usize,
        nmse_somp: nmse(&scene, &est.somp, &metric, region)?,
        nmse_refined: nmse(&scene, &est.refined, &metric, region)?,
        rate_somp: rates.achievable_rate(&est.somp)?.rate,
        rate_refined: rates.achievable_rate(&est.refined)?.rate,
        rate_perfect: rates.achievable_rate(&EstimatedMpcs::from_scene(&scene))?.rate,
        rate_fpa: rates.fpa().rate,
        lt_hat: est.somp.num_tx(),
        lr_hat: est.somp.num_rx(),
        ld_hat: est.somp.num_delays(),
        warn_flags: est.warnings.to_string(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(TrialDetail {
        record,
        scene,
        pilots: rec,
        somp: est.somp,
        refined: est.refined,
        trace: est.trace,
    })
}

/// Run one trial; failures become a flagged row with NaN metrics.
pub fn run_trial(cfg: &ExperimentConfig, axis_value: &str, sweep_index: u32, trial_index: u32) -> TrialRecord {
    let start = Instant::now();
    match run_trial_detailed(cfg, axis_value, sweep_index, trial_index) {
        Ok(d) => d.record,
        Err(_) => TrialRecord {
            axis_value: axis_value.to_string(),
            trial: trial_index as usize,
            nmse_somp: f64::NAN,
            nmse_refined: f64::NAN,
            rate_somp: f64::NAN,
            rate_refined: f64::NAN,
            rate_perfect: f64::NAN,
            rate_fpa: f64::NAN,
            lt_hat: 0,
            lr_hat: 0,
            ld_hat: 0,
            warn_flags: Warnings::TRIAL_FAILED.to_string(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
    /// Keep wall-clock times. Off by default so the raw CSV is reproducible.
    pub timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            timing: false,
        }
    }
}

/// Axis values to run: the configured sweep, or the single base setup.
pub fn sweep_points(cfg: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    match cfg.sweep.axis {
        None => Ok(vec![("base".to_string(), cfg.clone())]),
        Some(axis) => {
            if cfg.sweep.values.is_empty() {
                return Err(invalid("sweep axis given without values"));
            }
            cfg.sweep
                .values
                .iter()
                .map(|v| Ok((v.to_string(), cfg.with_axis_value(axis, v)?)))
                .collect()
        }
    }
}

/// Run every (value, trial) pair, ordered by value then trial.
pub fn run_sweep(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Vec<TrialRecord>> {
    cfg.validate()?;
    let points = sweep_points(cfg)?;
    let trials = cfg.sweep.trials;
    let jobs: Vec<(usize, u32)> = (0..points.len())
        .flat_map(|p| (0..trials as u32).map(move |t| (p, t)))
        .collect();
    // parallelism is across trials only
    crate::linalg::use_sequential_kernels();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| invalid(format!("cannot start thread pool: {e}")))?;
    let mut records: Vec<TrialRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, t)| run_trial(&points[p].1, &points[p].0, p as u32, t))
            .collect()
    });
    if !opts.timing {
        for r in &mut records {
            r.wall_ms = 0.0;
        }
    }
    Ok(records)
}

/// Median and mean of each metric for one axis value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub axis_value: String,
    pub trials: usize,
    pub failed: usize,
    pub median_nmse_somp: f64,
    pub mean_nmse_somp: f64,
    pub median_nmse_refined: f64,
    pub mean_nmse_refined: f64,
    pub median_rate_somp: f64,
    pub mean_rate_somp: f64,
    pub median_rate_refined: f64,
    pub mean_rate_refined: f64,
    pub median_rate_perfect: f64,
    pub mean_rate_perfect: f64,
    pub median_rate_fpa: f64,
    pub mean_rate_fpa: f64,
}

/// Median of the finite entries; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean of the finite entries; NaN when there are none.
pub fn mean(values: &[f64]) -> f64 {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// One row per axis value, in first-appearance order.
pub fn aggregate(records: &[TrialRecord]) -> Vec<AggregateRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.axis_value.as_str()) {
            order.push(&r.axis_value);
        }
    }
    order
        .into_iter()
        .map(|value| {
            let rows: Vec<&TrialRecord> = records.iter().filter(|r| r.axis_value == value).collect();
            let col = |f: fn(&TrialRecord) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
            let stats = |f: fn(&TrialRecord) -> f64| {
                let c = col(f);
                (median(&c), mean(&c))
            };
            let (a, b) = stats(|r| r.nmse_somp);
            let (c, d) = stats(|r| r.nmse_refined);
            let (e, f) = stats(|r| r.rate_somp);
            let (g, h) = stats(|r| r.rate_refined);
            let (i, j) = stats(|r| r.rate_perfect);
            let (k, l) = stats(|r| r.rate_fpa);
            AggregateRow {
                axis_value: value.to_string(),
                trials: rows.len(),
                failed: rows
                    .iter()
                    .filter(|r| r.warn_flags.split(';').any(|w| w == "trial_failed"))
                    .count(),
                median_nmse_somp: a,
                mean_nmse_somp: b,
                median_nmse_refined: c,
                mean_nmse_refined: d,
                median_rate_somp: e,
                mean_rate_somp: f,
                median_rate_refined: g,
                mean_rate_refined: h,
                median_rate_perfect: i,
                mean_rate_perfect: j,
                median_rate_fpa: k,
                mean_rate_fpa: l,
            }
        })
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| Error::Output {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| Error::Output {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Write the raw per-trial CSV.
pub fn write_raw_csv(path: &Path, records: &[TrialRecord]) -> Result<()> {
    write_rows(path, records)
}

/// Write the per-value aggregate CSV.
pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    write_rows(path, rows)
}

/// Write the refinement trace as CSV.
pub fn write_trace_csv(path: &Path, trace: &[TraceEntry]) -> Result<()> {
    write_rows(path, trace)
}

/// Read a raw CSV back.
pub fn read_raw_csv(path: &Path) -> Result<Vec<TrialRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Paths written by [`write_sweep`].
#[derive(Debug, Clone)]
pub struct SweepFiles {
    pub raw: PathBuf,
    pub aggregate: PathBuf,
}

/// Run a sweep and write `<stem>_raw.csv` and `<stem>_aggregate.csv` into
/// `out_dir`, where the stem is the axis name (or `base`).
pub fn write_sweep(cfg: &ExperimentConfig, opts: RunOptions, out_dir: &Path) -> Result<(SweepFiles, Vec<TrialRecord>)> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Output {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let records = run_sweep(cfg, opts)?;
    let stem = cfg.sweep.axis.map_or("base", SweepAxis::name);
    let files = SweepFiles {
        raw: out_dir.join(format!("{stem}_raw.csv")),
        aggregate: out_dir.join(format!("{stem}_aggregate.csv")),
    };
    write_raw_csv(&files.raw, &records)?;
    write_aggregate_csv(&files.aggregate, &aggregate(&records))?;
    Ok((files, records))
}
