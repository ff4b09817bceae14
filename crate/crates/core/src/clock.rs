//! Monte Carlo simulation of the clock feedback loop.
//!
//! Each cycle draws the free-running LO frequency over the dead time and the
//! Ramsey dark time, samples a measurement outcome at the true phase, estimates
//! the phase and lets the servo correct the LO from the next cycle onwards.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimation::{
    efm_transform, estimate, EstimatorKind, EstimatorTable,
};
use crate::noise::{
    allan_deviation, dick_effect, extrapolate_unit_time, octave_taus, scaled_adev,
    AdevCurve, Extrapolation, LoProcess, NoiseSpec, DEFAULT_DICK_KMAX,
};
use crate::prior::{
    combine_widths, deadtime_width, width_from_interrogation, NoiseExponent, PriorModel,
};
use crate::protocol::{
    analytic_efm, statistical_model, sss_linear_optimal_mu, PhaseModel, PhaseScratch,
    ProtocolSpec,
};

/// Window of the fringe-hop detector in cycles.
pub const FRINGE_WINDOW: usize = 200;
/// Points per period of the cached outcome table.
pub const DENSE_GRID: usize = 4096;
/// Name of the random number generator recorded in run manifests.
pub const RNG_ID: &str = "ChaCha8Rng (rand_chacha 0.3), streams split by splitmix64";

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `stream` derived from a master seed.
pub fn split_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_mul(0xD1B5_4A32_D192_ED03)))
}

/// Feedback law applied to the LO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServoConfig {
    /// `u <- u - gain * delta_est`.
    Integrator { gain: f64 },
    /// Ridge-regularized linear prediction of the free-running frequency.
    LinearPredictor {
        history_len: usize,
        ridge: f64,
        #[serde(default = "default_refit")]
        refit_every: usize,
    },
}

fn default_refit() -> usize {
    1000
}

impl Default for ServoConfig {
    fn default() -> Self {
        ServoConfig::LinearPredictor {
            history_len: 50,
            ridge: 1e-6,
            refit_every: 1000,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ServoConfig::Integrator { gain } => {
                if !(gain > 0.0 && gain < 2.0) {
                    return invalid(format!("integrator gain {gain} outside (0, 2)"));
                }
            }
            ServoConfig::LinearPredictor {
                history_len,
                ridge,
                refit_every,
            } => {
                if history_len == 0 || refit_every == 0 || !(ridge >= 0.0) {
                    return invalid("predictor needs history_len >= 1, refit_every >= 1, ridge >= 0");
                }
            }
        }
        Ok(())
    }

    /// Cycles over which the servo correlates its corrections.
    pub fn memory_cycles(&self) -> usize {
        match *self {
            ServoConfig::Integrator { gain } => (1.0 / gain).ceil() as usize,
            ServoConfig::LinearPredictor { history_len, .. } => history_len,
        }
    }

    fn build(&self, debias: f64) -> Box<dyn Servo> {
        match *self {
            ServoConfig::Integrator { gain } => Box::new(Integrator { gain, u: 0.0 }),
            ServoConfig::LinearPredictor {
                history_len,
                ridge,
                refit_every,
            } => Box::new(LinearPredictor::new(history_len, ridge, refit_every, debias)),
        }
    }
}

/// A servo sees the frequency estimate `phi_est / T` and returns the correction for the next cycle.
pub trait Servo {
    /// Correction applied in the current cycle, rad/s.
    fn correction(&self) -> f64;
    fn update(&mut self, delta_est: f64);
}

struct Integrator {
    gain: f64,
    u: f64,
}

impl Servo for Integrator {
    fn correction(&self) -> f64 {
        self.u
    }
    fn update(&mut self, delta_est: f64) {
        self.u -= self.gain * delta_est;
    }
}

/// Warm-up gain used before the first predictor fit.
const WARMUP_GAIN: f64 = 0.5;

/// Predicts the next free-running frequency from the last `len` reconstructed values.
///
/// Reconstruction divides the estimate by the estimator's mean slope `debias`
/// before removing the applied correction, so shrinking Bayesian estimators
/// do not bias the regression. The regression runs on first differences,
/// `w_next = w_last + c . dw`, which keeps the level weights summing to one:
/// slow drifts are followed without leaking into the long-term stability, and
/// the ridge shrinks toward the random-walk predictor rather than toward zero.
struct LinearPredictor {
    len: usize,
    ridge: f64,
    refit: usize,
    debias: f64,
    /// Ring of the last `len + 1` reconstructed frequencies.
    history: Vec<f64>,
    head: usize,
    filled: usize,
    ata: Vec<f64>,
    atb: Vec<f64>,
    samples: usize,
    coeffs: Option<Vec<f64>>,
    u: f64,
    x: Vec<f64>,
}

impl LinearPredictor {
    fn new(len: usize, ridge: f64, refit: usize, debias: f64) -> Self {
        LinearPredictor {
            len,
            ridge,
            refit,
            debias,
            history: vec![0.0; len + 1],
            head: 0,
            filled: 0,
            ata: vec![0.0; len * len],
            atb: vec![0.0; len],
            samples: 0,
            coeffs: None,
            u: 0.0,
            x: vec![0.0; len],
        }
    }

    /// `j`-th most recent stored value, `j = 0` newest.
    fn back(&self, j: usize) -> f64 {
        let n = self.history.len();
        self.history[(self.head + n - 1 - j) % n]
    }

    /// Differences newest first into `self.x`.
    fn load(&mut self) {
        for j in 0..self.len {
            self.x[j] = self.back(j) - self.back(j + 1);
        }
    }

    fn fit(&mut self) {
        let l = self.len;
        let mut a = DMatrix::<f64>::zeros(l, l);
        let mut trace = 0.0;
        for i in 0..l {
            for j in i..l {
                let v = self.ata[i * l + j];
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
            trace += self.ata[i * l + i];
        }
        let lambda = self.ridge * (trace / l as f64).max(f64::MIN_POSITIVE);
        for i in 0..l {
            a[(i, i)] += lambda;
        }
        let b = DVector::from_column_slice(&self.atb);
        if let Some(ch) = a.cholesky() {
            let c = ch.solve(&b);
            if c.iter().all(|v| v.is_finite()) {
                self.coeffs = Some(c.iter().copied().collect());
            }
        }
    }
}

impl Servo for LinearPredictor {
    fn correction(&self) -> f64 {
        self.u
    }

    fn update(&mut self, delta_est: f64) {
        let w = delta_est / self.debias - self.u;
        let l = self.len;
        if self.filled == l + 1 {
            self.load();
            let target = w - self.back(0);
            for i in 0..l {
                let xi = self.x[i];
                let row = &mut self.ata[i * l..(i + 1) * l];
                for j in i..l {
                    row[j] += xi * self.x[j];
                }
                self.atb[i] += xi * target;
            }
            self.samples += 1;
            if self.samples.is_multiple_of(self.refit) && self.samples >= 4 * l {
                self.fit();
            }
        }
        self.history[self.head] = w;
        self.head = (self.head + 1) % (l + 1);
        self.filled = (self.filled + 1).min(l + 1);
        if self.filled == l + 1 {
            if let Some(c) = self.coeffs.take() {
                self.load();
                let step: f64 = c.iter().zip(&self.x).map(|(a, b)| a * b).sum();
                self.u = -(w + step);
                self.coeffs = Some(c);
                return;
            }
        }
        self.u -= WARMUP_GAIN * delta_est;
    }
}

/// Source of interval-averaged fractional frequency deviations of the free-running LO.
pub trait FrequencySource {
    fn advance(&mut self, dt: f64) -> f64;
}

impl FrequencySource for LoProcess {
    fn advance(&mut self, dt: f64) -> f64 {
        LoProcess::advance(self, dt)
    }
}

/// An LO without noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct Noiseless;

impl FrequencySource for Noiseless {
    fn advance(&mut self, _dt: f64) -> f64 {
        0.0
    }
}

/// Turns the true accumulated phase into a phase estimate.
pub trait PhaseReadout {
    fn readout(&mut self, phi: f64, rng: &mut ChaCha8Rng) -> f64;
    /// Mean slope of the estimate with respect to the true phase.
    fn debias(&self) -> f64 {
        1.0
    }
}

/// Noise-free readout that returns the phase wrapped into `[-pi, pi)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdealReadout;

impl PhaseReadout for IdealReadout {
    fn readout(&mut self, phi: f64, _rng: &mut ChaCha8Rng) -> f64 {
        wrap_phase(phi)
    }
}

pub fn wrap_phase(phi: f64) -> f64 {
    (phi + PI).rem_euclid(2.0 * PI) - PI
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Outcome probabilities evaluated at the exact phase every cycle.
    #[default]
    Exact,
    /// Cubic interpolation in a periodic table of `DENSE_GRID` points.
    Interpolated,
}

/// Projective measurement of a compiled protocol followed by a tabulated estimator.
pub struct QuantumReadout {
    model: PhaseModel,
    estimates: Vec<f64>,
    debias: f64,
    probs: Vec<f64>,
    scratch: PhaseScratch,
    table: Option<Vec<f64>>,
}

impl QuantumReadout {
    pub fn new(
        spec: &ProtocolSpec,
        estimator: EstimatorKind,
        prior: &PriorModel,
        mode: SamplingMode,
    ) -> Result<Self> {
        let cm = statistical_model(spec, prior)?;
        let (table, _) = estimate(&cm, estimator)?;
        let debias = estimator_slope(&cm, &table);
        let model = cm.phase_model;
        let nx = model.n_outcomes();
        let mut scratch = PhaseScratch::default();
        let table_probs = match mode {
            SamplingMode::Exact => None,
            SamplingMode::Interpolated => {
                let mut t = vec![0.0; DENSE_GRID * nx];
                let mut col = vec![0.0; nx];
                for j in 0..DENSE_GRID {
                    let phi = -PI + 2.0 * PI * j as f64 / DENSE_GRID as f64;
                    model.probabilities_with(phi, &mut col, &mut scratch);
                    t[j * nx..(j + 1) * nx].copy_from_slice(&col);
                }
                Some(t)
            }
        };
        Ok(QuantumReadout {
            estimates: table.estimates,
            debias,
            probs: vec![0.0; nx],
            model,
            scratch,
            table: table_probs,
        })
    }

    pub fn estimates(&self) -> &[f64] {
        &self.estimates
    }

    fn fill(&mut self, phi: f64) {
        match &self.table {
            None => self.model.probabilities_with(phi, &mut self.probs, &mut self.scratch),
            Some(t) => {
                let nx = self.probs.len();
                let g = DENSE_GRID as f64;
                let s = (wrap_phase(phi) + PI) / (2.0 * PI) * g;
                let i1 = (s.floor() as usize).min(DENSE_GRID - 1);
                let f = s - i1 as f64;
                let idx = |k: isize| ((i1 as isize + k).rem_euclid(DENSE_GRID as isize)) as usize;
                let (i0, i2, i3) = (idx(-1), idx(1), idx(2));
                for x in 0..nx {
                    let (p0, p1, p2, p3) = (t[i0 * nx + x], t[i1 * nx + x], t[i2 * nx + x], t[i3 * nx + x]);
                    let v = p1
                        + 0.5 * f * (p2 - p0 + f * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3 + f * (3.0 * (p1 - p2) + p3 - p0)));
                    self.probs[x] = v.max(0.0);
                }
            }
        }
    }
}

impl PhaseReadout for QuantumReadout {
    fn readout(&mut self, phi: f64, rng: &mut ChaCha8Rng) -> f64 {
        self.fill(phi);
        let total: f64 = self.probs.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = self.probs.len() - 1;
        for (x, &p) in self.probs.iter().enumerate() {
            if u < p {
                pick = x;
                break;
            }
            u -= p;
        }
        self.estimates[pick]
    }

    fn debias(&self) -> f64 {
        self.debias
    }
}

/// Prior-averaged regression slope of the estimate on the true phase.
fn estimator_slope(cm: &crate::protocol::ConditionalModel, table: &EstimatorTable) -> f64 {
    let prior = &cm.prior;
    let mut num = 0.0;
    for (x, &est) in table.estimates.iter().enumerate() {
        let row = cm.row(x);
        for q in 0..row.len() {
            num += prior.weights[q] * row[q] * prior.nodes[q] * est;
        }
    }
    let slope = num / prior.variance();
    if slope > 1e-6 {
        slope
    } else {
        1.0
    }
}

fn default_estimator() -> EstimatorKind {
    EstimatorKind::OptimalBayes
}

fn default_discard() -> usize {
    2000
}

/// Full description of one clock run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockConfig {
    pub protocol: ProtocolSpec,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorKind,
    pub noise: NoiseSpec,
    /// Ramsey dark time in seconds.
    pub t: f64,
    /// Dead time in seconds.
    #[serde(default)]
    pub t_dead: f64,
    pub n_cycles: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub servo: ServoConfig,
    /// Prior width in radians used to build the estimator.
    pub prior_width: f64,
    /// Constant LO frequency offset in rad/s.
    #[serde(default)]
    pub initial_offset: f64,
    /// Leading cycles excluded from statistics.
    #[serde(default = "default_discard")]
    pub discard_cycles: usize,
    #[serde(default)]
    pub sampling: SamplingMode,
    /// Keep the stabilized trace in the result.
    #[serde(default)]
    pub keep_trace: bool,
}

impl ClockConfig {
    pub fn new(protocol: ProtocolSpec, noise: NoiseSpec, t: f64, n_cycles: usize, prior_width: f64) -> Self {
        ClockConfig {
            protocol,
            estimator: EstimatorKind::OptimalBayes,
            noise,
            t,
            t_dead: 0.0,
            n_cycles,
            seed: 0,
            servo: ServoConfig::default(),
            prior_width,
            initial_offset: 0.0,
            discard_cycles: default_discard(),
            sampling: SamplingMode::Exact,
            keep_trace: false,
        }
    }

    pub fn cycle_time(&self) -> f64 {
        self.t + self.t_dead
    }

    pub fn duty_cycle(&self) -> f64 {
        self.t / self.cycle_time()
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.noise.validate()?;
        self.servo.validate()?;
        if !(self.t > 0.0 && self.t.is_finite()) {
            return invalid("interrogation time must be positive");
        }
        if !(self.t_dead >= 0.0 && self.t_dead.is_finite()) {
            return invalid("dead time must be non-negative");
        }
        if !(self.prior_width > 0.0) {
            return invalid("prior width must be positive");
        }
        if self.n_cycles < self.discard_cycles + 16 {
            return invalid("n_cycles must exceed discard_cycles by at least 16");
        }
        Ok(())
    }
}

/// Fixed-range histogram of residual phases with running moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
    sums: [f64; 4],
    count: u64,
}

impl PhaseHistogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        PhaseHistogram {
            lo,
            hi,
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
            sums: [0.0; 4],
            count: 0,
        }
    }

    pub fn push(&mut self, v: f64) {
        let bins = self.counts.len();
        if v < self.lo {
            self.underflow += 1;
        } else if v >= self.hi {
            self.overflow += 1;
        } else {
            let i = ((v - self.lo) / (self.hi - self.lo) * bins as f64) as usize;
            self.counts[i.min(bins - 1)] += 1;
        }
        let v2 = v * v;
        self.sums[0] += v;
        self.sums[1] += v2;
        self.sums[2] += v2 * v;
        self.sums[3] += v2 * v2;
        self.count += 1;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.sums[0] / self.count as f64
    }

    /// Root mean square about zero, the width of a zero-mean Gaussian fit.
    pub fn rms(&self) -> f64 {
        (self.sums[1] / self.count as f64).sqrt()
    }

    fn central(&self) -> (f64, f64, f64) {
        let n = self.count as f64;
        let m = self.mean();
        let e2 = self.sums[1] / n;
        let e3 = self.sums[2] / n;
        let e4 = self.sums[3] / n;
        let c2 = e2 - m * m;
        let c3 = e3 - 3.0 * m * e2 + 2.0 * m.powi(3);
        let c4 = e4 - 4.0 * m * e3 + 6.0 * m * m * e2 - 3.0 * m.powi(4);
        (c2, c3, c4)
    }

    pub fn std(&self) -> f64 {
        self.central().0.max(0.0).sqrt()
    }

    pub fn skewness(&self) -> f64 {
        let (c2, c3, _) = self.central();
        c3 / c2.powf(1.5)
    }

    pub fn excess_kurtosis(&self) -> f64 {
        let (c2, _, c4) = self.central();
        c4 / (c2 * c2) - 3.0
    }

    pub fn merge(&mut self, other: &PhaseHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        for k in 0..4 {
            self.sums[k] += other.sums[k];
        }
        self.count += other.count;
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phi_lo,phi_hi,count\n");
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        let _ = writeln!(s, "-inf,{:e},{}", self.lo, self.underflow);
        for (i, c) in self.counts.iter().enumerate() {
            let a = self.lo + i as f64 * w;
            let _ = writeln!(s, "{:e},{:e},{}", a, a + w, c);
        }
        let _ = writeln!(s, "{:e},inf,{}", self.hi, self.overflow);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FringeHop {
    pub detected: bool,
    pub first_cycle: Option<usize>,
}

/// Sliding-window rule flagging a loop locked to a neighbouring fringe.
#[derive(Debug, Clone)]
pub struct FringeHopDetector {
    diff: Vec<f64>,
    phase: Vec<f64>,
    sum_diff: f64,
    sum_phase: f64,
    pos: usize,
    seen: usize,
    result: FringeHop,
}

impl Default for FringeHopDetector {
    fn default() -> Self {
        Self::new(FRINGE_WINDOW)
    }
}

impl FringeHopDetector {
    pub fn new(window: usize) -> Self {
        FringeHopDetector {
            diff: vec![0.0; window],
            phase: vec![0.0; window],
            sum_diff: 0.0,
            sum_phase: 0.0,
            pos: 0,
            seen: 0,
            result: FringeHop {
                detected: false,
                first_cycle: None,
            },
        }
    }

    /// Feeds the true and estimated phase of cycle `k`.
    pub fn push(&mut self, k: usize, phi: f64, phi_est: f64) {
        let w = self.diff.len();
        let d = phi - phi_est;
        self.sum_diff += d - self.diff[self.pos];
        self.sum_phase += phi - self.phase[self.pos];
        self.diff[self.pos] = d;
        self.phase[self.pos] = phi;
        self.pos = (self.pos + 1) % w;
        self.seen += 1;
        if self.seen.is_multiple_of(4096) {
            self.sum_diff = self.diff.iter().sum();
            self.sum_phase = self.phase.iter().sum();
        }
        if !self.result.detected && self.seen >= w {
            let wf = w as f64;
            if (self.sum_diff / wf).abs() > PI || (self.sum_phase / wf).abs() > PI {
                self.result = FringeHop {
                    detected: true,
                    first_cycle: Some(k),
                };
            }
        }
    }

    pub fn result(&self) -> FringeHop {
        self.result
    }
}

/// Runs the detector over a recorded sequence of `(phi, phi_est)` pairs.
pub fn detect_fringe_hop(record: &[(f64, f64)]) -> FringeHop {
    let mut d = FringeHopDetector::default();
    for (k, &(p, e)) in record.iter().enumerate() {
        d.push(k, p, e);
    }
    d.result()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockRunResult {
    pub adev: AdevCurve,
    pub fringe_hop: FringeHop,
    pub residual: PhaseHistogram,
    /// `sigma sqrt(tau)` at one second; only meaningful without a fringe hop.
    pub extrapolated: Option<Extrapolation>,
    pub t_c: f64,
    pub omega0: f64,
    /// Stabilized cycle-averaged fractional frequency, when requested.
    pub trace: Option<Vec<f64>>,
}

impl ClockRunResult {
    /// Extrapolated stability in units of `1 / (omega0 sqrt(tau Z))`.
    pub fn scaled_sigma(&self, z: f64) -> Option<f64> {
        self.extrapolated
            .map(|e| e.sigma_unit * self.omega0 * z.sqrt())
    }
}

/// Fit range used for the unit-time extrapolation, `[max(32, 16 m) T_C, n T_C / 8]`
/// with `m` the servo memory in cycles: the lower end skips the servo transient.
pub fn extrapolation_range(t_c: f64, n: usize, memory: usize) -> (f64, f64) {
    ((32.0f64).max(16.0 * memory as f64) * t_c, n as f64 * t_c / 8.0)
}

/// Runs one clock with the LO noise and measurement statistics of `cfg`.
pub fn run_clock(cfg: &ClockConfig) -> Result<ClockRunResult> {
    cfg.validate()?;
    let prior = PriorModel::for_atoms(cfg.prior_width, cfg.protocol.n_atoms)?;
    let mut readout = QuantumReadout::new(&cfg.protocol, cfg.estimator, &prior, cfg.sampling)?;
    let shortest = if cfg.t_dead > 0.0 {
        cfg.t.min(cfg.t_dead)
    } else {
        cfg.t
    };
    let mut lo = LoProcess::new(
        &cfg.noise,
        shortest,
        cfg.cycle_time() * cfg.n_cycles as f64,
        split_seed(cfg.seed, 1),
    )?;
    run_clock_with(cfg, &mut lo, &mut readout)
}

/// The feedback loop with caller-supplied LO and readout.
pub fn run_clock_with(
    cfg: &ClockConfig,
    lo: &mut dyn FrequencySource,
    readout: &mut dyn PhaseReadout,
) -> Result<ClockRunResult> {
    cfg.servo.validate()?;
    if !(cfg.t > 0.0 && cfg.t_dead >= 0.0) || cfg.n_cycles <= cfg.discard_cycles + 16 {
        return invalid("invalid loop timing or cycle count");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, 2));
    let omega0 = cfg.noise.omega0;
    let (t, td) = (cfg.t, cfg.t_dead);
    let t_c = t + td;
    let mut servo = cfg.servo.build(readout.debias());
    let mut detector = FringeHopDetector::default();
    let mut hist = PhaseHistogram::new(-PI, PI, 256);
    let n_keep = cfg.n_cycles - cfg.discard_cycles;
    let mut stab = Vec::with_capacity(n_keep);
    for k in 0..cfg.n_cycles {
        let u = servo.correction();
        let y_dead = if td > 0.0 { lo.advance(td) } else { 0.0 };
        let y_int = lo.advance(t);
        let omega = omega0 * y_int + cfg.initial_offset;
        let phi = (omega + u) * t;
        let phi_est = readout.readout(phi, &mut rng);
        detector.push(k, phi, phi_est);
        servo.update(phi_est / t);
        if k >= cfg.discard_cycles {
            hist.push(phi);
            let y_lo = (td * y_dead + t * y_int) / t_c;
            stab.push(y_lo + (cfg.initial_offset + u) / omega0);
        }
    }
    let taus = octave_taus(t_c, stab.len(), 8);
    let adev = allan_deviation(&stab, t_c, &taus)?;
    let extrapolated = extrapolate_unit_time(&adev, extrapolation_range(t_c, stab.len(), cfg.servo.memory_cycles())).ok();
    Ok(ClockRunResult {
        adev,
        fringe_hop: detector.result(),
        residual: hist,
        extrapolated,
        t_c,
        omega0,
        trace: if cfg.keep_trace { Some(stab) } else { None },
    })
}

/// Runs `runs` clocks with seeds split from `cfg.seed`, in parallel.
pub fn run_ensemble(cfg: &ClockConfig, runs: usize) -> Result<Vec<ClockRunResult>> {
    (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut c = cfg.clone();
            c.seed = split_seed(cfg.seed, 1000 + r as u64);
            run_clock(&c)
        })
        .collect()
}

/// Summary of an ensemble of runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub runs: usize,
    pub hops: usize,
    /// Mean and standard error of `sigma omega0 sqrt(tau Z)` over hop-free runs.
    pub mean_scaled_sigma: Option<f64>,
    pub stderr_scaled_sigma: Option<f64>,
    /// Pooled residual-phase RMS over hop-free runs.
    pub residual_rms: Option<f64>,
}

pub fn summarize(results: &[ClockRunResult], z: f64) -> EnsembleSummary {
    let hops = results.iter().filter(|r| r.fringe_hop.detected).count();
    let good: Vec<&ClockRunResult> = results.iter().filter(|r| !r.fringe_hop.detected).collect();
    let sig: Vec<f64> = good.iter().filter_map(|r| r.scaled_sigma(z)).collect();
    let (mean, se) = if sig.is_empty() {
        (None, None)
    } else {
        let n = sig.len() as f64;
        let m = sig.iter().sum::<f64>() / n;
        let se = if sig.len() > 1 {
            (sig.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            f64::NAN
        };
        (Some(m), Some(se))
    };
    let rms = if good.is_empty() {
        None
    } else {
        let mut h = good[0].residual.clone();
        for r in &good[1..] {
            h.merge(&r.residual);
        }
        Some(h.rms())
    };
    EnsembleSummary {
        runs: results.len(),
        hops,
        mean_scaled_sigma: mean,
        stderr_scaled_sigma: se,
        residual_rms: rms,
    }
}

/// Stage-0 prior width: `delta_phi^2` interpolated in log-log between
/// `(T/Z)^(4/3) N^(-1/4)` at `T/Z = 0.01` and the power law at `T/Z = 1`.
pub fn heuristic_prior_width(n_atoms: usize, t_over_z: f64, alpha: NoiseExponent) -> Result<f64> {
    if !(t_over_z > 0.0) || n_atoms == 0 {
        return invalid("heuristic prior needs T/Z > 0 and N >= 1");
    }
    let x0 = 0.01f64;
    let y0 = (x0.powf(4.0 / 3.0) * (n_atoms as f64).powf(-0.25)).ln();
    let y1 = width_from_interrogation(1.0, alpha)?.powi(2).ln();
    let s = (t_over_z.ln() - x0.ln()) / (0.0 - x0.ln());
    Ok((y0 + s * (y1 - y0)).exp().sqrt())
}

/// Settings of the iterative prior calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorIteration {
    pub n_cycles: usize,
    pub runs: usize,
    pub seed: u64,
    #[serde(default)]
    pub servo: ServoConfig,
    #[serde(default = "default_poly_degree")]
    pub degree: usize,
}

fn default_poly_degree() -> usize {
    5
}

impl Default for PriorIteration {
    fn default() -> Self {
        PriorIteration {
            n_cycles: 200_000,
            runs: 4,
            seed: 0,
            servo: ServoConfig::default(),
            degree: 5,
        }
    }
}

/// Simulated widths of one calibration stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorStage {
    pub stage: usize,
    /// Prior width used by the estimator at each grid point.
    pub prior_used: Vec<f64>,
    /// Pooled residual-phase RMS; `None` where a run hopped.
    pub measured: Vec<Option<f64>>,
}

/// `delta_phi(T)` as a polynomial in `ln(T/Z)` for `ln(delta_phi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorWidthCurve {
    pub n_atoms: usize,
    pub exponent: NoiseExponent,
    pub z: f64,
    pub t_over_z: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub stages: Vec<PriorStage>,
    /// Curve values on the grid for every stage, the heuristic first.
    pub curves: Vec<Vec<f64>>,
}

impl PriorWidthCurve {
    pub fn width(&self, t_over_z: f64) -> f64 {
        poly_eval(&self.coefficients, t_over_z.ln()).exp()
    }
}

fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * x + a)
}

/// Least-squares polynomial fit; coefficients in ascending order.
pub fn poly_fit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    let deg = degree.min(x.len().saturating_sub(1));
    let a = DMatrix::from_fn(x.len(), deg + 1, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    let c = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::NumericalConsistency(format!("polynomial fit failed: {e}")))?;
    Ok(c.iter().copied().collect())
}

/// Iterative calibration of the locked-loop prior width for `N` atoms.
///
/// Stage 0 simulates CSS with the heuristic width; every later stage fits the
/// measured widths, adds the power-law anchor at `T/Z = 1`, and simulates SSS
/// with the fitted width. Returns the curve fitted to the last stage.
pub fn iterate_prior(
    n_atoms: usize,
    noise: &NoiseSpec,
    t_grid: &[f64],
    stages: usize,
    settings: &PriorIteration,
) -> Result<PriorWidthCurve> {
    if stages == 0 || t_grid.is_empty() {
        return invalid("iterate_prior needs stages >= 1 and a non-empty grid");
    }
    if t_grid.iter().any(|&t| !(t > 0.0)) {
        return invalid("T/Z grid must be positive");
    }
    let z = noise.coherence_time(0.0)?;
    let alpha = noise.dominant_exponent(z);
    let anchor = width_from_interrogation(1.0, alpha)?;
    let mut curve: Vec<f64> = t_grid
        .iter()
        .map(|&x| heuristic_prior_width(n_atoms, x, alpha))
        .collect::<Result<_>>()?;
    let mut curves = vec![curve.clone()];
    let mut records = Vec::new();
    let mut coefficients = Vec::new();
    for stage in 0..stages {
        let measured: Vec<Option<f64>> = t_grid
            .par_iter()
            .zip(curve.par_iter())
            .enumerate()
            .map(|(i, (&x, &width))| -> Result<Option<f64>> {
                let protocol = if stage == 0 {
                    ProtocolSpec::css(n_atoms)
                } else {
                    crate::optimizer::optimal_sss(n_atoms, width, EstimatorKind::OptimalBayes)?.0
                };
                let mut cfg = ClockConfig::new(protocol, *noise, x * z, settings.n_cycles, width);
                cfg.servo = settings.servo;
                cfg.seed = split_seed(settings.seed, (stage * 1000 + i) as u64);
                let res = run_ensemble(&cfg, settings.runs)?;
                let s = summarize(&res, z);
                Ok(if s.hops > 0 { None } else { s.residual_rms })
            })
            .collect::<Result<_>>()?;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (&x, m) in t_grid.iter().zip(&measured) {
            if let Some(w) = m {
                if x < 1.0 {
                    xs.push(x.ln());
                    ys.push(w.ln());
                }
            }
        }
        if xs.is_empty() {
            return Err(Error::Convergence(
                "every interrogation time is limited by fringe hops".into(),
            ));
        }
        xs.push(0.0);
        ys.push(anchor.ln());
        coefficients = poly_fit(&xs, &ys, settings.degree)?;
        records.push(PriorStage {
            stage,
            prior_used: curve.clone(),
            measured,
        });
        curve = t_grid
            .iter()
            .map(|&x| poly_eval(&coefficients, x.ln()).exp())
            .collect();
        curves.push(curve.clone());
    }
    Ok(PriorWidthCurve {
        n_atoms,
        exponent: alpha,
        z,
        t_over_z: t_grid.to_vec(),
        coefficients,
        stages: records,
        curves,
    })
}

/// Phase width accumulated by the free-running LO over cycles of length `t_dead`,
/// from the differences of consecutive cycle frequencies.
pub fn measure_deadtime_width(noise: &NoiseSpec, t_dead: f64, n_cycles: usize, seed: u64) -> Result<f64> {
    if n_cycles < 10_000 {
        return invalid("dead-time width needs at least 10^4 cycles");
    }
    if !(t_dead >= 0.0) {
        return invalid("dead time must be non-negative");
    }
    if t_dead == 0.0 {
        return Ok(0.0);
    }
    let trace = crate::noise::generate_trace(noise, t_dead, n_cycles, seed)?;
    let w0 = noise.omega0 * t_dead;
    let ss: f64 = trace
        .windows(2)
        .map(|p| ((p[1] - p[0]) * w0).powi(2))
        .sum();
    Ok((ss / (n_cycles - 1) as f64).sqrt())
}

/// Protocol families with closed-form or asymptotic efm used by [`stability_scan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanFamily {
    /// Coherent spin state, linear estimator.
    CssLinear,
    /// Squeezed state at the twist minimizing the linear-estimator efm.
    SssLinear,
    /// Asymptotic optimal interferometer, `pi^2/N^2` plus the coherence-time limit.
    OqiAsymptotic,
}

impl ScanFamily {
    fn efm(self, n: usize, delta_phi: f64) -> Result<f64> {
        match self {
            ScanFamily::CssLinear => analytic_efm(&ProtocolSpec::css(n), delta_phi),
            ScanFamily::SssLinear => {
                if n < 2 {
                    return analytic_efm(&ProtocolSpec::css(n), delta_phi);
                }
                let mu = sss_linear_optimal_mu(n, delta_phi);
                analytic_efm(&ProtocolSpec::sss(n, mu), delta_phi)
            }
            ScanFamily::OqiAsymptotic => efm_transform(
                crate::bounds::oqi_asymptotic(n, delta_phi)?,
                delta_phi * delta_phi,
            ),
        }
    }

    /// The `N -> infinity` limit of the efm.
    fn ctl_efm(self, delta_phi: f64) -> Result<f64> {
        let d = delta_phi * delta_phi;
        match self {
            ScanFamily::CssLinear | ScanFamily::SssLinear => Ok(d.sinh() - d),
            ScanFamily::OqiAsymptotic => {
                let b = crate::bounds::ctl_oqi(delta_phi, crate::bounds::CtlMode::MainFringe)?;
                // the tail underflows for narrow priors, where efm and BMSE coincide
                if b == 0.0 {
                    Ok(0.0)
                } else {
                    efm_transform(b, d)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub n_atoms: usize,
    /// Minimal `sigma omega0 sqrt(tau Z)` including the Dick term.
    pub sigma_min: f64,
    pub t_min: f64,
    /// The same without the Dick term, evaluated at `t_lim` when defined.
    pub sigma_at_t_lim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub family: ScanFamily,
    pub td_over_z: f64,
    pub z: f64,
    pub rows: Vec<ScanRow>,
    /// Lower limit set by the coherence-time limit and the Dick effect; `None` without dead time.
    pub sigma_lim: Option<f64>,
    pub t_lim: Option<f64>,
    pub n_crit: Option<usize>,
}

/// Theory-mode evaluation of the stability model over interrogation times.
pub struct StabilityModel {
    pub family: ScanFamily,
    pub noise: NoiseSpec,
    pub exponent: NoiseExponent,
    pub z: f64,
    pub td_over_z: f64,
}

impl StabilityModel {
    pub fn new(family: ScanFamily, noise: &NoiseSpec, td_over_z: f64) -> Result<Self> {
        if !(td_over_z >= 0.0) {
            return invalid("T_D/Z must be non-negative");
        }
        let z0 = noise.coherence_time(0.0)?;
        // Z depends on T_D only through sigma(Z + T_D); iterate the fixed point.
        let mut z = z0;
        for _ in 0..100 {
            let next = noise.coherence_time(td_over_z * z)?;
            if (next / z - 1.0).abs() < 1e-14 {
                z = next;
                break;
            }
            z = next;
        }
        Ok(StabilityModel {
            family,
            noise: *noise,
            exponent: noise.dominant_exponent(z),
            z,
            td_over_z,
        })
    }

    pub fn prior_width(&self, t_over_z: f64) -> Result<f64> {
        Ok(combine_widths(
            width_from_interrogation(t_over_z, self.exponent)?,
            deadtime_width(self.td_over_z, self.exponent)?,
        ))
    }

    /// Dick variance in units of `1 / (omega0^2 tau Z)`.
    pub fn dick(&self, t_over_z: f64) -> Result<f64> {
        let r = dick_effect(
            &self.noise,
            t_over_z * self.z,
            self.td_over_z * self.z,
            1.0,
            DEFAULT_DICK_KMAX,
        )?;
        Ok(r.variance * self.noise.omega0.powi(2) * self.z)
    }

    /// QPN plus coherence-time-limit variance, scaled.
    pub fn qpn_ctl(&self, n: usize, t_over_z: f64) -> Result<f64> {
        let efm = self.family.efm(n, self.prior_width(t_over_z)?)?;
        Ok(scaled_adev(efm, t_over_z, self.td_over_z).powi(2))
    }

    pub fn ctl_only(&self, t_over_z: f64) -> Result<f64> {
        let efm = self.family.ctl_efm(self.prior_width(t_over_z)?)?;
        Ok(scaled_adev(efm, t_over_z, self.td_over_z).powi(2))
    }
}

fn minimize_on_grid(
    f: &(dyn Fn(f64) -> Result<f64> + Sync),
    grid: &[f64],
) -> Result<(f64, f64)> {
    let vals: Vec<f64> = grid
        .par_iter()
        .map(|&x| f(x).map(|v| if v.is_finite() { v } else { f64::INFINITY }))
        .collect::<Result<_>>()?;
    let (i, _) = vals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::InvalidInput("empty grid".into()))?;
    if i == 0 || i == grid.len() - 1 {
        return Err(Error::Domain(format!(
            "minimum at the boundary of the T/Z grid (T/Z = {})",
            grid[i]
        )));
    }
    let g = |lx: f64| f(lx.exp()).unwrap_or(f64::INFINITY);
    let (lx, v) = crate::optimizer::golden_section(g, grid[i - 1].ln(), grid[i + 1].ln(), 1e-10);
    Ok((lx.exp(), v.min(vals[i])))
}

/// Minimal total stability per `N`, the dead-time floor and the critical ensemble size.
pub fn stability_scan(
    family: ScanFamily,
    n_list: &[usize],
    t_grid: &[f64],
    td_over_z: f64,
    noise: &NoiseSpec,
) -> Result<ScanResult> {
    if t_grid.len() < 3 || t_grid.windows(2).any(|w| !(w[1] > w[0])) || t_grid[0] <= 0.0 {
        return invalid("T/Z grid must hold at least three increasing positive values");
    }
    let model = StabilityModel::new(family, noise, td_over_z)?;
    let dicks: Vec<f64> = t_grid
        .par_iter()
        .map(|&x| model.dick(x))
        .collect::<Result<_>>()?;
    let dick_at = |x: f64| -> Result<f64> {
        match t_grid.iter().position(|&g| g == x) {
            Some(i) => Ok(dicks[i]),
            None => model.dick(x),
        }
    };
    let (sigma_lim, t_lim) = if td_over_z > 0.0 {
        let f = |x: f64| -> Result<f64> { Ok((model.ctl_only(x)? + dick_at(x)?).sqrt()) };
        let (t, s) = minimize_on_grid(&f, t_grid)?;
        (Some(s), Some(t))
    } else {
        (None, None)
    };
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let f = |x: f64| -> Result<f64> { Ok((model.qpn_ctl(n, x)? + dick_at(x)?).sqrt()) };
        let (t_min, sigma_min) = minimize_on_grid(&f, t_grid)?;
        let sigma_at_t_lim = match t_lim {
            Some(tl) => Some(model.qpn_ctl(n, tl)?.sqrt()),
            None => None,
        };
        rows.push(ScanRow {
            n_atoms: n,
            sigma_min,
            t_min,
            sigma_at_t_lim,
        });
    }
    let n_crit = sigma_lim.and_then(|sl| {
        rows.iter()
            .find(|r| r.sigma_at_t_lim.is_some_and(|s| s <= 1.01 * sl))
            .map(|r| r.n_atoms)
    });
    Ok(ScanResult {
        family,
        td_over_z,
        z: model.z,
        rows,
        sigma_lim,
        t_lim,
        n_crit,
    })
}

/// Scaled theory stability `sigma omega0 sqrt(tau Z)` of a protocol from its efm.
pub fn theory_scaled_sigma(efm: f64, t_over_z: f64, td_over_z: f64) -> f64 {
    scaled_adev(efm, t_over_z, td_over_z)
}

/// Log-log slope of the stabilized ADEV over `[lo, hi]`, weighted by the point uncertainties.
pub fn adev_slope(curve: &AdevCurve, lo: f64, hi: f64) -> Option<f64> {
    let idx: Vec<usize> = (0..curve.taus.len())
        .filter(|&i| curve.taus[i] >= lo && curve.taus[i] <= hi && curve.sigmas[i] > 0.0)
        .collect();
    if idx.len() < 3 {
        return None;
    }
    let x: Vec<f64> = idx.iter().map(|&i| curve.taus[i].ln()).collect();
    let y: Vec<f64> = idx.iter().map(|&i| curve.sigmas[i].ln()).collect();
    let w: Vec<f64> = idx.iter().map(|&i| crate::noise::log_weight(curve, i)).collect();
    Some(crate::noise::weighted_linear_fit(&x, &y, &w).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_config(servo: ServoConfig) -> ClockConfig {
        let noise = NoiseSpec::for_coherence_time(NoiseExponent::Flicker, 1.0, 1e15).unwrap();
        let mut cfg = ClockConfig::new(ProtocolSpec::css(8), noise, 0.1, 3000, 0.1);
        cfg.servo = servo;
        cfg.discard_cycles = 0;
        cfg.keep_trace = true;
        cfg
    }

    #[test]
    fn integrator_removes_offset() {
        let mut cfg = quiet_config(ServoConfig::Integrator { gain: 0.5 });
        cfg.initial_offset = 0.1 / cfg.t;
        let res = run_clock_with(&cfg, &mut Noiseless, &mut IdealReadout).unwrap();
        let tr = res.trace.unwrap();
        let y0 = tr[0].abs();
        assert!(y0 > 0.0);
        assert!(tr[100].abs() < 1e-3 * y0);
        assert!(!res.fringe_hop.detected);
    }

    #[test]
    fn injected_fringe_offset_is_flagged() {
        let mut cfg = quiet_config(ServoConfig::Integrator { gain: 0.5 });
        cfg.initial_offset = 2.0 * PI / cfg.t;
        let res = run_clock_with(&cfg, &mut Noiseless, &mut IdealReadout).unwrap();
        let hop = res.fringe_hop;
        assert!(hop.detected);
        assert!(hop.first_cycle.unwrap() < FRINGE_WINDOW);
    }

    #[test]
    fn predictor_tracks_a_drift() {
        struct Ramp(f64);
        impl FrequencySource for Ramp {
            fn advance(&mut self, dt: f64) -> f64 {
                self.0 += 1e-18 * dt;
                self.0
            }
        }
        let mut cfg = quiet_config(ServoConfig::default());
        cfg.n_cycles = 20_000;
        let res = run_clock_with(&cfg, &mut Ramp(0.0), &mut IdealReadout).unwrap();
        let tr = res.trace.unwrap();
        let tail = tr[15_000..].iter().map(|v| v.abs()).fold(0.0, f64::max);
        // free-running deviation reaches 2e-15 by the end
        assert!(tail < 1e-4 * 2e-15, "tail {tail}");
    }

    #[test]
    fn seed_splitting_is_stable() {
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_ne!(split_seed(1, 0), split_seed(1, 1));
        assert_ne!(split_seed(1, 0), split_seed(2, 0));
    }

    #[test]
    fn heuristic_endpoints() {
        let w = heuristic_prior_width(8, 0.01, NoiseExponent::Flicker).unwrap();
        assert!((w * w - 1.2810345311e-3).abs() < 1e-12);
        let w = heuristic_prior_width(8, 1.0, NoiseExponent::Flicker).unwrap();
        assert!((w * w - 1.7).abs() < 1e-12);
    }

    #[test]
    fn wrap_is_half_open() {
        assert!((wrap_phase(2.0 * PI + 0.1) - 0.1).abs() < 1e-12);
        assert!((wrap_phase(PI) + PI).abs() < 1e-12);
    }

    #[test]
    fn histogram_moments() {
        let mut h = PhaseHistogram::new(-1.0, 1.0, 4);
        for v in [-0.5, 0.5, -0.5, 0.5] {
            h.push(v);
        }
        assert_eq!(h.counts, vec![0, 2, 0, 2]);
        assert!((h.rms() - 0.5).abs() < 1e-15);
        assert!(h.skewness().abs() < 1e-12);
        assert!((h.excess_kurtosis() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn interpolated_sampling_is_close_to_exact() {
        let prior = PriorModel::gaussian(0.3).unwrap();
        let spec = ProtocolSpec::css(8);
        let mut exact = QuantumReadout::new(&spec, EstimatorKind::Linear, &prior, SamplingMode::Exact).unwrap();
        let mut dense = QuantumReadout::new(&spec, EstimatorKind::Linear, &prior, SamplingMode::Interpolated).unwrap();
        for phi in [-2.9, -0.4, 0.0, 0.77, 3.1] {
            exact.fill(phi);
            dense.fill(phi);
            for (a, b) in exact.probs.iter().zip(&dense.probs) {
                assert!((a - b).abs() < 1e-6, "phi={phi}");
            }
        }
    }
}
