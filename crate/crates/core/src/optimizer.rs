//! Global and local minimizers, and protocol optimization over the variational classes.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::estimation::{estimate, EstimatorKind, ErrorReport};
use crate::prior::PriorModel;
use crate::protocol::{sss_optimal_theta, statistical_model_in, ProtocolSpec, Twist, VariationalParams};
use crate::spin::DickeBasis;

/// Golden-section search for a minimum of `f` on `[a, b]`. Returns `(x, f(x))`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol * (1.0 + a.abs() + b.abs()) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    if fx <= fc.min(fd) {
        (x, fx)
    } else if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Coordinate pattern search. Steps shrink by half until below `tol`.
pub fn compass_search(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    initial_step: f64,
    tol: f64,
    max_evals: usize,
) -> (Vec<f64>, f64, usize) {
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut step = initial_step;
    let mut evals = 1;
    while step > tol && evals < max_evals {
        let mut improved = false;
        for i in 0..x.len() {
            for sign in [1.0, -1.0] {
                let mut y = x.clone();
                y[i] += sign * step;
                let fy = f(&y);
                evals += 1;
                if fy < fx {
                    x = y;
                    fx = fy;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, fx, evals)
}

/// Settings of the `rand/1/bin` differential evolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeSettings {
    pub population_factor: usize,
    pub f: f64,
    pub cr: f64,
    pub generations: usize,
    pub seed: u64,
    /// Stop when the population spread of objective values falls below this.
    pub f_tol: f64,
}

impl Default for DeSettings {
    fn default() -> Self {
        DeSettings {
            population_factor: 15,
            f: 0.7,
            cr: 0.9,
            generations: 300,
            seed: 0,
            f_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeOutcome {
    /// Final population sorted by objective.
    pub population: Vec<(Vec<f64>, f64)>,
    pub evaluations: usize,
    /// Best objective after each generation, the initial population first.
    pub history: Vec<f64>,
    /// The population spread fell below `f_tol` before the generation limit.
    pub converged: bool,
}

/// Differential evolution inside the box `bounds`; `seeds` replace the first random members.
///
/// Trial vectors of a generation are drawn sequentially from the seeded generator and
/// evaluated in parallel, so the result does not depend on the thread count.
pub fn differential_evolution(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    bounds: &[(f64, f64)],
    seeds: &[Vec<f64>],
    s: &DeSettings,
) -> DeOutcome {
    let dim = bounds.len();
    let np = (s.population_factor * dim).max(5);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|_| bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect())
        .collect();
    for (p, seed) in pop.iter_mut().zip(seeds) {
        *p = seed
            .iter()
            .zip(bounds)
            .map(|(&v, &(lo, hi))| v.clamp(lo, hi))
            .collect();
    }
    let mut fit: Vec<f64> = pop.par_iter().map(|p| sanitize(f(p))).collect();
    let mut evals = np;
    let best = |fit: &[f64]| fit.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut history = vec![best(&fit)];
    let mut converged = false;
    for _ in 0..s.generations {
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let (a, b, c) = loop {
                    let a = rng.gen_range(0..np);
                    let b = rng.gen_range(0..np);
                    let c = rng.gen_range(0..np);
                    if a != i && b != i && c != i && a != b && b != c && a != c {
                        break (a, b, c);
                    }
                };
                let jr = rng.gen_range(0..dim);
                let mut trial = pop[i].clone();
                for j in 0..dim {
                    if j == jr || rng.gen::<f64>() < s.cr {
                        let (lo, hi) = bounds[j];
                        let mut v = pop[a][j] + s.f * (pop[b][j] - pop[c][j]);
                        if v < lo || v > hi {
                            v = rng.gen_range(lo..=hi);
                        }
                        trial[j] = v;
                    }
                }
                trial
            })
            .collect();
        let scores: Vec<f64> = trials.par_iter().map(|t| sanitize(f(t))).collect();
        evals += np;
        for (i, (t, ft)) in trials.into_iter().zip(scores).enumerate() {
            if ft <= fit[i] {
                pop[i] = t;
                fit[i] = ft;
            }
        }
        let b = best(&fit);
        history.push(b);
        let worst = fit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if worst - b <= s.f_tol * b.abs().max(1e-300) {
            converged = true;
            break;
        }
    }
    let mut population: Vec<(Vec<f64>, f64)> = pop.into_iter().zip(fit).collect();
    population.sort_by(|a, b| a.1.total_cmp(&b.1));
    DeOutcome {
        population,
        evaluations: evals,
        history,
        converged,
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Quantity minimized over protocol parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    BmseOptimalBayes,
    BmseLinear,
}

impl Objective {
    pub fn estimator(self) -> EstimatorKind {
        match self {
            Objective::BmseOptimalBayes => EstimatorKind::OptimalBayes,
            Objective::BmseLinear => EstimatorKind::Linear,
        }
    }
}

/// Evaluates the objective of `[n, m]` protocols for a fixed prior.
pub struct Evaluator {
    basis: DickeBasis,
    prior: PriorModel,
    n_atoms: usize,
    class: [usize; 2],
    objective: Objective,
    mu_limit: f64,
}

impl Evaluator {
    pub fn new(n_atoms: usize, class: [usize; 2], delta_phi: f64, objective: Objective) -> Result<Self> {
        if class[0] > 2 || class[1] > 3 {
            return invalid("variational classes are limited to n <= 2, m <= 3");
        }
        Ok(Evaluator {
            basis: DickeBasis::new(n_atoms)?,
            prior: PriorModel::for_atoms(delta_phi, n_atoms)?,
            n_atoms,
            class,
            objective,
            mu_limit: 2.0 * PI,
        })
    }

    pub fn dimension(&self) -> usize {
        VariationalParams::parameter_count(self.class[0], self.class[1])
    }

    pub fn prior(&self) -> &PriorModel {
        &self.prior
    }

    pub fn spec(&self, v: &[f64]) -> Result<ProtocolSpec> {
        let p = VariationalParams::from_vec(self.class[0], self.class[1], v)?;
        Ok(ProtocolSpec::variational(self.n_atoms, p))
    }

    /// Objective value, `+inf` for parameters outside the admissible twist range.
    pub fn value(&self, v: &[f64]) -> f64 {
        let spec = match self.spec(v) {
            Ok(s) => s,
            Err(_) => return f64::INFINITY,
        };
        if let crate::protocol::ProtocolKind::Variational(p) = &spec.kind {
            if p.prep_twists.iter().chain(&p.meas_twists).any(|t| t.mu.abs() > self.mu_limit) {
                return f64::INFINITY;
            }
        }
        self.report(&spec).map(|r| r.bmse).unwrap_or(f64::INFINITY)
    }

    pub fn report(&self, spec: &ProtocolSpec) -> Result<ErrorReport> {
        let cm = statistical_model_in(spec, &self.basis, &self.prior)?;
        Ok(estimate(&cm, self.objective.estimator())?.1)
    }

    /// Indices of the twist strengths in the flat parameter vector.
    pub fn mu_indices(&self) -> Vec<usize> {
        mu_indices(self.class)
    }
}

fn mu_indices(class: [usize; 2]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 4;
    for j in 0..class[0] {
        out.push(i);
        i += if j == 0 { 1 } else { 3 };
    }
    for _ in 0..class[1] {
        out.push(i);
        i += 3;
    }
    out
}

/// Pads a protocol of a smaller class with zero-strength twists.
pub fn embed(params: &VariationalParams, n: usize, m: usize) -> Option<VariationalParams> {
    if params.n_prep() > n || params.m_meas() > m {
        return None;
    }
    let mut p = params.clone();
    p.prep_twists.resize(n, Twist::default());
    p.meas_twists.resize(m, Twist::default());
    Some(p)
}

/// Partition of the `(mu_1, mu_2)` plane of the `[1, 1]` class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    I,
    II,
    III,
    IV,
    V,
    VI,
    VII,
}

impl Region {
    pub const ALL: [Region; 7] = [
        Region::I,
        Region::II,
        Region::III,
        Region::IV,
        Region::V,
        Region::VI,
        Region::VII,
    ];

    /// Sign quadrants inside `|mu| <= pi`; `|mu_1| > pi` is V, `mu_2 > pi` VI, `mu_2 < -pi` VII.
    pub fn classify(mu1: f64, mu2: f64) -> Region {
        if mu1.abs() > PI {
            Region::V
        } else if mu2 > PI {
            Region::VI
        } else if mu2 < -PI {
            Region::VII
        } else {
            match (mu1 >= 0.0, mu2 >= 0.0) {
                (true, true) => Region::I,
                (false, true) => Region::II,
                (false, false) => Region::III,
                (true, false) => Region::IV,
            }
        }
    }

    /// Region containing the sign-flipped twists.
    pub fn mirror(self) -> Region {
        match self {
            Region::I => Region::III,
            Region::III => Region::I,
            Region::II => Region::IV,
            Region::IV => Region::II,
            Region::V => Region::V,
            Region::VI => Region::VII,
            Region::VII => Region::VI,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub protocol: ProtocolSpec,
    pub params: Vec<f64>,
    pub value: f64,
    pub region: Option<Region>,
}

/// Optimized protocols of one class, sorted by objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub n_atoms: usize,
    pub class: [usize; 2],
    pub delta_phi: f64,
    pub objective: Objective,
    pub candidates: Vec<Candidate>,
    /// Differential evolution stopped on population spread rather than budget.
    pub converged: bool,
    pub evaluations: usize,
    pub settings: DeSettings,
    /// Best objective per generation.
    pub history: Vec<f64>,
}

impl CandidateSet {
    pub fn best(&self) -> Option<&Candidate> {
        self.candidates.first()
    }
}

fn default_top_k() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizationTask {
    pub n_atoms: usize,
    /// `[n, m]`: twists before and after the phase encoding.
    pub class: [usize; 2],
    pub delta_phi: f64,
    pub objective: Objective,
    /// Objective evaluations available to differential evolution.
    pub budget: usize,
    #[serde(default)]
    pub seed: u64,
    /// Box on every twist strength, default `[-2 pi, 2 pi]`.
    #[serde(default)]
    pub mu_box: Option<(f64, f64)>,
    /// Distinct population members polished and returned.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

impl OptimizationTask {
    pub fn new(n_atoms: usize, class: [usize; 2], delta_phi: f64, objective: Objective) -> Self {
        let d = VariationalParams::parameter_count(class[0], class[1]);
        OptimizationTask {
            n_atoms,
            class,
            delta_phi,
            objective,
            budget: 15 * d * 200,
            seed: 0,
            mu_box: None,
            top_k: 3,
        }
    }

    fn de_settings(&self, dim: usize) -> Result<DeSettings> {
        let s = DeSettings {
            seed: self.seed,
            ..DeSettings::default()
        };
        let np = (s.population_factor * dim).max(5);
        if self.budget < 2 * np {
            return invalid(format!(
                "budget {} is below two generations of {np} members",
                self.budget
            ));
        }
        Ok(DeSettings {
            generations: self.budget / np - 1,
            ..s
        })
    }

    fn bounds(&self, dim: usize) -> Result<Vec<(f64, f64)>> {
        let (lo, hi) = self.mu_box.unwrap_or((-2.0 * PI, 2.0 * PI));
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return invalid("twist box must be finite and non-empty");
        }
        let mut b = vec![(-PI, PI); dim];
        for i in mu_indices(self.class) {
            b[i] = (lo, hi);
        }
        Ok(b)
    }
}

fn region_of(class: [usize; 2], v: &[f64]) -> Option<Region> {
    if class[0] >= 1 && class[1] >= 1 {
        let idx = mu_indices(class);
        Some(Region::classify(v[idx[0]], v[idx[class[0]]]))
    } else {
        None
    }
}

/// Global search of one variational class.
pub fn optimize_protocol(task: &OptimizationTask) -> Result<CandidateSet> {
    optimize_protocol_seeded(task, &[])
}

/// As [`optimize_protocol`] with extra starting points placed in the initial population.
pub fn optimize_protocol_seeded(task: &OptimizationTask, seeds: &[Vec<f64>]) -> Result<CandidateSet> {
    let ev = Evaluator::new(task.n_atoms, task.class, task.delta_phi, task.objective)?;
    let dim = ev.dimension();
    let settings = task.de_settings(dim)?;
    let bounds = task.bounds(dim)?;
    let mut all_seeds: Vec<Vec<f64>> = seeds.to_vec();
    all_seeds.push(VariationalParams::css_equivalent(task.class[0], task.class[1]).to_vec());
    let f = |v: &[f64]| ev.value(v);
    let out = differential_evolution(&f, &bounds, &all_seeds, &settings);
    let mut picks: Vec<(Vec<f64>, f64)> = Vec::new();
    for (x, fx) in &out.population {
        if picks.len() >= task.top_k.max(1) {
            break;
        }
        let distinct = picks.iter().all(|(y, fy)| {
            let d = x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            d > 1e-3 || (fx - fy).abs() > 1e-9 * fy.abs()
        });
        if distinct {
            picks.push((x.clone(), *fx));
        }
    }
    let polished: Vec<(Vec<f64>, f64)> = picks
        .into_par_iter()
        .map(|(x, fx)| {
            let (y, fy, _) = compass_search(&f, &x, 0.05, 1e-10, 20_000);
            if fy <= fx {
                (y, fy)
            } else {
                (x, fx)
            }
        })
        .collect();
    let mut candidates = polished
        .into_iter()
        .map(|(x, value)| {
            Ok(Candidate {
                protocol: ev.spec(&x)?,
                region: region_of(task.class, &x),
                params: x,
                value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    candidates.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(CandidateSet {
        n_atoms: task.n_atoms,
        class: task.class,
        delta_phi: task.delta_phi,
        objective: task.objective,
        candidates,
        converged: out.converged,
        evaluations: out.evaluations,
        settings,
        history: out.history,
    })
}

/// Optimizes classes in order, seeding each with the embedded optima of the classes it contains.
pub fn optimize_ladder(base: &OptimizationTask, classes: &[[usize; 2]]) -> Result<Vec<CandidateSet>> {
    let mut done: Vec<CandidateSet> = Vec::new();
    for &class in classes {
        let mut seeds = Vec::new();
        for prev in &done {
            if let Some(best) = prev.best() {
                if let crate::protocol::ProtocolKind::Variational(p) = &best.protocol.kind {
                    if let Some(e) = embed(p, class[0], class[1]) {
                        seeds.push(e.to_vec());
                        seeds.push(e.mirrored().to_vec());
                    }
                }
            }
        }
        if class[0] >= 1 && base.n_atoms >= 2 {
            let (spec, _) = optimal_sss(base.n_atoms, base.delta_phi, base.objective.estimator())?;
            if let crate::protocol::ProtocolKind::Sss { mu, theta } = spec.kind {
                let p = VariationalParams::sss_equivalent(mu, theta);
                if let Some(e) = embed(&p, class[0], class[1]) {
                    seeds.push(e.to_vec());
                }
            }
        }
        let task = OptimizationTask {
            class,
            ..base.clone()
        };
        done.push(optimize_protocol_seeded(&task, &seeds)?);
    }
    Ok(done)
}

/// Squeezed state whose twist minimizes the quadrature BMSE with the given estimator.
pub fn optimal_sss(n_atoms: usize, delta_phi: f64, estimator: EstimatorKind) -> Result<(ProtocolSpec, ErrorReport)> {
    if n_atoms < 2 {
        return invalid("squeezing needs at least two atoms");
    }
    let basis = DickeBasis::new(n_atoms)?;
    let prior = PriorModel::for_atoms(delta_phi, n_atoms)?;
    let eval = |mu: f64| -> f64 {
        let spec = ProtocolSpec::sss(n_atoms, mu);
        statistical_model_in(&spec, &basis, &prior)
            .and_then(|cm| estimate(&cm, estimator))
            .map(|(_, r)| r.bmse)
            .unwrap_or(f64::INFINITY)
    };
    let grid = 48;
    let mu_at = |i: usize| 1e-3 + (FRAC_PI_2 - 1e-3) * i as f64 / grid as f64;
    let vals: Vec<f64> = (0..=grid).into_par_iter().map(|i| eval(mu_at(i))).collect();
    let (ib, _) = vals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty grid");
    let lo = mu_at(ib.saturating_sub(1));
    let hi = mu_at((ib + 1).min(grid));
    let (mu, _) = golden_section(eval, lo, hi, 1e-9);
    let spec = ProtocolSpec::sss(n_atoms, mu);
    let cm = statistical_model_in(&spec, &basis, &prior)?;
    let report = estimate(&cm, estimator)?.1;
    Ok((spec, report))
}

/// Objective over a grid of `(mu_1, mu_2)` for the `[1, 1]` class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub mu: Vec<f64>,
    /// Row-major `[i_1][i_2]`, rotations optimized at every point.
    pub values: Vec<f64>,
    /// Per-region minima after a full local polish inside the region.
    pub minima: CandidateSet,
}

impl Landscape {
    pub fn value(&self, i1: usize, i2: usize) -> f64 {
        self.values[i1 * self.mu.len() + i2]
    }
}

/// Scans the `[1, 1]` twist plane on a `grid x grid` lattice over `[-2 pi, 2 pi]`.
///
/// At every point the six rotation parameters are optimized by local search,
/// continued along rows. The map is symmetrized under the sign flip of all
/// parameters, which maps `P(x|phi)` to `P(x|-phi)` and leaves the BMSE unchanged.
pub fn landscape_scan(n_atoms: usize, delta_phi: f64, objective: Objective, grid: usize) -> Result<Landscape> {
    if grid < 64 {
        return invalid("landscape grid needs at least 64 points per axis");
    }
    let class = [1, 1];
    let ev = Evaluator::new(n_atoms, class, delta_phi, objective)?;
    let l = 2.0 * PI;
    let mut mu = vec![0.0; grid];
    for i in 0..grid.div_ceil(2) {
        let v = -l + 2.0 * l * i as f64 / (grid - 1) as f64;
        mu[i] = v;
        mu[grid - 1 - i] = -v;
    }
    if grid % 2 == 1 {
        mu[grid / 2] = 0.0;
    }
    let full = |mu1: f64, mu2: f64, r: &[f64]| -> Vec<f64> {
        vec![r[0], r[1], r[2], r[3], mu1, mu2, r[4], r[5]]
    };
    let sss_start = |mu1: f64| -> Vec<f64> {
        let th = if n_atoms >= 2 { sss_optimal_theta(n_atoms, mu1) } else { 0.0 };
        vec![th, 0.0, FRAC_PI_2 + th, 0.0, 0.0, 0.0]
    };
    let rows: Vec<Vec<(f64, Vec<f64>)>> = (0..grid)
        .into_par_iter()
        .map(|i1| {
            let mu1 = mu[i1];
            let mut prev: Option<Vec<f64>> = None;
            let mut row = Vec::with_capacity(grid);
            for &mu2 in &mu {
                let g = |r: &[f64]| ev.value(&full(mu1, mu2, r));
                let mut start = sss_start(mu1);
                if let Some(p) = &prev {
                    if g(p) < g(&start) {
                        start = p.clone();
                    }
                }
                let (r, fr, _) = compass_search(&g, &start, 0.2, 1e-4, 4000);
                prev = Some(r.clone());
                row.push((fr, full(mu1, mu2, &r)));
            }
            row
        })
        .collect();
    let mut values = vec![0.0; grid * grid];
    let mut params = vec![Vec::new(); grid * grid];
    for i1 in 0..grid {
        for i2 in 0..grid {
            let (v, x) = &rows[i1][i2];
            let (j1, j2) = (grid - 1 - i1, grid - 1 - i2);
            let (_, xm) = &rows[j1][j2];
            let flipped: Vec<f64> = xm.iter().map(|a| -a).collect();
            let fv = ev.value(&flipped);
            let k = i1 * grid + i2;
            if fv < *v {
                values[k] = fv;
                params[k] = flipped;
            } else {
                values[k] = *v;
                params[k] = x.clone();
            }
        }
    }
    let mut starts: Vec<(Region, Vec<f64>, f64)> = Vec::new();
    for region in Region::ALL {
        let best = (0..grid * grid)
            .filter(|&k| Region::classify(mu[k / grid], mu[k % grid]) == region)
            .min_by(|&a, &b| values[a].total_cmp(&values[b]));
        if let Some(k) = best {
            starts.push((region, params[k].clone(), values[k]));
        }
    }
    let polish = |region: Region, x: &[f64]| -> (Vec<f64>, f64) {
        let g = |v: &[f64]| {
            if Region::classify(v[4], v[5]) != region || v[4].abs() > l || v[5].abs() > l {
                f64::INFINITY
            } else {
                ev.value(v)
            }
        };
        let (y, fy, _) = compass_search(&g, x, 0.05, 1e-10, 20_000);
        (y, fy)
    };
    let own: Vec<(Region, Vec<f64>, f64)> = starts
        .par_iter()
        .map(|(r, x, fx)| {
            let (y, fy) = polish(*r, x);
            if fy <= *fx {
                (*r, y, fy)
            } else {
                (*r, x.clone(), *fx)
            }
        })
        .collect();
    let mut candidates = Vec::new();
    for (r, x, fx) in &own {
        let mut best = (x.clone(), *fx);
        if let Some((_, xm, _)) = own.iter().find(|(q, _, _)| *q == r.mirror()) {
            let flipped: Vec<f64> = xm.iter().map(|a| -a).collect();
            let fv = ev.value(&flipped);
            if fv < best.1 && Region::classify(flipped[4], flipped[5]) == *r {
                best = (flipped, fv);
            }
        }
        candidates.push(Candidate {
            protocol: ev.spec(&best.0)?,
            params: best.0,
            value: best.1,
            region: Some(*r),
        });
    }
    candidates.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(Landscape {
        mu,
        values,
        minima: CandidateSet {
            n_atoms,
            class,
            delta_phi,
            objective,
            candidates,
            converged: true,
            evaluations: 0,
            settings: DeSettings::default(),
            history: Vec::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let (x, fx) = golden_section(|x| (x - 0.3).powi(2) + 1.0, -1.0, 2.0, 1e-12);
        assert!((x - 0.3).abs() < 1e-6);
        assert!((fx - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compass_search_on_quadratic() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 0.5).powi(2);
        let (x, fx, _) = compass_search(&f, &[0.0, 0.0], 0.5, 1e-10, 100_000);
        assert!((x[0] - 1.0).abs() < 1e-8 && (x[1] + 0.5).abs() < 1e-8);
        assert!(fx < 1e-15);
    }

    #[test]
    fn de_on_rastrigin() {
        let f = |x: &[f64]| {
            x.iter()
                .map(|v| v * v - 10.0 * (2.0 * std::f64::consts::PI * v).cos() + 10.0)
                .sum::<f64>()
        };
        let out = differential_evolution(&f, &[(-5.0, 5.0); 3], &[], &DeSettings::default());
        assert!(out.population[0].1 < 1e-6);
    }
}
