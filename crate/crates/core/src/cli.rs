//! Command line front end: TOML configs in, CSV tables and a JSON manifest out.
//!
//! Every subcommand reads one config file whose schema rejects unknown keys,
//! writes its tables into the output directory and finishes with
//! `manifest.json`, which records the config hash, seed and code version.
//! Times in configs are dimensionless (`T/Z`, `T_D/Z`); physical units enter
//! only through the noise specification.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{bqcrb, oqi, oqi_asymptotic, pi_heisenberg_limit, OqiOptions};
use crate::clock::{
    iterate_prior, run_ensemble, split_seed, stability_scan, summarize, theory_scaled_sigma, ClockConfig,
    PriorIteration, SamplingMode, ScanFamily, ServoConfig, RNG_ID,
};
use crate::error::{Error, Result};
use crate::estimation::{bcrb, efm_transform, estimate, EstimatorKind};
use crate::noise::{
    allan_deviation, extrapolate_unit_time, generate_trace, octave_taus, read_trace, write_trace, NoiseSpec,
    TraceMeta,
};
use crate::optimizer::{landscape_scan, optimal_sss, optimize_ladder, Objective, OptimizationTask};
use crate::prior::{combine_widths, deadtime_width, width_from_interrogation, NoiseExponent, PriorModel};
use crate::protocol::{ghz_state, statistical_model, ProtocolSpec, VariationalParams};
use crate::spin::DickeBasis;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "clockforge", version, about = "Bayesian Ramsey protocols and clock loop simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, default `out/<subcommand>`.
    #[arg(long, env = "CLOCKFORGE_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads, default all cores.
    #[arg(long, env = "CLOCKFORGE_THREADS")]
    pub threads: Option<usize>,
    /// Overrides the seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// OQI, BQCRB, BCRB and pi-corrected Heisenberg limit over N x delta_phi.
    Bounds(CommonArgs),
    /// BMSE and effective measurement uncertainty of given protocols.
    Protocol(CommonArgs),
    /// Variational protocol optimization over a T/Z grid.
    Optimize(CommonArgs),
    /// Monte Carlo clock runs.
    Clock(CommonArgs),
    /// Iterative calibration of the locked-loop prior width.
    Prior(CommonArgs),
    /// Dead-time stability scans: sigma_min, sigma_lim, N_crit.
    Deadtime(CommonArgs),
    /// LO trace synthesis and Allan deviation.
    Allan(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Bounds(_) => "bounds",
            Command::Protocol(_) => "protocol",
            Command::Optimize(_) => "optimize",
            Command::Clock(_) => "clock",
            Command::Prior(_) => "prior",
            Command::Deadtime(_) => "deadtime",
            Command::Allan(_) => "allan",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Bounds(a)
            | Command::Protocol(a)
            | Command::Optimize(a)
            | Command::Clock(a)
            | Command::Prior(a)
            | Command::Deadtime(a)
            | Command::Allan(a) => a,
        }
    }
}

/// LO noise given either by its coherence time or by raw coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseInput {
    /// Single power law with coherence time `z` seconds.
    Coherence {
        exponent: NoiseExponent,
        #[serde(default = "one")]
        z: f64,
        #[serde(default = "one")]
        omega0: f64,
    },
    Components {
        #[serde(default)]
        white_fm: f64,
        #[serde(default)]
        flicker: f64,
        #[serde(default)]
        random_walk: f64,
        omega0: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Default for NoiseInput {
    fn default() -> Self {
        NoiseInput::Coherence {
            exponent: NoiseExponent::Flicker,
            z: 1.0,
            omega0: 1.0,
        }
    }
}

impl NoiseInput {
    pub fn spec(&self) -> Result<NoiseSpec> {
        match *self {
            NoiseInput::Coherence { exponent, z, omega0 } => NoiseSpec::for_coherence_time(exponent, z, omega0),
            NoiseInput::Components {
                white_fm,
                flicker,
                random_walk,
                omega0,
            } => NoiseSpec::new(white_fm, flicker, random_walk, omega0),
        }
    }
}

/// Protocol as written in configs; the atom number is given alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProtocolInput {
    Css,
    /// Squeezed state with the variance-minimizing rotation.
    Sss { mu: f64 },
    /// Squeezed state with the BMSE-optimal twist for the prior at hand.
    SssOptimal,
    GhzParity,
    GhzProjective,
    Variational { params: VariationalParams },
}

impl ProtocolInput {
    pub fn build(&self, n_atoms: usize, delta_phi: f64, estimator: EstimatorKind) -> Result<ProtocolSpec> {
        let spec = match self {
            ProtocolInput::Css => ProtocolSpec::css(n_atoms),
            ProtocolInput::Sss { mu } => ProtocolSpec::sss(n_atoms, *mu),
            ProtocolInput::SssOptimal => optimal_sss(n_atoms, delta_phi, estimator)?.0,
            ProtocolInput::GhzParity => ProtocolSpec::ghz_parity(n_atoms),
            ProtocolInput::GhzProjective => ProtocolSpec::ghz_projective(n_atoms),
            ProtocolInput::Variational { params } => ProtocolSpec::variational(n_atoms, params.clone()),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn label(&self) -> &'static str {
        match self {
            ProtocolInput::Css => "css",
            ProtocolInput::Sss { .. } => "sss",
            ProtocolInput::SssOptimal => "sss_optimal",
            ProtocolInput::GhzParity => "ghz_parity",
            ProtocolInput::GhzProjective => "ghz_projective",
            ProtocolInput::Variational { .. } => "variational",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub n_atoms: Vec<usize>,
    pub delta_phi: Vec<f64>,
    #[serde(default = "default_oqi_tol")]
    pub oqi_tol: f64,
}

fn default_oqi_tol() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolEntry {
    #[serde(default)]
    pub label: Option<String>,
    pub n_atoms: usize,
    pub protocol: ProtocolInput,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorKind,
}

fn default_estimator() -> EstimatorKind {
    EstimatorKind::OptimalBayes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub delta_phi: Vec<f64>,
    pub protocols: Vec<ProtocolEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeInput {
    pub t_over_z: f64,
    #[serde(default = "default_grid")]
    pub grid: usize,
}

fn default_grid() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    pub n_atoms: usize,
    /// Classes optimized in order; each is seeded with the optima of the classes it contains.
    pub classes: Vec<[usize; 2]>,
    pub t_over_z: Vec<f64>,
    #[serde(default)]
    pub td_over_z: f64,
    #[serde(default = "default_exponent")]
    pub exponent: NoiseExponent,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    pub budget: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub landscape: Option<LandscapeInput>,
}

fn default_exponent() -> NoiseExponent {
    NoiseExponent::Flicker
}

fn default_objective() -> Objective {
    Objective::BmseOptimalBayes
}

fn default_top_k() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockFileConfig {
    pub n_atoms: usize,
    pub protocol: ProtocolInput,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub noise: NoiseInput,
    pub t_over_z: Vec<f64>,
    #[serde(default)]
    pub td_over_z: f64,
    pub n_cycles: usize,
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub servo: ServoConfig,
    /// Fixed prior width; the power law with dead-time broadening when absent.
    #[serde(default)]
    pub prior_width: Option<f64>,
    #[serde(default = "default_discard")]
    pub discard_cycles: usize,
    #[serde(default)]
    pub sampling: SamplingMode,
}

fn default_discard() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub n_atoms: usize,
    #[serde(default)]
    pub noise: NoiseInput,
    pub t_over_z: Vec<f64>,
    #[serde(default = "default_stages")]
    pub stages: usize,
    pub n_cycles: usize,
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub servo: ServoConfig,
    #[serde(default = "default_degree")]
    pub degree: usize,
}

fn default_stages() -> usize {
    3
}

fn default_degree() -> usize {
    5
}

/// Log-spaced grid description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl LogGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.lo > 0.0 && self.hi > self.lo) || self.points < 3 {
            return Err(Error::Config("grid needs 0 < lo < hi and at least 3 points".into()));
        }
        let (a, b) = (self.lo.ln(), self.hi.ln());
        Ok((0..self.points)
            .map(|i| (a + (b - a) * i as f64 / (self.points - 1) as f64).exp())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeadtimeConfig {
    pub families: Vec<ScanFamily>,
    pub n_atoms: Vec<usize>,
    pub t_over_z: LogGrid,
    pub td_over_z: Vec<f64>,
    #[serde(default)]
    pub noise: NoiseInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceSource {
    Generate {
        noise: NoiseInput,
        t_c: f64,
        n_cycles: usize,
        #[serde(default)]
        seed: u64,
        /// Also write the trace as `trace.bin` with a JSON sidecar.
        #[serde(default)]
        write: bool,
    },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllanConfig {
    pub source: TraceSource,
    /// Averaging times in seconds; octave spacing when absent.
    #[serde(default)]
    pub taus: Option<Vec<f64>>,
    /// Range for the unit-time extrapolation, seconds.
    #[serde(default)]
    pub fit_range: Option<(f64, f64)>,
    /// Coherence time used for the scaled column; derived from the noise when absent.
    #[serde(default)]
    pub z: Option<f64>,
}

/// Everything needed to repeat a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub rng: String,
    pub config_path: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    pub exit_code: i32,
    pub notes: Vec<String>,
}

/// Result of a command: the output directory, written files and exit code.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub outputs: Vec<String>,
    pub exit_code: i32,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(o) => {
            if o.exit_code == 4 {
                eprintln!("fringe hops invalidate part of the result set, see flags.json");
            }
            o.exit_code
        }
        Err(e) => {
            eprintln!("clockforge {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let args = cli.command.args();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = args.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cli.command))
}

struct Bundle {
    dir: PathBuf,
    outputs: Vec<String>,
    notes: Vec<String>,
}

impl Bundle {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Bundle {
            dir,
            outputs: Vec::new(),
            notes: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        fs::write(&path, contents)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let s = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
        self.write(name, &(s + "\n"))
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, String)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((cfg, text))
}

fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn dispatch(cmd: &Command) -> Result<Outcome> {
    let args = cmd.args();
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(cmd.name()));
    let mut bundle = Bundle::new(out.clone())?;
    let (config, text, seed, code) = match cmd {
        Command::Bounds(_) => {
            let (c, t): (BoundsConfig, _) = read_config(&args.config)?;
            bounds_cmd(&c, &mut bundle)?;
            (to_json(&c)?, t, None, 0)
        }
        Command::Protocol(_) => {
            let (c, t): (ProtocolConfig, _) = read_config(&args.config)?;
            protocol_cmd(&c, &mut bundle)?;
            (to_json(&c)?, t, None, 0)
        }
        Command::Optimize(_) => {
            let (mut c, t): (OptimizeConfig, _) = read_config(&args.config)?;
            if let Some(s) = args.seed {
                c.seed = s;
            }
            optimize_cmd(&c, &mut bundle)?;
            (to_json(&c)?, t, Some(c.seed), 0)
        }
        Command::Clock(_) => {
            let (mut c, t): (ClockFileConfig, _) = read_config(&args.config)?;
            if let Some(s) = args.seed {
                c.seed = s;
            }
            let code = clock_cmd(&c, &mut bundle)?;
            (to_json(&c)?, t, Some(c.seed), code)
        }
        Command::Prior(_) => {
            let (mut c, t): (PriorConfig, _) = read_config(&args.config)?;
            if let Some(s) = args.seed {
                c.seed = s;
            }
            prior_cmd(&c, &mut bundle)?;
            (to_json(&c)?, t, Some(c.seed), 0)
        }
        Command::Deadtime(_) => {
            let (c, t): (DeadtimeConfig, _) = read_config(&args.config)?;
            deadtime_cmd(&c, &mut bundle)?;
            (to_json(&c)?, t, None, 0)
        }
        Command::Allan(_) => {
            let (mut c, t): (AllanConfig, _) = read_config(&args.config)?;
            if let (Some(s), TraceSource::Generate { seed, .. }) = (args.seed, &mut c.source) {
                *seed = s;
            }
            let seed = match c.source {
                TraceSource::Generate { seed, .. } => Some(seed),
                TraceSource::File { .. } => None,
            };
            allan_cmd(&c, &mut bundle)?;
            (to_json(&c)?, t, seed, 0)
        }
    };
    let mut outputs = bundle.outputs.clone();
    outputs.push("manifest.json".into());
    let manifest = Manifest {
        command: cmd.name().into(),
        version: VERSION.into(),
        rng: RNG_ID.into(),
        config_path: args.config.display().to_string(),
        config_sha256: sha256_hex(&text),
        seed,
        threads: args.threads,
        config,
        outputs: outputs.clone(),
        exit_code: code,
        notes: bundle.notes.clone(),
    };
    bundle.write_json("manifest.json", &manifest)?;
    Ok(Outcome {
        out_dir: out,
        outputs,
        exit_code: code,
    })
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn check_positive(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() || values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Config(format!("{name} must be a non-empty list of positive numbers")));
    }
    Ok(())
}

fn csv_row(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn bounds_cmd(c: &BoundsConfig, b: &mut Bundle) -> Result<()> {
    check_positive("delta_phi", &c.delta_phi)?;
    if c.n_atoms.is_empty() || c.n_atoms.contains(&0) {
        return Err(Error::Config("n_atoms must list positive atom numbers".into()));
    }
    let grid: Vec<(usize, f64)> = c
        .n_atoms
        .iter()
        .flat_map(|&n| c.delta_phi.iter().map(move |&d| (n, d)))
        .collect();
    let opts = OqiOptions {
        tol: c.oqi_tol,
        ..OqiOptions::default()
    };
    let rows: Vec<String> = grid
        .par_iter()
        .map(|&(n, d)| -> Result<String> {
            let prior = PriorModel::for_atoms(d, n)?;
            let basis = DickeBasis::new(n)?;
            let o = oqi(n, &prior, &opts)?;
            let bq_css = bqcrb(&basis.css_x(), &prior);
            let bq_ghz = bqcrb(&ghz_state(&basis), &prior);
            let cm = statistical_model(&ProtocolSpec::css(n), &prior)?;
            let bc = bcrb(&cm);
            let opt_css = estimate(&cm, EstimatorKind::OptimalBayes)?.1.bmse;
            let asym = oqi_asymptotic(n, d).ok();
            Ok(csv_row(&[
                n.to_string(),
                d.to_string(),
                (d * d).to_string(),
                o.bound.to_string(),
                o.converged.to_string(),
                bq_css.to_string(),
                bq_ghz.to_string(),
                bc.to_string(),
                opt_css.to_string(),
                pi_heisenberg_limit(n).to_string(),
                opt(asym),
            ]))
        })
        .collect::<Result<_>>()?;
    let mut s = String::from(
        "n_atoms,delta_phi,prior_var,oqi,oqi_converged,bqcrb_css,bqcrb_ghz,bcrb_css,bmse_css_bayes,pi_hl,oqi_asymptotic\n",
    );
    rows.iter().for_each(|r| s.push_str(r));
    b.write("bounds.csv", &s)
}

fn protocol_cmd(c: &ProtocolConfig, b: &mut Bundle) -> Result<()> {
    check_positive("delta_phi", &c.delta_phi)?;
    let jobs: Vec<(usize, f64)> = (0..c.protocols.len())
        .flat_map(|i| c.delta_phi.iter().map(move |&d| (i, d)))
        .collect();
    let rows: Vec<String> = jobs
        .par_iter()
        .map(|&(i, d)| -> Result<String> {
            let e = &c.protocols[i];
            let spec = e.protocol.build(e.n_atoms, d, e.estimator)?;
            let prior = PriorModel::for_atoms(d, e.n_atoms)?;
            let cm = statistical_model(&spec, &prior)?;
            let (_, r) = estimate(&cm, e.estimator)?;
            let label = e.label.clone().unwrap_or_else(|| e.protocol.label().to_string());
            Ok(csv_row(&[
                label,
                e.n_atoms.to_string(),
                serde_json::to_string(&e.estimator).unwrap_or_default().trim_matches('"').to_string(),
                d.to_string(),
                r.bmse.to_string(),
                r.efm.to_string(),
                r.delta_phi_m().to_string(),
                bcrb(&cm).to_string(),
            ]))
        })
        .collect::<Result<_>>()?;
    let mut s = String::from("label,n_atoms,estimator,delta_phi,bmse,efm,delta_phi_m,bcrb\n");
    rows.iter().for_each(|r| s.push_str(r));
    b.write("protocol.csv", &s)
}

fn optimize_cmd(c: &OptimizeConfig, b: &mut Bundle) -> Result<()> {
    check_positive("t_over_z", &c.t_over_z)?;
    if c.classes.is_empty() {
        return Err(Error::Config("classes must not be empty".into()));
    }
    let mut s = String::from(
        "t_over_z,delta_phi,class_n,class_m,rank,region,bmse,efm,scaled_sigma,converged\n",
    );
    let mut all = Vec::new();
    for (i, &x) in c.t_over_z.iter().enumerate() {
        let d = combine_widths(
            width_from_interrogation(x, c.exponent)?,
            deadtime_width(c.td_over_z, c.exponent)?,
        );
        let task = OptimizationTask {
            n_atoms: c.n_atoms,
            class: c.classes[0],
            delta_phi: d,
            objective: c.objective,
            budget: c.budget,
            seed: split_seed(c.seed, i as u64),
            mu_box: None,
            top_k: c.top_k,
        };
        let sets = optimize_ladder(&task, &c.classes)?;
        for set in &sets {
            for (rank, cand) in set.candidates.iter().enumerate() {
                let efm = efm_transform(cand.value, d * d)?;
                s.push_str(&csv_row(&[
                    x.to_string(),
                    d.to_string(),
                    set.class[0].to_string(),
                    set.class[1].to_string(),
                    rank.to_string(),
                    cand.region.map(|r| format!("{r:?}")).unwrap_or_default(),
                    cand.value.to_string(),
                    efm.to_string(),
                    theory_scaled_sigma(efm, x, c.td_over_z).to_string(),
                    set.converged.to_string(),
                ]));
            }
            if !set.converged {
                b.notes.push(format!(
                    "T/Z = {x}, class {:?}: budget exhausted before the population converged",
                    set.class
                ));
            }
        }
        all.push(serde_json::json!({ "t_over_z": x, "delta_phi": d, "sets": sets }));
    }
    b.write("optimize.csv", &s)?;
    b.write_json("candidates.json", &all)?;
    if let Some(l) = &c.landscape {
        let d = combine_widths(
            width_from_interrogation(l.t_over_z, c.exponent)?,
            deadtime_width(c.td_over_z, c.exponent)?,
        );
        let land = landscape_scan(c.n_atoms, d, c.objective, l.grid)?;
        let mut s = String::from("mu1,mu2,region,bmse\n");
        for (i1, &m1) in land.mu.iter().enumerate() {
            for (i2, &m2) in land.mu.iter().enumerate() {
                s.push_str(&csv_row(&[
                    m1.to_string(),
                    m2.to_string(),
                    format!("{:?}", crate::optimizer::Region::classify(m1, m2)),
                    land.value(i1, i2).to_string(),
                ]));
            }
        }
        b.write("landscape.csv", &s)?;
        b.write_json("landscape_minima.json", &land.minima)?;
    }
    Ok(())
}

fn clock_cmd(c: &ClockFileConfig, b: &mut Bundle) -> Result<i32> {
    check_positive("t_over_z", &c.t_over_z)?;
    if c.runs == 0 {
        return Err(Error::Config("runs must be at least 1".into()));
    }
    if !(c.td_over_z >= 0.0) {
        return Err(Error::Config("td_over_z must be non-negative".into()));
    }
    let noise = c.noise.spec()?;
    let z = noise.coherence_time(0.0)?;
    let alpha = noise.dominant_exponent(z);
    let mut runs_csv = String::from(
        "t_over_z,run,seed,fringe_hop,first_hop_cycle,scaled_sigma,plain_scaled_sigma,slope,flagged,residual_rms\n",
    );
    let mut summary = String::from(
        "t_over_z,td_over_z,prior_width,runs,hops,mean_scaled_sigma,stderr_scaled_sigma,theory_scaled_sigma,residual_rms\n",
    );
    let mut flags = Vec::new();
    let mut any_hop = false;
    for (i, &x) in c.t_over_z.iter().enumerate() {
        let width = match c.prior_width {
            Some(w) => w,
            None => combine_widths(width_from_interrogation(x, alpha)?, deadtime_width(c.td_over_z, alpha)?),
        };
        let spec = c.protocol.build(c.n_atoms, width, c.estimator)?;
        let mut cfg = ClockConfig::new(spec.clone(), noise, x * z, c.n_cycles, width);
        cfg.estimator = c.estimator;
        cfg.t_dead = c.td_over_z * z;
        cfg.seed = split_seed(c.seed, i as u64);
        cfg.servo = c.servo;
        cfg.discard_cycles = c.discard_cycles;
        cfg.sampling = c.sampling;
        let results = run_ensemble(&cfg, c.runs)?;
        let sum = summarize(&results, z);
        let prior = PriorModel::for_atoms(width, c.n_atoms)?;
        let efm = estimate(&statistical_model(&spec, &prior)?, c.estimator)?.1.efm;
        summary.push_str(&csv_row(&[
            x.to_string(),
            c.td_over_z.to_string(),
            width.to_string(),
            sum.runs.to_string(),
            sum.hops.to_string(),
            opt(sum.mean_scaled_sigma),
            opt(sum.stderr_scaled_sigma),
            theory_scaled_sigma(efm, x, c.td_over_z).to_string(),
            opt(sum.residual_rms),
        ]));
        let mut pooled = results[0].residual.clone();
        for (r, res) in results.iter().enumerate() {
            if r > 0 {
                pooled.merge(&res.residual);
            }
            let seed = split_seed(cfg.seed, 1000 + r as u64);
            let scale = res.omega0 * z.sqrt();
            runs_csv.push_str(&csv_row(&[
                x.to_string(),
                r.to_string(),
                seed.to_string(),
                res.fringe_hop.detected.to_string(),
                res.fringe_hop.first_cycle.map(|k| k.to_string()).unwrap_or_default(),
                opt(res.extrapolated.map(|e| e.sigma_unit * scale)),
                opt(res.extrapolated.map(|e| e.plain * scale)),
                opt(res.extrapolated.map(|e| e.slope)),
                res.extrapolated.map(|e| e.flagged.to_string()).unwrap_or_default(),
                res.residual.rms().to_string(),
            ]));
            b.write(&format!("adev/t{i:02}_run{r:03}.csv"), &res.adev.to_csv())?;
            any_hop |= res.fringe_hop.detected;
            flags.push(serde_json::json!({
                "t_over_z": x,
                "run": r,
                "seed": seed,
                "fringe_hop": res.fringe_hop,
                "extrapolation_flagged": res.extrapolated.map(|e| e.flagged),
            }));
        }
        b.write(&format!("residual_t{i:02}.csv"), &pooled.to_csv())?;
    }
    b.write("clock_runs.csv", &runs_csv)?;
    b.write("clock_summary.csv", &summary)?;
    b.write_json("flags.json", &flags)?;
    Ok(if any_hop { 4 } else { 0 })
}

fn prior_cmd(c: &PriorConfig, b: &mut Bundle) -> Result<()> {
    check_positive("t_over_z", &c.t_over_z)?;
    let noise = c.noise.spec()?;
    let settings = PriorIteration {
        n_cycles: c.n_cycles,
        runs: c.runs,
        seed: c.seed,
        servo: c.servo,
        degree: c.degree,
    };
    let curve = iterate_prior(c.n_atoms, &noise, &c.t_over_z, c.stages, &settings)?;
    let mut s = String::from("t_over_z");
    for k in 0..curve.curves.len() {
        let _ = write!(s, ",curve_{k}");
    }
    for k in 0..curve.stages.len() {
        let _ = write!(s, ",measured_{k}");
    }
    s.push('\n');
    for (i, x) in curve.t_over_z.iter().enumerate() {
        let mut row = vec![x.to_string()];
        row.extend(curve.curves.iter().map(|c| c[i].to_string()));
        row.extend(curve.stages.iter().map(|st| opt(st.measured[i])));
        s.push_str(&csv_row(&row));
    }
    b.write("prior.csv", &s)?;
    b.write_json("prior_curve.json", &curve)
}

fn deadtime_cmd(c: &DeadtimeConfig, b: &mut Bundle) -> Result<()> {
    let grid = c.t_over_z.values()?;
    if c.n_atoms.is_empty() || c.families.is_empty() || c.td_over_z.is_empty() {
        return Err(Error::Config("families, n_atoms and td_over_z must not be empty".into()));
    }
    let noise = c.noise.spec()?;
    let mut rows = String::from("family,td_over_z,n_atoms,sigma_min,t_min,sigma_at_t_lim\n");
    let mut limits = String::from("family,td_over_z,z,sigma_lim,t_lim,n_crit\n");
    for &f in &c.families {
        for &td in &c.td_over_z {
            let r = stability_scan(f, &c.n_atoms, &grid, td, &noise)?;
            let name = serde_json::to_string(&f).unwrap_or_default().trim_matches('"').to_string();
            for row in &r.rows {
                rows.push_str(&csv_row(&[
                    name.clone(),
                    td.to_string(),
                    row.n_atoms.to_string(),
                    row.sigma_min.to_string(),
                    row.t_min.to_string(),
                    opt(row.sigma_at_t_lim),
                ]));
            }
            limits.push_str(&csv_row(&[
                name,
                td.to_string(),
                r.z.to_string(),
                opt(r.sigma_lim),
                opt(r.t_lim),
                r.n_crit.map(|n| n.to_string()).unwrap_or_default(),
            ]));
        }
    }
    b.write("deadtime.csv", &rows)?;
    b.write("deadtime_limits.csv", &limits)
}

fn allan_cmd(c: &AllanConfig, b: &mut Bundle) -> Result<()> {
    let (trace, t_c, noise) = match &c.source {
        TraceSource::Generate {
            noise,
            t_c,
            n_cycles,
            seed,
            write,
        } => {
            let spec = noise.spec()?;
            let trace = generate_trace(&spec, *t_c, *n_cycles, *seed)?;
            if *write {
                let meta = TraceMeta {
                    t_c: *t_c,
                    spec,
                    seed: *seed,
                    n_cycles: *n_cycles,
                };
                write_trace(&b.dir.join("trace.bin"), &trace, &meta)?;
                b.outputs.push("trace.bin".into());
                b.outputs.push("trace.bin.json".into());
            }
            (trace, *t_c, Some(spec))
        }
        TraceSource::File { path } => {
            let (trace, meta) = read_trace(path)?;
            (trace, meta.t_c, Some(meta.spec))
        }
    };
    let taus = match &c.taus {
        Some(t) => t.clone(),
        None => octave_taus(t_c, trace.len(), 8),
    };
    let curve = allan_deviation(&trace, t_c, &taus)?;
    let z = match (c.z, noise) {
        (Some(z), _) => Some(z),
        (None, Some(n)) => n.coherence_time(0.0).ok(),
        _ => None,
    };
    let mut s = String::from("tau_s,sigma,stderr,tau_over_z,scaled_sigma\n");
    for i in 0..curve.taus.len() {
        let (t, sg) = (curve.taus[i], curve.sigmas[i]);
        let (tz, sc) = match (z, noise) {
            (Some(z), Some(n)) => (Some(t / z), Some(sg * n.omega0 * (t * z).sqrt())),
            _ => (None, None),
        };
        s.push_str(&csv_row(&[
            t.to_string(),
            sg.to_string(),
            curve.uncertainties[i].to_string(),
            opt(tz),
            opt(sc),
        ]));
    }
    b.write("adev.csv", &s)?;
    if let Some(range) = c.fit_range {
        let e = extrapolate_unit_time(&curve, range)?;
        b.write_json("extrapolation.json", &e)?;
    }
    Ok(())
}
