//! Closed-loop clock simulation against the effective measurement uncertainty law.

use clockforge::clock::{run_ensemble, summarize, theory_scaled_sigma, ClockConfig};
use clockforge::estimation::{estimate, EstimatorKind};
use clockforge::noise::NoiseSpec;
use clockforge::prior::{width_from_interrogation, NoiseExponent, PriorModel};
use clockforge::protocol::{statistical_model, ProtocolSpec};

fn main() -> clockforge::Result<()> {
    let n = 8;
    let noise = NoiseSpec::for_coherence_time(NoiseExponent::Flicker, 1.0, 1.0)?;
    for t_over_z in [0.1, 0.3] {
        let width = width_from_interrogation(t_over_z, NoiseExponent::Flicker)?;
        let spec = ProtocolSpec::css(n);
        let mut cfg = ClockConfig::new(spec.clone(), noise, t_over_z, 200_000, width);
        cfg.seed = 9;
        let runs = run_ensemble(&cfg, 2)?;
        let s = summarize(&runs, 1.0);
        let efm = estimate(&statistical_model(&spec, &PriorModel::for_atoms(width, n)?)?, EstimatorKind::OptimalBayes)?.1.efm;
        println!(
            "T/Z = {t_over_z}: simulated {:.3} +- {:.3}, theory {:.3}, hops {}",
            s.mean_scaled_sigma.unwrap_or(f64::NAN),
            s.stderr_scaled_sigma.unwrap_or(f64::NAN),
            theory_scaled_sigma(efm, t_over_z, 0.0),
            s.hops
        );
    }
    Ok(())
}
