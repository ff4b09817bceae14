//! Power-law LO noise synthesis checked against its Allan deviation.

use clockforge::noise::{allan_deviation, extrapolate_unit_time, generate_trace, octave_taus, NoiseSpec};
use clockforge::prior::NoiseExponent;

fn main() -> clockforge::Result<()> {
    let t_c = 0.1;
    let n = 400_000;
    for e in [NoiseExponent::WhiteFm, NoiseExponent::Flicker, NoiseExponent::RandomWalk] {
        let spec = NoiseSpec::for_coherence_time(e, 1.0, 1.0)?;
        let trace = generate_trace(&spec, t_c, n, 42)?;
        let curve = allan_deviation(&trace, t_c, &octave_taus(t_c, n, 8))?;
        println!("{e:?}  (Z = {:.4})", spec.coherence_time(0.0)?);
        for (tau, s) in curve.taus.iter().zip(&curve.sigmas) {
            println!("  tau {tau:>9.1}  measured {s:.4e}  model {:.4e}", spec.adev(*tau));
        }
        if e == NoiseExponent::WhiteFm {
            let x = extrapolate_unit_time(&curve, (1.0, 1000.0))?;
            println!("  sigma(1 s) extrapolated {:.4}, slope {:.3}", x.sigma_unit, x.slope);
        }
    }
    Ok(())
}
