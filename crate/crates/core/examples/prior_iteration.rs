//! Self-consistent prior width of a locked loop, refined over a few stages.

use clockforge::clock::{iterate_prior, PriorIteration};
use clockforge::noise::NoiseSpec;
use clockforge::prior::{width_from_interrogation, NoiseExponent};

fn main() -> clockforge::Result<()> {
    let noise = NoiseSpec::for_coherence_time(NoiseExponent::Flicker, 1.0, 1.0)?;
    let grid = [0.05, 0.1, 0.2, 0.3, 0.4];
    let settings = PriorIteration {
        n_cycles: 40_000,
        runs: 2,
        seed: 5,
        ..PriorIteration::default()
    };
    let curve = iterate_prior(8, &noise, &grid, 2, &settings)?;
    for (i, x) in grid.iter().enumerate() {
        let last = curve.curves.last().map(|c| c[i]).unwrap_or(f64::NAN);
        println!(
            "T/Z = {x:<4}  free-running {:.4}  locked {last:.4}",
            width_from_interrogation(*x, NoiseExponent::Flicker)?
        );
    }
    Ok(())
}
