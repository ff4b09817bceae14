//! Variational twisting circuits: a nested class ladder and the [1,1] landscape.

use clockforge::estimation::efm_transform;
use clockforge::optimizer::{landscape_scan, optimize_ladder, Objective, OptimizationTask};
use clockforge::prior::{width_from_interrogation, NoiseExponent};

fn main() -> clockforge::Result<()> {
    let n = 8;
    let dphi = width_from_interrogation(0.2, NoiseExponent::Flicker)?;
    let mut task = OptimizationTask::new(n, [0, 0], dphi, Objective::BmseOptimalBayes);
    task.budget = 6000;
    task.seed = 1;
    let sets = optimize_ladder(&task, &[[0, 0], [1, 0], [1, 1]])?;
    for set in &sets {
        let best = set.best().expect("non-empty candidate set");
        println!(
            "class {:?}: BMSE {:.6e}  efm {:.4e}  ({} evaluations)",
            set.class,
            best.value,
            efm_transform(best.value, dphi * dphi)?,
            set.evaluations
        );
    }

    let land = landscape_scan(4, dphi, Objective::BmseOptimalBayes, 64)?;
    println!("landscape minima at N = 4:");
    for c in &land.minima.candidates {
        // [1,1] layout: mu_1 and mu_2 sit at positions 4 and 5
        println!("  region {:?}  mu = ({:+.3}, {:+.3})  BMSE {:.6e}", c.region, c.params[4], c.params[5], c.value);
    }
    Ok(())
}
