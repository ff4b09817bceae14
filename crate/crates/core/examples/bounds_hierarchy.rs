//! Bounds on the Bayesian mean squared error for a Gaussian phase prior.

use clockforge::bounds::{bqcrb, oqi, oqi_asymptotic, pi_heisenberg_limit, OqiOptions};
use clockforge::estimation::{bcrb, estimate, EstimatorKind};
use clockforge::prior::PriorModel;
use clockforge::protocol::{ghz_state, statistical_model, ProtocolSpec};
use clockforge::spin::DickeBasis;

fn main() -> clockforge::Result<()> {
    println!("{:>3} {:>5} {:>11} {:>11} {:>11} {:>11} {:>11}", "N", "dphi", "OQI", "BQCRB css", "BQCRB ghz", "BCRB css", "BMSE css");
    for n in [4, 8, 16] {
        let basis = DickeBasis::new(n)?;
        for dphi in [0.2, 0.5] {
            let prior = PriorModel::for_atoms(dphi, n)?;
            let o = oqi(n, &prior, &OqiOptions::default())?;
            let cm = statistical_model(&ProtocolSpec::css(n), &prior)?;
            let bmse = estimate(&cm, EstimatorKind::OptimalBayes)?.1.bmse;
            println!(
                "{n:>3} {dphi:>5} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e}",
                o.bound,
                bqcrb(&basis.css_x(), &prior),
                bqcrb(&ghz_state(&basis), &prior),
                bcrb(&cm),
                bmse
            );
        }
    }

    // large N: the optimal interferometer approaches pi^2 / N^2 plus the prior tail
    for n in [100, 1000, 10000] {
        println!(
            "N = {n:>5}: asymptotic OQI {:.4e}, pi-corrected Heisenberg limit {:.4e}",
            oqi_asymptotic(n, 0.5)?,
            pi_heisenberg_limit(n)
        );
    }
    Ok(())
}
