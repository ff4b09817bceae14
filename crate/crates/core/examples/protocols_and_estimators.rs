//! BMSE and effective measurement uncertainty for standard Ramsey protocols
//! with the linear and the optimal Bayesian estimator.

use clockforge::estimation::{estimate, EstimatorKind};
use clockforge::optimizer::optimal_sss;
use clockforge::prior::PriorModel;
use clockforge::protocol::{statistical_model, ProtocolSpec};

fn main() -> clockforge::Result<()> {
    let n = 10;
    for dphi in [0.1, 0.3, 0.6] {
        let prior = PriorModel::for_atoms(dphi, n)?;
        let (sss, _) = optimal_sss(n, dphi, EstimatorKind::OptimalBayes)?;
        let specs = [
            ("css", ProtocolSpec::css(n)),
            ("sss*", sss),
            ("ghz", ProtocolSpec::ghz_parity(n)),
        ];
        for (name, spec) in &specs {
            let cm = statistical_model(spec, &prior)?;
            let lin = estimate(&cm, EstimatorKind::Linear)?.1;
            let bay = estimate(&cm, EstimatorKind::OptimalBayes)?.1;
            println!(
                "dphi {dphi:.1} {name:<5} BMSE lin {:.5e} bayes {:.5e}  dphi_m bayes {:.4}",
                lin.bmse,
                bay.bmse,
                bay.delta_phi_m()
            );
        }
    }
    Ok(())
}
