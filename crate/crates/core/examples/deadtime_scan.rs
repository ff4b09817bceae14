//! Dead time: optimal Ramsey time, the Dick-limited floor and the critical ensemble size.

use clockforge::clock::{stability_scan, ScanFamily};
use clockforge::noise::NoiseSpec;
use clockforge::prior::NoiseExponent;

fn main() -> clockforge::Result<()> {
    let noise = NoiseSpec::for_coherence_time(NoiseExponent::Flicker, 1.0, 1.0)?;
    let grid: Vec<f64> = (0..200).map(|i| 1e-3 * (900.0f64).powf(i as f64 / 199.0)).collect();
    let n_list = [4, 8, 16, 32, 64, 128, 256, 512];
    for family in [ScanFamily::CssLinear, ScanFamily::SssLinear, ScanFamily::OqiAsymptotic] {
        let r = stability_scan(family, &n_list, &grid, 0.1, &noise)?;
        println!(
            "{family:?}: sigma_lim {:.4} at T/Z {:.3}, N_crit {:?}",
            r.sigma_lim.unwrap_or(f64::NAN),
            r.t_lim.unwrap_or(f64::NAN),
            r.n_crit
        );
        for row in &r.rows {
            println!("  N {:>4}  sigma_min {:.4}  T/Z {:.3}", row.n_atoms, row.sigma_min, row.t_min);
        }
    }
    Ok(())
}
