//! Collective spin algebra in the symmetric subspace: coherent and squeezed states.

use clockforge::protocol::{sss_moments, sss_optimal_theta};
use clockforge::spin::{expect, oat, rotate, DickeBasis, SpinOperator};

fn main() -> clockforge::Result<()> {
    let n = 20;
    let basis = DickeBasis::new(n)?;
    let css = basis.css_x();
    let sx = basis.operator(SpinOperator::Sx);
    let sy = basis.operator(SpinOperator::Sy);
    let sy2 = sy * sy;
    println!("N = {n}, dimension {}", basis.dim());
    println!("CSS  <Sx> = {:.6}  <Sy^2> = {:.6}", expect(&css, sx)?, expect(&css, &sy2)?);

    for mu in [0.02, 0.05, 0.1, 0.2] {
        let theta = sss_optimal_theta(n, mu);
        let twisted = oat(&css, [0.0, 0.0, 1.0], mu)?;
        let sss = rotate(&twisted, [1.0, 0.0, 0.0], theta)?;
        let m = sss_moments(n, mu)?;
        // Wineland parameter N <dSy^2> / <Sx>^2
        let xi2 = n as f64 * expect(&sss, &sy2)? / expect(&sss, sx)?.powi(2);
        println!(
            "mu = {mu:<5} theta = {theta:+.4}  <Sy^2> numeric {:.6} closed form {:.6}  xi^2 = {xi2:.4}",
            expect(&sss, &sy2)?,
            m.sy2
        );
    }
    Ok(())
}
