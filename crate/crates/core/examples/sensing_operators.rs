//! Orthogonally invariant operators with four kinds of spectra, and their
//! empirical moments against Marčhenko–Pastur.

use msgpass::ensembles::{build_operator, empirical_moments, SpectrumSpec};
use msgpass::linalg::dot;
use msgpass::moments::mp_moments;

fn main() -> msgpass::Result<()> {
    let n = 2048;
    let mp = mp_moments(0.5, 4)?;
    println!("MP(0.5) reference: {:.4?}", mp.mu);
    let specs = [
        SpectrumSpec::marchenko_pastur(0.5),
        SpectrumSpec::moment_matched(8, 0.5),
        SpectrumSpec::geometric(1e3, 0.5),
        SpectrumSpec::discrete(vec![0.5, 3.5], vec![0.5, 0.5], 0.5),
    ];
    for spec in &specs {
        let op = build_operator(spec, n, 11, 12)?;
        let ms = empirical_moments(&op, 4)?;
        println!(
            "{:<60} M = {:4}  mu = {:.4?}",
            format!("{:?}", spec.kind),
            op.m(),
            ms.mu
        );
    }

    // A is applied through its factors; the adjoint identity holds to rounding.
    let op = build_operator(&specs[0], 256, 1, 2)?;
    let x: Vec<f64> = (0..256).map(|i| (i as f64 * 0.37).sin()).collect();
    let z: Vec<f64> = (0..op.m()).map(|i| (i as f64 * 0.11).cos()).collect();
    let lhs = dot(&op.apply(&x), &z);
    let rhs = dot(&x, &op.apply_transpose(&z));
    println!("\n<Ax, z> - <x, A'z> = {:.1e}", lhs - rhs);
    Ok(())
}
