//! Marčhenko–Pastur moments in floating point and exact rationals, and the
//! Gauss quadrature that reproduces them.

use msgpass::moments::{
    self, mp_moments, mp_moments_exact, parse_rational, quadrature_from_moments,
};

fn main() -> msgpass::Result<()> {
    for delta in ["1", "1/2", "2"] {
        let d = parse_rational(delta).expect("literal rational");
        let exact: Vec<String> = mp_moments_exact(&d, 8)?
            .iter()
            .map(|m| m.to_string())
            .collect();
        println!("delta = {delta:>3}: {}", exact.join(" "));
    }

    let ms = mp_moments(0.5, 7)?;
    println!("\nfloat, delta = 0.5: {:?}", ms.mu);
    println!(
        "smallest Hankel eigenvalue: {:.3e}",
        ms.hankel_min_eigenvalue()
    );

    let (atoms, weights) = quadrature_from_moments(&ms, 4)?;
    println!("\n4-atom measure matching mu_0..mu_7:");
    for (a, w) in atoms.iter().zip(&weights) {
        println!("  lambda = {a:.6}  weight = {w:.6}");
    }
    let back = moments::discrete_moments(&atoms, &weights, 7);
    let worst = back
        .iter()
        .zip(&ms.mu)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("max moment error: {worst:.2e}");
    Ok(())
}
