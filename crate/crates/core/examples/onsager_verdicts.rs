//! The g-table test of whether AMP's Onsager correction is exact for a
//! given spectrum, on analytic, perturbed and sampled moments, plus the
//! generating-function identities behind it.

use msgpass::ensembles::{build_operator, empirical_moments, trial_seeds, SpectrumSpec};
use msgpass::moments::{mp_moments_exact, parse_rational};
use msgpass::onsager::{
    empirical_tolerance, exact_verdict, g_table, g_table_exact, generating_function_check,
    verdict_from_leading, y_grid,
};
use num_rational::BigRational;

fn main() -> msgpass::Result<()> {
    let delta = parse_rational("1/2").unwrap();
    let mu = mp_moments_exact(&delta, 16)?;
    let table = g_table_exact(&mu, &delta, 8)?;
    println!("analytic MP, delta = 1/2: {}", exact_verdict(&table, 0.0));

    let mut bumped = mu.clone();
    bumped[2] += BigRational::new(1.into(), 1000.into());
    let table = g_table_exact(&bumped, &delta, 8)?;
    println!(
        "mu_2 + 1/1000: g[1][0] = {}, {}",
        table.leading()[1],
        exact_verdict(&table, 0.0)
    );

    for spec in [
        SpectrumSpec::marchenko_pastur(0.5),
        SpectrumSpec::geometric(100.0, 0.5),
    ] {
        let n = 4096;
        let s = trial_seeds(1, n);
        let op = build_operator(&spec, n, s.u, s.v)?;
        let ms = empirical_moments(&op, 6)?;
        let leading = g_table(&ms, 3)?.leading();
        let tol = empirical_tolerance(n);
        let shown: Vec<String> = leading.iter().map(|g| format!("{g:+.1e}")).collect();
        println!(
            "{:?}: g[.][0] = [{}] -> {}",
            spec.kind,
            shown.join(", "),
            verdict_from_leading(&leading, tol)
        );
    }

    for d in [0.5, 2.0] {
        let check = generating_function_check(d, &y_grid(d, 20), 24)?;
        println!(
            "delta = {d}: max |eta(x*) - (1 - y)| = {:.1e}, max |P(-x*, y)| = {:.1e}, series error = {:.1e}",
            check.max_eta_residual(),
            check.max_p_residual(),
            check.max_series_error()
        );
    }
    Ok(())
}
