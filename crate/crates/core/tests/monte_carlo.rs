//! Statistical checks against independent oracles: closed forms,
//! Gaussian tails from `statrs`, direct numerical integration.

use std::sync::Arc;

use msgpass::algorithms::{run_amp, run_oamp, RunConfig};
use msgpass::ensembles::{
    build_operator, empirical_moments, sample_haar_orthogonal, trial_seeds, SpectrumSpec,
};
use msgpass::error_model::simulate_amp_embedding;
use msgpass::models::{
    onsager_coefficient, sample_instance, Denoiser, DenoiserSchedule, NoiseModel, Prior,
};
use msgpass::moments::mp_moments;
use msgpass::onsager::{amp_convergence_verdict, g_table, Verdict};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

fn bg() -> Prior {
    Prior::BernoulliGaussian {
        sparsity: 0.1,
        variance: 1.0,
    }
}

#[test]
fn haar_first_column_is_isotropic() {
    let n = 256;
    let samples = 500;
    let mut acc = nalgebra::DMatrix::<f64>::zeros(n, n);
    for s in 0..samples {
        let q = sample_haar_orthogonal(n, 10_000 + s).unwrap();
        let c = q.column(0);
        acc += &c * c.transpose();
    }
    acc /= samples as f64;
    let target = 1.0 / n as f64;
    let worst = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (acc[(i, j)] - if i == j { target } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.01, "{worst}");
}

#[test]
fn sampled_mp_moments_match_the_law() {
    let op = build_operator(&SpectrumSpec::marchenko_pastur(0.5), 1024, 1, 2).unwrap();
    let mu2 = empirical_moments(&op, 2).unwrap().mu[2];
    assert!((mu2 / 3.0 - 1.0).abs() < 0.05, "{mu2}");

    let op = build_operator(&SpectrumSpec::marchenko_pastur(1.0), 2048, 3, 4).unwrap();
    let mu3 = empirical_moments(&op, 3).unwrap().mu[3];
    assert!((mu3 / 5.0 - 1.0).abs() < 0.05, "{mu3}");

    let op = build_operator(&SpectrumSpec::moment_matched(4, 0.5), 2048, 5, 6).unwrap();
    let got = empirical_moments(&op, 4).unwrap().mu;
    let want = mp_moments(0.5, 4).unwrap().mu;
    for k in 1..=4 {
        assert!(
            (got[k] / want[k] - 1.0).abs() < 0.01,
            "k={k}: {} vs {}",
            got[k],
            want[k]
        );
    }
}

#[test]
fn soft_threshold_divergence_is_gaussian_tail() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let r: Vec<f64> = (0..100_000)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let phi = Normal::new(0.0, 1.0).unwrap();
    for lambda in [0.5, 1.0, 2.0] {
        let (_, d) = Denoiser::SoftThreshold { lambda }.denoise(&r, 1.0).unwrap();
        let xi = onsager_coefficient(&d).unwrap();
        assert!(
            (xi - 2.0 * phi.cdf(-lambda)).abs() < 0.01,
            "lambda={lambda}: {xi}"
        );
    }
}

/// Posterior mean `E[X | X + τZ = r]` by composite Simpson over the slab.
fn posterior_mean_by_integration(r: f64, rho: f64, var: f64, tau_sq: f64) -> f64 {
    let lik = |x: f64| {
        (-(r - x) * (r - x) / (2.0 * tau_sq)).exp() / (2.0 * std::f64::consts::PI * tau_sq).sqrt()
    };
    let slab = |x: f64| (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
    let (lo, hi, n) = (-14.0, 14.0, 40_000);
    let h = (hi - lo) / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let p = w * slab(x) * lik(x);
        num += p * x;
        den += p;
    }
    num *= h / 3.0;
    den *= h / 3.0;
    rho * num / ((1.0 - rho) * lik(0.0) + rho * den)
}

#[test]
fn bg_mmse_matches_numerical_posterior_mean() {
    let den = Denoiser::BernoulliGaussianMmse {
        sparsity: 0.1,
        variance: 1.0,
    };
    for i in 0..100 {
        let r = -5.0 + 10.0 * i as f64 / 99.0;
        let (v, _) = den.eval(r, 0.5);
        let oracle = posterior_mean_by_integration(r, 0.1, 1.0, 0.5);
        assert!((v - oracle).abs() < 1e-8, "r={r}: {v} vs {oracle}");
    }
}

#[test]
fn geometric_spectrum_deviates_early() {
    let n = 4096;
    let s = trial_seeds(1, n);
    let op = build_operator(&SpectrumSpec::geometric(100.0, 0.5), n, s.u, s.v).unwrap();
    let ms = empirical_moments(&op, 8).unwrap();
    let tol = 1e-3;
    match amp_convergence_verdict(&ms, 4, tol).unwrap() {
        Verdict::DeviatesAt { tau, magnitude } => {
            assert!(tau <= 2 && magnitude > 10.0 * tol, "{tau} {magnitude}")
        }
        v => panic!("{v}"),
    }
}

#[test]
fn sampled_mp_g_table_is_small() {
    let n = 4096;
    let s = trial_seeds(2, n);
    let op = build_operator(&SpectrumSpec::marchenko_pastur(0.5), n, s.u, s.v).unwrap();
    let ms = empirical_moments(&op, 6).unwrap();
    let worst = g_table(&ms, 3)
        .unwrap()
        .leading()
        .iter()
        .fold(0.0f64, |a, g| a.max(g.abs()));
    assert!(worst <= 0.15, "{worst}");
}

#[test]
fn amp_embedding_partials_vanish_on_mp() {
    let n = 2048;
    let s = trial_seeds(3, n);
    let op = Arc::new(build_operator(&SpectrumSpec::marchenko_pastur(0.5), n, s.u, s.v).unwrap());
    let noise = NoiseModel::new(1e-4).unwrap();
    let inst = sample_instance(&bg(), &noise, op, s.instance).unwrap();
    let schedule: DenoiserSchedule = Denoiser::mmse_for(&bg()).unwrap().into();
    let run = run_amp(
        &inst,
        &RunConfig::new(4, schedule.clone(), &bg(), &noise).with_internals(),
    )
    .unwrap();
    let xi: Vec<f64> = run.trace.iter().map(|r| r.xi).collect();
    let emb =
        simulate_amp_embedding(&inst, &schedule, run.internals.as_ref().unwrap(), &xi).unwrap();
    let band = 5.0 / (n as f64).sqrt();
    for row in &emb.state.phi_divergence {
        for d in row {
            assert!(d.abs() < band, "{d}");
        }
    }
}

#[test]
fn oamp_and_amp_reach_the_same_fixed_point_on_mp() {
    let n = 4096;
    let noise = NoiseModel::new(1e-3).unwrap();
    let schedule: DenoiserSchedule = Denoiser::mmse_for(&bg()).unwrap().into();
    let cfg = RunConfig::new(20, schedule, &bg(), &noise);
    let s = trial_seeds(4, n);
    let op = Arc::new(build_operator(&SpectrumSpec::marchenko_pastur(0.5), n, s.u, s.v).unwrap());
    let inst = sample_instance(&bg(), &noise, op, s.instance).unwrap();
    let a = run_amp(&inst, &cfg).unwrap().final_mse().unwrap();
    let o = run_oamp(&inst, &cfg).unwrap().final_mse().unwrap();
    assert!((o / a - 1.0).abs() < 0.1, "amp {a}, oamp {o}");
}
