//! Scalar state evolution for AMP and OAMP, and a Monte Carlo check of one
//! AMP run against it.

use std::sync::Arc;

use msgpass::algorithms::{run_amp, RunConfig};
use msgpass::ensembles::{build_operator, SpectrumSpec};
use msgpass::models::{sample_instance, Denoiser, NoiseModel, Prior};
use msgpass::se::{amp_se, oamp_se, Quadrature, SpectralTransform};

fn main() -> msgpass::Result<()> {
    let prior = Prior::BernoulliGaussian {
        sparsity: 0.1,
        variance: 1.0,
    };
    let schedule = Denoiser::mmse_for(&prior).unwrap().into();
    let quad = Quadrature::default();
    for sigma2 in [1e-2, 1e-3, 1e-4] {
        let noise = NoiseModel::new(sigma2)?;
        let amp = amp_se(&prior, &noise, 0.5, &schedule, 20, quad)?;
        let oamp = oamp_se(
            &prior,
            &noise,
            &SpectralTransform::MarchenkoPastur { delta: 0.5 },
            &schedule,
            20,
            quad,
        )?;
        println!(
            "sigma2 = {sigma2:.0e}: AMP SE mse(19) = {:.4e}, OAMP SE mse(19) = {:.4e}",
            amp.mse[19], oamp.mse[19]
        );
    }

    let noise = NoiseModel::new(1e-4)?;
    let se = amp_se(&prior, &noise, 0.5, &schedule, 10, quad)?;
    let op = Arc::new(build_operator(
        &SpectrumSpec::marchenko_pastur(0.5),
        4096,
        5,
        6,
    )?);
    let inst = sample_instance(&prior, &noise, op, 7)?;
    let run = run_amp(&inst, &RunConfig::new(10, schedule, &prior, &noise))?;
    println!("\n t   tau_sq       SE mse       run mse");
    for t in 0..10 {
        println!(
            "{t:2}   {:.4e}   {:.4e}   {:.4e}",
            se.tau_sq[t], se.mse[t], run.trace[t].mse
        );
    }
    print!("\n{}", se.to_csv());
    Ok(())
}
