//! AMP and OAMP on a well-conditioned and an ill-conditioned operator.

use std::sync::Arc;

use msgpass::algorithms::{run_amp, run_oamp, RunConfig};
use msgpass::ensembles::{build_operator, SpectrumSpec};
use msgpass::models::{sample_instance, Denoiser, NoiseModel, Prior};

fn sci(v: &[f64]) -> String {
    v.iter()
        .step_by(3)
        .map(|x| format!("{x:.2e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> msgpass::Result<()> {
    let prior = Prior::BernoulliGaussian {
        sparsity: 0.1,
        variance: 1.0,
    };
    let noise = NoiseModel::new(1e-4)?;
    let n = 2048;
    for (name, spec, denoiser) in [
        (
            "MP, BG-MMSE",
            SpectrumSpec::marchenko_pastur(0.5),
            Denoiser::mmse_for(&prior).unwrap(),
        ),
        (
            "geometric(1e3), BG-MMSE",
            SpectrumSpec::geometric(1e3, 0.5),
            Denoiser::mmse_for(&prior).unwrap(),
        ),
        (
            "geometric(1e3), soft threshold",
            SpectrumSpec::geometric(1e3, 0.5),
            Denoiser::SoftThreshold { lambda: 0.1 },
        ),
    ] {
        let op = Arc::new(build_operator(&spec, n, 1, 2)?);
        let inst = sample_instance(&prior, &noise, op, 3)?;
        let cfg = RunConfig::new(15, denoiser.into(), &prior, &noise);
        let amp = run_amp(&inst, &cfg)?;
        let oamp = run_oamp(&inst, &cfg)?;
        println!("{name}");
        println!(
            "  AMP : {:?}, mse every 3rd iteration {}",
            amp.status,
            sci(&amp.mse_curve())
        );
        println!(
            "  OAMP: {:?}, mse every 3rd iteration {}",
            oamp.status,
            sci(&oamp.mse_curve())
        );
    }
    Ok(())
}
