//! The general error model at finite N: OAMP's orthogonality statistics
//! shrink with N, and AMP's iterates embed exactly into the model.

use std::sync::Arc;

use msgpass::algorithms::{run_amp, RunConfig};
use msgpass::ensembles::{build_operator, SpectrumSpec};
use msgpass::error_model::{
    decay_summary, onsager_consistency, probe_orthogonality, simulate_amp_embedding,
    ProbeAlgorithm, ProbeConfig,
};
use msgpass::models::{sample_instance, Denoiser, DenoiserSchedule, NoiseModel, Prior};

fn main() -> msgpass::Result<()> {
    let prior = Prior::BernoulliGaussian {
        sparsity: 0.1,
        variance: 1.0,
    };
    let noise = NoiseModel::new(1e-4)?;
    let schedule: DenoiserSchedule = Denoiser::mmse_for(&prior).unwrap().into();

    let cfg = ProbeConfig {
        algorithm: ProbeAlgorithm::Oamp,
        spectrum: SpectrumSpec::marchenko_pastur(0.5),
        prior,
        noise,
        schedule: schedule.clone(),
        iterations: 4,
        dims: vec![1024, 4096],
        seeds: (1..=8).collect(),
    };
    let reports = probe_orthogonality(&cfg)?;
    let first = &reports[0];
    println!("N = {}, seed = {}:", first.n, first.seed);
    for (key, s) in first.statistics.iter().take(4) {
        println!(
            "  ({key}): b'm~ = {:+.2e}  h'q~ = {:+.2e}  gaps = {:+.1e} {:+.1e}",
            s.b_m, s.h_q, s.bb_gap, s.hh_gap
        );
    }
    let decay = decay_summary(&reports, 1024, 4096)?;
    println!(
        "median |s(4096)| / |s(1024)| = {:.3} (1/2 under 1/sqrt(N) decay)",
        decay.pooled_median_ratio
    );

    let op = Arc::new(build_operator(
        &SpectrumSpec::marchenko_pastur(0.5),
        1024,
        9,
        10,
    )?);
    let inst = sample_instance(&prior, &noise, op, 11)?;
    let run = run_amp(
        &inst,
        &RunConfig::new(5, schedule.clone(), &prior, &noise).with_internals(),
    )?;
    let xi: Vec<f64> = run.trace.iter().map(|r| r.xi).collect();
    let internals = run.internals.unwrap_or_default();
    let emb = simulate_amp_embedding(&inst, &schedule, &internals, &xi)?;
    let c = onsager_consistency(&emb, &internals, &xi)?;
    println!(
        "AMP embedding: max rel |h - h_run| = {:.1e}, max |<d phi>| = {:.2e}, table mismatch = {:.1e}",
        c.max_embedding_error, c.max_abs_divergence, c.max_table_mismatch
    );
    Ok(())
}
