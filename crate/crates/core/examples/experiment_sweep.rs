//! A JSON-configured N × seed sweep with CSV outputs and metadata sidecars,
//! as the `msgpass run` subcommand does it.

use msgpass::algorithms::trace_to_csv;
use msgpass::harness::{
    compare_with_se, run_sweep, se_prediction, write_output, ExperimentConfig, Metadata,
};
use msgpass::se::SeKind;

const CONFIG: &str = r#"{
    "spectrum": {"kind": "marchenko_pastur_sampled", "delta": 0.5},
    "prior": {"kind": "bernoulli_gaussian", "sparsity": 0.1, "variance": 1.0},
    "noise_variance": 1e-3,
    "dims": [512, 1024],
    "iterations": 8,
    "seeds": [1, 2, 3, 4]
}"#;

fn main() -> msgpass::Result<()> {
    let cfg = ExperimentConfig::from_json(CONFIG)?;
    let dir = std::env::temp_dir().join("msgpass-sweep");
    let runs = run_sweep(&cfg, SeKind::Amp)?;
    for r in &runs {
        let file = format!("amp_N{}_seed{}.csv", r.n, r.seed);
        let meta = Metadata::new("run amp", &file, &cfg)?.for_trial(r.n, r.seed);
        write_output(&dir, &file, &trace_to_csv(&r.trace), &meta)?;
    }
    for &n in &cfg.dims {
        let se = se_prediction(&cfg, SeKind::Amp, n, cfg.seeds[0])?;
        let c = compare_with_se(&runs, n, &se.mse);
        println!(
            "N = {n}: relative error vs SE per iteration {:+.3?}",
            c.rel_error
        );
    }
    println!(
        "wrote {} traces with sidecars to {}",
        runs.len(),
        dir.display()
    );

    if let Err(e) = ExperimentConfig::from_json("{\n  \"dims\": [64],\n  \"seeds\": [1, 1]\n}") {
        println!("rejected config: {e}");
    }
    Ok(())
}
