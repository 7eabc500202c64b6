//! Experiment configuration, deterministic sweeps and output files.
//!
//! Every file written through [`write_output`] gets a `<name>.meta.json`
//! sidecar carrying the crate version, the SHA-256 of the canonical config
//! JSON, the config itself and the seeds, which is enough to regenerate it.
//! Nothing time- or host-dependent is recorded, so identical configs give
//! byte-identical outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algorithms::{run_amp, run_oamp, RunConfig, RunStatus, TraceRecord};
use crate::ensembles::{
    build_operator, spectrum_eigenvalues, trial_seeds, SpectrumKind, SpectrumSpec, TrialSeeds,
};
use crate::error::{Error, Result};
use crate::error_model::{
    decay_summary, probe_orthogonality, DecaySummary, OrthogonalityReport, ProbeAlgorithm,
    ProbeConfig,
};
use crate::models::{sample_instance, Denoiser, DenoiserSchedule, NoiseModel, Prior};
use crate::se::{amp_se, oamp_se, Quadrature, SeCurve, SeKind, SpectralTransform};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "MSGPASS_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "msgpass-out";
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const DEVIATES: i32 = 3;
    pub const DIVERGED: i32 = 4;
}

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::SimulationDiverged { .. } => exit::DIVERGED,
        Error::Io(_) | Error::NumericalFailure(_) | Error::InvalidState(_) => exit::FAILURE,
        _ => exit::USAGE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Largest accepted `|mean mse / se − 1|` in run comparisons.
    pub se_band: f64,
    /// Orthogonality statistics pass when `|s| < probe_band / √N`.
    pub probe_band: f64,
    /// Fraction of (seed, statistic) pairs that must pass, per `N`.
    pub probe_fraction: f64,
    /// Accepted range of the pooled median decay ratio between the two
    /// smallest dimensions of a probe.
    pub decay_ratio: [f64; 2],
    /// Overrides the default `10⁶ · E[X²]` divergence threshold.
    pub divergence_threshold: Option<f64>,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            se_band: 0.1,
            probe_band: 5.0,
            probe_fraction: 0.95,
            decay_ratio: [0.2, 1.2],
            divergence_threshold: None,
        }
    }
}

/// Parameters shared by the `run`, `probe` and `se` subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spectrum: SpectrumSpec,
    pub prior: Prior,
    #[serde(default)]
    pub noise_variance: f64,
    /// Defaults to the prior's MMSE denoiser.
    #[serde(default)]
    pub denoiser: Option<DenoiserSchedule>,
    pub dims: Vec<usize>,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Panel order of the state-evolution quadrature.
    #[serde(default)]
    pub quadrature_nodes: Option<usize>,
}

impl ExperimentConfig {
    /// Parses and validates; syntax and schema errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.spectrum.validate()?;
        self.prior.validate()?;
        NoiseModel::new(self.noise_variance)?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.dims.is_empty() {
            return Err(Error::Config("dims must be nonempty".into()));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config("dims must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if let Some(0) = self.quadrature_nodes {
            return Err(Error::Config("quadrature_nodes must be >= 1".into()));
        }
        self.schedule()?.validate(self.iterations)
    }

    pub fn schedule(&self) -> Result<DenoiserSchedule> {
        match &self.denoiser {
            Some(s) => Ok(s.clone()),
            None => Denoiser::mmse_for(&self.prior)
                .map(DenoiserSchedule::Fixed)
                .ok_or_else(|| {
                    Error::Config(
                        "no closed-form MMSE denoiser for this prior; set `denoiser`".into(),
                    )
                }),
        }
    }

    pub fn noise(&self) -> Result<NoiseModel> {
        NoiseModel::new(self.noise_variance)
    }

    pub fn quadrature(&self) -> Quadrature {
        match self.quadrature_nodes {
            Some(n) => Quadrature::default().with_nodes(n),
            None => Quadrature::default(),
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let mut rc = RunConfig::new(
            self.iterations,
            self.schedule()?,
            &self.prior,
            &self.noise()?,
        );
        if let Some(th) = self.tolerances.divergence_threshold {
            rc.divergence_threshold = th;
        }
        Ok(rc)
    }

    pub fn probe_config(&self, algorithm: ProbeAlgorithm) -> Result<ProbeConfig> {
        Ok(ProbeConfig {
            algorithm,
            spectrum: self.spectrum.clone(),
            prior: self.prior,
            noise: self.noise()?,
            schedule: self.schedule()?,
            iterations: self.iterations,
            dims: self.dims.clone(),
            seeds: self.seeds.clone(),
        })
    }

    /// Output directory: an explicit override, then the config's own, then
    /// [`OUT_DIR_ENV`], then [`DEFAULT_OUT_DIR`].
    pub fn resolve_output_dir(&self, explicit: Option<&Path>) -> PathBuf {
        resolve_output_dir(explicit, self.output_dir.as_deref())
    }
}

pub fn resolve_output_dir(explicit: Option<&Path>, configured: Option<&Path>) -> PathBuf {
    explicit
        .or(configured)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// SHA-256 (hex) of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub version: String,
    pub command: String,
    pub file: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trial_seeds: Option<TrialSeeds>,
    /// Seeds covered by a summary file.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub seeds: Vec<u64>,
}

impl Metadata {
    pub fn new<T: Serialize>(command: &str, file: &str, config: &T) -> Result<Self> {
        Ok(Self {
            version: VERSION.to_string(),
            command: command.to_string(),
            file: file.to_string(),
            config_hash: config_hash(config)?,
            config: serde_json::to_value(config)?,
            n: None,
            seed: None,
            trial_seeds: None,
            seeds: Vec::new(),
        })
    }

    pub fn for_trial(mut self, n: usize, seed: u64) -> Self {
        self.n = Some(n);
        self.seed = Some(seed);
        self.trial_seeds = Some(trial_seeds(seed, n));
        self
    }

    pub fn with_seeds(mut self, seeds: &[u64]) -> Self {
        self.seeds = seeds.to_vec();
        self
    }
}

/// Writes `dir/name` and its `dir/name.meta.json` sidecar; returns the
/// data file's path.
pub fn write_output(dir: &Path, name: &str, contents: &str, meta: &Metadata) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    let mut sidecar = serde_json::to_string_pretty(meta)?;
    sidecar.push('\n');
    fs::write(dir.join(format!("{name}.meta.json")), sidecar)?;
    Ok(path)
}

pub fn algorithm_name(kind: SeKind) -> &'static str {
    match kind {
        SeKind::Amp => "amp",
        SeKind::Oamp => "oamp",
    }
}

/// Spectrum information for OAMP state evolution: the analytic law for
/// Marčhenko–Pastur sampling, the realized eigenvalues otherwise.
pub fn spectral_transform(
    spec: &SpectrumSpec,
    n: usize,
    seeds: TrialSeeds,
) -> Result<SpectralTransform> {
    Ok(match spec.kind {
        SpectrumKind::MarchenkoPasturSampled => {
            SpectralTransform::MarchenkoPastur { delta: spec.delta }
        }
        _ => SpectralTransform::Empirical {
            lambda: spectrum_eigenvalues(spec, n, seeds.u, seeds.v)?,
        },
    })
}

/// State-evolution prediction for one trial of `cfg`.
pub fn se_prediction(cfg: &ExperimentConfig, kind: SeKind, n: usize, seed: u64) -> Result<SeCurve> {
    let schedule = cfg.schedule()?;
    let noise = cfg.noise()?;
    match kind {
        SeKind::Amp => amp_se(
            &cfg.prior,
            &noise,
            cfg.spectrum.delta,
            &schedule,
            cfg.iterations,
            cfg.quadrature(),
        ),
        SeKind::Oamp => {
            let spectrum = spectral_transform(&cfg.spectrum, n, trial_seeds(seed, n))?;
            oamp_se(
                &cfg.prior,
                &noise,
                &spectrum,
                &schedule,
                cfg.iterations,
                cfg.quadrature(),
            )
        }
    }
}

/// One `(N, seed)` run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRun {
    pub n: usize,
    pub seed: u64,
    pub trace: Vec<TraceRecord>,
    pub status: RunStatus,
    pub warnings: Vec<String>,
}

pub fn run_trial(cfg: &ExperimentConfig, kind: SeKind, n: usize, seed: u64) -> Result<TrialRun> {
    let seeds = trial_seeds(seed, n);
    let op = Arc::new(build_operator(&cfg.spectrum, n, seeds.u, seeds.v)?);
    let inst = sample_instance(&cfg.prior, &cfg.noise()?, op, seeds.instance)?;
    let rc = cfg.run_config()?;
    let (trace, status, warnings) = match kind {
        SeKind::Amp => {
            let o = run_amp(&inst, &rc)?;
            (o.trace, o.status, o.warnings)
        }
        SeKind::Oamp => {
            let o = run_oamp(&inst, &rc)?;
            (o.trace, o.status, o.warnings)
        }
    };
    Ok(TrialRun {
        n,
        seed,
        trace,
        status,
        warnings,
    })
}

/// All `(N, seed)` runs on the current rayon pool, ordered by `dims`, then `seeds`.
pub fn run_sweep(cfg: &ExperimentConfig, kind: SeKind) -> Result<Vec<TrialRun>> {
    cfg.validate()?;
    let jobs: Vec<(usize, u64)> = cfg
        .dims
        .iter()
        .flat_map(|&n| cfg.seeds.iter().map(move |&s| (n, s)))
        .collect();
    jobs.par_iter()
        .map(|&(n, s)| run_trial(cfg, kind, n, s))
        .collect()
}

/// Per-iteration comparison of seed-averaged MSE with state evolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub n: usize,
    /// Seeds that completed without divergence.
    pub seeds_used: usize,
    pub mean_mse: Vec<f64>,
    pub se_mse: Vec<f64>,
    pub rel_error: Vec<f64>,
}

impl Comparison {
    pub fn max_abs_rel_error(&self) -> f64 {
        self.rel_error.iter().fold(0.0, |a, r| a.max(r.abs()))
    }

    pub fn within(&self, band: f64) -> bool {
        self.seeds_used > 0 && self.rel_error.iter().all(|r| r.abs() <= band)
    }
}

/// `(mean − se)/se` per iteration over the common length.
pub fn relative_errors(mean: &[f64], se: &[f64]) -> Vec<f64> {
    mean.iter().zip(se).map(|(m, s)| (m - s) / s).collect()
}

/// Averages MSE over the non-diverged runs at `n` and compares with `se`.
pub fn compare_with_se(runs: &[TrialRun], n: usize, se: &[f64]) -> Comparison {
    let ok: Vec<&TrialRun> = runs
        .iter()
        .filter(|r| r.n == n && !r.status.diverged())
        .collect();
    let len = ok
        .iter()
        .map(|r| r.trace.len())
        .min()
        .unwrap_or(0)
        .min(se.len());
    let mean_mse: Vec<f64> = (0..len)
        .map(|t| ok.iter().map(|r| r.trace[t].mse).sum::<f64>() / ok.len() as f64)
        .collect();
    let rel_error = relative_errors(&mean_mse, se);
    Comparison {
        n,
        seeds_used: ok.len(),
        mean_mse,
        se_mse: se[..len].to_vec(),
        rel_error,
    }
}

pub fn comparisons_to_csv(rows: &[Comparison]) -> String {
    let mut out = String::from("N,t,mean_mse,se_mse,rel_error\n");
    for c in rows {
        for t in 0..c.mean_mse.len() {
            out.push_str(&format!(
                "{},{t},{:.16e},{:.16e},{:.16e}\n",
                c.n, c.mean_mse[t], c.se_mse[t], c.rel_error[t]
            ));
        }
    }
    out
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    t: usize,
    mse: f64,
}

#[derive(Debug, Deserialize)]
struct SeRow {
    t: usize,
    mse: f64,
}

/// Joins a trace CSV with an SE CSV on `t`; columns `t,mse,se_mse,rel_error`.
pub fn compare_csv(trace_csv: &str, se_csv: &str) -> Result<(String, f64)> {
    let parse_err = |what: &str, e: csv::Error| Error::InvalidInput(format!("{what}: {e}"));
    let mut trace = BTreeMap::new();
    for row in csv::Reader::from_reader(trace_csv.as_bytes()).deserialize::<TraceRow>() {
        let row = row.map_err(|e| parse_err("trace CSV", e))?;
        trace.insert(row.t, row.mse);
    }
    let mut out = String::from("t,mse,se_mse,rel_error\n");
    let mut worst: f64 = 0.0;
    let mut joined = 0;
    for row in csv::Reader::from_reader(se_csv.as_bytes()).deserialize::<SeRow>() {
        let row = row.map_err(|e| parse_err("SE CSV", e))?;
        if let Some(&mse) = trace.get(&row.t) {
            let rel = (mse - row.mse) / row.mse;
            worst = worst.max(rel.abs());
            joined += 1;
            out.push_str(&format!(
                "{},{mse:.16e},{:.16e},{rel:.16e}\n",
                row.t, row.mse
            ));
        }
    }
    if joined == 0 {
        return Err(Error::InvalidInput(
            "trace and SE CSV share no iterations".into(),
        ));
    }
    Ok((out, worst))
}

/// Pass/fail summary of a probe sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeVerdict {
    /// Fraction of (seed, statistic) pairs inside the band, per `N`.
    pub fraction_within: BTreeMap<usize, f64>,
    pub degenerate_trials: usize,
    pub decay: Option<DecaySummary>,
    pub passed: bool,
}

pub fn probe_verdict(reports: &[OrthogonalityReport], tol: &Tolerances) -> Result<ProbeVerdict> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in reports {
        let band = tol.probe_band / (r.n as f64).sqrt();
        let e = counts.entry(r.n).or_default();
        for s in r.statistics.values() {
            for v in s.values() {
                e.1 += 1;
                if v.abs() < band {
                    e.0 += 1;
                }
            }
        }
    }
    let fraction_within: BTreeMap<usize, f64> = counts
        .into_iter()
        .map(|(n, (ok, all))| {
            (
                n,
                if all == 0 {
                    1.0
                } else {
                    ok as f64 / all as f64
                },
            )
        })
        .collect();
    let dims: Vec<usize> = fraction_within.keys().copied().collect();
    let decay = if dims.len() >= 2 {
        Some(decay_summary(reports, dims[0], dims[1])?)
    } else {
        None
    };
    let passed = fraction_within.values().all(|f| *f >= tol.probe_fraction)
        && decay.as_ref().is_none_or(|d| {
            d.pooled_median_ratio >= tol.decay_ratio[0]
                && d.pooled_median_ratio <= tol.decay_ratio[1]
        });
    Ok(ProbeVerdict {
        fraction_within,
        degenerate_trials: reports.iter().filter(|r| r.degenerate).count(),
        decay,
        passed,
    })
}

/// Runs the probe sweep described by `cfg`.
pub fn run_probe(
    cfg: &ExperimentConfig,
    algorithm: ProbeAlgorithm,
) -> Result<(Vec<OrthogonalityReport>, ProbeVerdict)> {
    let pc = cfg.probe_config(algorithm)?;
    let reports = probe_orthogonality(&pc)?;
    let verdict = probe_verdict(&reports, &cfg.tolerances)?;
    Ok((reports, verdict))
}

/// Configures the global rayon pool; `None` keeps one worker per logical core.
pub fn init_workers(workers: Option<usize>) -> Result<()> {
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::InvalidParameter("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Error::InvalidState(format!("worker pool: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"{
        "spectrum": {"kind": "marchenko_pasturSampled", "delta": 0.5},
        "prior": {"kind": "bernoulli_gaussian", "sparsity": 0.1, "variance": 1.0},
        "dims": [64], "iterations": 3, "seeds": [1]
    }"#;

    fn small() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
            "spectrum": {"kind": "marchenko_pastur_sampled", "delta": 0.5},
            "prior": {"kind": "bernoulli_gaussian", "sparsity": 0.1, "variance": 1.0},
            "noise_variance": 1e-3,
            "dims": [64, 128], "iterations": 4, "seeds": [1, 2]
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn config_errors_point_at_lines() {
        let err = ExperimentConfig::from_json(SMOKE).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = ExperimentConfig::from_json("{\n\"spectrum\": {\"kind\": \"geometric\", \"condition_number\": 10.0, \"delta\": 0.5},\n\"bogus\": 1}")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3") && err.contains("bogus"), "{err}");
    }

    #[test]
    fn config_invariants() {
        let mut cfg = small();
        cfg.seeds = vec![3, 3];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.seeds = vec![3];
        cfg.dims.clear();
        assert!(cfg.validate().is_err());
        cfg.dims = vec![64];
        cfg.prior = Prior::Rademacher;
        assert!(cfg.validate().is_err());
        cfg.denoiser = Some(Denoiser::SoftThreshold { lambda: 0.5 }.into());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = small();
        let mut b = small();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        b.seeds.push(9);
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn sweep_is_ordered_and_deterministic() {
        let cfg = small();
        let a = run_sweep(&cfg, SeKind::Oamp).unwrap();
        let b = run_sweep(&cfg, SeKind::Oamp).unwrap();
        assert_eq!(a, b);
        let order: Vec<(usize, u64)> = a.iter().map(|r| (r.n, r.seed)).collect();
        assert_eq!(order, vec![(64, 1), (64, 2), (128, 1), (128, 2)]);
    }

    #[test]
    fn comparison_and_csv_join() {
        let cfg = small();
        let runs = run_sweep(&cfg, SeKind::Amp).unwrap();
        let se = se_prediction(&cfg, SeKind::Amp, 64, 1).unwrap();
        let c = compare_with_se(&runs, 64, &se.mse);
        assert_eq!(c.seeds_used, 2);
        assert_eq!(c.rel_error.len(), 4);
        let trace = crate::algorithms::trace_to_csv(&runs[0].trace);
        let (joined, worst) = compare_csv(&trace, &se.to_csv()).unwrap();
        assert_eq!(joined.lines().count(), 5);
        assert!(worst.is_finite());
        assert!(compare_csv("t,mse\n", &se.to_csv()).is_err());
    }

    #[test]
    fn sidecar_written_next_to_output() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let meta = Metadata::new("run", "x.csv", &cfg)
            .unwrap()
            .for_trial(64, 1);
        let p = write_output(dir.path(), "x.csv", "t\n", &meta).unwrap();
        assert_eq!(fs::read_to_string(p).unwrap(), "t\n");
        let back: Metadata =
            serde_json::from_str(&fs::read_to_string(dir.path().join("x.csv.meta.json")).unwrap())
                .unwrap();
        assert_eq!(back, meta);
        assert_eq!(back.trial_seeds, Some(trial_seeds(1, 64)));
    }

    #[test]
    fn output_dir_precedence() {
        let cfg = small();
        assert_eq!(
            cfg.resolve_output_dir(Some(Path::new("a"))),
            PathBuf::from("a")
        );
        let mut with = small();
        with.output_dir = Some(PathBuf::from("b"));
        assert_eq!(with.resolve_output_dir(None), PathBuf::from("b"));
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(
            exit_code_for(&Error::SimulationDiverged {
                iteration: 1,
                reason: String::new()
            }),
            exit::DIVERGED
        );
        assert_eq!(exit_code_for(&Error::Config(String::new())), exit::USAGE);
        assert_eq!(
            exit_code_for(&Error::NumericalFailure(String::new())),
            exit::FAILURE
        );
    }
}
