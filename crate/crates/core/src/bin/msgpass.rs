use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use msgpass::algorithms::trace_to_csv;
use msgpass::ensembles::{build_operator, empirical_moments, trial_seeds};
use msgpass::error_model::{reports_to_csv, ProbeAlgorithm};
use msgpass::harness::{
    self, algorithm_name, compare_with_se, comparisons_to_csv, exit, exit_code_for,
    resolve_output_dir, se_prediction, write_output, ExperimentConfig, Metadata,
};
use msgpass::moments::{self, MomentSequence, Provenance};
use msgpass::onsager::{self, Verdict};
use msgpass::se::SeKind;
use msgpass::{Error, Result};

#[derive(Parser)]
#[command(
    name = "msgpass",
    version,
    about = "AMP/OAMP experiments on orthogonally invariant sensing matrices"
)]
struct Cli {
    /// Worker threads for seed/N sweeps (default: logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the subcommand's pass/fail tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Output directory (falls back to the config, then $MSGPASS_OUT_DIR).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Amp,
    Oamp,
}

impl Algo {
    fn kind(self) -> SeKind {
        match self {
            Algo::Amp => SeKind::Amp,
            Algo::Oamp => SeKind::Oamp,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Marčhenko–Pastur moments μ_0..μ_K.
    Moments {
        #[arg(long)]
        delta: String,
        #[arg(long)]
        max_order: usize,
        /// Rational arithmetic; δ may be given as `p/q`.
        #[arg(long)]
        exact: bool,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// g-table verdict: does the spectrum match MP through order T?
    OnsagerCheck(OnsagerArgs),
    /// Run AMP or OAMP over the config's N × seed grid.
    Run { algorithm: Algo, config: PathBuf },
    /// Finite-N orthogonality probe of the error model.
    Probe {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "oamp")]
        algorithm: Algo,
    },
    /// State-evolution curve.
    Se { algorithm: Algo, config: PathBuf },
    /// Join a trace CSV with an SE CSV; per-iteration relative error.
    Compare {
        trace: PathBuf,
        se: PathBuf,
        /// Write the joined CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Serialize)]
struct OnsagerArgs {
    /// Highest order T checked.
    #[arg(long = "t-max", short = 't')]
    t_max: usize,
    /// Analytic MP moments at this δ (rational arithmetic; `p/q` accepted).
    #[arg(long, conflicts_with_all = ["moments", "empirical"])]
    delta: Option<String>,
    /// JSON file `{"delta": .., "mu": [..]}`.
    #[arg(long, conflicts_with = "empirical")]
    moments: Option<PathBuf>,
    /// Experiment config; empirical moments of its first (N, seed) operator.
    #[arg(long)]
    empirical: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MomentsFile {
    delta: f64,
    mu: Vec<f64>,
}

#[derive(Serialize)]
struct OnsagerReport {
    source: String,
    delta: f64,
    t_max: usize,
    tol: f64,
    leading: Vec<f64>,
    verdict: Verdict,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    };
    ExitCode::from(code as u8)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    harness::init_workers(cli.workers)?;
    if let Some(t) = cli.tol {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "--tol must be >= 0, got {t}"
            )));
        }
    }
    match &cli.command {
        Command::Moments {
            delta,
            max_order,
            exact,
            json,
        } => cmd_moments(delta, *max_order, *exact, *json),
        Command::OnsagerCheck(args) => cmd_onsager(cli, args),
        Command::Run { algorithm, config } => cmd_run(cli, algorithm.kind(), config),
        Command::Probe { config, algorithm } => cmd_probe(cli, *algorithm, config),
        Command::Se { algorithm, config } => cmd_se(cli, algorithm.kind(), config),
        Command::Compare { trace, se, out } => cmd_compare(cli, trace, se, out.as_deref()),
    }
}

fn load_config(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn parse_delta(s: &str) -> Result<f64> {
    let d = moments::parse_rational(s)
        .map(|r| moments::rational_to_f64(&r))
        .or_else(|| s.parse::<f64>().ok())
        .ok_or_else(|| Error::InvalidParameter(format!("cannot parse delta `{s}`")))?;
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "delta must be positive, got {s}"
        )));
    }
    Ok(d)
}

fn cmd_moments(delta: &str, max_order: usize, exact: bool, json: bool) -> Result<i32> {
    parse_delta(delta)?;
    let values: Vec<String> = if exact {
        let d = moments::parse_rational(delta).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "--exact needs a decimal or p/q delta, got `{delta}`"
            ))
        })?;
        moments::mp_moments_exact(&d, max_order)?
            .iter()
            .map(|m| m.to_string())
            .collect()
    } else {
        moments::mp_moments(parse_delta(delta)?, max_order)?
            .mu
            .iter()
            .map(|m| format!("{m}"))
            .collect()
    };
    if json {
        let doc = serde_json::json!({ "delta": delta, "exact": exact, "moments": values });
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        println!("k\tmu_k");
        for (k, v) in values.iter().enumerate() {
            println!("{k}\t{v}");
        }
    }
    Ok(exit::OK)
}

fn cmd_onsager(cli: &Cli, args: &OnsagerArgs) -> Result<i32> {
    let t = args.t_max;
    let report = if let Some(d) = &args.delta {
        parse_delta(d)?;
        let exact = moments::parse_rational(d).ok_or_else(|| {
            Error::InvalidParameter(format!("cannot parse delta `{d}` as a rational"))
        })?;
        let table = onsager::mp_g_table_exact(&exact, t)?;
        let tol = cli.tol.unwrap_or(0.0);
        OnsagerReport {
            source: format!("analytic MP, delta = {d}"),
            delta: moments::rational_to_f64(&exact),
            t_max: t,
            tol,
            leading: table.leading_f64(),
            verdict: onsager::exact_verdict(&table, tol),
        }
    } else {
        let (source, ms, default_tol) = if let Some(p) = &args.moments {
            let file: MomentsFile = serde_json::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let ms = MomentSequence::new(file.delta, file.mu, Provenance::UserSupplied)?;
            (format!("file {}", p.display()), ms, 1e-9)
        } else if let Some(p) = &args.empirical {
            let cfg = load_config(cli, p)?;
            let (n, seed) = (cfg.dims[0], cfg.seeds[0]);
            let seeds = trial_seeds(seed, n);
            let op = build_operator(&cfg.spectrum, n, seeds.u, seeds.v)?;
            let ms = empirical_moments(&op, 2 * t.max(1))?;
            (
                format!("empirical, N = {n}, seed = {seed}"),
                ms,
                onsager::empirical_tolerance(n),
            )
        } else {
            return Err(Error::InvalidParameter(
                "give one of --delta, --moments, --empirical".into(),
            ));
        };
        let tol = cli.tol.unwrap_or(default_tol);
        let table = onsager::g_table(&ms, t)?;
        let leading = table.leading();
        OnsagerReport {
            source,
            delta: ms.delta,
            t_max: t,
            tol,
            verdict: onsager::verdict_from_leading(&leading, tol),
            leading,
        }
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("# {}; tol = {:e}", report.source, report.tol);
        println!("tau\tg[tau][0]");
        for (tau, g) in report.leading.iter().enumerate() {
            println!("{tau}\t{g:.16e}");
        }
        println!("verdict: {}", report.verdict);
    }
    Ok(if report.verdict.is_matched() {
        exit::OK
    } else {
        exit::DEVIATES
    })
}

fn cmd_run(cli: &Cli, kind: SeKind, path: &Path) -> Result<i32> {
    let mut cfg = load_config(cli, path)?;
    if let Some(t) = cli.tol {
        cfg.tolerances.se_band = t;
    }
    let dir = cfg.resolve_output_dir(cli.out_dir.as_deref());
    let name = algorithm_name(kind);
    let runs = harness::run_sweep(&cfg, kind)?;
    let mut diverged = 0;
    for r in &runs {
        let file = format!("{name}_N{}_seed{}.csv", r.n, r.seed);
        let meta = Metadata::new(&format!("run {name}"), &file, &cfg)?.for_trial(r.n, r.seed);
        write_output(&dir, &file, &trace_to_csv(&r.trace), &meta)?;
        for w in &r.warnings {
            eprintln!("N={} seed={}: {w}", r.n, r.seed);
        }
        if r.status.diverged() {
            diverged += 1;
            eprintln!("N={} seed={}: {:?}", r.n, r.seed, r.status);
        }
    }
    let mut comparisons = Vec::new();
    for &n in &cfg.dims {
        let se = se_prediction(&cfg, kind, n, cfg.seeds[0])?;
        let c = compare_with_se(&runs, n, &se.mse);
        println!(
            "N={n}: {}/{} seeds completed, final mean mse {:.4e} (se {:.4e}), max |rel err| {:.3} {} band {}",
            c.seeds_used,
            cfg.seeds.len(),
            c.mean_mse.last().copied().unwrap_or(f64::NAN),
            c.se_mse.last().copied().unwrap_or(f64::NAN),
            c.max_abs_rel_error(),
            if c.within(cfg.tolerances.se_band) { "within" } else { "outside" },
            cfg.tolerances.se_band
        );
        comparisons.push(c);
    }
    let file = format!("{name}_comparison.csv");
    let meta = Metadata::new(&format!("run {name}"), &file, &cfg)?.with_seeds(&cfg.seeds);
    write_output(&dir, &file, &comparisons_to_csv(&comparisons), &meta)?;
    println!("wrote {} runs to {}", runs.len(), dir.display());
    if diverged > 0 {
        println!("{diverged}/{} runs diverged", runs.len());
        return Ok(exit::DIVERGED);
    }
    Ok(exit::OK)
}

fn cmd_probe(cli: &Cli, algo: Algo, path: &Path) -> Result<i32> {
    let mut cfg = load_config(cli, path)?;
    if let Some(t) = cli.tol {
        cfg.tolerances.probe_band = t;
    }
    let algorithm = match algo {
        Algo::Amp => ProbeAlgorithm::Amp,
        Algo::Oamp => ProbeAlgorithm::Oamp,
    };
    let name = algorithm_name(algo.kind());
    let dir = cfg.resolve_output_dir(cli.out_dir.as_deref());
    let (reports, verdict) = harness::run_probe(&cfg, algorithm)?;
    let command = format!("probe {name}");
    for r in &reports {
        let file = format!("probe_{name}_N{}_seed{}.json", r.n, r.seed);
        let meta = Metadata::new(&command, &file, &cfg)?.for_trial(r.n, r.seed);
        write_output(
            &dir,
            &file,
            &(serde_json::to_string_pretty(r)? + "\n"),
            &meta,
        )?;
    }
    let file = format!("probe_{name}_summary.csv");
    let meta = Metadata::new(&command, &file, &cfg)?.with_seeds(&cfg.seeds);
    write_output(&dir, &file, &reports_to_csv(&reports), &meta)?;
    let file = format!("probe_{name}_verdict.json");
    let meta = Metadata::new(&command, &file, &cfg)?.with_seeds(&cfg.seeds);
    write_output(
        &dir,
        &file,
        &(serde_json::to_string_pretty(&verdict)? + "\n"),
        &meta,
    )?;
    for (n, f) in &verdict.fraction_within {
        println!(
            "N={n}: {:.1}% of statistics below {}/sqrt(N)",
            100.0 * f,
            cfg.tolerances.probe_band
        );
    }
    if let Some(d) = &verdict.decay {
        println!(
            "median |s({})|/|s({})| = {:.3}",
            d.n_large, d.n_small, d.pooled_median_ratio
        );
    }
    if verdict.degenerate_trials > 0 {
        println!(
            "{} trials had near-degenerate histories",
            verdict.degenerate_trials
        );
    }
    println!("probe {}", if verdict.passed { "passed" } else { "failed" });
    Ok(if verdict.passed {
        exit::OK
    } else {
        exit::DEVIATES
    })
}

fn cmd_se(cli: &Cli, kind: SeKind, path: &Path) -> Result<i32> {
    let cfg = load_config(cli, path)?;
    let dir = cfg.resolve_output_dir(cli.out_dir.as_deref());
    let name = algorithm_name(kind);
    let (n, seed) = (cfg.dims[0], cfg.seeds[0]);
    let curve = se_prediction(&cfg, kind, n, seed)?;
    let file = format!("se_{name}.csv");
    let meta = Metadata::new(&format!("se {name}"), &file, &cfg)?.for_trial(n, seed);
    let out = write_output(&dir, &file, &curve.to_csv(), &meta)?;
    print!("{}", curve.to_csv());
    eprintln!("wrote {}", out.display());
    Ok(exit::OK)
}

fn cmd_compare(cli: &Cli, trace: &Path, se: &Path, out: Option<&Path>) -> Result<i32> {
    let (csv, worst) = harness::compare_csv(&fs::read_to_string(trace)?, &fs::read_to_string(se)?)?;
    match out {
        Some(p) => {
            let dir = resolve_output_dir(cli.out_dir.as_deref(), None);
            let target = if p.is_absolute() || cli.out_dir.is_none() {
                p.to_path_buf()
            } else {
                dir.join(p)
            };
            if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&target, &csv)?;
        }
        None => print!("{csv}"),
    }
    eprintln!("max |rel err| = {worst:.4e}");
    match cli.tol {
        Some(t) if worst > t => Ok(exit::DEVIATES),
        _ => Ok(exit::OK),
    }
}
