use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use cacemix::estimators::{
    bootstrap_kind, estimate_many, BootstrapConfig, CaceEstimate, EstimatorKind, EtaMode, PipelineConfig,
};
use cacemix::experts::OutcomeKind;
use cacemix::simgen::study::{draw_replicate, run_study, StudyConfig, DEFAULT_PARAMS_SEED};
use cacemix::simgen::{build_params, draw_population, Scenario, Specification};
use cacemix::{CaceError, TrialDataset};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cacemix", version, about = "CACE estimation with mixtures of experts")]
struct Cli {
    /// Worker threads; falls back to CACEMIX_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit estimators on a CSV trial dataset.
    Fit(FitArgs),
    /// Run the simulation study.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Binary,
    Continuous,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Assume {
    None,
    Er,
    Mo,
    #[value(name = "er+mo")]
    #[serde(rename = "er+mo")]
    ErMo,
    All,
    Iv,
}

impl Assume {
    fn estimators(self) -> Vec<EstimatorKind> {
        use EstimatorKind::*;
        match self {
            Assume::None => vec![Pi],
            Assume::Er => vec![PiEr],
            Assume::Mo => vec![PiMo],
            Assume::ErMo => vec![PiMoEr],
            Assume::All => EstimatorKind::ALL.to_vec(),
            Assume::Iv => vec![IvWald, IvMatching],
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Eta {
    Constant,
    Logistic,
}

#[derive(Args, Serialize)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    outcome_kind: Kind,
    #[arg(long, value_enum, default_value = "all")]
    assume: Assume,
    /// Bootstrap replicates; 0 skips the intervals.
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Covariate columns to use, in order; default is every other column.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    #[arg(long, value_enum, default_value = "constant")]
    eta: Eta,
    /// Fail instead of warning when a stratum has too little posterior mass.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// Scenario numbers, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    scenario: Vec<u8>,
    #[arg(long, default_value = "mis")]
    spec: String,
    #[arg(long, value_delimiter = ',', default_value = "2000,5000,10000")]
    n_list: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    replicates: usize,
    /// Estimator names, comma separated; default is all six.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_PARAMS_SEED)]
    params_seed: u64,
    #[arg(long, default_value_t = 1_000_000)]
    population: usize,
    /// Also write the per-figure CSVs.
    #[arg(long)]
    plots: bool,
    /// Also write replicate 0 of every cell as CSV.
    #[arg(long)]
    emit_data: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a, A: Serialize> {
    command: &'a str,
    config: &'a A,
    seeds: BTreeMap<&'a str, u64>,
    version: &'a str,
    wall_time_secs: f64,
    outputs: Vec<String>,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    manifest: &'a str,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct FitOutput<'a> {
    estimates: &'a [CaceEstimate],
    failures: Vec<(&'static str, &'static str, String)>,
}

enum Failure {
    Usage(anyhow::Error),
    Estimation(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn classify(e: CaceError, schema_is_usage: bool) -> Failure {
    let usage = e.is_schema_error() || (schema_is_usage && matches!(e, CaceError::InvalidInput(_)));
    let err = anyhow::anyhow!("{}: {e}", e.name());
    if usage {
        Failure::Usage(err)
    } else {
        Failure::Estimation(err)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn cmd_fit(args: &FitArgs) -> Result<(), Failure> {
    let start = Instant::now();
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Failure::Usage(anyhow::anyhow!("--level must be in (0, 1)")));
    }
    let data = TrialDataset::read_csv(&args.data, args.covariates.as_deref()).map_err(|e| classify(e, true))?;
    let kind = match args.outcome_kind {
        Kind::Binary => OutcomeKind::Binary,
        Kind::Continuous => OutcomeKind::Continuous,
    };
    kind.validate(&data.y).map_err(|e| classify(e, true))?;
    let mut cfg = PipelineConfig::new(kind);
    cfg.seed = args.seed;
    cfg.gating.strict = args.strict;
    cfg.eta_mode = match args.eta {
        Eta::Constant => EtaMode::ConstantMle,
        Eta::Logistic => EtaMode::Logistic,
    };
    let kinds = args.assume.estimators();
    let results: Vec<cacemix::Result<CaceEstimate>> = if args.bootstrap > 0 {
        let mut boot = BootstrapConfig::new(args.bootstrap, args.seed);
        boot.level = args.level;
        kinds.iter().map(|&k| bootstrap_kind(&data, k, &cfg, &boot)).collect()
    } else {
        estimate_many(&data, &kinds, &cfg)
    };

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    for (k, r) in kinds.iter().zip(results) {
        match r {
            Ok(e) => {
                let ci = e
                    .bootstrap
                    .as_ref()
                    .map(|b| format!("  CI [{:.4}, {:.4}]", b.ci_low, b.ci_high))
                    .unwrap_or_default();
                println!("{:<12} {:>10.4}{ci}", k.name(), e.delta_hat);
                estimates.push(e);
            }
            Err(e) => {
                eprintln!("{}: {}: {e}", k.name(), e.name());
                failures.push((k.name(), e.name(), e.to_string()));
                first_error.get_or_insert(e);
            }
        }
    }
    let mut warnings: Vec<String> = estimates
        .iter()
        .flat_map(|e| e.warnings.iter().map(move |w| format!("{}: {w}", e.estimator.name())))
        .collect();
    for e in &estimates {
        if let Some([a, b]) = e.extrapolation_share {
            if a > 0.0 || b > 0.0 {
                warnings.push(format!(
                    "{}: share of rows outside the expert subsets' covariate range: {a:.4} treated side, {b:.4} control side",
                    e.estimator.name()
                ));
            }
        }
    }
    write_json(
        &args.out.join("estimates.json"),
        &Envelope {
            manifest: "manifest.json",
            body: FitOutput {
                estimates: &estimates,
                failures,
            },
        },
    )?;
    write_json(
        &args.out.join("manifest.json"),
        &Manifest {
            command: "fit",
            config: args,
            seeds: BTreeMap::from([("seed", args.seed)]),
            version: env!("CARGO_PKG_VERSION"),
            wall_time_secs: start.elapsed().as_secs_f64(),
            outputs: vec!["estimates.json".into()],
            warnings,
        },
    )?;
    match first_error {
        Some(e) => Err(classify(e, false)),
        None => Ok(()),
    }
}

fn study_config(args: &SimulateArgs) -> cacemix::Result<StudyConfig> {
    let scenarios = args
        .scenario
        .iter()
        .map(|&s| Scenario::from_number(s))
        .collect::<cacemix::Result<Vec<_>>>()?;
    let spec = Specification::parse(&args.spec)?;
    let mut cfg = StudyConfig::new(scenarios, spec);
    cfg.sample_sizes = args.n_list.clone();
    cfg.replicates = args.replicates;
    if let Some(names) = &args.estimators {
        cfg.estimators = names
            .iter()
            .map(|n| EstimatorKind::parse(n))
            .collect::<cacemix::Result<Vec<_>>>()?;
    }
    cfg.seed = args.seed;
    cfg.params_seed = args.params_seed;
    cfg.population = args.population;
    Ok(cfg)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let cfg = study_config(args).map_err(|e| classify(e, true))?;
    let report = run_study(&cfg).map_err(|e| classify(e, true))?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut outputs = vec!["study.csv".to_string(), "study.json".to_string()];
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(|e| classify(e, false))?;
    fs::write(args.out.join("study.csv"), &csv).context("writing study.csv")?;
    write_json(
        &args.out.join("study.json"),
        &Envelope {
            manifest: "manifest.json",
            body: &report,
        },
    )?;
    if args.plots {
        let mut f1 = Vec::new();
        report.write_bias_rmse_csv(&mut f1).map_err(|e| classify(e, false))?;
        fs::write(args.out.join("figure1_bias_rmse.csv"), f1).context("writing figure 1 csv")?;
        let mut f2 = Vec::new();
        report.write_convergence_csv(&mut f2).map_err(|e| classify(e, false))?;
        fs::write(args.out.join("figure2_convergence.csv"), f2).context("writing figure 2 csv")?;
        outputs.push("figure1_bias_rmse.csv".into());
        outputs.push("figure2_convergence.csv".into());
    }
    if args.emit_data {
        let dir = args.out.join("data");
        fs::create_dir_all(&dir).context("creating data directory")?;
        for &s in &cfg.scenarios {
            let pop = draw_population(&build_params(cfg.params_seed, s, cfg.specification), cfg.population, 0)
                .map_err(|e| classify(e, false))?;
            for &n in &cfg.sample_sizes {
                let d = draw_replicate(&pop, cfg.seed, s, n, 0).map_err(|e| classify(e, false))?;
                let name = format!("scenario{}_n{n}_rep0.csv", s.number());
                d.write_csv(dir.join(&name)).map_err(|e| classify(e, false))?;
                outputs.push(format!("data/{name}"));
            }
        }
    }

    println!("{}", String::from_utf8_lossy(&csv).trim_end());
    let warnings = report
        .summary
        .iter()
        .filter(|c| c.failures > 0)
        .map(|c| {
            format!(
                "scenario {} n {} {}: {} of {} replicates failed",
                c.scenario.number(),
                c.n,
                c.estimator.name(),
                c.failures,
                cfg.replicates
            )
        })
        .collect();
    write_json(
        &args.out.join("manifest.json"),
        &Manifest {
            command: "simulate",
            config: args,
            seeds: BTreeMap::from([("seed", cfg.seed), ("params_seed", cfg.params_seed)]),
            version: env!("CARGO_PKG_VERSION"),
            wall_time_secs: start.elapsed().as_secs_f64(),
            outputs,
            warnings,
        },
    )?;
    Ok(())
}

fn init_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let threads = match flag {
        Some(t) => Some(t),
        None => match std::env::var("CACEMIX_THREADS") {
            Ok(v) => Some(v.trim().parse().context("CACEMIX_THREADS must be a positive integer")?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        anyhow::ensure!(t > 0, "thread count must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let res = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Estimation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
