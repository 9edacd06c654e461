use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use snijm::io::{self, LoadOptions, SummaryFormat, Transform};
use snijm::mcmc::{self, autocorr, ess, rhat, McmcConfig, ModelChoice, RunSpec};
use snijm::model::RandomEffectsMode;
use snijm::priors::PriorSpec;
use snijm::simgen::{self, SimulationConfig};
use snijm::study::{self, StudyConfig};
use snijm::{Error, ErrorClass};

/// Bayesian joint models for longitudinal and time-to-event data with
/// skew-normal/independent random effects.
#[derive(Parser, Debug)]
#[command(name = "snijm", version, arg_required_else_help = true)]
struct Cli {
    /// Seed for every random draw (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config file with dotted keys, e.g. `mcmc.burn_in = 5000`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset as long.csv and surv.csv.
    Simulate(SimulateArgs),
    /// Fit one model; writes traces.csv, summary.csv and summary.json.
    Fit(FitArgs),
    /// Run the replicate study; writes metrics.csv, report.txt, records.json.
    Study(StudyArgs),
    /// R-hat, ESS and autocorrelations of a trace file.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    subjects: Option<usize>,
    /// Write the AIDS-shaped fixture (raw CD4 counts, four baseline codes).
    #[arg(long)]
    aids: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    long: PathBuf,
    #[arg(long)]
    surv: PathBuf,
    /// One of sn, st, ssl, scn, jm.
    #[arg(long)]
    model: Option<ModelChoice>,
    /// Response transform: none or sqrt.
    #[arg(long)]
    transform: Option<Transform>,
    /// Comma-separated design columns after the intercept.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Centre and scale covariates (not the intercept or obstime).
    #[arg(long)]
    standardize: bool,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[arg(long)]
    replicates: Option<usize>,
    /// Comma-separated models, e.g. `sn,st,jm`.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<ModelChoice>>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, default_value_t = 10)]
    max_lag: usize,
}

/// Everything a config file may set for `fit` and `simulate`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    model: Option<ModelChoice>,
    mode: RandomEffectsMode,
    prior: PriorSpec,
    mcmc: McmcConfig,
    data: LoadOptions,
    sim: SimulationConfig,
}

fn load<T: Serialize + serde::de::DeserializeOwned>(defaults: T, path: Option<&Path>) -> snijm::Result<T> {
    match path {
        Some(p) => io::read_config_over(&defaults, p),
        None => Ok(defaults),
    }
}

fn out_dir(dir: &Path) -> snijm::Result<&Path> {
    fs::create_dir_all(dir)?;
    Ok(dir)
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> snijm::Result<()> {
    let cfg = load(FileConfig::default(), cli.config.as_deref())?;
    let mut sim = cfg.sim;
    if let Some(s) = cli.seed {
        sim.seed = s;
    }
    if let Some(n) = args.subjects {
        sim.n_subjects = n;
    }
    let dir = out_dir(&cli.out)?;
    let (long, surv) = (dir.join("long.csv"), dir.join("surv.csv"));
    if args.aids {
        let recs = simgen::aids_like(sim.n_subjects, sim.seed)?;
        io::write_aids(&recs, &long, &surv)?;
        println!("wrote {} AIDS-shaped subjects to {}", recs.len(), dir.display());
        return Ok(());
    }
    let data = simgen::simulate(&sim)?;
    io::write_dataset(&data.data, &long, &surv)?;
    let censored = data.data.subjects.iter().filter(|s| !s.event_observed).count();
    println!(
        "wrote {} subjects ({} censored) to {}",
        data.data.subjects.len(),
        censored,
        dir.display()
    );
    Ok(())
}

fn fit(cli: &Cli, args: &FitArgs) -> snijm::Result<()> {
    let cfg = load(FileConfig::default(), cli.config.as_deref())?;
    let mut opts = cfg.data;
    if let Some(t) = args.transform {
        opts.transform = t;
    }
    if let Some(c) = &args.covariates {
        opts.covariates = Some(c.clone());
    }
    opts.standardize |= args.standardize;
    let data = io::load_dataset(&args.long, &args.surv, &opts)?;
    let model = args.model.or(cfg.model).unwrap_or(ModelChoice::Sn);
    let mut spec = RunSpec {
        model,
        mode: cfg.mode,
        prior: cfg.prior,
        mcmc: cfg.mcmc,
    };
    if let Some(s) = cli.seed {
        spec.mcmc.seed = s;
    }
    let fit = mcmc::run(&data, &spec, None)?;
    let dir = out_dir(&cli.out)?;
    io::write_traces(&fit, &dir.join("traces.csv"))?;
    io::write_summary(&fit.summary, &dir.join("summary.csv"), SummaryFormat::Csv)?;
    io::write_summary(&fit.summary, &dir.join("summary.json"), SummaryFormat::Json)?;
    println!("{:<18}{:>11}{:>11}{:>11}{:>8}", "parameter", "estimate", "lower", "upper", "rhat");
    for p in &fit.summary.params {
        let r = p.rhat.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        println!("{:<18}{:>11.4}{:>11.4}{:>11.4}{:>8}", p.name, p.mean, p.lower, p.upper, r);
    }
    Ok(())
}

fn run_study(cli: &Cli, args: &StudyArgs) -> snijm::Result<()> {
    let mut cfg = load(StudyConfig::default(), cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.sim.seed = s;
    }
    if let Some(n) = args.replicates {
        cfg.n_replicates = n;
    }
    if let Some(m) = &args.models {
        cfg.models = m.clone();
    }
    let res = study::run_study(&cfg)?;
    let dir = out_dir(&cli.out)?;
    study::write_metrics_csv(&res.tables, &dir.join("metrics.csv"))?;
    let report = study::report(&res);
    fs::write(dir.join("report.txt"), &report)?;
    fs::write(dir.join("records.json"), serde_json::to_string_pretty(&res.records)? + "\n")?;
    if res.tables.len() > 1 {
        match study::compare_models(&res.tables) {
            Ok(c) => fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&c)? + "\n")?,
            Err(e) => eprintln!("no comparison: {e}"),
        }
    }
    print!("{report}");
    Ok(())
}

fn diagnose(cli: &Cli, args: &DiagnoseArgs) -> snijm::Result<()> {
    let (names, traces) = io::read_traces(&args.traces)?;
    let mut text = String::new();
    let mut header = format!("{:<18}{:>9}{:>10}", "parameter", "rhat", "ess");
    for k in 1..=args.max_lag {
        let _ = write!(header, "{:>8}", format!("acf{k}"));
    }
    let _ = writeln!(text, "{header}");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut rec = vec!["parameter".to_string(), "rhat".into(), "ess".into()];
    rec.extend((1..=args.max_lag).map(|k| format!("acf{k}")));
    w.write_record(&rec).map_err(Error::from)?;
    for (k, name) in names.iter().enumerate() {
        let chains: Vec<Vec<f64>> = traces.iter().map(|c| c.iter().map(|row| row[k]).collect()).collect();
        let r = rhat(&chains).ok();
        let e = ess(&chains).ok();
        let pooled: Vec<f64> = chains.concat();
        let acf = autocorr(&pooled, args.max_lag).ok();
        let show = |v: Option<f64>, p: usize| v.map(|v| format!("{v:.p$}")).unwrap_or_else(|| "NA".into());
        let mut line = format!("{:<18}{:>9}{:>10}", name, show(r, 4), show(e, 1));
        let mut rec = vec![name.clone(), show(r, 6), show(e, 3)];
        for lag in 1..=args.max_lag {
            let a = acf.as_ref().map(|a| a[lag]);
            let _ = write!(line, "{:>8}", show(a, 3));
            rec.push(show(a, 6));
        }
        let _ = writeln!(text, "{line}");
        w.write_record(&rec).map_err(Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let dir = out_dir(&cli.out)?;
    fs::write(dir.join("diagnostics.csv"), bytes)?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match &cli.command {
        Command::Simulate(a) => simulate(&cli, a),
        Command::Fit(a) => fit(&cli, a),
        Command::Study(a) => run_study(&cli, a),
        Command::Diagnose(a) => diagnose(&cli, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Data => ExitCode::from(2),
                ErrorClass::Numerical => ExitCode::from(3),
            }
        }
    }
}
