use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use v2g_fdia::agc::scenario_2200;
use v2g_fdia::harness::{
    export_run, read_measurements, replay_feasibility, run_scenario, write_alarm_log, AgcOutcome, ConfigError, RunError,
    RunMetrics, RunSummary, ScenarioConfig,
};

#[derive(Parser)]
#[command(name = "v2g-sim", version, about = "V2G fleet aggregation, stealthy report manipulation and detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(clap::Args)]
struct Common {
    /// JSON scenario file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    attack: Option<Switch>,
    #[arg(long, value_enum)]
    control: Option<Switch>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full closed loop and write the run directory.
    Simulate(Common),
    /// Frequency response to the scheduled dispatch event, from a run's summary.json.
    Agc {
        #[command(flatten)]
        common: Common,
        /// summary.json of a previous run; without it the flexibility values below are used.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long, default_value_t = 50_000.0)]
        dispatched_kw: f64,
        #[arg(long, default_value_t = 25_950.0)]
        delivered_kw: f64,
        /// Upward flexibility actually available (kW).
        #[arg(long)]
        flexibility_kw: Option<f64>,
    },
    /// Replay the per-EV feasibility check over a measurements.csv log.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
    },
    /// Print the summary of a run directory.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => CliError::Config(c.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_config(c: &Common) -> Result<ScenarioConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(a) = c.attack {
        cfg.attack.enabled = a.into();
    }
    if let Some(k) = c.control {
        cfg.control = k.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(s: &RunSummary) {
    println!("seed {}  config {}", s.seed, &s.config_hash[..12.min(s.config_hash.len())]);
    println!("steps {}  periods {}", s.steps, s.epochs);
    println!("alarms: aggregate {}  feasibility {}", s.aggregate_alarms, s.feasibility_alarms);
    if let Some(t) = s.tracking_fraction {
        println!("tracking fraction {t:.4}  max distance {:.5}", s.max_distance.unwrap_or(0.0));
    }
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}%", 100.0 * v));
    println!("MAPE {}  pre-attack {}  post-attack {}", pct(s.mape), pct(s.mape_pre_attack), pct(s.mape_post_attack));
    println!("manipulated reports {}  invariant violations {}", s.manipulated_reports, s.invariants.total_violations());
    if let Some(a) = &s.agc {
        println!(
            "dispatch event: {:.2} MW requested, {:.2} MW delivered, shortfall {:.2} MW, peak |df1| {:.4} Hz",
            a.report.dispatched_mw, a.report.delivered_mw, a.report.shortfall_mw, a.report.peak_abs_df_hz[0]
        );
    }
}

fn simulate(c: &Common) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let metrics = run_scenario(&cfg)?;
    export_run(&metrics, &c.out).map_err(runtime)?;
    print_summary(&metrics.summary());
    Ok(())
}

fn agc(c: &Common, summary: Option<&Path>, dispatched: f64, delivered: f64, flex: Option<f64>) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let (flex, dispatched, delivered) = match summary {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let field = |k: &str| v["agc"][k].as_f64();
            match (field("flexibility_true_kw"), field("dispatched_kw"), field("delivered_kw")) {
                (Some(f), Some(d), Some(l)) => (f, d, l),
                _ => return Err(CliError::Config(format!("{}: no dispatch event recorded", p.display()))),
            }
        }
        None => (flex.unwrap_or(dispatched.max(delivered)), dispatched, delivered),
    };
    let report = scenario_2200(&cfg.agc, flex, dispatched, delivered).map_err(runtime)?;
    let metrics = RunMetrics {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        agc: Some(AgcOutcome { flexibility_true_kw: flex, dispatched_kw: dispatched, delivered_kw: delivered, report }),
        ..Default::default()
    };
    export_run(&metrics, &c.out).map_err(runtime)?;
    let r = &metrics.agc.as_ref().expect("set above").report;
    println!("shortfall {:.2} MW  net imbalance {:.2} MW", r.shortfall_mw, r.net_imbalance_mw);
    println!("peak |df| {:.4} / {:.4} Hz  tie flow [{:.5}, {:.5}] p.u.", r.peak_abs_df_hz[0], r.peak_abs_df_hz[1], r.min_ptie_pu, r.max_ptie_pu);
    Ok(())
}

fn detect(c: &Common, log: &Path) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let rows = read_measurements(log).map_err(|e| CliError::Config(e.to_string()))?;
    let alarms = replay_feasibility(&rows, cfg.period_h(), cfg.n_p() as u64, &cfg.detection);
    std::fs::create_dir_all(&c.out).map_err(runtime)?;
    write_alarm_log(&c.out.join("alarms.log"), &alarms).map_err(runtime)?;
    println!("{} reports, {} feasibility alarms", rows.len(), alarms.len());
    Ok(())
}

fn report(out: &Path) -> Result<(), CliError> {
    let p = out.join("summary.json");
    let text = std::fs::read_to_string(&p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
    let s: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
    println!("{}", serde_json::to_string_pretty(&s).map_err(runtime)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Agc { common, summary, dispatched_kw, delivered_kw, flexibility_kw } => {
            agc(common, summary.as_deref(), *dispatched_kw, *delivered_kw, *flexibility_kw)
        }
        Command::Detect { common, log } => detect(common, log),
        Command::Report { out } => report(out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Config(_) => 2,
                CliError::Runtime(_) => 3,
            })
        }
    }
}
