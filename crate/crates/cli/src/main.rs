use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cv2x_core::config::{ModePolicy, ScenarioConfig};
use cv2x_core::metrics::write_outputs;
use cv2x_core::sim::Simulation;
use cv2x_core::{sweep, validation, SimError};

/// Cellular V2X sidelink simulator.
#[derive(Parser)]
#[command(name = "cv2x", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write summary.json, timeseries.csv and losses.csv.
    Run(RunArgs),
    /// Run the cross product of policies, CAM rates and seeds.
    Sweep(SweepArgs),
    /// Run the built-in oracle and invariant suites.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "CV2X_OUT_DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// CAM generation rates in Hz.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
    loads: Vec<f64>,
    /// A seed count (seeds 1..=N) or a comma-separated seed list.
    #[arg(long, default_value = "10")]
    seeds: String,
    /// Policies to sweep: `all` or a comma-separated list.
    #[arg(long, default_value = "all")]
    policy: String,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    parallel: usize,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn exit_code(e: &SimError) -> u8 {
    match e {
        SimError::Config(_) => 1,
        SimError::Io(_) => 3,
        _ => 2,
    }
}

fn load(config: Option<&Path>) -> Result<ScenarioConfig, SimError> {
    match config {
        Some(p) => ScenarioConfig::load(p),
        None => Ok(ScenarioConfig::default()),
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, SimError> {
    let bad = || {
        SimError::Config(format!(
            "--seeds: expected a count or a list of seeds, got `{s}`"
        ))
    };
    if s.contains(',') {
        s.split(',')
            .map(|x| x.trim().parse().map_err(|_| bad()))
            .collect()
    } else {
        let n: u64 = s.trim().parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        Ok((1..=n).collect())
    }
}

fn parse_policies(s: &str) -> Result<Vec<ModePolicy>, SimError> {
    if s == "all" {
        return Ok(ModePolicy::ALL.to_vec());
    }
    s.split(',').map(|p| ModePolicy::parse(p.trim())).collect()
}

fn write_file(path: &Path, body: &str) -> Result<(), SimError> {
    std::fs::write(path, body).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
}

fn run(args: RunArgs) -> Result<(), SimError> {
    let mut cfg = load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let window = cfg.ticks(cfg.metrics.window_ms);
    let out = Simulation::new(cfg)?.run()?;
    let s = &out.summary;
    write_outputs(&args.out.out, s, &out.ledger, window)?;
    println!(
        "{} seed {} load {:.4}: P_r {} ({} receptions of {} opportunities)",
        s.policy,
        s.seed,
        s.normalized_load,
        s.p_r
            .get("overall")
            .map_or("n/a".into(), |p| format!("{p:.4}")),
        s.counts.received,
        s.counts.opportunities
    );
    println!("wrote {}", args.out.out.display());
    if !s.conservation.balanced {
        return Err(SimError::InvariantBreach(format!(
            "metrics ledger unbalanced by {}: {}",
            s.conservation.discrepancy,
            s.conservation.issues.join("; ")
        )));
    }
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<(), SimError> {
    let base = load(args.config.as_deref())?;
    let seeds = parse_seeds(&args.seeds)?;
    let policies = parse_policies(&args.policy)?;
    if args.loads.is_empty() {
        return Err(SimError::Config(
            "--loads: at least one CAM rate is required".into(),
        ));
    }
    let pts = sweep::points(&policies, &args.loads, &seeds);
    let rows = sweep::sweep(&base, &pts, args.parallel)?;
    let dir = &args.out.out;
    std::fs::create_dir_all(dir).map_err(|e| SimError::Io(format!("{}: {e}", dir.display())))?;
    write_file(&dir.join("sweep_runs.csv"), &sweep::runs_csv(&rows))?;
    write_file(
        &dir.join("sweep_aggregate.csv"),
        &sweep::aggregate_csv(&sweep::aggregate(&rows)),
    )?;
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    println!(
        "{} runs, {} failed; wrote {}",
        rows.len(),
        failed,
        dir.display()
    );
    for r in rows.iter().filter(|r| r.outcome.is_err()) {
        eprintln!(
            "  {} rate {} seed {}: {}",
            r.point.policy.as_str(),
            r.point.cam_rate_hz,
            r.point.seed,
            r.outcome.as_ref().err().map_or("", String::as_str)
        );
    }
    Ok(())
}

fn validate(args: ValidateArgs) -> Result<(), SimError> {
    let reports = validation::run_all(args.seed);
    let mut failed = 0;
    for r in &reports {
        println!(
            "{:<18} {:>7} cases {:>4} failures  {}",
            r.name,
            r.cases,
            r.failures,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if let Some(why) = &r.first_failure {
            println!("    first failure: {why}");
        }
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(SimError::InvariantBreach(format!(
            "{failed} validation suites failed"
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
