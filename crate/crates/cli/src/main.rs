//! Command-line front end: `simulate` runs the replication suites,
//! `analyze` applies a procedure to a user CSV, `check` runs the named
//! self-check suites. Thread count comes from POSTSEL_THREADS (default 1);
//! identical seeds produce byte-identical outputs at any thread count.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use postsel::harness::{self, ProcedureId, ScenarioConfig};
use postsel::Dataset;

#[derive(Parser)]
#[command(name = "postsel", about = "post-selection inference toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation scenario and write report.csv / summary.json.
    Simulate(SimulateArgs),
    /// Run a procedure on a CSV dataset (header `y,x1..xp`).
    Analyze(AnalyzeArgs),
    /// Run a named self-check suite (exit 1 on failure).
    Check(CheckArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Preset name: fig1, fig3, fig4, fig5, fig6, tables.
    #[arg(long)]
    scenario: Option<String>,
    /// JSON config file (flags below override its fields).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Restore full-scale problem sizes on scaled-down presets.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    procedure: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    sparsity: Option<usize>,
    /// Stack the randomized-CV rows onto the TG event.
    #[arg(long)]
    adjust_cv: bool,
    /// Output directory for report.csv and summary.json.
    #[arg(long, default_value = "postsel-out")]
    out: PathBuf,
    /// Also write ecdf.csv of the pooled null p-values.
    #[arg(long)]
    ecdf: bool,
    /// Print the effective config as JSON and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Input CSV with header row: response `y`, predictors `x1..xp`.
    data: PathBuf,
    #[arg(long, default_value = "R1")]
    procedure: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.10)]
    level: f64,
    #[arg(long, default_value_t = 5)]
    k_folds: usize,
    #[arg(long, default_value_t = 50)]
    grid_len: usize,
    /// Output CSV (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Debug: dump sampler reference chains (one CSV per tested coordinate).
    #[arg(long)]
    dump_chains: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Suite name (projection, sampler, lasso-event, gauss) or `all`.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(args) => match run_simulate(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        },
        Command::Analyze(args) => match run_analyze(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        },
        Command::Check(args) => match run_check(args) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(1),
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        },
    }
}

fn run_simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let mut cfg: ScenarioConfig = if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).context("malformed scenario config")?
    } else {
        let name = args.scenario.as_deref().unwrap_or("fig1");
        ScenarioConfig::preset(name, args.full).context("unknown scenario preset")?
    };
    if let Some(r) = args.reps {
        cfg.replications = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = &args.procedure {
        cfg.procedure = ProcedureId::parse(p)?;
    }
    if let Some(rho) = args.rho {
        cfg.rho = rho;
        cfg.design = harness::DesignKind::Ar1;
    }
    if let Some(s) = args.sparsity {
        cfg.sparsity = s;
    }
    if args.adjust_cv {
        cfg.adjust_cv = true;
    }
    cfg.validate()?;
    if args.dump_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }

    let report = harness::simulate(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let report_path = args.out.join("report.csv");
    let summary_path = args.out.join("summary.json");
    report.write_report_csv(std::fs::File::create(&report_path)?)?;
    std::fs::write(&summary_path, serde_json::to_string_pretty(&report.summary_json())?)?;
    if args.ecdf {
        report.write_ecdf_csv(std::fs::File::create(args.out.join("ecdf.csv"))?)?;
    }

    let a = &report.aggregates;
    println!("scenario {} procedure {}", report.config.name, report.config.procedure.name());
    println!("  replications        {}", a.replications);
    println!("  mean |E|            {:.2}", a.mean_selected);
    println!("  coverage            {:.3} ({}/{})", a.coverage, a.covered_count, a.testable_count);
    println!("  mean CI length      {:.3}", a.mean_ci_length);
    println!("  KS vs U(0,1)        stat {:.4}, p {:.4}", a.ks_statistic, a.ks_pvalue);
    println!("  BH(0.2)  FDR/power  {:.3} / {:.3}", a.fdr_bh, a.power_bh);
    println!("  thr(.05) Type I     {:.3}", a.type_i_threshold);
    println!("wrote {}", report_path.display());
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn run_analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let data = Dataset::from_csv_path(&args.data)
        .with_context(|| format!("reading {}", args.data.display()))?;
    let procedure = ProcedureId::parse(&args.procedure)?;
    if procedure == ProcedureId::Loco {
        bail!("analyze supports DS1/TG1/TG2/R1/R2");
    }
    let mut cfg = ScenarioConfig::preset("fig1", false)?;
    cfg.name = "analyze".into();
    cfg.procedure = procedure;
    cfg.seed = args.seed;
    cfg.level = args.level;
    cfg.k_folds = args.k_folds;
    cfg.grid_len = args.grid_len;
    cfg.n = data.n();
    cfg.p = data.p();
    cfg.include_naive = false;
    cfg.cv_randomization = match procedure {
        ProcedureId::R1 | ProcedureId::R2 => harness::CvRandomization::TwoPart,
        _ => harness::CvRandomization::PerFold,
    };
    cfg.chain_dump_dir = args.dump_chains.as_ref().map(|p| p.display().to_string());
    let result = harness::analyze_dataset(&data, &cfg)?;

    let mut wtr: Box<dyn std::io::Write> = match &args.out {
        Some(path) => Box::new(std::fs::File::create(path)?),
        None => Box::new(std::io::stdout()),
    };
    writeln!(wtr, "coordinate,pvalue,ci_lo,ci_hi,method")?;
    for rec in &result.records {
        writeln!(
            wtr,
            "{},{:.17e},{:.17e},{:.17e},{}",
            rec.coordinate + 1,
            rec.pvalue,
            rec.ci_lo,
            rec.ci_hi,
            rec.method
        )?;
    }
    eprintln!(
        "selected {} predictors: {:?}",
        result.selected.len(),
        result.selected.iter().map(|j| j + 1).collect::<Vec<_>>()
    );
    Ok(())
}

fn run_check(args: CheckArgs) -> anyhow::Result<bool> {
    let suites: Vec<&str> = if args.suite == "all" {
        harness::SUITES.to_vec()
    } else {
        vec![args.suite.as_str()]
    };
    let mut all_ok = true;
    for suite in suites {
        let lines = harness::run_check_suite(suite, args.seed)?;
        for line in lines {
            let mark = if line.passed { "PASS" } else { "FAIL" };
            println!("[{mark}] {suite}: {} ({})", line.name, line.detail);
            all_ok &= line.passed;
        }
    }
    Ok(all_ok)
}
