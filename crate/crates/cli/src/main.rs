use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ldu::harness::acceptance::{run_criterion, Options, CRITERIA};
use ldu::harness::config::{EngineChoice, Profile, RunConfig};
use ldu::harness::results::ResultsDocument;
use ldu::harness::scenarios::scenario_library;

#[derive(Parser)]
#[command(name = "ldusim", version, about = "Leakage detection unit simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the scenarios.
    List,
    /// Run a scenario and print its metrics.
    Run(RunArgs),
    /// Run the acceptance suite; exits nonzero if any criterion fails.
    Verify {
        #[arg(long, default_value_t = ldu::harness::acceptance::DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        workers: Option<usize>,
        /// Run only these criteria (1-11).
        #[arg(long = "only", value_delimiter = ',')]
        only: Vec<u8>,
    },
    /// Run a scenario and write its scans as CSV files.
    EmitScan {
        #[command(flatten)]
        run: RunArgs,
        /// Directory for the CSV files.
        #[arg(long, default_value = ".")]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    scenario: String,
    /// Shots per circuit setting (total for the logic tables).
    #[arg(long)]
    shots: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// traj, density or both.
    #[arg(long)]
    engine: Option<String>,
    /// Base noise model: calibrated or noiseless.
    #[arg(long)]
    profile: Option<String>,
    /// Noise override, key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Write the results document here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Read settings from a config file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Write raw shot records, one file per circuit setting.
    #[arg(long)]
    records: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::from_toml(&text)?
            }
            None => RunConfig::new(&self.scenario),
        };
        if !cfg.scenario.is_empty() && cfg.scenario != self.scenario {
            bail!("config file names scenario `{}` but `{}` was requested", cfg.scenario, self.scenario);
        }
        cfg.scenario = self.scenario.clone();
        if let Some(p) = &self.profile {
            cfg.profile = p.parse::<Profile>()?;
            // overrides from the file were checked against the old profile
            let kept = std::mem::take(&mut cfg.overrides);
            for (k, v) in kept {
                cfg.set_override(&k, v)?;
            }
        }
        if self.shots.is_some() {
            cfg.shots = self.shots;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = &self.engine {
            cfg.engine = e.parse::<EngineChoice>()?;
        }
        for kv in &self.set {
            cfg.set_override_str(kv)?;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        cfg.records_dir = self.records.clone();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_summary(doc: &ResultsDocument) {
    println!(
        "scenario {}  shots {}  seed {}  engine {}  profile {}",
        doc.config.scenario, doc.config.shots, doc.seed, doc.config.engine, doc.config.profile
    );
    for s in &doc.sections {
        println!("[{}] {} ({})", s.engine, s.name, s.postselection);
        for m in &s.metrics {
            match (m.lo, m.hi) {
                (Some(lo), Some(hi)) if lo != hi => println!("  {:<36} {:.5}  [{:.5}, {:.5}]", m.name, m.value, lo, hi),
                _ => println!("  {:<36} {:.5}", m.name, m.value),
            }
        }
    }
    for c in doc.comparisons.iter().filter(|c| !c.within_4_sigma) {
        eprintln!("warning: engines disagree on {} ({:.2} sigma at {:?})", c.label, c.max_z, c.worst_record);
    }
    println!("wall clock {:.2} s", doc.wall_clock_seconds);
}

fn run(args: &RunArgs) -> Result<ResultsDocument> {
    let cfg = args.config()?;
    let doc = ldu::harness::run(&cfg)?;
    if let Some(out) = &cfg.out {
        doc.write(out).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(doc)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::List => {
            for s in scenario_library() {
                println!("{:<24} {:>6}  {}", s.name, s.default_shots, s.summary);
            }
        }
        Command::Run(args) => print_summary(&run(&args)?),
        Command::Verify { seed, workers, only } => {
            let opts = Options { seed, workers };
            let ids: Vec<u8> = if only.is_empty() { CRITERIA.iter().map(|c| c.0).collect() } else { only };
            if let Some(bad) = ids.iter().find(|&&i| !(1..=CRITERIA.len() as u8).contains(&i)) {
                bail!("no criterion {bad}");
            }
            let mut failed = 0;
            for id in ids {
                let r = run_criterion(id, &opts);
                println!("{}", r.line());
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                println!("{failed} criteria failed");
                return Ok(ExitCode::FAILURE);
            }
            println!("all criteria passed");
        }
        Command::EmitScan { run: args, dir } => {
            let doc = run(&args)?;
            std::fs::create_dir_all(&dir)?;
            let mut written = 0;
            for s in &doc.sections {
                if let Some(scan) = &s.scan {
                    let name: String = s.name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
                    let path = dir.join(format!("{name}.{}.csv", s.engine));
                    let f = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    scan.write_csv(std::io::BufWriter::new(f))?;
                    println!("{}", path.display());
                    written += 1;
                }
            }
            if written == 0 {
                bail!("scenario `{}` has no phase scans", args.scenario);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
