//! `osckv`: run scenarios, the exhaustive 2PC checker and the put benchmark.
//!
//! Exit codes: 0 when every check passes, 1 on an assertion failure, 2 on a
//! usage or parse error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use osckv::harness::bench::{bench_put, to_csv, BenchConfig, BenchMode};
use osckv::harness::{check_2pc, run_scenario, CheckConfig, Scenario};
use osckv::transport::{format_cost, Decimal, Fidelity};

#[derive(Parser, Debug)]
#[command(name = "osckv", version, about = "Fault-tolerant replicated store simulator")]
struct Cli {
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// How one-sided calls behave once their target died.
    #[arg(long, global = true, value_parser = parse_fidelity)]
    fidelity: Option<Fidelity>,
    #[command(subcommand)]
    command: Command,
}

fn parse_fidelity(s: &str) -> Result<Fidelity, String> {
    s.parse()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Normal,
    Cas,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario file and check its assertions.
    Run {
        scenario: PathBuf,
        /// Trace output (line-delimited JSON); defaults next to the scenario.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Audit output (line-delimited JSON); defaults next to the scenario.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Kill every rank at every step of a transaction workload.
    #[command(name = "check-2pc")]
    Check2pc {
        #[arg(long, default_value_t = 5)]
        max_p: usize,
        #[arg(long, default_value_t = 2)]
        max_r: usize,
        #[arg(long, default_value_t = 3)]
        keys: usize,
        /// Backup coordinators.
        #[arg(long, default_value_t = 2)]
        backups: usize,
        /// Negative control: the coordinator does not log to its backups.
        #[arg(long)]
        no_backup_log: bool,
    },
    /// Simulated put latency per replica count and value size.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0usize, 64, 1024, 4096])]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0usize, 1, 2, 4, 6])]
        replicas: Vec<usize>,
        #[arg(long, value_enum, default_value_t = OnOff::On)]
        ping: OnOff,
        #[arg(long, value_enum, default_value_t = Mode::Normal)]
        mode: Mode,
        #[arg(long, default_value = "1")]
        alpha: Decimal,
        #[arg(long, default_value = "0.01")]
        beta: Decimal,
        #[arg(long, default_value = "1")]
        gamma: Decimal,
        #[arg(long, default_value = "1")]
        delta: Decimal,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { ref scenario, ref trace, ref audit } => run(&cli, scenario, trace.clone(), audit.clone()),
        Command::Check2pc { max_p, max_r, keys, backups, no_backup_log } => {
            let cc = CheckConfig {
                max_p,
                max_r,
                keys,
                backups,
                log_to_backups: !no_backup_log,
                fidelity: cli.fidelity.unwrap_or_default(),
                seed: cli.seed.unwrap_or(0),
            };
            check(&cc)
        }
        Command::Bench { ref sizes, ref replicas, ping, mode, alpha, beta, gamma, delta, ref csv } => {
            let cfg = BenchConfig {
                sizes: sizes.clone(),
                replicas: replicas.clone(),
                mode: match mode {
                    Mode::Normal => BenchMode::Normal,
                    Mode::Cas => BenchMode::Cas,
                },
                ping: ping == OnOff::On,
                cost: osckv::transport::CostModel { alpha: alpha.0, beta: beta.0, gamma: gamma.0, delta: delta.0 },
                fidelity: cli.fidelity.unwrap_or_default(),
                seed: cli.seed.unwrap_or(0),
                ..BenchConfig::default()
            };
            bench(&cfg, csv.as_deref())
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write(path: &Path, text: &str) -> Result<(), ExitCode> {
    fs::write(path, text).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn run(cli: &Cli, path: &Path, trace: Option<PathBuf>, audit: Option<PathBuf>) -> ExitCode {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    let mut sc = match Scenario::from_json(&text) {
        Ok(sc) => sc,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = cli.seed {
        sc.seed = seed;
    }
    if let Some(f) = cli.fidelity {
        sc.config.fidelity = f;
    }
    let report = run_scenario(&sc);
    let trace = trace.unwrap_or_else(|| sibling(path, "trace.jsonl"));
    let audit = audit.unwrap_or_else(|| sibling(path, "audit.jsonl"));
    if let Err(code) = write(&trace, &report.trace_jsonl).and_then(|_| write(&audit, &report.audit.to_jsonl())) {
        return code;
    }
    println!("outcome: {:?}", report.outcome);
    println!("hangs: {} expected, {} unexpected", report.hangs.expected, report.hangs.unexpected);
    println!("recoveries: {} (lost {:?})", report.recoveries.len(), report.lost.iter().map(|r| r.0).collect::<Vec<_>>());
    let consistent = report.audit.records.iter().filter(|r| r.consistent).count();
    println!("audit: {consistent}/{} keys consistent", report.audit.records.len());
    println!("trace: {}", trace.display());
    println!("audit: {}", audit.display());
    if report.passed() {
        println!("PASS");
        ExitCode::SUCCESS
    } else {
        for f in &report.failures {
            println!("FAIL {f}");
        }
        ExitCode::from(1)
    }
}

fn check(cc: &CheckConfig) -> ExitCode {
    let report = check_2pc(cc);
    println!("runs: {}", report.runs);
    println!("coordinator exhausted: {}", report.exhausted);
    for (point, n) in &report.points {
        println!("  {point}: {n}");
    }
    println!("atomicity violations: {}", report.count("atomicity"));
    println!("exactly-once violations: {}", report.count("exactly_once"));
    println!("other violations: {}", report.violations.len() - report.count("atomicity") - report.count("exactly_once"));
    for v in report.violations.iter().take(20) {
        println!(
            "  P={} R={} kill {} at step {} ({}): {}: {}",
            v.world_size, v.replicas, v.victim, v.step, v.point, v.kind, v.detail
        );
    }
    if report.violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn bench(cfg: &BenchConfig, csv: Option<&Path>) -> ExitCode {
    let rows = bench_put(cfg);
    println!("{:>8} {:>8} {:>10} {:>14}", "replicas", "size", "world", "latency");
    for r in &rows {
        println!("{:>8} {:>8} {:>10} {:>14}", r.replicas, r.size, r.world_size, format_cost(&r.latency()));
    }
    if let Some(path) = csv {
        if let Err(code) = write(path, &to_csv(&rows)) {
            return code;
        }
    }
    if rows.iter().all(|r| r.stable()) {
        ExitCode::SUCCESS
    } else {
        eprintln!("error: repeated puts cost different amounts");
        ExitCode::from(1)
    }
}
