//! `rmaft`: run fault-injection scenarios, evaluate the reliability
//! model, compute Daly intervals, build placements, and inspect logs.
//!
//! Exit codes: 0 on success, 1 when a run violated a protocol
//! invariant, 2 on usage or parse errors.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rmaft_core::sim::{run_scenario, run_scenario_full, Scenario};
use rmaft_core::{
    daly_interval, make_taware_placement, p_cf, validate_taware, DalyParams, MachineProfile,
    PcfQuery, ProcessId, Report, TawareResult,
};

#[derive(Parser)]
#[command(name = "rmaft", version, about = "Fault-tolerance protocols for RMA programs, simulated")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file for one or more seeded trials.
    Sim(SimArgs),
    /// Catastrophic-failure probability over topology levels and
    /// checksum-process fractions.
    Pcf(PcfArgs),
    /// The near-optimal coordinated checkpoint interval.
    Daly(DalyArgs),
    /// Build and validate a topology-aware placement.
    Placement(PlacementArgs),
    /// Run a scenario and dump every log structure as JSON lines.
    DumpLogs(DumpLogsArgs),
}

#[derive(Args)]
struct SimArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Base seed; overrides the scenario's own. Trial i runs seed+i.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of trials.
    #[arg(long, default_value_t = 1)]
    trials: u32,
    /// Write one CSV row per trial here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print the full JSON report of every trial.
    #[arg(long)]
    reports: bool,
}

#[derive(Args)]
struct PcfArgs {
    /// Built-in profile name or a profile JSON file.
    #[arg(long, default_value = "tsubame2")]
    machine: String,
    #[arg(long = "n-procs")]
    n_procs: u64,
    /// Comma-separated checksum-process fractions of N, e.g. 0.01,0.05.
    #[arg(long = "ch-fraction", value_delimiter = ',', required = true)]
    ch_fraction: Vec<f64>,
    /// Comma-separated level names ("none" plus profile levels).
    #[arg(long = "topo-level", value_delimiter = ',', required = true)]
    topo_level: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DalyArgs {
    /// Checkpoint cost in seconds.
    #[arg(long)]
    delta: f64,
    /// Mean time between failures in seconds.
    #[arg(long)]
    mtbf: f64,
}

#[derive(Args)]
struct PlacementArgs {
    #[arg(long, default_value = "tsubame2")]
    machine: String,
    #[arg(long = "n-procs")]
    n_procs: u32,
    /// Number of groups; one checksum process joins each.
    #[arg(long)]
    groups: u32,
    /// T-awareness level (0 = none).
    #[arg(long)]
    level: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpLogsArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Include entries removed by trimming.
    #[arg(long)]
    include_trimmed: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Sim(args) => cmd_sim(args),
        Command::Pcf(args) => cmd_pcf(args),
        Command::Daly(args) => cmd_daly(args),
        Command::Placement(args) => cmd_placement(args),
        Command::DumpLogs(args) => cmd_dump_logs(args),
    }
}

fn load_scenario(path: &PathBuf) -> Result<Scenario, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Scenario::from_json(&text).map_err(|e| {
        format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        )
    })
}

/// Worker threads for trial fan-out, capped by RMAFT_THREADS.
fn thread_cap() -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("RMAFT_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).unwrap_or(1).min(available),
        Err(_) => available,
    }
}

fn cmd_sim(args: SimArgs) -> Result<ExitCode, String> {
    let scenario = load_scenario(&args.scenario)?;
    let base_seed = args.seed.unwrap_or(scenario.seed);
    let seeds: Vec<u64> = (0..args.trials as u64).map(|i| base_seed + i).collect();
    let threads = thread_cap().min(seeds.len().max(1));
    let mut reports: Vec<(u64, Result<Report, String>)> = Vec::with_capacity(seeds.len());
    std::thread::scope(|scope| {
        let chunks: Vec<Vec<u64>> = seeds
            .chunks(seeds.len().div_ceil(threads))
            .map(<[u64]>::to_vec)
            .collect();
        let mut handles = Vec::new();
        for chunk in chunks {
            let scenario = scenario.clone();
            handles.push(scope.spawn(move || {
                chunk
                    .into_iter()
                    .map(|seed| {
                        let mut s = scenario.clone();
                        s.seed = seed;
                        (seed, run_scenario(&s).map_err(|e| e.to_string()))
                    })
                    .collect::<Vec<_>>()
            }));
        }
        for h in handles {
            reports.extend(h.join().expect("trial worker panicked"));
        }
    });
    reports.sort_by_key(|(seed, _)| *seed);

    let mut csv = String::from("seed,digest,fallbacks,cf,event_count\n");
    let mut failed = false;
    for (seed, outcome) in &reports {
        match outcome {
            Ok(report) => {
                csv.push_str(&format!(
                    "{seed},{},{},{},{}\n",
                    report.final_memory_digest,
                    report.fallbacks,
                    report.cf,
                    report.event_count
                ));
                if !report.assertion_failures.is_empty() {
                    failed = true;
                    for a in &report.assertion_failures {
                        eprintln!("trial {seed}: invariant violated: {a}");
                    }
                }
                if args.reports {
                    println!("{}", report.to_json());
                }
            }
            Err(e) => return Err(format!("trial {seed}: {e}")),
        }
    }
    match &args.out {
        Some(path) => fs::write(path, csv).map_err(|e| format!("{}: {e}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(if failed {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn load_profile(spec: &str) -> Result<MachineProfile, String> {
    if spec == "tsubame2" {
        return Ok(MachineProfile::tsubame2());
    }
    let text = fs::read_to_string(spec).map_err(|e| format!("{spec}: {e}"))?;
    MachineProfile::from_json(&text).map_err(|e| e.to_string())
}

/// Locale-independent, nine significant digits.
fn fmt_prob(v: f64) -> String {
    format!("{v:.8e}")
}

fn cmd_pcf(args: PcfArgs) -> Result<ExitCode, String> {
    let profile = load_profile(&args.machine)?;
    let mut csv = String::from("topo_level,ch_fraction,p_cf\n");
    for level_name in &args.topo_level {
        let level = profile
            .level_index(level_name)
            .ok_or_else(|| format!("unknown level {level_name:?}; profile has {:?}", level_names(&profile)))?;
        for &frac in &args.ch_fraction {
            if !(frac > 0.0) {
                return Err("ch-fraction must be positive (empty groups otherwise)".into());
            }
            let groups = (args.n_procs as f64 * frac).round() as u64;
            if groups == 0 || !args.n_procs.is_multiple_of(groups) {
                return Err(format!(
                    "fraction {frac} gives {groups} groups, which does not divide {} processes",
                    args.n_procs
                ));
            }
            let v = p_cf(&PcfQuery {
                profile: &profile,
                n_procs: args.n_procs,
                groups,
                t_aware_level: level,
            })
            .map_err(|e| e.to_string())?;
            csv.push_str(&format!("{level_name},{frac},{}\n", fmt_prob(v)));
        }
    }
    match &args.out {
        Some(path) => fs::write(path, csv).map_err(|e| format!("{}: {e}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn level_names(profile: &MachineProfile) -> Vec<String> {
    std::iter::once("none".to_string())
        .chain(profile.levels.iter().map(|l| l.name.clone()))
        .collect()
}

fn cmd_daly(args: DalyArgs) -> Result<ExitCode, String> {
    let v = daly_interval(&DalyParams {
        delta: args.delta,
        mtbf: args.mtbf,
    })
    .map_err(|e| e.to_string())?;
    println!("{}", fmt_prob(v));
    Ok(ExitCode::SUCCESS)
}

fn cmd_placement(args: PlacementArgs) -> Result<ExitCode, String> {
    let profile = load_profile(&args.machine)?;
    let hier = profile.hierarchy();
    if args.groups == 0 || !args.n_procs.is_multiple_of(args.groups) {
        return Err(format!(
            "{} groups do not divide {} processes",
            args.groups, args.n_procs
        ));
    }
    let per = (args.n_procs / args.groups) as usize;
    // Each group also hosts its checksum process.
    let groups: Vec<Vec<ProcessId>> = (0..args.groups)
        .map(|g| {
            let mut members: Vec<ProcessId> = (0..per)
                .map(|k| ProcessId(g * per as u32 + k as u32))
                .collect();
            members.push(ProcessId(args.n_procs + g));
            members
        })
        .collect();
    let placement =
        make_taware_placement(&hier, &groups, args.level).map_err(|e| e.to_string())?;
    match validate_taware(&hier, &placement, &groups, args.level, 1) {
        TawareResult::Ok => {}
        TawareResult::Violation { group, level, element } => {
            return Err(format!(
                "constructed placement violates t-awareness: group {group}, level {level}, element {element}"
            ))
        }
    }
    let mut csv = "process,group,role".to_string();
    for (name, _) in &hier.levels {
        csv.push_str(&format!(",{name}"));
    }
    csv.push('\n');
    for (gi, members) in groups.iter().enumerate() {
        for (k, &p) in members.iter().enumerate() {
            let role = if k == per { "checksum" } else { "computing" };
            csv.push_str(&format!("{},{gi},{role}", p.0));
            for level in 1..=hier.depth() {
                csv.push_str(&format!(",{}", placement.element(&hier, p, level)));
            }
            csv.push('\n');
        }
    }
    match &args.out {
        Some(path) => fs::write(path, csv).map_err(|e| format!("{}: {e}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_dump_logs(args: DumpLogsArgs) -> Result<ExitCode, String> {
    let mut scenario = load_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let (report, machine) = run_scenario_full(&scenario).map_err(|e| e.to_string())?;
    print!("{}", machine.logs_jsonl());
    if args.include_trimmed {
        for a in 0..machine.n_procs() {
            for b in 0..machine.n_procs() {
                if a == b {
                    continue;
                }
                let trimmed = machine.trimmed_log(ProcessId(a), ProcessId(b));
                if !trimmed.is_empty() {
                    println!(
                        "{}",
                        serde_json::json!({
                            "type": "trimmed_log", "owner": a, "peer": b, "entries": trimmed,
                        })
                    );
                }
            }
        }
    }
    for (i, ckpt) in (0..machine.n_procs())
        .filter_map(|i| machine.latest_checkpoint(ProcessId(i)).map(|c| (i, c)))
    {
        println!(
            "{}",
            serde_json::json!({
                "type": "checkpoint", "owner": i, "seq": ckpt.meta.seq,
                "resume_tag": ckpt.meta.resume_tag,
                "payload_bytes": ckpt.payload_bytes().len(),
            })
        );
    }
    if !report.assertion_failures.is_empty() {
        for a in &report.assertion_failures {
            eprintln!("invariant violated: {a}");
        }
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
