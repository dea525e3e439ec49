use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use farmsim_core::engine::SimTime;
use farmsim_core::metrics::{
    from_json, merge_reports, render_table, summarize, throughput_csv, to_csv, to_json,
    utilization_csv, RunReport,
};
use farmsim_core::scenario::{self, ast::TimeUnit, Model};
use farmsim_core::sim::{RunOutput, TraceLevel};

#[derive(Parser)]
#[command(
    name = "farmsim",
    version,
    about = "Simulate server farms under faults and load"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write reports.
    Run {
        /// Scenario file, or `bundled:<name>` for a shipped scenario.
        file: String,
        /// RNG seed; defaults to the scenario's `seed`, else 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Run this many consecutive seeds in parallel.
        #[arg(long, value_name = "N")]
        seeds: Option<u64>,
        /// Simulated stop time, e.g. `3600s` or `90min`.
        #[arg(long, value_parser = parse_duration)]
        until: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also trace every request.
        #[arg(long)]
        trace: bool,
    },
    /// Parse and check a scenario without running it.
    Validate { file: String },
    /// Print a saved report.json as a table.
    Report { file: PathBuf },
}

fn parse_duration(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .ok_or_else(|| format!("`{s}` needs a unit (us, ms, s, min, h)"))?;
    let (num, unit) = s.split_at(split);
    let value: f64 = num.parse().map_err(|_| format!("bad number in `{s}`"))?;
    let unit =
        TimeUnit::from_keyword(unit.trim()).ok_or_else(|| format!("unknown unit in `{s}`"))?;
    Ok((value * unit.micros()).round() as u64)
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

fn read_scenario(file: &str) -> Result<String, Failure> {
    if let Some(name) = file.strip_prefix("bundled:") {
        return scenario::bundled(name)
            .map(str::to_string)
            .ok_or_else(|| Failure::Invalid(anyhow::anyhow!("no bundled scenario `{name}`")));
    }
    fs::read_to_string(file)
        .with_context(|| format!("reading {file}"))
        .map_err(Failure::Runtime)
}

fn load(file: &str) -> Result<Model, Failure> {
    let text = read_scenario(file)?;
    scenario::load(&text)
        .with_context(|| file.to_string())
        .map_err(Failure::Invalid)
}

fn write_outputs(dir: &Path, out: &RunOutput) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let files = [
        ("report.csv", to_csv(&out.report)),
        ("report.json", to_json(&out.report)),
        ("trace.log", out.trace.clone()),
        ("utilization.csv", utilization_csv(&out.report)),
        ("throughput.csv", throughput_csv(&out.report)),
    ];
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn simulate(model: &Model, seed: u64, end: SimTime, trace: bool) -> anyhow::Result<RunOutput> {
    let mut cfg = model.run_config(seed);
    if trace {
        cfg.trace = TraceLevel::Requests;
    }
    let sim = model.simulation(cfg)?;
    Ok(sim.run_until(end))
}

fn run(
    file: &str,
    seed: Option<u64>,
    seeds: Option<u64>,
    until: Option<u64>,
    out: &Path,
    trace: bool,
) -> Result<(), Failure> {
    let model = load(file)?;
    let end = until.map_or_else(|| model.default_end(), SimTime);
    let base = seed.or(model.seed).unwrap_or(0);

    let Some(n) = seeds else {
        let result = simulate(&model, base, end, trace).map_err(Failure::Runtime)?;
        for w in &result.warnings {
            eprintln!("warning: {w}");
        }
        write_outputs(out, &result).map_err(Failure::Runtime)?;
        print!("{}", render_table(&summarize(&result.report)));
        return Ok(());
    };
    if n == 0 {
        return Err(Failure::Invalid(anyhow::anyhow!(
            "--seeds must be at least 1"
        )));
    }

    let results: Vec<anyhow::Result<RunOutput>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|i| {
                let model = &model;
                s.spawn(move || simulate(model, base + i, end, trace))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let mut reports: Vec<RunReport> = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let r = r.map_err(Failure::Runtime)?;
        let s = base + i as u64;
        write_outputs(&out.join(format!("seed-{s}")), &r).map_err(Failure::Runtime)?;
        reports.push(r.report);
    }
    let merged = merge_reports(&reports);
    let write = |name: &str, body: String| {
        fs::write(out.join(name), body).with_context(|| format!("writing {name}"))
    };
    write("summary.csv", to_csv(&merged)).map_err(Failure::Runtime)?;
    write("summary.json", to_json(&merged)).map_err(Failure::Runtime)?;
    print!("{}", render_table(&summarize(&merged)));
    Ok(())
}

fn report(file: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(file)
        .with_context(|| format!("reading {}", file.display()))
        .map_err(Failure::Runtime)?;
    let summary = from_json(&text)
        .with_context(|| format!("{} is not a report", file.display()))
        .map_err(Failure::Invalid)?;
    print!("{}", render_table(&summary));
    Ok(())
}

fn validate(file: &str) -> Result<(), Failure> {
    let model = load(file)?;
    let farms = model.topology.farm_names().len();
    let nodes = model.topology.node_count();
    println!(
        "{file}: ok ({farms} farms, {nodes} nodes, {} workloads)",
        model.workloads.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Run {
            file,
            seed,
            seeds,
            until,
            out,
            trace,
        } => run(file, *seed, *seeds, *until, out, *trace),
        Command::Validate { file } => validate(file),
        Command::Report { file } => report(file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
