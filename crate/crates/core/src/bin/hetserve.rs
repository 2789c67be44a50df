use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use hetserve::experiment::{
    self, compare_methods, desk_experiment, read_report, run_experiment, ExperimentSpec, Manifest, Sweep, SweepAxis,
};
use hetserve::io;
use hetserve::par::Execution;
use hetserve::placer::Method;
use hetserve::preset::DeskPreset;
use hetserve::profiler::{fit_all, load_samples, save_samples, FitOptions, ProfileSet};
use hetserve::workload::{generate_trace, load_trace, save_trace};

#[derive(Parser)]
#[command(name = "hetserve", version, about = "Heterogeneous LLM instance placement and serving simulator")]
struct Cli {
    /// Run sequentially instead of on the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the desk preset as an experiment spec, plus its profiling samples.
    Preset(PresetArgs),
    /// Fit decay profiles from a samples CSV.
    Fit {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Candidate epsilon values, comma separated.
        #[arg(long, value_delimiter = ',')]
        epsilon_grid: Option<Vec<f64>>,
    },
    /// Generate the request trace of an experiment spec.
    Trace {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the placer and write a manifest with trace and profiles.
    Place {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a manifest against a trace.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline for one spec: place, simulate, report.
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the experiment's method.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Sweep one axis for one or more methods and write a comparison table.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Methods to run; defaults to the experiment's method.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate report directories against a baseline method.
    Compare {
        /// Report directories; searched recursively for summaries.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        baseline: Option<Method>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PresetArgs {
    /// Trace family, 1-6.
    #[arg(long, default_value_t = 4)]
    family: u8,
    #[arg(long, default_value = "maaso")]
    method: Method,
    #[arg(long)]
    gpus: Option<u32>,
    #[arg(long)]
    requests: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory the experiment will write into.
    #[arg(long, default_value = "runs/desk")]
    output_dir: PathBuf,
    /// Where to write the experiment spec JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write the synthetic profiling samples as CSV.
    #[arg(long)]
    samples: Option<PathBuf>,
}

fn load_spec(path: &Path) -> anyhow::Result<ExperimentSpec> {
    Ok(io::read_json(path)?)
}

fn summaries_under(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    if dir.join(experiment::SUMMARY_FILE).is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for e in entries.into_iter().filter(|e| e.is_dir()) {
        summaries_under(&e, out)?;
    }
    Ok(())
}

fn print_rows(rows: &[experiment::ComparisonRow]) {
    println!(
        "{:>10} {:>12} {:>8} {:>10} {:>9} {:>9} {:>10}",
        "axis", "method", "slo", "tokens/s", "latency", "solver_s", "d_slo"
    );
    for r in rows {
        let axis = r.axis_value.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        println!(
            "{:>10} {:>12} {:>8.4} {:>10.1} {:>9.3} {:>9} {:>+10.4}",
            axis,
            r.method.name(),
            r.slo_attainment,
            r.avg_throughput,
            r.avg_latency,
            r.solver_seconds.map_or_else(|| "-".into(), |t| format!("{t:.3}")),
            r.delta_slo_attainment
        );
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Preset(a) => {
            let mut preset = DeskPreset::default();
            if let Some(g) = a.gpus {
                preset.gpu_count = g;
            }
            if let Some(n) = a.requests {
                preset.requests = n;
            }
            if let Some(s) = a.seed {
                preset.seed = s;
            }
            let mut spec = desk_experiment(&preset, a.family, a.method, a.output_dir)?;
            spec.placer.execution = exec;
            io::write_json(&a.out, &spec)?;
            if let Some(path) = a.samples {
                save_samples(&path, &preset.samples())?;
            }
        }
        Command::Fit {
            samples,
            out,
            epsilon_grid,
        } => {
            let mut opts = FitOptions::default();
            if let Some(g) = epsilon_grid {
                opts.epsilon_grid = g;
            }
            let profiles = fit_all(&load_samples(&samples)?, &opts)?;
            profiles.save(&out)?;
            for tm in profiles.iter() {
                println!(
                    "{} {} t0={:.4} delta={:.5} epsilon={}",
                    tm.model, tm.strategy, tm.t0, tm.delta, tm.epsilon
                );
            }
        }
        Command::Trace { spec, out } => {
            let spec = load_spec(&spec)?;
            spec.trace.validate()?;
            let requests = generate_trace(&spec.trace, spec.cluster.time_slice)?;
            save_trace(&out, &requests)?;
            println!("{} requests", requests.len());
        }
        Command::Place { spec, out } => {
            let mut spec = load_spec(&spec)?;
            spec.placer.execution = exec;
            let dir = out.unwrap_or_else(|| spec.output_dir.clone());
            let plan = experiment::plan(&spec)?;
            experiment::write_plan(&dir, &plan)?;
            println!(
                "{}: {} instances on {} GPUs, score {:.4}, {} simulations",
                spec.method,
                plan.manifest.placement.instances.len(),
                plan.manifest.placement.gpus_used(),
                plan.manifest.placement.score,
                plan.simulations
            );
        }
        Command::Simulate {
            manifest,
            trace,
            profiles,
            out,
        } => {
            let manifest: Manifest = io::read_json(&manifest)?;
            let requests = load_trace(&trace)?;
            let profiles = ProfileSet::load(&profiles)?;
            let mut metrics = manifest.replay(&requests, &profiles)?;
            io::ensure_dir(&out)?;
            io::write_csv(&out.join(experiment::REQUESTS_FILE), &metrics.records)?;
            metrics.records.clear();
            io::write_json(&out.join("metrics.json"), &metrics)?;
            println!(
                "slo {:.4} throughput {:.1} latency {:.4}",
                metrics.slo_attainment, metrics.avg_throughput, metrics.avg_latency
            );
        }
        Command::Run { spec, out, method } => {
            let mut spec = load_spec(&spec)?;
            spec.placer.execution = exec;
            if let Some(m) = method {
                spec.method = m;
            }
            if let Some(o) = out {
                spec.output_dir = o;
            }
            let reports = run_experiment(&spec, exec)?;
            let rows = compare_methods(
                &reports.iter().map(|r| (r.summary.clone(), r.timing)).collect::<Vec<_>>(),
                None,
            )?;
            print_rows(&rows);
        }
        Command::Sweep {
            spec,
            axis,
            values,
            methods,
            out,
        } => {
            let mut spec = load_spec(&spec)?;
            spec.placer.execution = exec;
            let root = out.unwrap_or_else(|| spec.output_dir.clone());
            let methods = methods.unwrap_or_else(|| vec![spec.method]);
            let mut all = Vec::new();
            for m in methods {
                let mut s = spec.clone();
                s.method = m;
                s.sweep = Some(Sweep {
                    axis,
                    values: values.clone(),
                });
                s.output_dir = root.join(m.name());
                all.extend(run_experiment(&s, exec)?.into_iter().map(|r| (r.summary, r.timing)));
            }
            let rows = compare_methods(&all, None)?;
            print_rows(&rows);
            io::write_csv(&root.join("comparison.csv"), &experiment::without_timing(rows))?;
        }
        Command::Compare { reports, baseline, out } => {
            let mut dirs = Vec::new();
            for r in &reports {
                summaries_under(r, &mut dirs)?;
            }
            if dirs.is_empty() {
                bail!("no reports found");
            }
            let loaded = dirs
                .iter()
                .map(|d| read_report(d))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = compare_methods(&loaded, baseline)?;
            if let Some(out) = out {
                io::write_csv(&out, &rows)?;
            }
            print_rows(&rows);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
