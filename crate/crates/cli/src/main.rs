use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use simgraph::evaluation::{ate, read_tum, write_tum, Alignment, ASSOCIATION_TOLERANCE};
use simgraph::experiments::{emit_plot_data, run_ablation, run_pipeline, LoopMode, Scenario, Variant};
use simgraph::fusion::{write_ply, PlyFormat};
use simgraph::Error;

/// Sim(3) pose-graph backend driven by a synthetic two-view frontend.
#[derive(Debug, Parser)]
#[command(name = "simgraph", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario, build and optimize the graph, write artifacts.
    Run(RunArgs),
    /// Compute ATE between two trajectory files.
    Eval(EvalArgs),
    /// Run one or more variants over many seeds and write plot data.
    Ablate(AblateArgs),
}

/// Settings shared by `run` and `ablate`, applied over the scenario file.
#[derive(Debug, Args)]
struct Overrides {
    /// Scenario file (TOML). Built-in defaults are used when omitted.
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,
    /// Neighbour passes per view.
    #[arg(long = "N", value_name = "N")]
    neighbors: Option<usize>,
    /// Loop candidates need confidence strictly above this.
    #[arg(long = "tau-p", value_name = "TAU")]
    loop_threshold: Option<f64>,
    /// Disable loop closure entirely.
    #[arg(long)]
    no_loop_closure: bool,
    /// Trajectory alignment used for ATE.
    #[arg(long, value_name = "sim3|se3|none")]
    align: Option<Alignment>,
    /// Optimize once at the end (batch) or after every accepted loop (incremental).
    #[arg(long, value_name = "batch|incremental")]
    loop_mode: Option<LoopMode>,
}

impl Overrides {
    fn scenario(&self) -> Result<Scenario> {
        let mut s = match &self.scenario {
            Some(path) => Scenario::load(path).map_err(Error::from)?,
            None => Scenario::default(),
        };
        if let Some(n) = self.neighbors {
            s.graph.neighbors = n;
        }
        if let Some(threshold) = self.loop_threshold {
            s.graph.loop_threshold = threshold;
        }
        if self.no_loop_closure {
            s.loops.enabled = false;
        }
        if let Some(align) = self.align {
            s.evaluation.align = align;
        }
        if let Some(mode) = self.loop_mode {
            s.loops.mode = mode;
        }
        Ok(s)
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Seed for the scene and all measurement noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Chain consecutive relative poses without optimization.
    #[arg(long, conflicts_with_all = ["single_node", "variant"])]
    no_pgo: bool,
    /// One node per view with averaged pass scales.
    #[arg(long, conflicts_with = "variant")]
    single_node: bool,
    /// Pipeline variant: full, no_pgo, no_loops, single_node, no_loop_filtering.
    #[arg(long, value_name = "NAME")]
    variant: Option<Variant>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Estimated trajectory, one `timestamp tx ty tz qx qy qz qw` per line.
    #[arg(long, value_name = "PATH")]
    est: PathBuf,
    /// Reference trajectory in the same format.
    #[arg(long = "ref", value_name = "PATH")]
    reference: PathBuf,
    /// Alignment applied before computing the error.
    #[arg(long, value_name = "sim3|se3|none", default_value = "sim3")]
    align: Alignment,
    /// Maximum timestamp difference for association, seconds.
    #[arg(long, default_value_t = ASSOCIATION_TOLERANCE)]
    tolerance: f64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated variants, or `all`.
    #[arg(long, value_name = "NAMES", default_value = "all")]
    variant: String,
    /// Comma-separated seeds or half-open ranges, e.g. `0..20` or `1,4,9`.
    #[arg(long, value_name = "LIST", default_value = "0..20")]
    seeds: String,
    /// Output directory for CSV and trajectory files.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Ablate(args) => cmd_ablate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut scenario = args.overrides.scenario()?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if args.no_pgo {
        scenario.variant = Variant::NoPgo;
    } else if args.single_node {
        scenario.variant = Variant::SingleNode;
    } else if let Some(v) = args.variant {
        scenario.variant = v;
    }
    scenario.validate()?;

    let result = run_pipeline(&scenario)?;
    let out = &args.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(out, "traj_est.txt", &write_tum(&result.estimate))?;
    write(out, "traj_gt.txt", &write_tum(&result.ground_truth))?;
    write(out, "report.txt", &result.report())?;
    write(out, "metrics.txt", &result.metrics())?;
    write(out, "scenario.toml", &scenario.to_toml())?;
    if let Some(graph) = &result.graph {
        write(out, "graph.txt", &graph.dump())?;
    }
    let ply = out.join("cloud.ply");
    let file = fs::File::create(&ply).with_context(|| format!("creating {}", ply.display()))?;
    write_ply(BufWriter::new(file), &result.cloud, PlyFormat::BinaryLittleEndian).map_err(Error::from)?;

    print!("{}", result.metrics());
    Ok(())
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_trajectory(path: &Path) -> Result<simgraph::evaluation::Trajectory> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    read_tum(&text).map_err(Error::from).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let est = read_trajectory(&args.est)?;
    let reference = read_trajectory(&args.reference)?;
    let r = ate(&est, &reference, args.align, args.tolerance).map_err(Error::from)?;
    println!("ate_rmse={:.6}", r.rmse);
    println!("matched={}", r.matches.len());
    println!("align={}", args.align);
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let scenario = args.overrides.scenario()?;
    scenario.validate()?;
    let variants = parse_variants(&args.variant)?;
    let seeds = parse_seeds(&args.seeds)?;
    let mut ablations = Vec::with_capacity(variants.len());
    for v in variants {
        let a = run_ablation(&scenario, v, &seeds)?;
        println!("variant={} seeds={} median_ate={:.6} mean_ate={:.6}", v, seeds.len(), a.median_ate(), a.mean_ate());
        ablations.push(a);
    }
    emit_plot_data(&ablations, &args.out).map_err(Error::from)?;
    Ok(())
}

fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    if list == "all" {
        return Ok(Variant::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim) {
        let v: Variant = name.parse().map_err(Error::from)?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.parse().with_context(|| format!("bad seed range {part:?}"))?;
            let b: u64 = b.parse().with_context(|| format!("bad seed range {part:?}"))?;
            out.extend(a..b);
        } else {
            out.push(part.parse().with_context(|| format!("bad seed {part:?}"))?);
        }
    }
    if out.is_empty() {
        bail!("seed list {list:?} is empty");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn seed_lists_and_ranges() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("5, 1,2..4").unwrap(), vec![5, 1, 2, 3]);
        assert!(parse_seeds("3..1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn variant_lists() {
        assert_eq!(parse_variants("all").unwrap().len(), 5);
        assert_eq!(parse_variants("full,no_pgo,full").unwrap(), vec![Variant::Full, Variant::NoPgo]);
        assert!(parse_variants("fast").is_err());
    }
}
