//! `bbmdp`: generate instances, solve, train, evaluate and verify.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use bbmdp_bench::evaluate::{self, parse_selection, run_cell, trace_jsonl, Policy, PolicySpec};
use bbmdp_bench::io::{self, NamedInstance};
use bbmdp_bench::verify::{self, Suite, VerifyOptions};
use bbmdp_core::agent::{self, checkpoint, AgentError, CurvePoint, TrainConfig};
use bbmdp_core::bnb::Limits;
use bbmdp_core::gen::{self, Family, FamilySpec};
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "bbmdp", version, about = "Branch-and-bound branching as a tree MDP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded instances and a manifest with content hashes.
    Generate {
        /// Size preset: tiny, small or paper-shape.
        #[arg(long, default_value = "small")]
        preset: String,
        /// setcover, cauctions, knapsack, indset or all.
        #[arg(long, default_value = "setcover")]
        family: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one instance file and report the tree size.
    Solve {
        instance: PathBuf,
        #[arg(long, default_value = "most-fractional")]
        branching: String,
        #[arg(long, default_value = "dfs")]
        selection: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_nodes: Option<usize>,
        /// Result JSON; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-transition JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train a value model and write its checkpoint and curves.
    Train {
        /// JSON training config; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        gradient_steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate branching policies over an instance set.
    Evaluate {
        /// Comma-separated: random, most-fractional, strong-branching,
        /// pseudocost, learned:<checkpoint>.
        #[arg(long, value_delimiter = ',', default_value = "random,most-fractional,strong-branching,pseudocost")]
        policies: Vec<String>,
        /// Directory written by `generate`.
        #[arg(long, conflicts_with_all = ["preset", "family"])]
        instances: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        family: Option<String>,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 1_000_000)]
        first_seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "dfs")]
        selection: String,
        /// Policy whose per-family geometric mean scores 100.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        max_nodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-cell transition traces.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Run invariant suites; exits nonzero if any check fails.
    Verify {
        /// identities, codec, gradients, oracle, divergence, exact, context or all.
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn families(preset: &str, family: &str) -> Result<Vec<Family>> {
    let all = gen::desk_presets();
    let set = all.get(preset).ok_or_else(|| anyhow!("unknown preset {preset:?}"))?;
    if family == "all" {
        return Ok(set.to_vec());
    }
    gen::preset_family(preset, family)
        .map(|f| vec![f])
        .ok_or_else(|| anyhow!("unknown family {family:?}; expected one of {:?} or all", Family::kinds()))
}

fn limits(max_nodes: Option<usize>) -> Limits {
    let mut l = Limits::default();
    if let Some(n) = max_nodes {
        l.max_nodes = n;
    }
    l
}

fn generate(preset: &str, family: &str, seed: u64, count: usize, out: &Path) -> Result<()> {
    let specs: Vec<FamilySpec> = families(preset, family)?
        .into_iter()
        .flat_map(|f| (seed..seed + count as u64).map(move |s| FamilySpec::new(f, s)))
        .collect();
    let manifest = io::write_set(out, &specs)?;
    println!("wrote {} instances to {}", manifest.instances.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn solve(
    path: &Path,
    branching: &str,
    selection: &str,
    seed: u64,
    max_nodes: Option<usize>,
    out: Option<&Path>,
    trace: Option<&Path>,
) -> Result<()> {
    let instance = io::load_instance(path)?;
    let inst = NamedInstance {
        name: instance.name.clone(),
        family: "unknown".into(),
        instance: Arc::new(instance),
    };
    let policy = Policy::resolve(&branching.parse::<PolicySpec>()?)?;
    let (row, episode) = run_cell(&inst, &policy, parse_selection(selection)?, seed, limits(max_nodes))?;
    let result = json!({
        "instance": row.instance,
        "policy": row.policy,
        "selection": row.selection,
        "seed": row.seed,
        "solved": row.solved,
        "objective": row.objective,
        "nodes": row.nodes,
        "steps": row.steps,
        "gap": if row.gap.is_finite() { json!(row.gap) } else { json!(null) },
    });
    match out {
        Some(p) => io::write_json(p, &result)?,
        None => println!("{}", serde_json::to_string_pretty(&result)?),
    }
    if let Some(p) = trace {
        io::write(p, &trace_jsonl(&episode))?;
    }
    eprintln!("solved in {:.3}s", row.seconds);
    Ok(())
}

fn curves_csv(curves: &[CurvePoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in curves {
        w.serialize(c)?;
    }
    w.into_inner().map_err(|e| anyhow!("{e}"))
}

fn train(config: Option<&Path>, seed: Option<u64>, gradient_steps: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(p) => io::read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = gradient_steps {
        cfg.gradient_steps = n;
    }
    io::write_json(&out.join("config.json"), &cfg)?;
    let mut log = |c: &CurvePoint| {
        eprintln!(
            "step {:>7} agent {:>9} episodes {:>6} loss {:>10} eps {:.4} val {}",
            c.gradient_step,
            c.agent_steps,
            c.episodes,
            c.mean_loss.map_or("-".into(), |l| format!("{l:.5}")),
            c.epsilon,
            c.validation_geomean.map_or("-".into(), |v| format!("{v:.1}")),
        )
    };
    let outcome = match agent::train_with(&cfg, &mut log) {
        Ok(o) => o,
        Err(AgentError::Diverged { step, detail, checkpoint }) => {
            io::write(&out.join("diverged.bin"), &checkpoint)?;
            bail!("training diverged at step {step}: {detail}; last good target network in diverged.bin");
        }
        Err(e) => return Err(e.into()),
    };
    io::write(&out.join("checkpoint.bin"), &checkpoint::encode(&outcome.checkpoint))?;
    io::write(&out.join("curves.csv"), &curves_csv(&outcome.curves)?)?;
    io::write_json(
        &out.join("summary.json"),
        &json!({
            "gradient_steps": outcome.gradient_steps,
            "agent_steps": outcome.agent_steps,
            "episodes": outcome.episodes,
            "truncated_episodes": outcome.truncated_episodes,
            "final_validation_geomean": outcome.curves.iter().rev().find_map(|c| c.validation_geomean),
        }),
    )?;
    println!("checkpoint written to {}", out.join("checkpoint.bin").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_evaluate(
    policies: &[String],
    instances: Option<&Path>,
    preset: Option<&str>,
    family: Option<&str>,
    count: usize,
    first_seed: u64,
    seeds: &[u64],
    selection: &str,
    reference: Option<&str>,
    max_nodes: Option<usize>,
    out: &Path,
    traces: Option<&Path>,
) -> Result<()> {
    let set = match instances {
        Some(dir) => io::load_set(dir)?,
        None => {
            let mut set = Vec::new();
            for f in families(preset.unwrap_or("small"), family.unwrap_or("setcover"))? {
                set.extend(io::generate_set(f, first_seed, count)?);
            }
            set
        }
    };
    if set.is_empty() {
        bail!("no instances to evaluate");
    }
    let policies = policies
        .iter()
        .map(|p| Policy::resolve(&p.parse()?))
        .collect::<Result<Vec<_>, _>>()?;
    let report = evaluate::evaluate(&policies, &set, parse_selection(selection)?, seeds, limits(max_nodes), traces)?;
    report.write(out, reference)?;
    let agg = report.aggregates(reference)?;
    println!("{}", serde_json::to_string_pretty(&agg.policies)?);
    Ok(())
}

fn run_verify(suite: &str, out: Option<&Path>, seed: u64) -> Result<bool> {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse().map_err(|e: String| anyhow!(e))?]
    };
    let opts = VerifyOptions { seed, ..VerifyOptions::default() };
    let mut all_passed = true;
    for s in suites {
        let report = verify::run(s, &opts);
        for c in &report.checks {
            println!("{} {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, s.name(), c.name, c.detail);
        }
        all_passed &= report.passed;
        if let Some(dir) = out {
            io::write_json(&dir.join(format!("{}.json", s.name())), &report)?;
        }
    }
    Ok(all_passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { preset, family, seed, count, out } => generate(preset, family, *seed, *count, out).map(|_| true),
        Command::Solve { instance, branching, selection, seed, max_nodes, out, trace } => {
            solve(instance, branching, selection, *seed, *max_nodes, out.as_deref(), trace.as_deref()).map(|_| true)
        }
        Command::Train { config, seed, gradient_steps, out } => {
            train(config.as_deref(), *seed, *gradient_steps, out).map(|_| true)
        }
        Command::Evaluate {
            policies,
            instances,
            preset,
            family,
            count,
            first_seed,
            seeds,
            selection,
            reference,
            max_nodes,
            out,
            traces,
        } => run_evaluate(
            policies,
            instances.as_deref(),
            preset.as_deref(),
            family.as_deref(),
            *count,
            *first_seed,
            seeds,
            selection,
            reference.as_deref(),
            *max_nodes,
            out,
            traces.as_deref(),
        )
        .map(|_| true),
        Command::Verify { suite, out, seed } => run_verify(suite, out.as_deref(), *seed).context("verify"),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
