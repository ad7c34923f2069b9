use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lvo_core::data::{load_depth_png, load_rgb, save_rgb};
use lvo_core::evalkit::{evaluate_sequence, flow_to_color, load_flow, plot_trajectory, read_trajectory, save_flow};
use lvo_core::selftest::{self, Fault};
use lvo_core::{run, DepthMap, RunConfig, Trajectory};

#[derive(Parser)]
#[command(name = "lvo", version, about = "Depth-guided LiDAR-visual odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the loss log and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
        /// Override the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on whole sequences.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated sequence ids; defaults to the configured evaluation set.
        #[arg(long, value_delimiter = ',')]
        sequences: Vec<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Estimate the relative pose between two frames.
    Infer(InferArgs),
    /// Render a flow field or trajectories.
    Plot(PlotArgs),
    /// Run the built-in oracle suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// RGB images of the first and second frame.
    #[arg(long, num_args = 2, value_names = ["A", "B"], required = true)]
    pair: Vec<PathBuf>,
    /// 16-bit depth PNGs (metres × 256, 0 = missing) for both frames; sparse
    /// maps are completed with the configured backend.
    #[arg(long, num_args = 2, value_names = ["DEPTH_A", "DEPTH_B"])]
    depth: Vec<PathBuf>,
    /// Directory for the finest-level flow (`flow.flo`, `flow.png`).
    #[arg(long)]
    flow_out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("what").required(true).args(["flow", "trajectory"])))]
struct PlotArgs {
    /// Flow file in `.flo` format.
    #[arg(long)]
    flow: Option<PathBuf>,
    /// Ground-truth trajectory in KITTI pose format.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Predicted trajectories as NAME=PATH.
    #[arg(long = "pred")]
    preds: Vec<String>,
    /// Flow magnitude rendered at full saturation.
    #[arg(long, default_value_t = 10.0)]
    max_magnitude: f64,
    /// Segment lengths in metres for the error table.
    #[arg(long, value_delimiter = ',', default_values_t = lvo_core::evalkit::SEGMENT_LENGTHS.to_vec())]
    lengths: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    PermuteCost,
}

fn load_config(path: &Path, output: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(dir) = output {
        cfg.output_dir = dir;
    }
    Ok(cfg)
}

fn train(config: &Path, iterations: Option<usize>, output: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config, output)?;
    if let Some(n) = iterations {
        cfg.optimizer.iterations = n;
    }
    let outcome = run::train(&cfg, |e| println!("iter {:>6}  loss {:>12.6}  lr {:.3e}", e.iteration, e.loss, e.learning_rate))?;
    println!("log: {}", outcome.log_path.display());
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

fn evaluate(config: &Path, checkpoint: &Path, sequences: &[String], output: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, output)?;
    let outcome = run::evaluate(&cfg, checkpoint, sequences)?;
    print!("{}", std::fs::read_to_string(&outcome.results_path)?);
    println!("results: {}", outcome.results_path.display());
    Ok(())
}

fn infer(args: &InferArgs) -> Result<()> {
    let cfg = load_config(&args.config, None)?;
    let (model, store) = run::load_model(&cfg, &args.checkpoint)?;
    let rgb_a = load_rgb(&args.pair[0])?;
    let rgb_b = load_rgb(&args.pair[1])?;
    let (h, w) = (rgb_a.shape()[1], rgb_a.shape()[2]);
    let (da, db) = if args.depth.is_empty() {
        if cfg.model.use_depth {
            bail!("this model consumes depth; pass --depth A B");
        }
        let ones = DepthMap::from_raw(w, h, vec![1.0; w * h])?;
        (ones.clone(), ones)
    } else {
        (load_depth_png(&args.depth[0])?, load_depth_png(&args.depth[1])?)
    };
    let inf = run::infer_pair(&cfg, &model, &store, (&rgb_a, &rgb_b), (&da, &db))?;
    let p = inf.fused;
    let [qw, qx, qy, qz] = p.q();
    let [tx, ty, tz] = p.t();
    println!("t {tx:.6} {ty:.6} {tz:.6}");
    println!("q {qw:.8} {qx:.8} {qy:.8} {qz:.8}");
    for e in &inf.estimates {
        let t = e.pose.t();
        println!("level {} t {:.6} {:.6} {:.6} confidence_logit {:.6}", e.level, t[0], t[1], t[2], e.confidence_logit);
    }
    if let Some(dir) = &args.flow_out {
        std::fs::create_dir_all(dir)?;
        let finest = inf.flows.iter().find(|f| f.level == 0).context("no finest-level flow")?;
        save_flow(finest, &dir.join("flow.flo"))?;
        save_rgb(&flow_to_color(finest, 10.0)?, &dir.join("flow.png"))?;
        println!("flow: {}", dir.display());
    }
    Ok(())
}

fn plot(args: &PlotArgs) -> Result<()> {
    if let Some(flow) = &args.flow {
        let f = load_flow(flow, 0)?;
        save_rgb(&flow_to_color(&f, args.max_magnitude)?, &args.out)?;
        println!("wrote {}", args.out.display());
        return Ok(());
    }
    let gt_path = args.trajectory.as_ref().expect("clap enforces one of flow/trajectory");
    let gt = read_trajectory(gt_path)?;
    let mut preds: Vec<(String, Trajectory)> = Vec::new();
    let mut results = Vec::new();
    for arg in &args.preds {
        let (name, path) = arg.split_once('=').with_context(|| format!("--pred expects NAME=PATH, got {arg:?}"))?;
        let traj = read_trajectory(Path::new(path))?;
        results.push(evaluate_sequence(name, &gt, &traj, &args.lengths)?);
        preds.push((name.to_string(), traj));
    }
    plot_trajectory(&gt, &preds, &results, &args.out)?;
    println!("wrote {} and {}", args.out.display(), args.out.with_extension("txt").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, iterations, output } => train(config, *iterations, output.clone()),
        Command::Evaluate {
            config,
            checkpoint,
            sequences,
            output,
        } => evaluate(config, checkpoint, sequences, output.clone()),
        Command::Infer(args) => infer(args),
        Command::Plot(args) => plot(args),
        Command::Selftest { seed, inject_fault } => {
            let fault = match inject_fault {
                Some(FaultArg::PermuteCost) => Fault::PermuteCostChannels,
                None => Fault::None,
            };
            let report = selftest::run(*seed, fault);
            print!("{}", report.table());
            return if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(2) };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
