use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use shed::model::Variant;

mod commands;
mod viz;

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "shed", version, about = "Segment-hierarchy depth estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic indoor dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score checkpoints (or ground truth) on a dataset.
    Eval(EvalArgs),
    /// Predict a depth map for one image.
    Infer(InferArgs),
    /// Write segment overlays, a depth colormap and an edge mask.
    Viz(VizArgs),
    /// Encoder cost table for a model config.
    Flops(FlopsArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    #[arg(long, default_value_t = 4)]
    frames_per_scene: usize,
    /// HxW, both multiples of 8.
    #[arg(long, default_value = "96x96", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// key=value file with model.* and train.* keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<VariantArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Extra key=value override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to score, repeatable.
    #[arg(long)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// CSV report path; a key=value summary goes to stdout.
    #[arg(long)]
    report: PathBuf,
    /// Score the ground truth against itself.
    #[arg(long)]
    gt_as_pred: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Binary PPM input.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_depth: PathBuf,
    /// HxW of the written depth map; defaults to the input size.
    #[arg(long, value_parser = parse_any_size)]
    out_size: Option<(usize, usize)>,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    /// key=value file with model.* keys; defaults to the built-in model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Baseline::Flat)]
    baseline: Baseline,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Full,
    NoUnpool,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoUnpool => Variant::NoUnpool,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Flat,
    Hierarchical,
}

fn parse_any_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    if h == 0 || w == 0 {
        return Err(format!("size {s:?} is empty"));
    }
    Ok((h, w))
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = parse_any_size(s)?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(format!("size {h}x{w} must be a multiple of 8 on both axes"));
    }
    Ok((h, w))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Viz(a) => commands::viz(&a),
        Command::Flops(a) => commands::flops(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: bad arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
