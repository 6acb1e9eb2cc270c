use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use streampoint::decoder::CachePolicy;
use streampoint::eval::DepthAlignment;
use streampoint::scenegen::Trajectory;

#[derive(Debug, Parser)]
#[command(name = "streampoint", version, about = "Streaming pointmap reconstruction toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic scenes with ground truth.
    Scenegen(ScenegenArgs),
    /// Train a model on generated scenes.
    Train(TrainArgs),
    /// Run streaming inference over one scene.
    Stream(StreamArgs),
    /// Score prediction dumps against a scene.
    Eval(EvalArgs),
    /// Time streaming inference per cache policy and sequence length.
    Bench(BenchArgs),
}

/// Options shared by every command.
#[derive(Debug, Args)]
pub struct Common {
    /// JSON file with settings; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Where to write the run manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScenegenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// `N` for N x N, or `HxW`.
    #[arg(long, value_parser = parse_resolution)]
    pub res: Option<(usize, usize)>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Let objects move between frames.
    #[arg(long)]
    pub dynamic: bool,
    /// Keep absolute scale in the metadata.
    #[arg(long)]
    pub metric: bool,
    #[arg(long)]
    pub primitives: Option<usize>,
    #[arg(long)]
    pub trajectory: Option<Trajectory>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scene directories.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub frames_min: Option<usize>,
    #[arg(long)]
    pub frames_max: Option<usize>,
    #[arg(long)]
    pub policy: Option<CachePolicy>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda_pose: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Model resolution, `N` or `HxW`.
    #[arg(long, value_parser = parse_resolution)]
    pub res: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scene directory.
    #[arg(long)]
    pub scene: PathBuf,
    /// `causal`, `window:K` or `fa`; defaults to the model's policy.
    #[arg(long)]
    pub policy: Option<CachePolicy>,
    /// Directory for per-frame prediction dumps.
    #[arg(long)]
    pub dump_pred: Option<PathBuf>,
    /// CSV of per-frame latency and token counts.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub scene: PathBuf,
    /// Directory holding prediction dumps.
    #[arg(long)]
    pub pred: PathBuf,
    /// Output path; defaults to `metrics.json` in the prediction directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub depth_align: Option<DepthAlignment>,
    /// Skip the Sim(3) fit before reconstruction metrics.
    #[arg(long)]
    pub no_align_cloud: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Benchmark these weights; otherwise a seeded initialization.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub frames: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub policies: Option<Vec<CachePolicy>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad resolution {s:?}: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolutions() {
        assert_eq!(parse_resolution("32"), Ok((32, 32)));
        assert_eq!(parse_resolution("16x24"), Ok((16, 24)));
        assert!(parse_resolution("a").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
