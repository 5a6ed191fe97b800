//! `rope2d` command-line tool.
//!
//! Exit codes: 0 success, 1 property failure, 2 usage, 3 I/O, 4 numeric
//! divergence.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "rope2d",
    version,
    about = "2D rotary position embeddings: tables, property checks, analyses and a toy trainer"
)]
pub struct Cli {
    /// Directory for output files.
    #[arg(long, global = true, env = "ROPE2D_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,
    /// Output file format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    #[value(name = "1d")]
    OneD,
    Axial,
    Mixed,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a rotation table and the frequency set it was built from.
    Rotation(RotationArgs),
    /// Run the seeded property suite.
    Check(CheckArgs),
    /// Fourier, attention-statistics and cost analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Recover perturbed mixed frequencies from a teacher by gradient descent.
    Train(TrainArgs),
}

#[derive(Debug, Args)]
pub struct RotationArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Patch grid `WxH` (axial and mixed; optional for 1d).
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    /// Sequence length for 1d tables.
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub dhead: usize,
    /// Prepend a class token (identity rotation).
    #[arg(long)]
    pub class_token: bool,
    /// Frequency base; 10000 for 1d and 100 for axial by default.
    #[arg(long)]
    pub base: Option<f64>,
    /// Frequency-set JSON to use instead of the defaults.
    #[arg(long)]
    pub freqs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trials of the relative-position identity.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// FLOP and parameter accounting for a model config.
    Cost {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reconstruct a centred impulse from the bins a frequency set reaches.
    Fft(FftArgs),
    /// Attention distance and entropy.
    Attn(AttnArgs),
}

#[derive(Debug, Args)]
pub struct FftArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub dhead: usize,
    /// Image size S (power of two, at least 8).
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// First seed tried when drawing the mixed comparison set.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frequency-set JSON to analyse instead of the built-in sets.
    #[arg(long)]
    pub freqs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    /// Attention probabilities as a CSV matrix.
    #[arg(long, requires = "grid", conflicts_with = "config")]
    pub input: Option<PathBuf>,
    /// Grid `WxH` of the tokens in `--input`.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    /// The input's first token is a class token.
    #[arg(long)]
    pub class_token: bool,
    /// Model config; its attention is measured on random tokens.
    #[arg(long, required_unless_present = "input")]
    pub config: Option<PathBuf>,
    /// Seed of the random tokens fed to `--config`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model config; only the grid and head width are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Teacher frequency-set JSON (mixed). Defaults to the axial layout.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Teacher perturbation `channel:dx:dy`, added to that channel's pair.
    /// Repeatable.
    #[arg(long, value_parser = parse_perturb)]
    pub perturb: Vec<(usize, f64, f64)>,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random query/key draws averaged by the loss.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Standard deviation of the random queries and keys.
    #[arg(long, default_value_t = 1.0)]
    pub input_scale: f64,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("grid extents must be positive integers, got `{s}`"))
    };
    Ok((parse(w)?, parse(h)?))
}

fn parse_perturb(s: &str) -> Result<(usize, f64, f64), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || format!("expected channel:dx:dy, got `{s}`");
    if parts.len() != 3 {
        return Err(bad());
    }
    let c = parts[0].parse().map_err(|_| bad())?;
    let dx = parts[1].parse().map_err(|_| bad())?;
    let dy = parts[2].parse().map_err(|_| bad())?;
    Ok((c, dx, dy))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rope2d: {e}");
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_syntax() {
        assert_eq!(parse_grid("4x3"), Ok((4, 3)));
        assert_eq!(parse_grid("14X14"), Ok((14, 14)));
        assert!(parse_grid("4").is_err());
        assert!(parse_grid("0x3").is_err());
        assert!(parse_grid("ax3").is_err());
    }

    #[test]
    fn perturb_syntax() {
        assert_eq!(parse_perturb("0:0.3:0"), Ok((0, 0.3, 0.0)));
        assert!(parse_perturb("0:0.3").is_err());
        assert!(parse_perturb("x:1:1").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
