//! The `lucid` command-line tool.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Entries;
use crate::error::{CliResult, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "lucid", version, about = "Class-controlled DeepDream for images and video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Hallucinate a single P6 image.
    Dream {
        /// Input image.
        #[arg(long)]
        input: PathBuf,
        /// Manifest path; defaults to the output path with a `.json` extension.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Hallucinate a numbered frame sequence with temporal consistency.
    DreamVideo {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Inspect or synthesize `.flo` files.
    Flow {
        #[command(subcommand)]
        command: FlowCommand,
    },
    /// Write a small random network description and weights file.
    InitWeights {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        conv1: usize,
        #[arg(long, default_value_t = 8)]
        conv2: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
pub enum FlowCommand {
    /// Print dimensions and u/v statistics.
    Inspect { file: PathBuf },
    /// Write exact forward/backward pairs for an analytic motion.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        /// Per-frame translation (pixels).
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        dx: f32,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        dy: f32,
        /// Per-frame rotation (radians).
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        radians: f32,
        /// Number of frames to cover.
        #[arg(long, default_value_t = 2)]
        frames: usize,
        /// Largest frame offset to write pairs for.
        #[arg(long, default_value_t = 1)]
        max_offset: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Translation,
    Rotation,
}

/// Flags shared by the dreaming commands; every one mirrors a config key.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long = "class")]
    pub class: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub gamma: Option<String>,
    #[arg(long)]
    pub delta: Option<String>,
    /// Comma-separated long-term offsets.
    #[arg(long)]
    pub j: Option<String>,
    #[arg(long)]
    pub k_base: Option<String>,
    #[arg(long)]
    pub k_over: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub shot_threshold: Option<String>,
    #[arg(long)]
    pub disagreement_ratio: Option<String>,
    #[arg(long)]
    pub disagreement_offset: Option<String>,
    #[arg(long)]
    pub boundary_ratio: Option<String>,
    #[arg(long)]
    pub boundary_offset: Option<String>,
    #[arg(long)]
    pub mark_out_of_bounds: Option<String>,
    #[arg(long)]
    pub trail_masked: Option<String>,
    #[arg(long)]
    pub origins: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub init: Option<String>,
    /// Network description (TOML).
    #[arg(long)]
    pub network: Option<String>,
    /// Weights file.
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub frames: Option<String>,
    #[arg(long)]
    pub flows: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
}

impl RunArgs {
    pub fn entries(&self) -> Entries {
        let fields = [
            ("preset", &self.preset),
            ("class", &self.class),
            ("seed", &self.seed),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("delta", &self.delta),
            ("j", &self.j),
            ("k_base", &self.k_base),
            ("k_over", &self.k_over),
            ("lr", &self.lr),
            ("shot_threshold", &self.shot_threshold),
            ("disagreement_ratio", &self.disagreement_ratio),
            ("disagreement_offset", &self.disagreement_offset),
            ("boundary_ratio", &self.boundary_ratio),
            ("boundary_offset", &self.boundary_offset),
            ("mark_out_of_bounds", &self.mark_out_of_bounds),
            ("trail_masked", &self.trail_masked),
            ("origins", &self.origins),
            ("steps", &self.steps),
            ("init", &self.init),
            ("network", &self.network),
            ("weights", &self.weights),
            ("frames", &self.frames),
            ("flows", &self.flows),
            ("out", &self.out),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Dream {
            input,
            manifest,
            run,
        } => commands::dream(&input, manifest.as_deref(), &run),
        Command::DreamVideo { run } => commands::dream_video(&run),
        Command::Flow { command } => match command {
            FlowCommand::Inspect { file } => commands::flow_inspect(&file),
            FlowCommand::Synth {
                kind,
                width,
                height,
                dx,
                dy,
                radians,
                frames,
                max_offset,
                out,
            } => {
                let motion = match kind {
                    SynthKind::Translation => lucid_core::SynthFlow::Translation { dx, dy },
                    SynthKind::Rotation => lucid_core::SynthFlow::Rotation { radians },
                };
                commands::flow_synth(motion, height, width, frames, max_offset, &out)
            }
        },
        Command::InitWeights {
            spec,
            weights,
            size,
            conv1,
            conv2,
            classes,
            seed,
        } => commands::init_weights(&spec, &weights, size, conv1, conv2, classes, seed),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
