//! Flag definitions and `--config` file expansion.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use ysnd_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "ysnd",
    version,
    about = "Train, sample, evaluate, curate and refine video/text-conditioned audio latents",
    args_override_self = true
)]
pub struct Cli {
    /// key=value file of flags for the subcommand; command-line flags win
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run curriculum stages on the synthetic paired set
    Train(TrainArgs),
    /// Draw one latent from a checkpoint
    Sample(SampleArgs),
    /// Score generated latents against references
    Eval(EvalArgs),
    /// Filter and cut a clip manifest
    Pipeline(PipelineArgs),
    /// Reward-gated resampling of a coarse latent
    Refine(RefineArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Stage1,
    Stage2,
    Stage3,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Stage1 => "stage1",
            Preset::Stage2 => "stage2",
            Preset::Stage3 => "stage3",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimPreset {
    Toy,
    Paper,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Stage list and step counts
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    /// Comma-separated stage ids to run from the preset (default: all)
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stages: Vec<u8>,
    /// Steps per stage, overriding the preset
    #[arg(long)]
    pub steps: Option<u64>,
    /// Trainer checkpoint to continue from
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR", default_value = "runs/train")]
    pub out_dir: PathBuf,
    /// Synthetic paired clips
    #[arg(long, default_value_t = 16)]
    pub pairs: usize,
    /// Also write the synthetic set as `<id>.ysnd` files here
    #[arg(long, value_name = "DIR")]
    pub export_data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OptimPreset::Toy)]
    pub optimizer: OptimPreset,
    /// Overrides the optimizer preset
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides the optimizer preset
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Overrides the optimizer preset
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct CondArgs {
    /// Prompt text, or a .ysnd file with a `text` record
    #[arg(long)]
    pub text: Option<String>,
    /// Clip id, or a .ysnd file with a `video` record
    #[arg(long)]
    pub video: Option<String>,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 64)]
    pub nfe: usize,
    /// Sway coefficient in [-1, 2/(pi-2)]
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    pub sway: f64,
    #[arg(long, default_value_t = 2.0)]
    pub guidance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Output .ysnd file with `latent`, `envelope` (and `video`) records
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cond: CondArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub gen: PathBuf,
    #[arg(long = "ref", value_name = "DIR")]
    pub reference: PathBuf,
    /// Emit JSON instead of CSV
    #[arg(long)]
    pub json: bool,
    /// Report file (default: stdout)
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Write `<id>.csv` envelope tables (time,audio_energy,video_energy) here
    #[arg(long, value_name = "DIR")]
    pub plot: Option<PathBuf>,
    /// Latent frames per second
    #[arg(long, default_value_t = 10.0)]
    pub frame_rate: f64,
    /// Peak matching window in seconds
    #[arg(long, default_value_t = 0.1)]
    pub window: f64,
    /// Peak threshold relative to the envelope maximum
    #[arg(long, default_value_t = 0.3)]
    pub threshold: f64,
    /// Minimum peak separation in seconds
    #[arg(long, default_value_t = 0.2)]
    pub min_separation: f64,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Output manifest
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Drop report (default: stdout)
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub min_av: f64,
    #[arg(long, default_value_t = 0.3)]
    pub min_sem: f64,
    /// Keep clips flagged as speech
    #[arg(long)]
    pub keep_speech: bool,
    /// Keep clips flagged as background music
    #[arg(long)]
    pub keep_bgm: bool,
    /// Directory of `<clip_id>.ysnd` files (`latent`, `video`) used to score
    /// clips that have no alignment score
    #[arg(long, value_name = "DIR")]
    pub media_dir: Option<PathBuf>,
    /// Latent frames per second
    #[arg(long, default_value_t = 10.0)]
    pub frame_rate: f64,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// .ysnd file with a `latent` record
    #[arg(long, value_name = "PATH")]
    pub coarse: PathBuf,
    /// Candidates to generate
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Trace file (default: stdout)
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    /// Emit the trace as JSON instead of CSV
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub cond: CondArgs,
    #[arg(long, default_value_t = 16)]
    pub nfe: usize,
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    pub sway: f64,
    #[arg(long, default_value_t = 2.0)]
    pub guidance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Expands `--config <path>` into flags placed right after the subcommand
/// name, so flags given on the command line override them.
///
/// The file holds one `key=value` per line, `key` being a flag name of the
/// subcommand without dashes; `#` starts a comment. Switch flags take
/// `true` or `false`.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        if s == "--config" {
            let p = it.next().ok_or_else(|| Error::Config("--config needs a path".into()))?;
            path = Some(PathBuf::from(p));
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let sub_pos = rest
        .iter()
        .position(|a| {
            let s = a.to_string_lossy();
            ["train", "sample", "eval", "pipeline", "refine"].contains(&s.as_ref())
        })
        .ok_or_else(|| Error::Config("--config needs a subcommand".into()))?;
    let sub = rest[sub_pos].to_string_lossy().into_owned();
    let cmd = Cli::command();
    let sc = cmd.find_subcommand(&sub).expect("known subcommand");
    let mut extra: Vec<OsString> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        let arg = sc
            .get_arguments()
            .find(|a| a.get_long() == Some(k.as_str()))
            .ok_or_else(|| Error::Config(format!("{}:{}: unknown key {k:?} for {sub}", path.display(), n + 1)))?;
        if arg.get_action().takes_values() {
            extra.push(format!("--{k}").into());
            extra.push(v.into());
        } else {
            match v {
                "true" => extra.push(format!("--{k}").into()),
                "false" => {}
                _ => {
                    return Err(Error::Config(format!(
                        "{}:{}: {k} takes true or false",
                        path.display(),
                        n + 1
                    )))
                }
            }
        }
    }
    let tail = rest.split_off(sub_pos + 1);
    rest.extend(extra);
    rest.extend(tail);
    Ok(rest)
}
