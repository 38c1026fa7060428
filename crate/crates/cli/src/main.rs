use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use convfocus::harness::{self, EvaluateArgs, PipelineConfig, SceneManifest};
use convfocus::{TestCase, TrackerConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "convfocus",
    version,
    about = "Steer a wearable array toward a tracked talker"
)]
struct Cli {
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Beamform a multichannel recording toward the target.
    Enhance(PipelineArgs),
    /// Score an enhanced file against a reference over the selected segments.
    Evaluate(EvalCli),
    /// Render a simulated scene from a manifest.
    Simulate(SimulateCli),
    /// Link per-frame head detections into labeled tracks.
    Track(TrackCli),
    /// Inspect or convert ATF sets.
    #[command(subcommand)]
    Atf(AtfCmd),
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON pipeline config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    atf_path: Option<PathBuf>,
    #[arg(long)]
    frame_len: Option<usize>,
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long)]
    loading: Option<f64>,
    #[arg(long)]
    ref_channel: Option<usize>,
    #[arg(long)]
    target_id: Option<String>,
    #[arg(long)]
    wearer_id: Option<String>,
    #[arg(long)]
    pose_path: Option<PathBuf>,
    #[arg(long)]
    va_path: Option<PathBuf>,
    #[arg(long)]
    input_path: Option<PathBuf>,
    #[arg(long)]
    output_path: Option<PathBuf>,
    #[arg(long)]
    speed_of_sound: Option<f64>,
    /// Device origin relative to the tracked marker, as x,y,z meters.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    marker_offset: Option<Vec<f64>>,
    #[arg(long)]
    bypass: bool,
}

impl PipelineArgs {
    fn build(self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => {
                PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?
            }
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
            (opt $($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = Some(v); })* };
        }
        set!(frame_len, hop, loading, ref_channel, speed_of_sound);
        set!(opt data_root, atf_path, target_id, wearer_id, pose_path, va_path, input_path, output_path);
        if let Some(m) = self.marker_offset {
            c.marker_offset = [m[0], m[1], m[2]];
        }
        c.bypass |= self.bypass;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct EvalCli {
    #[arg(long)]
    enhanced: PathBuf,
    /// Close-talk recording or clean target stem.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = 0)]
    reference_channel: usize,
    /// Multichannel array recording; `--ref-channel` is the raw baseline.
    #[arg(long)]
    mixture: PathBuf,
    #[arg(long, default_value_t = 0)]
    ref_channel: usize,
    #[arg(long)]
    va_path: PathBuf,
    #[arg(long)]
    target_id: String,
    #[arg(long)]
    wearer_id: String,
    #[arg(long, value_parser = parse_case, default_value = "noise")]
    case: TestCase,
    /// Coarse delay of the reference relative to the mixture, in samples.
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    coarse_offset: i64,
    #[arg(long, default_value_t = 2400)]
    max_lag: usize,
}

fn parse_case(s: &str) -> std::result::Result<TestCase, String> {
    match s {
        "noise" => Ok(TestCase::Noise),
        "noise_and_interferer" | "noise-and-interferer" => Ok(TestCase::NoiseAndInterferer),
        _ => Err(format!("unknown case `{s}` (noise | noise_and_interferer)")),
    }
}

#[derive(Args)]
struct SimulateCli {
    /// Scene manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    dir: PathBuf,
    /// Overrides the manifest seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrackCli {
    /// Detection JSON lines.
    #[arg(long)]
    detections: PathBuf,
    /// Face box JSON lines.
    #[arg(long)]
    faces: Option<PathBuf>,
    /// Per-frame motion JSON lines.
    #[arg(long)]
    motions: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_life: Option<u32>,
    #[arg(long)]
    min_track_len: Option<usize>,
}

#[derive(Subcommand)]
enum AtfCmd {
    /// Summarize an ATF file.
    Info { path: PathBuf },
    /// Convert between binary and `.json` forms.
    Convert { input: PathBuf, output: PathBuf },
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            harness::write_json(p, value).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, value)?;
            writeln!(stdout)?;
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match cli.cmd {
        Command::Enhance(a) => emit(&harness::enhance(&a.build()?)?, out),
        Command::Evaluate(a) => {
            let args = EvaluateArgs {
                enhanced: a.enhanced,
                reference: a.reference,
                reference_channel: a.reference_channel,
                mixture: a.mixture,
                ref_channel: a.ref_channel,
                va_path: a.va_path,
                target_id: a.target_id,
                wearer_id: a.wearer_id,
                case: a.case,
                coarse_offset: a.coarse_offset,
                max_lag: a.max_lag,
            };
            emit(&harness::evaluate(&args)?, out)
        }
        Command::Simulate(a) => {
            let mut m = SceneManifest::load(&a.manifest)
                .with_context(|| format!("loading {}", a.manifest.display()))?;
            if let Some(s) = a.seed {
                m.seed = s;
            }
            emit(&harness::simulate(&m, &a.dir)?, out)
        }
        Command::Track(a) => {
            let mut cfg = TrackerConfig::default();
            if let Some(v) = a.threshold {
                cfg.threshold_t = v;
            }
            if let Some(v) = a.alpha {
                cfg.alpha = v;
            }
            if let Some(v) = a.max_life {
                cfg.max_life = v;
            }
            if let Some(v) = a.min_track_len {
                cfg.min_track_len = v;
            }
            let tracks = harness::track(
                &a.detections,
                a.faces.as_deref(),
                a.motions.as_deref(),
                &cfg,
            )?;
            emit(&tracks, out)
        }
        Command::Atf(AtfCmd::Info { path }) => {
            emit(&harness::atf_info(&harness::load_atf_any(&path)?), out)
        }
        Command::Atf(AtfCmd::Convert { input, output }) => {
            emit(&harness::atf_convert(&input, &output)?, out)
        }
    }
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
