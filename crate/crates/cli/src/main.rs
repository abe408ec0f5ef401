//! `genforge`: phantoms → preprocessing → training → sampling → metrics,
//! plus the reader-study service and the gradient-check suite.
//!
//! Failures print `{"error": {"kind", "message"}}` on stderr and exit 1;
//! usage errors exit 2.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "genforge", version, about = "Desk-scale generative models for grayscale images")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate synthetic brain-like phantoms.
    Phantom(PhantomArgs),
    /// Clip each image at a percentile and scale it to [0, 1].
    Preprocess(PreprocessArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Draw images from a trained model.
    Sample(SampleArgs),
    /// Encode and decode images with a trained VAE.
    Reconstruct(ReconstructArgs),
    /// Compute the sample-set metrics.
    Evaluate(EvaluateArgs),
    /// Run the blinded reader-study HTTP service.
    StudyServe(ServeArgs),
    /// Finite-difference checks of every differentiable operation and loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
struct PhantomArgs {
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// `.imgset` file, or a directory of PGM files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = genforge::data::DEFAULT_CLIP_PERCENTILE)]
    percentile: f64,
    /// Treat the input as consecutive volumes of this many slices and trim
    /// each one before clipping.
    #[arg(long)]
    volume_depth: Option<usize>,
    #[arg(long, default_value_t = genforge::data::DEFAULT_DISCARD_TOP)]
    discard_top: usize,
    #[arg(long, default_value_t = genforge::data::DEFAULT_DISCARD_BOTTOM)]
    discard_bottom: usize,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "vanilla-vae")]
    arch: String,
    /// Output directory for the checkpoint, log and config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    lambda_pix: Option<f64>,
    #[arg(long)]
    perceptual_weight: Option<f64>,
    /// Hinge margin of the introspective VAE.
    #[arg(long)]
    margin: Option<f64>,
    /// Also hinge the KL of reconstructions (introspective VAE).
    #[arg(long)]
    hinge_reconstructions: bool,
    /// Expected image side; defaults to the data's.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug, Serialize)]
struct SampleArgs {
    /// Run directory or checkpoint manifest.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ReconstructArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Decode a posterior draw instead of the posterior mean.
    #[arg(long)]
    stochastic: bool,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    originals: PathBuf,
    /// Reconstructions paired image by image with the originals.
    #[arg(long)]
    reconstructions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ServeArgs {
    #[arg(long, env = genforge_study_server::PORT_ENV, default_value_t = genforge_study_server::DEFAULT_PORT)]
    port: u16,
    #[arg(long, env = genforge_study_server::DATA_DIR_ENV, default_value = genforge_study_server::DEFAULT_DATA_DIR)]
    data_dir: PathBuf,
    /// Directory of static UI files.
    #[arg(long, env = genforge_study_server::UI_DIR_ENV)]
    ui_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = genforge::models::gradsuite::DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = genforge::models::gradsuite::DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Also write the results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
