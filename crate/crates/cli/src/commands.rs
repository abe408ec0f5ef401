use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use genforge::data::{clip_percentile, load_set, normalize_max, phantom_generate, save_set, trim_volume, ImageSet, Volume};
use genforge::metrics::evaluate_all;
use genforge::models::{gradsuite, train, Architecture, Hyperparams, ModelParams, TrainConfig};
use genforge_study_server::ServerConfig;
use serde_json::json;

use crate::{Cli, Command, EvaluateArgs, GradcheckArgs, PhantomArgs, PreprocessArgs, ReconstructArgs, SampleArgs, ServeArgs, TrainArgs};

pub const RUN_CONFIG: &str = "run_config.json";
pub const MODEL_FILE: &str = "model.json";
pub const LOG_FILE: &str = "training_log.jsonl";
const PROGRESS_EVERY: usize = 100;
const SMOOTHING_WINDOW: usize = 50;

#[derive(Debug)]
pub enum CliError {
    Core(genforge::Error),
    GradcheckFailed(Vec<String>),
    Runtime(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::GradcheckFailed(_) => "gradcheck_failed",
            CliError::Runtime(_) => "runtime",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::GradcheckFailed(names) => write!(f, "gradient checks failed: {}", names.join(", ")),
            CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<genforge::Error> for CliError {
    fn from(e: genforge::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

pub fn dispatch(cli: &Cli) -> CliResult {
    let out = match &cli.command {
        Command::Phantom(a) => phantom(a, cli.seed)?,
        Command::Preprocess(a) => preprocess(a)?,
        Command::Train(a) => train_cmd(a, cli.seed)?,
        Command::Sample(a) => sample(a, cli.seed)?,
        Command::Reconstruct(a) => reconstruct(a, cli.seed)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::StudyServe(a) => return serve(a, cli),
        Command::Gradcheck(a) => gradcheck(a, cli.seed)?,
    };
    if let Some(out) = out {
        write_run_config(&out, cli)?;
    }
    Ok(())
}

/// Where the config snapshot for an output goes: inside it for a
/// directory, `<stem>.run_config.json` beside it for a file.
pub fn run_config_path(out: &Path) -> PathBuf {
    if out.is_dir() || out.extension().is_none() {
        return out.join(RUN_CONFIG);
    }
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{RUN_CONFIG}"))
}

fn write_run_config(out: &Path, cli: &Cli) -> CliResult {
    let path = run_config_path(out);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let cfg = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cli.seed,
        "command": cli.command,
    });
    fs::write(path, serde_json::to_string_pretty(&cfg)? + "\n")?;
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn model_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MODEL_FILE)
    } else {
        p.to_path_buf()
    }
}

fn phantom(a: &PhantomArgs, seed: u64) -> CliResult<Option<PathBuf>> {
    let set: ImageSet<f64> = phantom_generate(a.n, a.size, seed)?;
    save_set(&a.out, &set)?;
    println!("wrote {} phantoms of {}x{} to {}", set.len(), a.size, a.size, a.out.display());
    Ok(Some(a.out.clone()))
}

fn preprocess(a: &PreprocessArgs) -> CliResult<Option<PathBuf>> {
    let input: ImageSet<f64> = load_set(&a.input)?;
    let trimmed = match a.volume_depth {
        None => input,
        Some(0) => return Err(genforge::Error::InvalidInput("volume depth must be positive".into()).into()),
        Some(depth) => {
            if !input.len().is_multiple_of(depth) {
                return Err(genforge::Error::Shape(format!(
                    "{} slices do not split into volumes of {depth}",
                    input.len()
                ))
                .into());
            }
            let mut kept: Option<ImageSet<f64>> = None;
            for v in 0..input.len() / depth {
                let idx: Vec<usize> = (v * depth..(v + 1) * depth).collect();
                let part = trim_volume(&Volume::from_slices(input.select(&idx)), a.discard_top, a.discard_bottom)?;
                match kept.as_mut() {
                    Some(k) => k.extend(&part)?,
                    None => kept = Some(part),
                }
            }
            kept.expect("at least one volume")
        }
    };
    let out = normalize_max(&clip_percentile(&trimmed, a.percentile)?)?;
    save_set(&a.out, &out)?;
    println!("wrote {} preprocessed images to {}", out.len(), a.out.display());
    Ok(Some(a.out.clone()))
}

fn hyperparams(a: &TrainArgs, arch: Architecture) -> Hyperparams {
    let mut h = Hyperparams::for_architecture(arch);
    if let Some(v) = a.steps {
        h.steps = v;
    }
    if let Some(v) = a.batch {
        h.batch_size = v;
    }
    if let Some(v) = a.latent_dim {
        h.latent_dim = v;
    }
    if let Some(v) = a.lr {
        h.lr = v;
    }
    if let Some(v) = a.width {
        h.width = v;
    }
    if let Some(v) = a.lambda_pix {
        h.lambda_pix = v;
    }
    if let Some(v) = a.perceptual_weight {
        h.perceptual_weight = v;
    }
    if let Some(v) = a.margin {
        h.m = v;
    }
    h.hinge_reconstructions |= a.hinge_reconstructions;
    h
}

fn train_cmd(a: &TrainArgs, seed: u64) -> CliResult<Option<PathBuf>> {
    let arch: Architecture = a.arch.parse()?;
    let data: ImageSet<f64> = load_set(&a.data)?;
    if let Some(s) = a.size {
        if s != data.height() || s != data.width() {
            return Err(genforge::Error::Shape(format!(
                "--size {s} but the data is {}x{}",
                data.height(),
                data.width()
            ))
            .into());
        }
    }
    let hyper = hyperparams(a, arch);
    let cfg = TrainConfig { steps: hyper.steps, batch_size: hyper.batch_size, seed: seed.wrapping_add(1) };
    let mut model = ModelParams::<f64>::build(arch, data.height(), seed, hyper)?;
    let started = Instant::now();
    let quiet = a.quiet;
    let log = train(&mut model, &data, &cfg, |r| {
        if !quiet && (r.step + 1) % PROGRESS_EVERY == 0 {
            let parts: Vec<String> = r.losses.iter().map(|(k, v)| format!("{k}={v:.5}")).collect();
            eprintln!("step {:>6}/{} {}", r.step + 1, cfg.steps, parts.join(" "));
        }
    })?;
    fs::create_dir_all(&a.out)?;
    model.save(&a.out.join(MODEL_FILE))?;
    fs::write(a.out.join(LOG_FILE), log.to_jsonl()?)?;
    println!(
        "trained {arch} for {} steps in {:.1}s ({} parameters)",
        cfg.steps,
        started.elapsed().as_secs_f64(),
        model.num_parameters()
    );
    if let Some(last) = log.records.last() {
        for key in last.losses.keys() {
            if let Some((first, end)) = log.smoothed_ends(key, SMOOTHING_WINDOW) {
                println!("  {key}: {first:.5} -> {end:.5}");
            }
        }
    }
    Ok(Some(a.out.clone()))
}

fn sample(a: &SampleArgs, seed: u64) -> CliResult<Option<PathBuf>> {
    let model = ModelParams::<f64>::load(&model_path(&a.model))?;
    let set = model.sample(a.n, seed)?;
    save_set(&a.out, &set)?;
    println!("wrote {} samples from {} to {}", set.len(), model.architecture(), a.out.display());
    Ok(Some(a.out.clone()))
}

fn reconstruct(a: &ReconstructArgs, seed: u64) -> CliResult<Option<PathBuf>> {
    let model = ModelParams::<f64>::load(&model_path(&a.model))?;
    let input: ImageSet<f64> = load_set(&a.input)?;
    let out = model.reconstruct(&input, seed, !a.stochastic)?;
    save_set(&a.out, &out)?;
    println!("wrote {} reconstructions to {}", out.len(), a.out.display());
    Ok(Some(a.out.clone()))
}

fn evaluate(a: &EvaluateArgs) -> CliResult<Option<PathBuf>> {
    let samples: ImageSet<f64> = load_set(&a.samples)?;
    let originals: ImageSet<f64> = load_set(&a.originals)?;
    let recon: Option<ImageSet<f64>> = a.reconstructions.as_ref().map(load_set).transpose()?;
    let report = evaluate_all(&samples, &originals, recon.as_ref())?;
    write_json(&a.out, &report)?;
    println!("dataset similarity  {:.6}", report.dataset_similarity);
    println!("ISD                 {:.6}", report.isd);
    println!("min ISD             {:.6}", report.min_isd);
    println!("Laplace sharpness   {:.6} ± {:.6}", report.laplace.mean, report.laplace.std);
    if let Some(r) = &report.reconstruction {
        println!("reconstruction MSE  {:.6} ± {:.6}", r.mse_mean, r.mse_std);
    }
    Ok(Some(a.out.clone()))
}

fn gradcheck(a: &GradcheckArgs, seed: u64) -> CliResult<Option<PathBuf>> {
    let started = Instant::now();
    let results = gradsuite::run(seed, a.step, a.tolerance)?;
    for r in &results {
        println!("{} {:<40} {:.3e}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.max_relative_error);
    }
    println!("{} checks in {:.2}s", results.len(), started.elapsed().as_secs_f64());
    if let Some(out) = &a.out {
        write_json(out, &json!({ "step": a.step, "tolerance": a.tolerance, "results": results }))?;
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    if !failed.is_empty() {
        return Err(CliError::GradcheckFailed(failed));
    }
    Ok(a.out.clone())
}

fn serve(a: &ServeArgs, cli: &Cli) -> CliResult {
    fs::create_dir_all(&a.data_dir)?;
    write_run_config(&a.data_dir, cli)?;
    let config = ServerConfig { port: a.port, data_dir: a.data_dir.clone(), static_dir: a.ui_dir.clone() };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(genforge_study_server::run(config)).map_err(|e| CliError::Runtime(e.to_string()))
}
