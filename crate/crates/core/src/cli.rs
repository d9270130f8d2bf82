//! Command-line surface of the `f3rnet` binary.
//!
//! Machine-readable results go to files or standard output (JSON or CSV);
//! human summaries go to standard error. Exit codes: 0 success, 1 user
//! error, 2 numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::autodiff::{set_exec_mode, ExecMode};
use crate::error::{Error, Result};
use crate::losses::mind_loss;
use crate::metrics::evaluate_pair;
use crate::network::{Network, NetworkConfig, Variant};
use crate::optim::{
    grid_search_lambda, load_checkpoint, save_checkpoint, EvalPair, TrainConfig, TrainPair,
    Trainer,
};
use crate::stn::{warp, warp_labels};
use crate::suite;
use crate::volgrid::{
    load_field, load_labels, load_volume, normalize_intensity, save_field, save_labels,
    save_volume, synth_deformation, synth_phantom, Shape3,
};

#[derive(Parser, Debug)]
#[command(name = "f3rnet", version, about = "Deformable 3-D registration with a two-stream residual network")]
pub struct Cli {
    /// Run every kernel on the calling thread (bitwise reproducible).
    #[arg(long, global = true)]
    pub serial: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic phantom pair with ground-truth deformation.
    Synth(SynthArgs),
    /// Train a network on the pairs of a data directory.
    Train(TrainArgs),
    /// Predict the field aligning a moving volume to a fixed one.
    Register(RegisterArgs),
    /// Score a field against label masks.
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print parameter counts of the network variants.
    Params(ParamsArgs),
    /// Train one model per lambda and rank them by mean Dice.
    LambdaSearch(LambdaSearchArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    /// Volume shape as DxHxW.
    #[arg(long, value_parser = parse_shape)]
    pub shape: Shape3,
    /// Maximum displacement in voxels.
    #[arg(long)]
    pub amplitude: f64,
    /// Gaussian smoothing width of the deformation, in voxels.
    #[arg(long)]
    pub sigma: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory written by `synth`, or a directory of such directories.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Output directory for `checkpoint.{json,bin}` and `loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub out_field: PathBuf,
    #[arg(long)]
    pub out_warped: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub moving_labels: PathBuf,
    #[arg(long)]
    pub fixed_labels: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Registration wall time to record in the report.
    #[arg(long, default_value_t = 0.0)]
    pub runtime_s: f64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Only 64-bit verification is supported.
    #[arg(long, default_value = "f64")]
    pub precision: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// Variant to report; all variants when omitted.
    #[arg(long)]
    pub variant: Option<String>,
    /// Pyramid depth.
    #[arg(long = "depth", default_value_t = 4)]
    pub depth: usize,
}

#[derive(Args, Debug)]
pub struct LambdaSearchArgs {
    /// Comma-separated lambda grid.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    /// CSV output (`lambda,mean_dice,jacobian_std,folding_count,final_loss`).
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_shape(s: &str) -> std::result::Result<Shape3, String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(format!("expected DxHxW, got {s:?}"));
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| format!("invalid dimension {p:?} in {s:?}"))?;
        if *o == 0 {
            return Err(format!("dimensions must be positive, got {s:?}"));
        }
    }
    Ok(out)
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main_with_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.serial {
        set_exec_mode(ExecMode::Serial);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Register(a) => register(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Params(a) => params(a),
        Command::LambdaSearch(a) => lambda_search(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// File stems written by `synth`.
pub const SYNTH_FILES: [&str; 5] = ["moving", "moving_labels", "field_gt", "fixed", "fixed_labels"];

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let (phantom, labels) = synth_phantom(a.seed, a.shape)?;
    let field = synth_deformation(a.seed.wrapping_add(1), a.shape, a.amplitude, a.sigma)?;
    let fixed = warp(&phantom, &field)?;
    let fixed_labels = warp_labels(&labels, &field)?;
    create_dir(&a.out_dir)?;
    let d = &a.out_dir;
    save_volume(&phantom, d.join("moving"))?;
    save_labels(&labels, d.join("moving_labels"))?;
    save_field(&field, d.join("field_gt"))?;
    save_volume(&fixed, d.join("fixed"))?;
    save_labels(&fixed_labels, d.join("fixed_labels"))?;
    eprintln!(
        "synth: wrote {} volumes of shape {:?} to {} (max displacement {:.3})",
        SYNTH_FILES.len(),
        a.shape,
        d.display(),
        field.max_magnitude()
    );
    Ok(ExitCode::SUCCESS)
}

/// Loads the `synth` layout from `dir`, or from each sub-directory (sorted)
/// when `dir` itself holds no pair.
pub fn load_pairs(dir: &Path) -> Result<Vec<EvalPair>> {
    let load_one = |d: &Path| -> Result<EvalPair> {
        Ok(EvalPair {
            moving: normalize_intensity(&load_volume(d.join("moving"))?)?,
            fixed: normalize_intensity(&load_volume(d.join("fixed"))?)?,
            moving_labels: load_labels(d.join("moving_labels"))?,
            fixed_labels: load_labels(d.join("fixed_labels"))?,
        })
    };
    if dir.join("moving.json").exists() {
        return Ok(vec![load_one(dir)?]);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("moving.json").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no moving/fixed pair found in {}",
            dir.display()
        )));
    }
    subdirs.iter().map(|d| load_one(d)).collect()
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = TrainConfig::load(&a.config)?;
    let pairs: Vec<TrainPair> = load_pairs(&a.data_dir)?.iter().map(EvalPair::images).collect();
    let mut trainer = match &a.resume {
        Some(path) => {
            let (net, adam) = load_checkpoint(path)?;
            Trainer::with_state(cfg.clone(), net, adam, &pairs)?
        }
        None => Trainer::new(cfg.clone(), &pairs)?,
    };
    create_dir(&a.out)?;
    let ckpt = a.out.join("checkpoint");
    let csv_path = a.out.join("loss.csv");
    let start = trainer.iteration();
    let every = cfg.checkpoint_every;
    let result = trainer.run(|it, loss, t| {
        if (it + 1) % 10 == 0 || it + 1 == cfg.iterations {
            eprintln!("iteration {:>5}/{}  loss {loss:.6}", it + 1, cfg.iterations);
        }
        if every > 0 && (it + 1) % every == 0 {
            save_checkpoint(&t.net, &t.adam, &ckpt)?;
        }
        Ok(())
    });
    // Whatever happened, leave the last good state on disk.
    save_checkpoint(&trainer.net, &trainer.adam, &ckpt)?;
    let losses = result?;
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["iteration", "loss"]).map_err(|e| Error::Format(e.to_string()))?;
    for (k, l) in losses.iter().enumerate() {
        w.write_record([(start + k + 1).to_string(), format!("{l:e}")])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    eprintln!(
        "train: {} iterations, final loss {:.6}; checkpoint in {}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn register(a: RegisterArgs) -> Result<ExitCode> {
    let (net, _) = load_checkpoint(&a.checkpoint)?;
    let moving = normalize_intensity(&load_volume(&a.moving)?)?;
    let fixed = normalize_intensity(&load_volume(&a.fixed)?)?;
    let field = net.register(&moving, &fixed)?;
    let warped = warp(&moving, &field)?;
    save_field(&field, &a.out_field)?;
    save_volume(&warped, &a.out_warped)?;
    let cfg = crate::losses::MindConfig::default();
    eprintln!(
        "register: max |u| {:.4} voxels, MIND loss {:.6} -> {:.6}",
        field.max_magnitude(),
        mind_loss(&moving, &fixed, &cfg)?,
        mind_loss(&warped, &fixed, &cfg)?
    );
    Ok(ExitCode::SUCCESS)
}

fn evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    if !(a.runtime_s >= 0.0 && a.runtime_s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "runtime must be >= 0, got {}",
            a.runtime_s
        )));
    }
    let field = load_field(&a.field)?;
    let moving = load_labels(&a.moving_labels)?;
    let fixed = load_labels(&a.fixed_labels)?;
    if field.shape() != fixed.shape() {
        return Err(Error::Shape(format!(
            "field {:?} and labels {:?} differ",
            field.shape(),
            fixed.shape()
        )));
    }
    let mut report = evaluate_pair(&field, &moving, &fixed, fixed.spacing_mm())?;
    report.runtime_s = a.runtime_s;
    report.save(&a.report)?;
    eprintln!(
        "evaluate: mean Dice {:.4}, folds {}, std|J| {:.4}",
        report.mean_dice(),
        report.folding_count,
        report.jacobian_std
    );
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if a.precision != "f64" {
        return Err(Error::InvalidArgument(format!(
            "gradcheck needs --precision f64, got {:?}",
            a.precision
        )));
    }
    let results = suite::run_all(a.seed);
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "group,check,max_rel_error,tolerance,probes,passed");
    for r in &results {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{},{}",
            r.group, r.name, r.max_rel_error, r.tolerance, r.probes, r.passed
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    eprintln!("gradcheck: {} checks, {failed} failed", results.len());
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

/// Parameter count of every variant at pyramid depth `n`.
pub fn variant_counts(n: usize) -> Result<Vec<(Variant, usize)>> {
    Variant::ALL
        .into_iter()
        .map(|v| Ok((v, Network::build(&NetworkConfig::new(n, v, 0))?.count_parameters())))
        .collect()
}

fn params(a: ParamsArgs) -> Result<ExitCode> {
    let selected: Option<Variant> = a.variant.as_deref().map(str::parse).transpose()?;
    let counts = variant_counts(a.depth)?;
    let base = counts[0].1 as f64;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "variant,params,ratio_vs_wo_f3d");
    for (v, c) in counts {
        if selected.is_none_or(|s| s == v) {
            let _ = writeln!(out, "{v},{c},{:.4}", c as f64 / base);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn lambda_search(a: LambdaSearchArgs) -> Result<ExitCode> {
    let cfg = TrainConfig::load(&a.config)?;
    let pairs = load_pairs(&a.data_dir)?;
    let train_set: Vec<TrainPair> = pairs.iter().map(EvalPair::images).collect();
    let search = grid_search_lambda(&a.values, &cfg, &train_set, &pairs)?;
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["lambda", "mean_dice", "jacobian_std", "folding_count", "final_loss"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for r in &search.table {
        w.write_record([
            r.lambda.to_string(),
            format!("{:e}", r.mean_dice),
            format!("{:e}", r.jacobian_std),
            r.folding_count.to_string(),
            format!("{:e}", r.final_loss),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    println!("{}", serde_json::json!({ "best_lambda": search.best }));
    eprintln!("lambda-search: best lambda {}", search.best);
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_parsing() {
        assert_eq!(parse_shape("48x40x32").unwrap(), [48, 40, 32]);
        assert!(parse_shape("48x40").is_err());
        assert!(parse_shape("0x4x4").is_err());
    }
}
