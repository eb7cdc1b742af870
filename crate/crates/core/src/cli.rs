//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cka_probe::{analyze_cka, model_from_checkpoint, CkaSettings};
use crate::error::{IoContext, MesaError, Result};
use crate::finetune_eval::{evaluate_depth, evaluate_ood, EvalConfig, ScalingMode};
use crate::networks::{Checkpoint, Stage};
use crate::pipeline::{
    checkpoint_file, execute_stage, resolve_output, run_ablation, run_pipeline, DatasetSpec, ExperimentConfig, Inputs, RunLock,
    SyntheticCorpus, EVAL_CSV, EVAL_FILE, OOD_CSV, OOD_FILE,
};
use crate::supervised_pretrain::NoiseSpec;

#[derive(Parser, Debug)]
#[command(name = "mesa", version, about = "Masked, geometric and supervised pre-training for monocular depth")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the configured stage list with resumable stage caching.
    Run(ConfigArgs),
    /// Masked pre-training on the training frames.
    PretrainMp(StageArgs),
    /// Geometric pre-training on training frame pairs.
    PretrainGp(StageArgs),
    /// Joint geometric and pseudo-depth supervised pre-training.
    PretrainGpSp(StageArgs),
    /// Supervised fine-tuning, then evaluation on `data.test` when configured.
    Finetune(StageArgs),
    /// Score a checkpoint on a dataset directory.
    Evaluate(EvaluateArgs),
    /// Layer-wise CKA between two checkpoints.
    AnalyzeCka(CkaArgs),
    /// Fine-tune every configured variant under every seed and tabulate metrics.
    Ablate(ConfigArgs),
    /// Render a synthetic corpus to disk.
    GenScenes(GenArgs),
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Args, Debug)]
pub struct StageArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint file or stage directory to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output directory; defaults to `<output>/<stage>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Load checkpoints whose architecture fingerprint differs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Boundary and planarity metrics; the dataset must ship `ood_%05d.json` files.
    #[arg(long)]
    pub ood: bool,
    /// Per-image median scaling, for scale-ambiguous checkpoints.
    #[arg(long)]
    pub median: bool,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CkaArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Dataset directory; a synthetic corpus is rendered when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Side length of the synthetic images.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 128)]
    pub images: usize,
    #[arg(long, default_value_t = 64)]
    pub tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "cka")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub scenes: usize,
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Log-normal sigma of the oracle pseudo-depth.
    #[arg(long, default_value_t = 0.05)]
    pub noise_sigma: f64,
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg.seeded(cfg.seed))
}

fn run_stage(stage: Stage, args: &StageArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let out = match &args.out {
        Some(o) => resolve_output(o),
        None => cfg.output_dir().join(stage.as_str()),
    };
    let _lock = RunLock::acquire(&out)?;
    let init = args.init.as_deref().map(|p| Checkpoint::load(&checkpoint_file(p))).transpose()?;
    let inputs = Inputs::load(&cfg)?;
    let art = execute_stage(stage, &cfg, &inputs, init, &out, args.force)?;
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(crate::pipeline::SUMMARY_FILE)).at(&out)?)?;
    print_json(&serde_json::json!({
        "stage": stage,
        "chain": art.checkpoint.meta.chain,
        "dir": out,
        "summary": summary,
    }))
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&checkpoint_file(&args.ckpt))?;
    let model = model_from_checkpoint(&ck)?;
    let ds = DatasetSpec::Dir { dir: args.dataset.clone() }.load()?;
    let cfg = EvalConfig { scaling: if args.median { ScalingMode::Median } else { ScalingMode::None }, ..EvalConfig::default() };
    let out = resolve_output(&args.out);
    fs::create_dir_all(&out).at(&out)?;
    if args.ood {
        let ann = ds.ood.as_ref().ok_or_else(|| MesaError::InvalidInput(format!("{} has no ood_%05d.json annotations", args.dataset.display())))?;
        let report = evaluate_ood(&model, &ds.sequences, ann, &cfg)?;
        report.write_json(&out.join(OOD_FILE))?;
        fs::write(out.join(OOD_CSV), report.to_csv()).at(&out)?;
        print_json(&serde_json::to_value(report.aggregate)?)
    } else {
        let report = evaluate_depth(&model, &ds.sequences, &cfg)?;
        report.write_json(&out.join(EVAL_FILE))?;
        fs::write(out.join(EVAL_CSV), report.to_csv()).at(&out)?;
        print_json(&serde_json::to_value(report.aggregate)?)
    }
}

fn analyze(args: &CkaArgs) -> Result<()> {
    let a = Checkpoint::load(&checkpoint_file(&args.a))?;
    let b = Checkpoint::load(&checkpoint_file(&args.b))?;
    let ds = match &args.dataset {
        Some(d) => DatasetSpec::Dir { dir: d.clone() }.load()?,
        None => {
            let corpus = SyntheticCorpus { scenes: args.images.div_ceil(2), frames: 2, width: args.size, height: args.size, seed: args.seed };
            DatasetSpec::Synthetic { synthetic: corpus }.load()?
        }
    };
    let images: Vec<(String, &crate::data::Image)> = ds
        .sequences
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| seq.frames().iter().enumerate().map(move |(f, img)| (format!("s{s:03}_f{f:05}"), img)))
        .collect();
    let settings = CkaSettings { n_images: args.images, tokens_per_image: args.tokens, seed: args.seed };
    let report = analyze_cka(&a, &b, &images, &settings, &resolve_output(&args.out))?;
    print_json(&serde_json::json!({
        "diagonal": report.diagonal,
        "first_row": report.first_row,
        "u_shape": report.u_shape,
        "files": report.files,
    }))
}

fn gen_scenes(args: &GenArgs) -> Result<()> {
    let corpus = SyntheticCorpus { scenes: args.scenes, frames: args.frames, width: args.size, height: args.size, seed: args.seed };
    let noise = NoiseSpec { sigma: args.noise_sigma, seed: args.seed, ..NoiseSpec::default() };
    let out = resolve_output(&args.out);
    let dirs = corpus.write(&out, &noise)?;
    print_json(&serde_json::json!({ "dir": out, "sequences": dirs.len(), "frames": corpus.frame_count() }))
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let run = run_pipeline(&cfg)?;
            print_json(&serde_json::json!({
                "output": cfg.output_dir(),
                "executed": run.executed,
                "reused": run.reused,
                "chain": run.last.map(|l| l.checkpoint.meta.chain),
            }))
        }
        Command::PretrainMp(a) => run_stage(Stage::Mp, &a),
        Command::PretrainGp(a) => run_stage(Stage::Gp, &a),
        Command::PretrainGpSp(a) => run_stage(Stage::GpSp, &a),
        Command::Finetune(a) => run_stage(Stage::Finetune, &a),
        Command::Evaluate(a) => evaluate(&a),
        Command::AnalyzeCka(a) => analyze(&a),
        Command::Ablate(a) => {
            let report = run_ablation(&ExperimentConfig::load(&a.config)?)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::GenScenes(a) => gen_scenes(&a),
    }
}

/// Parses `argv`, runs the command, and returns the process exit code:
/// 0 on success, 2 for usage errors, 1 for failures (one JSON line on stderr).
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            1
        }
    }
}
