//! Command-line surface: `verify`, `bench-attn`, `generate`, `distill-toy`, `params`.

pub mod verify;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mi2v_core::attention::{bench_ablation, AttentionKind, BenchShape, ExecStrategy};
use mi2v_core::denoiser::{parameter_count, Denoiser, DenoiserConfig, DenoiserWeights};
use mi2v_core::distill::{toy_distill_run, LossSwitches};
use mi2v_core::flow::{euler_sample_i2v, LatentSpec, LATENT_CHANNELS};
use mi2v_core::io::{emit_pgm_preview, latency_csv, tensor_io_load, tensor_io_save, RunConfig};
use mi2v_core::{random_normal, Rng, Tensor};

pub use verify::{run_verify, Fault, VerifyReport};

/// Worker threads for parallel sections; unset means one per core.
pub const THREADS_ENV: &str = "MI2V_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mi2v", version, about = "Latent image-to-video engine with hybrid attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the invariant suite and write a JSON report; exit 1 if any check fails.
    Verify(VerifyArgs),
    /// Time attention kernels over sequence lengths and write a latency CSV.
    BenchAttn(BenchArgs),
    /// Sample a latent video conditioned on a reference frame.
    Generate(GenerateArgs),
    /// Run the toy timestep distillation and write its metrics JSON.
    DistillToy(DistillArgs),
    /// Print the parameter count of a denoiser configuration.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "verify.json")]
    pub out: PathBuf,
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<Fault>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Linear,
    Softmax,
    Both,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = KindArg::Both)]
    pub kind: KindArg,
    /// `baseline`, `all`, or a `+`-joined subset of `4dc`, `ht`, `rdm`; repeatable.
    /// Without it every combination is timed.
    #[arg(long)]
    pub strategy: Vec<ExecStrategy>,
    /// Comma-separated sequence lengths; overrides the config.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Vec<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, default_value = "latency.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides `sampler.steps` from the config.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub motion: f32,
    /// Video extent as WIDTHxHEIGHTxFRAMES.
    #[arg(long, default_value = "1280x720x17")]
    pub spec: LatentSpec,
    /// Overrides `denoiser.strategy` from the config.
    #[arg(long)]
    pub strategy: Option<ExecStrategy>,
    /// Container whose `reference` entry (or sole entry) is the first-frame latent.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Weight container; freshly initialized weights from `--seed` otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value = "latent.mi2v")]
    pub out: PathBuf,
    /// Directory for one PGM preview per latent frame.
    #[arg(long)]
    pub preview: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `all` or a `+`-joined subset of `reg`, `adv`, `dm`.
    #[arg(long, default_value = "all")]
    pub losses: LossSwitches,
    /// Overrides `distill_toy.iterations` from the config.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, default_value = "distill.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Micro,
    Desk,
    Full,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

/// Applies `MI2V_THREADS` to the global worker pool.
pub fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Verify(a) => verify_cmd(a),
        Command::BenchAttn(a) => bench_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::DistillToy(a) => distill_cmd(a),
        Command::Params(a) => params_cmd(a),
    }
}

fn verify_cmd(a: VerifyArgs) -> anyhow::Result<ExitCode> {
    let report = run_verify(a.seed, a.inject_fault);
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write(&a.out, json.as_bytes())?;
    for c in &report.checks {
        println!(
            "{} {:<26} {:.3e} (tol {:.0e}) {}",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.metric,
            c.tolerance,
            c.detail
        );
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed == 0 {
        println!("all {} checks passed", report.checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{failed} of {} checks failed", report.checks.len());
        Ok(ExitCode::from(1))
    }
}

fn bench_cmd(a: BenchArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_config(a.config.as_deref())?;
    let b = &cfg.bench;
    let lengths = if a.lengths.is_empty() { b.lengths.clone() } else { a.lengths };
    let reps = a.reps.unwrap_or(b.reps);
    let shape = BenchShape {
        batch: b.batch,
        heads: b.heads,
        head_dim: b.head_dim,
    };
    let kinds = match a.kind {
        KindArg::Linear => vec![AttentionKind::Linear],
        KindArg::Softmax => vec![AttentionKind::Softmax],
        KindArg::Both => vec![AttentionKind::Linear, AttentionKind::Softmax],
    };
    let strategies = if a.strategy.is_empty() {
        ExecStrategy::combinations()
    } else {
        a.strategy
    };
    let mut rows = Vec::new();
    for kind in kinds {
        let mut rng = Rng::new(a.seed);
        for &len in &lengths {
            let r = bench_ablation(kind, &strategies, shape, len, reps, &mut rng)?;
            for row in &r {
                eprintln!(
                    "{:<8} {:<12} S={:<6} median {:>12} ns",
                    row.kind.as_str(),
                    row.strategy,
                    row.length,
                    row.median_ns
                );
            }
            rows.extend(r);
        }
    }
    write(&a.out, latency_csv(&rows).as_bytes())?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn reference_latent(a: &GenerateArgs, frame_tokens: usize) -> anyhow::Result<Tensor> {
    let Some(path) = &a.reference else {
        // Stand-in for a VAE encoding: unit-variance seeded noise.
        let mut rng = Rng::fork(a.seed, 1);
        return Ok(random_normal(&mut rng, &[frame_tokens, LATENT_CHANNELS])?);
    };
    let entries = tensor_io_load(path).with_context(|| format!("loading {}", path.display()))?;
    let t = match entries.iter().find(|(n, _)| n == "reference") {
        Some((_, t)) => t.clone(),
        None if entries.len() == 1 => entries[0].1.clone(),
        None => bail!("{} has no `reference` entry", path.display()),
    };
    if t.dims() != [frame_tokens, LATENT_CHANNELS] {
        bail!(
            "reference latent is {:?}, expected [{frame_tokens}, {LATENT_CHANNELS}]",
            t.dims()
        );
    }
    Ok(t)
}

fn generate_cmd(a: GenerateArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_config(a.config.as_deref())?;
    let mut dcfg = cfg.denoiser.clone();
    if let Some(s) = a.strategy {
        dcfg.strategy = s;
    }
    let mut sampler = cfg.sampler;
    if let Some(steps) = a.steps {
        sampler.steps = steps;
    }
    let spec = a.spec;
    let model = match &a.weights {
        Some(p) => {
            let entries = tensor_io_load(p).with_context(|| format!("loading {}", p.display()))?;
            Denoiser::new(dcfg.clone(), DenoiserWeights::from_entries(&dcfg, &entries)?)?
        }
        None => Denoiser::init(dcfg, a.seed)?,
    };
    let reference = reference_latent(&a, spec.frame_tokens())?;
    let latent = euler_sample_i2v(&model, &spec, &sampler, &reference, a.motion, a.seed)?;
    tensor_io_save(&a.out, &[("latent".to_string(), latent.clone())])
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote latent {:?} ({} steps, spec {spec}) to {}",
        latent.dims(),
        sampler.steps,
        a.out.display()
    );
    if let Some(dir) = &a.preview {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let hw = spec.frame_tokens();
        for (f, frame) in latent.data().chunks_exact(hw * LATENT_CHANNELS).enumerate() {
            let t = Tensor::new(&[hw, LATENT_CHANNELS], frame.to_vec())?;
            write(&dir.join(format!("frame_{f:03}.pgm")), &emit_pgm_preview(&t, &spec)?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn distill_cmd(a: DistillArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_config(a.config.as_deref())?;
    let mut toy = cfg.distill_toy;
    if let Some(n) = a.iterations {
        toy.iterations = n;
    }
    let report = toy_distill_run(&toy, a.losses, a.seed)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write(&a.out, json.as_bytes())?;
    println!(
        "{}: baseline {:.5}, final {:.5}, ratio {:.3}",
        report.switches, report.baseline_distance, report.final_distance, report.ratio
    );
    Ok(ExitCode::SUCCESS)
}

fn params_cmd(a: ParamsArgs) -> anyhow::Result<ExitCode> {
    let cfg = match a.preset {
        Some(Preset::Micro) => DenoiserConfig::micro(),
        Some(Preset::Desk) => DenoiserConfig::desk(),
        Some(Preset::Full) => DenoiserConfig::full(),
        None => load_config(a.config.as_deref())?.denoiser,
    };
    println!("{}", parameter_count(&cfg)?);
    Ok(ExitCode::SUCCESS)
}
