use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, LevelFilter};
use serde::Serialize;

use dvi::dit::BiasSource;
use dvi::modulation::{
    broadcast, pffm, token_moments, TokenMoments, DEFAULT_NORM_EPS, DEFAULT_PSI,
};
use dvi::pipeline::{ablate, generate, ConfigFile, DiagnosticsReport, RunConfig};
use dvi::scheduler::{build_grid, DEFAULT_ALPHA, DEFAULT_LAMBDA_BASE, DEFAULT_STEPS};
use dvi::semantic::{identity_embedding, IdEmbedding, SemanticConfig};
use dvi::tensor::{read_tensor, write_tensor, DvtTensor};
use dvi::visual::{extract_stats, plan_crop, MockEncoder, VisualContext, DEFAULT_STATS_EPS};
use dvi::{DviError, Result};

#[derive(Parser)]
#[command(
    name = "dvi",
    version,
    about = "Dual-stream identity injection toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-channel mean/std of a latent, written as JSON.
    ExtractStats(ExtractStatsArgs),
    /// Seeded identity embedding for a label, written as a rank-2 .dvt.
    MakeId(MakeIdArgs),
    /// Fuse an identity embedding with visual statistics at time t.
    Modulate(ModulateArgs),
    /// Emit the step,t,lambda schedule as CSV.
    Schedule(ScheduleArgs),
    /// Run the sampler and write the final latent plus diagnostics.
    Generate(GenerateArgs),
    /// Run all three modes on shared seeds and compare them.
    Ablate(GenerateArgs),
}

#[derive(Args)]
struct ExtractStatsArgs {
    /// Rank-3 latent .dvt.
    #[arg(long, conflicts_with = "pixels", required_unless_present = "pixels")]
    latent: Option<PathBuf>,
    /// Rank-3 3-channel pixel .dvt, already resized so its short side is the
    /// crop side; it is center-cropped and run through the stand-in encoder.
    #[arg(long)]
    pixels: Option<PathBuf>,
    #[arg(long, default_value_t = MockEncoder::DEFAULT_FACTOR)]
    factor: usize,
    #[arg(long, default_value_t = 16)]
    latent_channels: usize,
    #[arg(long, default_value_t = 0)]
    mix_seed: u64,
    #[arg(long, default_value_t = DEFAULT_STATS_EPS)]
    eps: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeIdArgs {
    #[arg(long)]
    label: String,
    #[arg(long, default_value_t = 2)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    global_dim: usize,
    #[arg(long, default_value_t = 4)]
    local_tokens: usize,
    #[arg(long, default_value_t = 4)]
    global_tokens: usize,
    #[arg(long, default_value_t = 2048)]
    dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModulateArgs {
    #[arg(long)]
    id: PathBuf,
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    t: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_BASE)]
    lambda_base: f64,
    #[arg(long, default_value_t = DEFAULT_PSI)]
    psi: f64,
    #[arg(long, default_value_t = DEFAULT_NORM_EPS)]
    eps_norm: f64,
    #[arg(long)]
    out: PathBuf,
    /// JSON sidecar path; defaults to `--out` with a .json extension.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_BASE)]
    lambda_base: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// Flat key = value config; keys mirror the run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// VisualContext JSON (required unless mode is no_visual).
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Rank-2 identity embedding .dvt.
    #[arg(long, conflicts_with = "label", required_unless_present = "label")]
    id: Option<PathBuf>,
    /// Build the identity embedding from a label and `seed_id` instead.
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    lambda_base: Option<f64>,
    #[arg(long)]
    psi: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    bias_source: Option<String>,
    #[arg(long)]
    seed_noise: Option<u64>,
    #[arg(long)]
    seed_weights: Option<u64>,
    #[arg(long)]
    seed_id: Option<u64>,
    #[arg(long)]
    seed_prompt: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Diagnostics JSON path (generate only); defaults to `--out` with a
    /// .json extension.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

fn init_logging() {
    let level = match std::env::var("DVI_LOG").as_deref() {
        Ok("quiet") => LevelFilter::Off,
        Ok("trace") => LevelFilter::Trace,
        _ => LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| DviError::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn read_stats(path: &Path) -> Result<VisualContext> {
    let text = fs::read_to_string(path).map_err(|e| DviError::Io {
        path: path.to_owned(),
        source: e,
    })?;
    VisualContext::from_json(&text)
}

fn read_id(path: &Path) -> Result<IdEmbedding> {
    Ok(IdEmbedding(read_tensor(path)?.into_tokens()?))
}

fn extract_stats_cmd(args: ExtractStatsArgs) -> Result<()> {
    let latent = match (&args.latent, &args.pixels) {
        (Some(p), _) => read_tensor(p)?.into_latent()?,
        (None, Some(p)) => {
            let pixels = read_tensor(p)?.into_latent()?;
            let side = pixels.height().min(pixels.width());
            let plan = plan_crop(pixels.height(), pixels.width(), side)?;
            MockEncoder::new(args.latent_channels, args.factor, args.mix_seed)
                .encode(&pixels, &plan)?
        }
        (None, None) => unreachable!("clap enforces one input"),
    };
    let ctx = extract_stats(&latent, args.eps)?;
    write_text(&args.out, &ctx.to_json()?)?;
    info!("wrote {} ({} channels)", args.out.display(), ctx.channels);
    Ok(())
}

fn make_id_cmd(args: MakeIdArgs) -> Result<()> {
    let cfg = SemanticConfig {
        global_dim: args.global_dim,
        local_tokens: args.local_tokens,
        global_tokens: args.global_tokens,
        embed_dim: args.dim,
        ..SemanticConfig::default()
    };
    let id = identity_embedding(&args.label, args.seed, &cfg)?;
    write_tensor(&args.out, &DvtTensor::Tokens(id.0))?;
    info!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ModulateSidecar {
    t: f64,
    lambda_base: f64,
    lambda_applied: f64,
    psi: f64,
    eps_norm: f64,
    tokens: usize,
    dim: usize,
    token_moments: Vec<TokenMoments>,
}

fn modulate_cmd(args: ModulateArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.t) {
        return Err(DviError::InvalidArgument(format!(
            "--t must be in [0, 1], got {}",
            args.t
        )));
    }
    let id = read_id(&args.id)?;
    let stats = read_stats(&args.stats)?;
    let m_vis = broadcast(&stats.v_ctx(), id.dim())?;
    let lambda = args.lambda_base * args.t;
    let fused = pffm(&id, &m_vis, lambda, args.psi, args.eps_norm)?;
    write_tensor(&args.out, &DvtTensor::Tokens(fused.to_token_matrix()?))?;
    let sidecar = ModulateSidecar {
        t: args.t,
        lambda_base: args.lambda_base,
        lambda_applied: fused.lambda_applied,
        psi: fused.psi_coeff,
        eps_norm: args.eps_norm,
        tokens: fused.tokens(),
        dim: fused.dim(),
        token_moments: token_moments((0..fused.tokens()).map(|r| fused.row(r).to_vec())),
    };
    let sidecar_path = args
        .sidecar
        .unwrap_or_else(|| args.out.with_extension("json"));
    write_text(&sidecar_path, &serde_json::to_string_pretty(&sidecar)?)?;
    info!(
        "wrote {} and {}",
        args.out.display(),
        sidecar_path.display()
    );
    Ok(())
}

fn schedule_cmd(args: ScheduleArgs) -> Result<()> {
    let grid = build_grid(args.steps, args.lambda_base, 1, DEFAULT_ALPHA)?;
    write_text(&args.out, &grid.to_csv())?;
    info!("wrote {} ({} rows)", args.out.display(), args.steps + 1);
    Ok(())
}

/// Defaults, then the config file, then flags. Returns whether the ID shape
/// was set explicitly.
fn resolve_config(args: &GenerateArgs) -> Result<(RunConfig, bool)> {
    let mut cfg = RunConfig::default();
    let mut explicit_id_shape = false;
    if let Some(path) = &args.config {
        let file = ConfigFile::load(path)?;
        explicit_id_shape = file.id_dim.is_some() || file.id_tokens.is_some();
        file.apply(&mut cfg);
    }
    if let Some(m) = &args.mode {
        cfg.mode = m.parse()?;
    }
    if let Some(b) = &args.bias_source {
        cfg.bias_source = match b.as_str() {
            "raw" => BiasSource::Raw,
            "fused" => BiasSource::Fused,
            other => {
                return Err(DviError::InvalidArgument(format!(
                    "unknown bias source {other:?} (expected raw or fused)"
                )))
            }
        };
    }
    macro_rules! flag {
        ($($src:ident => $($dst:ident).+),*) => { $(if let Some(v) = args.$src { cfg.$($dst).+ = v; })* };
    }
    flag!(steps => steps, guidance => guidance, lambda_base => lambda_base, psi => psi,
          alpha => alpha, seed_noise => seeds.noise, seed_weights => seeds.weights, seed_id => seeds.id,
          seed_prompt => seeds.prompt);
    Ok((cfg, explicit_id_shape))
}

fn load_run_inputs(
    args: &GenerateArgs,
    require_stats: bool,
) -> Result<(RunConfig, Option<VisualContext>, IdEmbedding)> {
    let (mut cfg, explicit_id_shape) = resolve_config(args)?;
    if (require_stats || cfg.mode.needs_stats()) && args.stats.is_none() {
        return Err(DviError::InvalidArgument(format!(
            "--stats is required in mode {}",
            if require_stats {
                "ablate"
            } else {
                cfg.mode.name()
            }
        )));
    }
    let stats = args.stats.as_deref().map(read_stats).transpose()?;
    let id = match (&args.id, &args.label) {
        (Some(path), _) => read_id(path)?,
        (None, Some(label)) => identity_embedding(label, cfg.seeds.id, &cfg.semantic_config()?)?,
        (None, None) => unreachable!("clap enforces one identity source"),
    };
    if !explicit_id_shape {
        cfg.dims.id_dim = id.dim();
        cfg.dims.id_tokens = id.tokens();
    }
    Ok((cfg, stats, id))
}

fn generate_cmd(args: GenerateArgs) -> Result<()> {
    let (cfg, stats, id) = load_run_inputs(&args, false)?;
    let out = generate(&cfg, stats.as_ref(), &id)?;
    write_tensor(&args.out, &DvtTensor::Latent(out.latent))?;
    let report = DiagnosticsReport {
        mode: cfg.mode,
        config: &cfg,
        steps: &out.diagnostics,
    };
    let diag_path = args
        .diagnostics
        .clone()
        .unwrap_or_else(|| args.out.with_extension("json"));
    write_text(&diag_path, &serde_json::to_string_pretty(&report)?)?;
    info!("wrote {} and {}", args.out.display(), diag_path.display());
    Ok(())
}

fn ablate_cmd(args: GenerateArgs) -> Result<()> {
    let (cfg, stats, id) = load_run_inputs(&args, true)?;
    let stats = stats.expect("checked by load_run_inputs");
    let report = ablate(&cfg, &stats, &id)?;
    write_text(&args.out, &serde_json::to_string_pretty(&report)?)?;
    info!(
        "wrote {} (concat appended/ID norm ratio {:.3})",
        args.out.display(),
        report.concat.ratio
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    let result = match cli.command {
        Command::ExtractStats(a) => extract_stats_cmd(a),
        Command::MakeId(a) => make_id_cmd(a),
        Command::Modulate(a) => modulate_cmd(a),
        Command::Schedule(a) => schedule_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
