use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spi_core::eval::{evaluate_inversion, result_dir, run_eval, EvalReport};
use spi_core::field::RenderSettings;
use spi_core::geometry::{look_at_pose, Intrinsics, RIG_RADIUS};
use spi_core::gradcheck::standard_suite;
use spi_core::io::{write_mask_png, write_pfm, write_png};
use spi_core::pipeline::{
    invert_stage1, run_ablation, spi_invert, write_outputs, InversionConfig, InversionInput, InversionResult,
    PretrainConfig, Prior,
};
use spi_core::synthhead::{export_dataset, generate_scene, load_dataset, load_scene, SceneRecord};
use spi_core::warp::{build_pseudo_bank, BankConfig};

#[derive(Parser)]
#[command(name = "spi", version, about = "Symmetry-prior inversion of a latent radiance field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic head dataset.
    GenData(GenData),
    /// Train the generator prior on a dataset.
    Pretrain(Pretrain),
    /// Invert one view of one scene.
    Invert(Invert),
    /// Render a checkpoint from a camera on the rig.
    Render(Render),
    /// Export the pseudo views built for one input.
    Warp(Warp),
    /// Evaluate a results tree against a dataset.
    Eval(Eval),
    /// Finite-difference check of every loss term.
    Gradcheck(Gradcheck),
    /// Run the ablation chain and the pivotal-tuning baseline.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    scenes: usize,
    /// Comma-separated yaw angles in degrees, each optionally `yaw:pitch`.
    #[arg(long, default_value = "-60,-45,-30,-15,0,15,30,45,60", allow_hyphen_values = true)]
    views: String,
    /// One level, a comma-separated list cycled over scenes, or a range `lo-hi`.
    #[arg(long, default_value = "0")]
    asymmetry: String,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON pretraining config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct Flags {
    #[arg(long)]
    no_symmetry: bool,
    #[arg(long)]
    no_warp: bool,
    #[arg(long)]
    no_depth_reg: bool,
    #[arg(long)]
    no_sym_loss: bool,
    #[arg(long)]
    no_stage2: bool,
}

#[derive(Args)]
struct Invert {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    view: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    prior: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args)]
struct Render {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Degrees.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    yaw: f64,
    /// Degrees.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pitch: f64,
    /// Defaults to the checkpoint's resolution.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    depth: Option<PathBuf>,
}

#[derive(Args)]
struct Warp {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    view: usize,
    #[arg(long)]
    prior: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated input view indices.
    #[arg(long, default_value = "0,2,4,6,8")]
    views: String,
    /// Evaluate at this resolution instead of the dataset's.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    prior: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated input view indices.
    #[arg(long, default_value = "8")]
    views: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = configure_threads().and_then(|_| run(Cli::parse())) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SPI_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SPI_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("SPI_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Invert(a) => invert(a),
        Command::Render(a) => render(a),
        Command::Warp(a) => warp(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn parse_views(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(',')
        .map(|item| {
            let mut it = item.trim().splitn(2, ':');
            let yaw: f64 = it.next().unwrap_or("").parse().with_context(|| format!("bad view `{item}`"))?;
            let pitch: f64 = match it.next() {
                Some(p) => p.parse().with_context(|| format!("bad pitch in `{item}`"))?,
                None => 0.0,
            };
            Ok((yaw.to_radians(), pitch.to_radians()))
        })
        .collect()
}

fn parse_indices(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| v.trim().parse().with_context(|| format!("bad view index `{v}`")))
        .collect()
}

/// Asymmetry level of scene `i` of `n`.
fn asymmetry_levels(spec: &str, n: usize) -> Result<Vec<f64>> {
    if let Some((lo, hi)) = spec.split_once('-').filter(|(lo, _)| !lo.is_empty()) {
        let (lo, hi): (f64, f64) = (lo.parse()?, hi.parse()?);
        return Ok((0..n)
            .map(|i| if n > 1 { lo + (hi - lo) * i as f64 / (n - 1) as f64 } else { lo })
            .collect());
    }
    let list: Vec<f64> = spec
        .split(',')
        .map(|v| v.trim().parse().with_context(|| format!("bad asymmetry `{v}`")))
        .collect::<Result<_>>()?;
    Ok((0..n).map(|i| list[i % list.len()]).collect())
}

fn gen_data(a: GenData) -> Result<()> {
    let views = parse_views(&a.views)?;
    let levels = asymmetry_levels(&a.asymmetry, a.scenes)?;
    let k = Intrinsics::for_resolution(a.resolution);
    let records: Vec<SceneRecord> = levels
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let spec = generate_scene(a.seed.wrapping_add(i as u64), level)?;
            Ok(SceneRecord::render(spec, &views, &k, &RenderSettings::default())?)
        })
        .collect::<Result<_>>()?;
    export_dataset(&records, &a.out)?;
    log::info!("wrote {} scenes x {} views to {}", records.len(), views.len(), a.out.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn pretrain(a: Pretrain) -> Result<()> {
    let mut cfg: PretrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PretrainConfig::default(),
    };
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.resolution {
        cfg.resolution = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let records = load_dataset(&a.data)?;
    let (prior, curve) = spi_core::pipeline::pretrain_prior(&records, &cfg)?;
    prior.save(&a.out)?;
    let tail = &curve[curve.len().saturating_sub(100)..];
    log::info!(
        "saved prior to {} (final mean loss {:.5})",
        a.out.display(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    );
    Ok(())
}

fn inversion_config(path: Option<&Path>, seed: Option<u64>, flags: Option<&Flags>) -> Result<InversionConfig> {
    let mut cfg = match path {
        Some(p) => InversionConfig::from_json_file(p)?,
        None => InversionConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(f) = flags {
        let c = &mut cfg.flags;
        c.no_symmetry |= f.no_symmetry;
        c.no_warp |= f.no_warp;
        c.no_depth_reg |= f.no_depth_reg;
        c.no_sym_loss |= f.no_sym_loss;
        c.no_stage2 |= f.no_stage2;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn invert(a: Invert) -> Result<()> {
    let cfg = inversion_config(a.config.as_deref(), a.seed, Some(&a.flags))?;
    let prior = Prior::load(&a.prior)?;
    let rec = load_scene(&a.scene)?;
    let input = InversionInput::from_record(&rec, a.view, cfg.resolution)?;
    let r = spi_invert(&prior, &input, &cfg)?;
    write_outputs(&a.out, &r, &cfg)?;
    log::info!(
        "inverted {} view {} ({}) in {:.1}s",
        a.scene.display(),
        a.view,
        cfg.flags.label(),
        r.wall_clock_s
    );
    Ok(())
}

fn render(a: Render) -> Result<()> {
    let (model, w, noise) = InversionResult::load_checkpoint(&a.checkpoint)?;
    let res = a.resolution.unwrap_or(noise.map.width);
    let k = Intrinsics::for_resolution(res);
    let pose = look_at_pose(a.yaw.to_radians(), a.pitch.to_radians(), RIG_RADIUS)?;
    let out = model
        .modulate(&w)?
        .render(&pose, &k, None, &RenderSettings::default().with_seed(a.seed));
    write_png(&a.out, &out.rgb)?;
    if let Some(d) = &a.depth {
        write_pfm(d, &out.depth)?;
    }
    Ok(())
}

fn warp(a: Warp) -> Result<()> {
    let cfg = inversion_config(a.config.as_deref(), a.seed, None)?;
    let prior = Prior::load(&a.prior)?;
    let rec = load_scene(&a.scene)?;
    let input = InversionInput::from_record(&rec, a.view, cfg.resolution)?;
    let s1 = invert_stage1(&prior, &input, &cfg)?;
    let k = cfg.intrinsics();
    let bank = build_pseudo_bank(
        &input.image,
        &input.pose,
        input.roi.as_ref(),
        s1.lambda_m,
        &prior.model,
        &s1.latent,
        &k,
        &cfg.render_settings().with_seed(cfg.seed),
        &BankConfig {
            size: cfg.bank_size,
            tau: cfg.tau,
            sigma_max: cfg.sigma_max,
            seed: cfg.seed,
        },
        &cfg.mirror,
    )?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut poses = Vec::new();
    for (tag, views) in [("source", &bank.source), ("mirror", &bank.mirror)] {
        for (i, p) in views.iter().enumerate() {
            write_png(&a.out.join(format!("{tag}_{i:03}.png")), &p.image)?;
            write_mask_png(&a.out.join(format!("{tag}_{i:03}_mask.png")), &p.mask)?;
            poses.push(serde_json::json!({ "file": format!("{tag}_{i:03}.png"), "pose": p.pose }));
        }
    }
    std::fs::write(a.out.join("poses.json"), serde_json::to_string_pretty(&poses)?)?;
    log::info!(
        "wrote {} source-side and {} mirror-side pseudo views (mirror weight {:.3})",
        bank.source.len(),
        bank.mirror.len(),
        s1.lambda_m
    );
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let views = parse_indices(&a.views)?;
    let report = run_eval(&a.results, &a.data, &views, a.resolution, a.seed)?;
    report.write(&a.out)?;
    print_table(&report);
    Ok(())
}

fn print_table(report: &EvalReport) {
    println!(
        "{:<12} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "method", "rows", "mse", "msgp", "1-msssim", "depth", "flip"
    );
    for a in &report.aggregates {
        println!(
            "{:<12} {:>6} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>10.5}",
            a.method, a.rows, a.mse, a.msgp, a.ms_ssim, a.depth_error, a.flip_consistency
        );
    }
    for s in &report.skipped {
        println!("skipped: {s}");
    }
}

fn gradcheck(a: Gradcheck) -> Result<()> {
    let suite = standard_suite(a.seed)?;
    println!("{}", serde_json::to_string_pretty(&suite)?);
    let failed: Vec<&str> = suite.iter().filter(|e| !e.passed).map(|e| e.term.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let cfg = inversion_config(a.config.as_deref(), a.seed, None)?;
    let prior = Prior::load(&a.prior)?;
    let records = load_dataset(&a.data)?;
    let views = parse_indices(&a.views)?;
    let mut report = EvalReport::default();
    let eval_settings = RenderSettings::default();
    for (si, rec) in records.iter().enumerate() {
        let rec = rec.resized(cfg.resolution)?;
        for &v in &views {
            let input = InversionInput::from_record(&rec, v, cfg.resolution)?;
            for run in run_ablation(&prior, &input, &cfg)? {
                let r = &run.result;
                write_outputs(&result_dir(&a.out, &run.name, si, v), r, &run.config)?;
                let (rows, summary) = evaluate_inversion(&r.model, &r.latent, &rec, si, v, &run.name, &eval_settings)?;
                report.push(rows, summary);
            }
            log::info!("scene {si} view {v}: ablation done");
        }
    }
    report.finish();
    report.write(&a.out)?;
    print_table(&report);
    Ok(())
}
