use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use voladapter_core::ablation::{run_ablation, Arm};
use voladapter_core::audit::config_audit;
use voladapter_core::checkpoint::checkpoint_hash;
use voladapter_core::config::{EncoderConfig, RunConfig};
use voladapter_core::data::{gen_corpus, Prepared};
use voladapter_core::decoder::binarize;
use voladapter_core::eval::{evaluate, EvalMode};
use voladapter_core::metrics::dice;
use voladapter_core::model::{Model, ModelConfig};
use voladapter_core::preprocess::{compute_stats, map_points, preprocess_volume, resize_nearest, PreprocessStats};
use voladapter_core::train::{train, TrainOptions};
use voladapter_core::vit2d::{Vit2dCheckpoint, Vit2dSpec};
use voladapter_core::volume::{list_volumes, read_volume, write_volume_with_meta, VolumeSample};
use voladapter_core::Error;

/// Seed of the synthetic 2D source checkpoint used when none is supplied.
const SOURCE_SEED: u64 = 0;

#[derive(Parser)]
#[command(name = "vol-adapter", version, about = "Promptable volumetric segmentation from an inflated 2D transformer")]
struct Cli {
    /// Run configuration (JSON); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialisation, training and prompt draws.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic phantom corpus into <out>/data/{train,heldout}.
    GenData,
    /// Compute intensity statistics on the training set and preprocess both sets.
    Preprocess(PreprocessArgs),
    /// Inflate a 2D checkpoint into an initial 3D model at <out>/model_init.
    Inflate(SourceArgs),
    /// Train on preprocessed volumes; writes <out>/model and <out>/train.log.jsonl.
    Train(TrainArgs),
    /// Segment one volume, with a point prompt or by sliding windows.
    Infer(InferArgs),
    /// Score a model on held-out volumes; writes <out>/report.json.
    Eval(EvalArgs),
    /// Parameter accounting table; writes <out>/audit.json.
    Audit(AuditArgs),
    /// Paired ablation runs; writes <out>/ablation-<arm>.{json,md}.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Corpus root with train/ and heldout/ (default <out>/data).
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct SourceArgs {
    /// 2D source checkpoint; a seeded synthetic one is used when omitted.
    #[arg(long)]
    source: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Preprocessed root with train/ (default <out>/preprocessed).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Start from this model checkpoint instead of inflating.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
}

#[derive(Args)]
struct InferArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Input volume (any of its files or its stem).
    #[arg(long)]
    input: PathBuf,
    /// Statistics JSON from `preprocess`; when given the raw volume is preprocessed first.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Prompt JSON {"points":[[z,y,x],...]} in voxel coordinates of the input volume.
    #[arg(long)]
    prompt: Option<PathBuf>,
    /// Output volume name under <out>.
    #[arg(long, default_value = "prediction")]
    name: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Directory of preprocessed volumes (default <out>/preprocessed/heldout).
    #[arg(long)]
    data: Option<PathBuf>,
    /// point | sliding-window
    #[arg(long, default_value = "point")]
    mode: String,
}

#[derive(Args)]
struct AuditArgs {
    /// Audit the full-scale encoder instead of the configured one.
    #[arg(long)]
    full_scale: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// mla | sampler | prompt-position | deep-prompts
    #[arg(long)]
    arm: String,
    /// Preprocessed root with train/ and heldout/ (default <out>/preprocessed).
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    fingerprint: String,
}

impl Ctx {
    fn meta(&self) -> Value {
        json!({ "fingerprint": self.fingerprint, "seed": self.seed })
    }

    fn with_meta(&self, v: Value) -> Value {
        let mut m = self.meta();
        if let (Some(obj), Value::Object(extra)) = (m.as_object_mut(), v) {
            obj.extend(extra);
        }
        m
    }

    fn write_json(&self, name: &str, v: &Value) -> anyhow::Result<PathBuf> {
        let p = self.out.join(name);
        let text = serde_json::to_string_pretty(v)? + "\n";
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    fn source(&self, args: &SourceArgs) -> anyhow::Result<Vit2dCheckpoint> {
        match &args.source {
            Some(p) => Ok(Vit2dCheckpoint::load(p)?),
            None => Ok(Vit2dCheckpoint::synthetic(Vit2dSpec::for_encoder(&self.cfg.encoder), SOURCE_SEED)),
        }
    }
}

fn read_dir_volumes(dir: &Path) -> anyhow::Result<Vec<VolumeSample>> {
    let stems = list_volumes(dir).with_context(|| format!("listing volumes in {}", dir.display()))?;
    if stems.is_empty() {
        bail!("no volumes found in {}", dir.display());
    }
    Ok(stems.iter().map(|s| read_volume(s)).collect::<Result<_, _>>()?)
}

fn write_set(ctx: &Ctx, dir: &Path, vols: &[VolumeSample]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for v in vols {
        write_volume_with_meta(v, &dir.join(&v.id), Some(ctx.meta()))?;
    }
    Ok(())
}

fn gen_data(ctx: &Ctx) -> anyhow::Result<()> {
    let (train, held) = gen_corpus(&ctx.cfg.data, ctx.seed)?;
    let root = ctx.out.join("data");
    write_set(ctx, &root.join("train"), &train)?;
    write_set(ctx, &root.join("heldout"), &held)?;
    let ids = |v: &[VolumeSample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    ctx.write_json("data/manifest.json", &ctx.with_meta(json!({ "train": ids(&train), "heldout": ids(&held) })))?;
    println!("wrote {} training and {} held-out volumes to {}", train.len(), held.len(), root.display());
    Ok(())
}

fn stats_json(s: &PreprocessStats) -> Value {
    json!({ "clip": [s.clip_lo, s.clip_hi], "mean": s.fg_mean, "sd": s.fg_sd, "target_spacing": s.target_spacing })
}

fn parse_stats(v: &Value) -> anyhow::Result<PreprocessStats> {
    let f = |x: &Value, what: &str| x.as_f64().with_context(|| format!("stats field `{what}` is missing or not a number"));
    let clip = v["clip"].as_array().context("stats field `clip` must be [lo, hi]")?;
    if clip.len() != 2 {
        bail!("stats field `clip` must be [lo, hi]");
    }
    let ts: [f64; 3] = serde_json::from_value(v["target_spacing"].clone()).context("stats field `target_spacing`")?;
    let s = PreprocessStats {
        clip_lo: f(&clip[0], "clip")?,
        clip_hi: f(&clip[1], "clip")?,
        fg_mean: f(&v["mean"], "mean")?,
        fg_sd: f(&v["sd"], "sd")?,
        target_spacing: ts,
    };
    s.validate()?;
    Ok(s)
}

fn preprocess(ctx: &Ctx, args: &PreprocessArgs) -> anyhow::Result<()> {
    let input = args.input.clone().unwrap_or_else(|| ctx.out.join("data"));
    let train = read_dir_volumes(&input.join("train"))?;
    let held_dir = input.join("heldout");
    let held = if held_dir.exists() { read_dir_volumes(&held_dir)? } else { Vec::new() };
    let stats = compute_stats(&train, ctx.cfg.data.target_spacing)?;
    let th = ctx.cfg.data.anisotropy_threshold;
    let pp = |v: &[VolumeSample]| v.iter().map(|s| preprocess_volume(s, &stats, th)).collect::<Result<Vec<_>, _>>();
    let root = ctx.out.join("preprocessed");
    write_set(ctx, &root.join("train"), &pp(&train)?)?;
    write_set(ctx, &root.join("heldout"), &pp(&held)?)?;
    let p = ctx.write_json("stats.json", &ctx.with_meta(stats_json(&stats)))?;
    println!("preprocessed {} + {} volumes; statistics in {}", train.len(), held.len(), p.display());
    Ok(())
}

fn inflate(ctx: &Ctx, args: &SourceArgs) -> anyhow::Result<()> {
    let src = ctx.source(args)?;
    if args.source.is_none() {
        src.save(&ctx.out.join("source2d"), ctx.meta())?;
    }
    let model = Model::init(&src, ModelConfig::from(&ctx.cfg), ctx.seed)?;
    let path = ctx.out.join("model_init");
    model.save(&path, ctx.meta())?;
    println!("inflated model written to {} (sha256 {})", path.display(), checkpoint_hash(&path)?);
    Ok(())
}

fn train_cmd(ctx: &Ctx, args: &TrainArgs) -> anyhow::Result<()> {
    let root = args.data.clone().unwrap_or_else(|| ctx.out.join("preprocessed"));
    let corpus = read_dir_volumes(&root.join("train"))?;
    let mut model = match &args.init {
        Some(p) => Model::load(p)?.0,
        None => Model::init(&ctx.source(&args.source)?, ModelConfig::from(&ctx.cfg), ctx.seed)?,
    };
    let extra = match ctx.meta() {
        Value::Object(m) => m,
        _ => unreachable!(),
    };
    let mut report = |l: &voladapter_core::train::EpochLog| {
        eprintln!("epoch {:>4}  loss {:.5}  dice {:.4}  lr {:.3e}", l.epoch, l.loss, l.dice, l.lr);
    };
    let opts = TrainOptions {
        log_path: Some(ctx.out.join("train.log.jsonl")),
        log_extra: extra,
        on_epoch: Some(&mut report),
    };
    train(&mut model, &corpus, &ctx.cfg.train, ctx.seed, opts)?;
    let path = ctx.out.join("model");
    model.save(&path, ctx.meta())?;
    println!("model written to {} (sha256 {})", path.display(), checkpoint_hash(&path)?);
    Ok(())
}

fn infer(ctx: &Ctx, args: &InferArgs) -> anyhow::Result<()> {
    let (model, _) = Model::load(&args.model)?;
    let raw = read_volume(&args.input)?;
    let vol = match &args.stats {
        Some(p) => {
            let v: Value = serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)?;
            preprocess_volume(&raw, &parse_stats(&v)?, ctx.cfg.data.anisotropy_threshold)?
        }
        None => raw.clone(),
    };
    let pred = match &args.prompt {
        Some(p) => {
            let v: Value = serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)?;
            let pts: Vec<[f64; 3]> = serde_json::from_value(v["points"].clone()).context("prompt must be {\"points\":[[z,y,x],...]}")?;
            model.prompt_patch(&vol.image, &map_points(&pts, raw.dims(), vol.dims()))?
        }
        None => binarize(&model.sliding_window(&vol.image, ctx.cfg.eval.overlap)?)?,
    };
    let mask = if pred.dims() == raw.dims() { pred } else { resize_nearest(&pred, raw.dims()) };
    if raw.mask.count_nonzero() > 0 {
        println!("dice against the stored mask: {:.4}", dice(&mask, &raw.mask)?);
    }
    let out = VolumeSample::new(raw.image.clone(), mask, raw.spacing, format!("{}-{}", raw.id, args.name))?;
    let meta = ctx.with_meta(json!({ "model_sha256": checkpoint_hash(&args.model)? }));
    let path = ctx.out.join(&args.name);
    write_volume_with_meta(&out, &path, Some(meta))?;
    println!("prediction written to {}", path.display());
    Ok(())
}

fn eval(ctx: &Ctx, args: &EvalArgs) -> anyhow::Result<()> {
    let (model, _) = Model::load(&args.model)?;
    let dir = args.data.clone().unwrap_or_else(|| ctx.out.join("preprocessed/heldout"));
    let vols = read_dir_volumes(&dir)?;
    let mode = match args.mode.as_str() {
        "point" => EvalMode::Point,
        "sliding-window" => EvalMode::SlidingWindow,
        m => return Err(Error::config("--mode", format!("unknown mode `{m}`")).into()),
    };
    let r = evaluate(&model, &vols, &ctx.cfg.eval, mode, ctx.seed, "model", &ctx.fingerprint)?;
    let v = ctx.with_meta(serde_json::to_value(&r)?);
    let p = ctx.write_json("report.json", &v)?;
    println!("Dice {:.4} ± {:.4}  NSD {:.4} ± {:.4}  ({} volumes) -> {}", r.dice_mean, r.dice_sd, r.nsd_mean, r.nsd_sd, r.per_volume.len(), p.display());
    Ok(())
}

fn audit(ctx: &Ctx, args: &AuditArgs) -> anyhow::Result<()> {
    let enc = if args.full_scale { EncoderConfig::full_scale() } else { ctx.cfg.encoder.clone() };
    let reference = Vit2dSpec::for_encoder(&enc).param_count();
    let r = config_audit(&enc, reference)?;
    print!("{}", r.table());
    let v = ctx.with_meta(json!({
        "full_scale": args.full_scale,
        "counts": r.counts,
        "total": r.total,
        "reference_2d_total": r.reference_2d_total,
        "added_fraction": r.added_fraction,
        "tunable_fraction": r.tunable_fraction,
        "rows": r.rows,
    }));
    ctx.write_json("audit.json", &v)?;
    Ok(())
}

fn ablate(ctx: &Ctx, args: &AblateArgs) -> anyhow::Result<()> {
    let arm: Arm = args.arm.parse()?;
    let root = args.data.clone().unwrap_or_else(|| ctx.out.join("preprocessed"));
    let train = read_dir_volumes(&root.join("train"))?;
    let heldout = read_dir_volumes(&root.join("heldout"))?;
    let stats = compute_stats(&train, ctx.cfg.data.target_spacing)?;
    let data = Prepared { stats, train, heldout };
    let src = ctx.source(&args.source)?;
    let res = run_ablation(arm, &ctx.cfg, &src, &data, |m| eprintln!("{m}"))?;
    ctx.write_json(&format!("ablation-{}.json", arm.name()), &ctx.with_meta(serde_json::to_value(&res)?))?;
    let md = res.markdown();
    std::fs::write(ctx.out.join(format!("ablation-{}.md", arm.name())), &md)?;
    print!("{md}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = Ctx {
        fingerprint: cfg.fingerprint(),
        cfg,
        seed: cli.seed,
        out: cli.out,
    };
    match &cli.cmd {
        Cmd::GenData => gen_data(&ctx),
        Cmd::Preprocess(a) => preprocess(&ctx, a),
        Cmd::Inflate(a) => inflate(&ctx, a),
        Cmd::Train(a) => train_cmd(&ctx, a),
        Cmd::Infer(a) => infer(&ctx, a),
        Cmd::Eval(a) => eval(&ctx, a),
        Cmd::Audit(a) => audit(&ctx, a),
        Cmd::Ablate(a) => ablate(&ctx, a),
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("VOLADAPTER_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).context("VOLADAPTER_THREADS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = init_threads().and_then(|_| run(cli));
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref::<Error>(), Some(Error::Config { .. } | Error::UnknownArm(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
