use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use avjoint::check::{run_grad_check, CheckOptions, GRAD_TOLERANCE};
use avjoint::config::Config;
use avjoint::dataset::{avf_path, generate_synthetic, split_train_val, Corpus, FeatureSource, Manifest, Split};
use avjoint::dsp::{avf, wav, FeatureExtractor, FeatureKind, StftConfig, WindowFn};
use avjoint::model::AVModel;
use avjoint::seed::SEED_ENV;
use avjoint::train::{self, evaluate, export_embeddings, log_text, timing_text, Samples, Session, TrainData, TrainOutcome};

#[derive(Parser)]
#[command(name = "avjoint", version, about = "Joint audio-visual scene classification")]
struct Cli {
    /// Worker threads for data loading and evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract acoustic features of every clip into `.avf` files.
    Extract(ExtractArgs),
    /// Generate the synthetic audio-visual dataset.
    Synth(SynthArgs),
    /// Carve a stratified val split out of the train clips.
    Split(SplitArgs),
    /// Train one strategy and evaluate it on the test split.
    Train(TrainArgs),
    /// Run the 2x2 ablation grid.
    Ablate(TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Dump per-segment embeddings.
    ExportEmb(ExportArgs),
    /// Check analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed; falls back to the config, then to the AVJOINT_SEED variable.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output manifest; defaults to rewriting the input.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// joint, pipeline, audio or video.
    #[arg(long)]
    strategy: Option<String>,
    /// Directory of `.avf` files from `extract`; features are computed on the fly otherwise.
    #[arg(long)]
    features: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    sabotage: bool,
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::read(p)?,
        None => Config::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = Some(seed);
    }
    if cfg.seed.is_none() {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| avjoint::Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            cfg.seed = Some(seed);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seed_of(cfg: &Config) -> u64 {
    cfg.seed.unwrap_or(0)
}

fn echo_config(cfg: &Config, out: &Path) -> Result<()> {
    let text = cfg.resolved();
    for line in text.lines() {
        info!("config {line}");
    }
    let path = out.join("config.resolved");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| avjoint::Error::io(dir, e))?;
    Ok(())
}

fn extractor(cfg: &Config) -> Result<FeatureExtractor> {
    Ok(FeatureExtractor::new(cfg.feature_kind, &cfg.stft, cfg.log_floor)?)
}

fn load_corpus(m: &Manifest, cfg: &Config, features: Option<&Path>, splits: &[Split]) -> Result<Corpus> {
    let fx;
    let source = match features {
        Some(dir) => FeatureSource::AvfDir(dir.to_path_buf()),
        None => {
            fx = extractor(cfg)?;
            FeatureSource::Extract(&fx)
        }
    };
    Ok(Corpus::load(m, &source, cfg.video_fps, splits)?)
}

/// Feature and class settings stored in checkpoints so `eval` and
/// `export-emb` reproduce the training front end.
fn stamp(model: &mut AVModel<f32>, cfg: &Config, class_names: &[String]) {
    let e = &mut model.extra;
    e.insert("features.kind".into(), cfg.feature_kind.name().into());
    e.insert("features.log_floor".into(), cfg.log_floor.to_string());
    e.insert("stft.sample_rate".into(), cfg.stft.sample_rate.to_string());
    e.insert("stft.window_ms".into(), cfg.stft.window_ms.to_string());
    e.insert("stft.hop_ms".into(), cfg.stft.hop_ms.to_string());
    e.insert("stft.window".into(), cfg.stft.window_fn.name().into());
    e.insert("video.fps".into(), cfg.video_fps.to_string());
    e.insert("classes".into(), class_names.join("\t"));
}

fn unstamp(model: &AVModel<f32>) -> Result<(Config, Vec<String>)> {
    let e = &model.extra;
    let get = |k: &str| -> Result<&String> {
        e.get(k)
            .ok_or_else(|| avjoint::Error::format(0, format!("checkpoint lacks extra.{k}")).into())
    };
    let parse = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| avjoint::Error::format(0, format!("bad extra.{k}")).into())
    };
    let cfg = Config {
        feature_kind: FeatureKind::parse(get("features.kind")?)?,
        log_floor: parse("features.log_floor")?,
        stft: StftConfig {
            sample_rate: parse("stft.sample_rate")? as u32,
            window_ms: parse("stft.window_ms")?,
            hop_ms: parse("stft.hop_ms")?,
            window_fn: WindowFn::parse(get("stft.window")?)?,
        },
        video_fps: parse("video.fps")?,
        ..Config::default()
    };
    let classes = get("classes")?.split('\t').map(str::to_string).collect();
    Ok((cfg, classes))
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(Split::parse(s)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| avjoint::Error::io(path, e))?;
    Ok(())
}

fn cmd_extract(a: &ExtractArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let m = Manifest::read(&a.manifest)?;
    let fx = extractor(&cfg)?;
    create_dir(&a.out)?;
    m.entries.par_iter().try_for_each(|e| -> avjoint::Result<()> {
        let w = wav::read_wav(&m.resolve(&e.audio_path))?;
        let frames = fx.extract(&w, &e.clip_id)?;
        avf::write(&avf_path(&a.out, &e.clip_id), &e.clip_id, &frames)
    })?;
    info!("extracted {} clips into {}", m.entries.len(), a.out.display());
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    create_dir(&a.out)?;
    let m = generate_synthetic(&cfg.synth, seed_of(&cfg), &a.out)?;
    info!(
        "wrote {} clips ({} train, {} val, {} test) to {}",
        m.entries.len(),
        m.count(Split::Train),
        m.count(Split::Val),
        m.count(Split::Test),
        a.out.display()
    );
    Ok(())
}

fn cmd_split(a: &SplitArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(f) = a.val_fraction {
        cfg.set("split.val_fraction", &f.to_string())?;
        cfg.validate()?;
    }
    let m = Manifest::read(&a.manifest)?;
    let out = split_train_val(&m, cfg.val_fraction, seed_of(&cfg))?;
    let path = a.out.as_ref().unwrap_or(&a.manifest);
    out.write(path)?;
    info!("{} train / {} val clips written to {}", out.count(Split::Train), out.count(Split::Val), path.display());
    Ok(())
}

struct Prepared {
    cfg: Config,
    data: TrainData,
    test: Option<Samples>,
}

fn prepare(a: &TrainArgs) -> Result<Prepared> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = &a.strategy {
        cfg.set("train.strategy", s)?;
    }
    let m = Manifest::read(&a.manifest)?;
    let corpus = load_corpus(&m, &cfg, a.features.as_deref(), &[Split::Train, Split::Val, Split::Test])?;
    if let Some(size) = corpus.clips.iter().flat_map(|c| c.frames.first()).map(|f| f.height()).next() {
        if size != cfg.model.ve.image_size {
            warn!("images are {size} px; setting ve.image_size = {size}");
            cfg.set("ve.image_size", &size.to_string())?;
        }
    }
    create_dir(&a.out)?;
    echo_config(&cfg, &a.out)?;
    let data = TrainData::from_corpus(&corpus)?;
    let test = corpus.samples(Split::Test)?;
    let test = (!test.is_empty()).then(|| Samples::from_aligned(&test)).transpose()?;
    Ok(Prepared { cfg, data, test })
}

fn finish(p: &Prepared, mut outcome: TrainOutcome, dir: &Path) -> Result<Option<f64>> {
    create_dir(dir)?;
    stamp(&mut outcome.model, &p.cfg, &p.data.class_names);
    outcome.model.save(&dir.join("model.avw1"))?;
    write(&dir.join("train_log.tsv"), &log_text(&outcome.log))?;
    write(&dir.join("timing.tsv"), &timing_text(&outcome.log, &outcome.wall_ms))?;
    let Some(test) = &p.test else {
        warn!("no test clips; skipping evaluation");
        return Ok(None);
    };
    let report = evaluate(&outcome.model, &test.restrict(outcome.model.mode.has_audio(), outcome.model.mode.has_video()))?;
    report.write(&dir.join("eval_report.txt"), &p.data.class_names)?;
    report.write_segments(&dir.join("segments.tsv"))?;
    println!(
        "{}: avg_logloss {:.6} avg_accuracy {:.4} over {} segments",
        dir.display(),
        report.avg_logloss,
        report.avg_accuracy,
        report.n_segments
    );
    Ok(Some(report.avg_logloss))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let p = prepare(a)?;
    let model_cfg = p.cfg.model_config(p.data.class_names.len());
    let outcome = train::train(&p.cfg.train, &model_cfg, &p.data, seed_of(&p.cfg))?;
    finish(&p, outcome, &a.out)?;
    Ok(())
}

fn cmd_ablate(a: &TrainArgs) -> Result<()> {
    let p = prepare(a)?;
    let model_cfg = p.cfg.model_config(p.data.class_names.len());
    let mut session = Session::new(&p.cfg.train, &model_cfg, &p.data, seed_of(&p.cfg))?;
    let mut summary = String::from("cell\tinput\tae\tbest_val_loss\ttest_logloss\n");
    for (cell, outcome) in session.run_ablation()? {
        let (input, ae) = cell.axes();
        let best = outcome.best_val_loss;
        let test = finish(&p, outcome, &a.out.join(format!("cell_{}", cell.name())))?;
        let test = test.map_or_else(|| "NA".to_string(), |v| v.to_string());
        summary.push_str(&format!("{}\t{input:?}\t{ae:?}\t{best}\t{test}\n", cell.name()));
    }
    write(&a.out.join("ablation.tsv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn eval_samples(ckpt: &Path, manifest: &Path, split: &str, features: Option<&Path>) -> Result<(AVModel<f32>, Vec<String>, Samples)> {
    let model = AVModel::<f32>::load(ckpt)?;
    let (cfg, classes) = unstamp(&model)?;
    let m = Manifest::read(manifest)?;
    if m.class_names != classes {
        bail!(avjoint::Error::input(format!(
            "manifest classes {:?} differ from checkpoint classes {:?}",
            m.class_names, classes
        )));
    }
    let split = parse_split(split)?;
    let corpus = load_corpus(&m, &cfg, features, &[split])?;
    let samples = corpus.samples(split)?;
    if samples.is_empty() {
        bail!(avjoint::Error::input(format!("no {split} clips in {}", manifest.display())));
    }
    let samples = Samples::from_aligned(&samples)?.restrict(model.mode.has_audio(), model.mode.has_video());
    Ok((model, classes, samples))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (model, classes, samples) = eval_samples(&a.ckpt, &a.manifest, &a.split, a.features.as_deref())?;
    let report = evaluate(&model, &samples)?;
    let text = report.to_text(&classes);
    print!("{text}");
    if let Some(out) = &a.out {
        write(out, &text)?;
    }
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let (model, _, samples) = eval_samples(&a.ckpt, &a.manifest, &a.split, a.features.as_deref())?;
    export_embeddings(&model, &samples, &a.out)?;
    info!("embeddings written to {}", a.out.display());
    Ok(())
}

/// Exit code 1 when any check exceeds the tolerance.
fn cmd_grad_check(a: &GradCheckArgs) -> Result<bool> {
    let opts = CheckOptions {
        eps: a.eps,
        seed: a.seed,
        sabotage: a.sabotage,
        ..CheckOptions::default()
    };
    let lines = run_grad_check(&opts)?;
    let mut ok = true;
    for l in &lines {
        ok &= l.passed();
        println!(
            "{:<24} max_rel_error {:.3e} over {:>4} coords  {}",
            l.layer,
            l.max_rel_error,
            l.coords,
            if l.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("tolerance {GRAD_TOLERANCE:e}, eps {:e}: {}", a.eps, if ok { "pass" } else { "fail" });
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker pool")?;
    }
    match &cli.command {
        Command::Extract(a) => cmd_extract(a)?,
        Command::Synth(a) => cmd_synth(a)?,
        Command::Split(a) => cmd_split(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Ablate(a) => cmd_ablate(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::ExportEmb(a) => cmd_export(a)?,
        Command::GradCheck(a) => return cmd_grad_check(a),
    }
    Ok(true)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<avjoint::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
