//! `priorseg` command-line tool: data generation, training, evaluation,
//! correlation analysis and rendering.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use priorseg::dataset::{generate_corpus, read_dataset, write_dataset, DatasetConfig, ImageSample, Split};
use priorseg::eval::{
    correlation_points, emit_analysis, evaluate, ols_fit, render_panels, CorrelationPoint, EvalReport, PredictionDump,
};
use priorseg::model::Prepared;
use priorseg::policy::Vocabulary;
use priorseg::trainer::{latest_checkpoint, load_model, Mode, StepMetrics, TrainConfig, Trainer};
use priorseg::Error;

const MANIFEST: &str = "manifest.json";
const CHECKPOINTS: &str = "checkpoints";
const METRICS: &str = "metrics.log";
const DUMPS: &str = "dumps";
const FIGURES: &str = "figures";

#[derive(Parser)]
#[command(name = "priorseg", version, about = "Reasoning segmentation with a positional prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// Dataset config (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train a model on the training split of a dataset.
    Train {
        /// Training config (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config the checkpoint must be compatible with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
    },
    /// Fit prior-versus-mask or training-loss correlations.
    Correlate {
        /// Directory of prediction dumps written by `eval`.
        #[arg(long, conflicts_with = "metrics", required_unless_present = "metrics")]
        dumps: Option<PathBuf>,
        /// Trainer metrics log (x = 1 - bce_prior, y = 1 - dice).
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render input, prior heatmap and mask overlays for prediction dumps.
    Render {
        /// A dump file or a directory of dumps.
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) => 2,
            Error::MissingFile(_) => 3,
            Error::Checkpoint(_) => 4,
            Error::InsufficientData(_) | Error::DegenerateFit(_) => 5,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Serialize)]
struct Layout {
    manifest: &'static str,
    checkpoints: &'static str,
    metrics_log: &'static str,
    dumps: &'static str,
    figures: &'static str,
}

const LAYOUT: Layout = Layout { manifest: MANIFEST, checkpoints: CHECKPOINTS, metrics_log: METRICS, dumps: DUMPS, figures: FIGURES };

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    code_version: &'static str,
    seed: Option<u64>,
    config: C,
    layout: Layout,
}

fn write_manifest<C: Serialize>(dir: &Path, command: &str, seed: Option<u64>, config: C) -> CliResult<()> {
    let m = RunManifest { command, code_version: env!("CARGO_PKG_VERSION"), seed, config, layout: LAYOUT };
    write_json(&dir.join(MANIFEST), &m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { config, out, seed, scenes } => gen_data(config, &out, seed, scenes),
        Command::Train { config, data, out, mode, group_size, steps, seed, resume } => {
            let overrides = TrainOverrides { mode, group_size, steps, seed };
            train(config, &data, &out, overrides, resume)
        }
        Command::Eval { checkpoint, data, out, config, split } => eval(&checkpoint, &data, &out, config, split),
        Command::Correlate { dumps, metrics, out } => correlate(dumps, metrics, &out),
        Command::Render { dump, out } => render(&dump, &out),
    }
}

fn gen_data(config: Option<PathBuf>, out: &Path, seed: Option<u64>, scenes: Option<usize>) -> CliResult<()> {
    let mut cfg = match config {
        Some(p) => DatasetConfig::load(&p)?,
        None => DatasetConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = scenes {
        cfg.scenes = n;
    }
    cfg.validate()?;
    let corpus = generate_corpus(&cfg)?;
    create_dir(out)?;
    write_dataset(&corpus, out)?;
    write_manifest(out, "gen-data", Some(cfg.seed), &cfg)?;
    let val = corpus.annotations.iter().filter(|a| a.split == Split::Val).count();
    println!(
        "{} scenes, {} annotations ({} train, {} val), {} skipped",
        corpus.scenes.len(),
        corpus.annotations.len(),
        corpus.annotations.len() - val,
        val,
        corpus.skipped
    );
    Ok(())
}

struct TrainOverrides {
    mode: Option<String>,
    group_size: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
}

fn train_config(config: Option<PathBuf>, o: &TrainOverrides) -> CliResult<TrainConfig> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(&p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(m) = &o.mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    if let Some(g) = o.group_size {
        cfg.group_size = g;
    }
    if let Some(s) = o.steps {
        cfg.steps = s;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_all(trainer_model: &priorseg::model::Model, samples: &[ImageSample]) -> CliResult<Vec<Prepared>> {
    samples.iter().map(|s| trainer_model.prepare(s).map_err(Failure::from)).collect()
}

/// Drops metric lines at or after `step` so a resumed run appends cleanly.
fn truncate_metrics(path: &Path, step: usize) -> CliResult<()> {
    let Ok(text) = fs::read_to_string(path) else { return Ok(()) };
    let kept: String = text
        .lines()
        .filter(|l| serde_json::from_str::<StepMetrics>(l).is_ok_and(|m| m.step < step))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e).into())
}

fn train(config: Option<PathBuf>, data: &Path, out: &Path, o: TrainOverrides, resume: bool) -> CliResult<()> {
    let cfg = train_config(config, &o)?;
    let dataset = read_dataset(data)?;
    let samples = dataset.split(Split::Train);
    if samples.is_empty() {
        return Err(Error::InsufficientData(format!("no training samples in {}", data.display())).into());
    }
    create_dir(out)?;
    let ckpt_root = out.join(CHECKPOINTS);
    create_dir(&ckpt_root)?;
    create_dir(&out.join(DUMPS))?;
    create_dir(&out.join(FIGURES))?;
    let metrics = out.join(METRICS);
    let mut trainer = match latest_checkpoint(&ckpt_root).filter(|_| resume) {
        Some(dir) => {
            let t = Trainer::load_checkpoint(&dir, Some(&cfg))?;
            log::info!("resuming from {} at step {}", dir.display(), t.step);
            truncate_metrics(&metrics, t.step)?;
            t
        }
        None => {
            if resume {
                log::warn!("no checkpoint under {}, starting fresh", ckpt_root.display());
            }
            let _ = fs::remove_file(&metrics);
            Trainer::new(cfg.clone())?
        }
    };
    write_manifest(out, "train", Some(cfg.seed), &cfg)?;
    let prepared = prepare_all(&trainer.model, &samples)?;
    let every = (cfg.steps / 20).max(1);
    let history = trainer.run(&prepared, Some(&metrics), Some(&ckpt_root), |m| {
        if m.step % every == 0 || m.step + 1 == cfg.steps {
            log::info!(
                "step {} loss {:.4} reward {:.3} format {:.3} bce {:.4} dice {:.4}",
                m.step,
                m.loss,
                m.reward_mean,
                m.format_mean,
                m.bce_prior,
                m.dice_loss
            );
        }
    })?;
    println!("trained {} steps; checkpoint at {}", history.len(), ckpt_root.join(format!("step_{}", trainer.step)).display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: String,
    split: &'a str,
    #[serde(flatten)]
    report: EvalReport,
}

fn eval(checkpoint: &Path, data: &Path, out: &Path, config: Option<PathBuf>, split: SplitArg) -> CliResult<()> {
    if !checkpoint.join("model.json").exists() {
        return Err(Error::MissingFile(checkpoint.join("model.json")).into());
    }
    let (model, store, cfg) = match config {
        Some(p) => {
            let cfg = TrainConfig::load(&p)?;
            let t = Trainer::load_checkpoint(checkpoint, Some(&cfg))?;
            (t.model, t.store, t.cfg)
        }
        None => load_model(checkpoint)?,
    };
    let dataset = read_dataset(data)?;
    let (samples, split_name) = match split {
        SplitArg::Train => (dataset.split(Split::Train), "train"),
        SplitArg::Val => (dataset.split(Split::Val), "val"),
        SplitArg::All => (dataset.samples.clone(), "all"),
    };
    let prepared = prepare_all(&model, &samples)?;
    let (report, mut dumps) = evaluate(&model, &store, &prepared)?;
    create_dir(out)?;
    let dump_dir = out.join(DUMPS);
    create_dir(&dump_dir)?;
    create_dir(&out.join(FIGURES))?;
    for (i, (d, s)) in dumps.iter_mut().zip(&samples).enumerate() {
        let abs = fs::canonicalize(data).unwrap_or_else(|_| data.to_path_buf());
        d.image_path = Some(abs.join(&s.annotation.image_path).to_string_lossy().into_owned());
        write_json(&dump_dir.join(format!("{i:05}.json")), d)?;
    }
    let output = EvalOutput { checkpoint: checkpoint.display().to_string(), split: split_name, report };
    write_json(&out.join("report.json"), &output)?;
    write_manifest(out, "eval", Some(cfg.seed), &cfg)?;
    println!("n {} ciou {:.4} giou {:.4}", output.report.n, output.report.ciou, output.report.giou);
    Ok(())
}

fn read_dumps(path: &Path) -> CliResult<Vec<(String, PredictionDump)>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        v.sort();
        v
    } else if path.is_file() {
        vec![path.to_path_buf()]
    } else {
        return Err(Error::MissingFile(path.to_path_buf()).into());
    };
    files
        .into_iter()
        .map(|f| {
            let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            let d: PredictionDump =
                serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", f.display())))?;
            let stem = f.file_stem().map_or_else(|| "dump".into(), |s| s.to_string_lossy().into_owned());
            Ok((stem, d))
        })
        .collect()
}

fn metrics_points(path: &Path) -> CliResult<Vec<CorrelationPoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let m: StepMetrics =
            serde_json::from_str(line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if !m.skipped && m.one_minus_bce.is_finite() && m.one_minus_dice.is_finite() {
            points.push(CorrelationPoint { sample_id: m.step, x: m.one_minus_bce, y: m.one_minus_dice });
        }
    }
    Ok(points)
}

#[derive(Serialize)]
struct CorrelateConfig {
    source: String,
    x: &'static str,
    y: &'static str,
}

fn correlate(dumps: Option<PathBuf>, metrics: Option<PathBuf>, out: &Path) -> CliResult<()> {
    let (points, labels, source) = match (dumps, metrics) {
        (Some(d), _) => {
            let dumps: Vec<PredictionDump> = read_dumps(&d)?.into_iter().map(|(_, d)| d).collect();
            (correlation_points(&dumps), ("prior_iou", "mask_iou"), d)
        }
        (None, Some(m)) => (metrics_points(&m)?, ("one_minus_bce", "one_minus_dice"), m),
        (None, None) => return Err(Error::InvalidConfig("either --dumps or --metrics is required".into()).into()),
    };
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!("{} correlation points, need at least 2", points.len())).into());
    }
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.x, p.y)).collect();
    let fit = ols_fit(&xy)?;
    create_dir(out)?;
    let summary = emit_analysis(&points, &fit, out, labels)?;
    let cfg = CorrelateConfig { source: source.display().to_string(), x: labels.0, y: labels.1 };
    write_manifest(out, "correlate", None, &cfg)?;
    println!(
        "n {} r {:.4} alpha {:.4} beta {:.4} above-diagonal {:.3}",
        summary.n, summary.r, summary.alpha, summary.beta, summary.frac_above_diagonal
    );
    Ok(())
}

fn describe(dump: &PredictionDump, vocab: &Vocabulary) -> String {
    let words: Vec<&str> = dump.instruction.iter().map(|&t| vocab.token(t)).collect();
    let mut text = format!(
        "instruction: {}\nresponse: {}\nmask_iou: {:.4}\nprior_iou: {:.4}\n",
        words.join(" "),
        dump.text,
        dump.mask_iou,
        dump.prior_iou
    );
    if dump.mask.iter().all(|&v| v == 0) {
        text.push_str("note: predicted mask is empty\n");
    }
    text
}

#[derive(Serialize)]
struct RenderConfig {
    source: String,
    panels: usize,
}

fn render(dump: &Path, out: &Path) -> CliResult<()> {
    let dumps = read_dumps(dump)?;
    create_dir(out)?;
    let vocab = Vocabulary::standard();
    for (stem, d) in &dumps {
        let Some(path) = &d.image_path else {
            return Err(Error::InvalidInput(format!("dump {stem} does not name its image")).into());
        };
        let path = Path::new(path);
        let image = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
        let panels = render_panels(&image, d)?;
        let target = out.join(format!("{stem}_panels.png"));
        panels.save(&target).map_err(|e| Error::image(&target, e))?;
        let text_path = out.join(format!("{stem}.txt"));
        fs::write(&text_path, describe(d, &vocab)).map_err(|e| Error::io(&text_path, e))?;
    }
    write_manifest(out, "render", None, RenderConfig { source: dump.display().to_string(), panels: dumps.len() })?;
    println!("rendered {} panel sets into {}", dumps.len(), out.display());
    Ok(())
}
