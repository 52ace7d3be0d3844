use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use icrcaps::audit::{audit_elements, audit_model};
use icrcaps::capsule::{icr_weights, ICRConfig, PredictionField};
use icrcaps::data::{gen_synthetic, load_cifar_bin, load_idx, make_test_suites, write_idx, CifarLabels, Dataset};
use icrcaps::network::{load_checkpoint, save_checkpoint, Model, ModelConfig, TrainConfig};
use icrcaps::settings::resolve_run_config;
use icrcaps::tensor::Tensor;
use icrcaps::train::{evaluate_suites, train_model, RunConfig};

/// Relative error bound for the exact-mode audit.
const AUDIT_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "icrcaps",
    version,
    about = "Equivariant capsule networks with collaborative routing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and log per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the five transform suites.
    Eval(EvalArgs),
    /// Measure how far each layer is from commuting with the group action.
    Audit(AuditArgs),
    /// Write the synthetic shape dataset as IDX files.
    GenSynth(GenSynthArgs),
    /// Time the routing weights over a grid of sizes.
    BenchRouting(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Light,
    Full,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file: JSON, or `key = value` lines with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.peak_lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Model preset the config file and overrides start from.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut base = RunConfig::default();
        base.model = match self.preset {
            Preset::Desk => ModelConfig::desk(base.model.classes),
            Preset::Light => ModelConfig::light(base.model.classes),
            Preset::Full => ModelConfig::full(base.model.image_channels, base.model.classes),
        };
        if matches!(self.preset, Preset::Full) {
            base.train = TrainConfig::full();
        }
        Ok(resolve_run_config(&base, self.config.as_deref(), &self.sets)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// Seeds initialisation, shuffling and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for config.json, metrics.jsonl and checkpoints.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Synth,
    Idx,
    Cifar10,
    Cifar100Coarse,
    Cifar100Fine,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "synth")]
    dataset: DatasetKind,
    /// IDX image file (with `--dataset idx`).
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file (with `--dataset idx`).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// CIFAR binary batch file. Repeatable.
    #[arg(long = "cifar-file")]
    cifar_files: Vec<PathBuf>,
    #[arg(long, default_value_t = 100)]
    synth_per_class: usize,
    #[arg(long, default_value_t = 16)]
    synth_size: usize,
    /// Default matches the test split of the default training data.
    #[arg(long, default_value_t = 1)]
    synth_seed: u64,
    #[arg(long, default_value_t = 7)]
    suite_seed: u64,
    /// Evaluate only the first N base images.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AuditMode {
    /// Stride 1, circular boundary, no prediction layer norm.
    Exact,
    /// The model exactly as configured.
    Configured,
}

#[derive(Args)]
struct AuditArgs {
    /// Audit this checkpoint instead of a freshly initialised model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum, default_value = "exact")]
    mode: AuditMode,
    /// Random translations per rotation.
    #[arg(long, default_value_t = 8)]
    translations: usize,
    #[arg(long, default_value_t = 3)]
    max_shift: i64,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Seeds the model (without a checkpoint), the inputs and the elements.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 500)]
    train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// The test split uses seed + 1.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Input capsule types.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    iters: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    out_types: usize,
    /// Spatial extent of the prediction field.
    #[arg(long, default_value_t = 4)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Audit(a) => audit(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::BenchRouting(a) => bench_routing(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            // Library errors already embed their source in the message.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn check_compatible(model: &ModelConfig, data: &Dataset) -> Result<()> {
    let [c, _, _] = data.image_shape();
    if model.image_channels != c {
        bail!("model expects {} image channels, data has {c}", model.image_channels);
    }
    if model.classes < data.classes() {
        bail!("model has {} classes, data has {}", model.classes, data.classes());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let (train, test) = cfg.data.load()?;
    check_compatible(&cfg.model, &train)?;
    let suites = make_test_suites(&test, &cfg.suites, cfg.suite_seed)?;
    let mut model = Model::build(cfg.model.clone(), cfg.train.seed)?;
    eprintln!(
        "{} train / {} test images, {} parameters, {} epochs",
        train.len(),
        test.len(),
        model.param_count(),
        cfg.train.epochs
    );

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    save_checkpoint(&a.out.join("initial.ckpt"), &model, 0)?;
    let mut log = BufWriter::new(File::create(a.out.join("metrics.jsonl"))?);
    let last = a.out.join("last.ckpt");
    let started = Instant::now();
    train_model(&mut model, &train, &suites, &cfg, |r, m| {
        let line = serde_json::to_string(r)?;
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| icrcaps::Error::Io {
                path: "metrics.jsonl".into(),
                source: e,
            })?;
        save_checkpoint(&last, m, r.epoch)?;
        let acc: Vec<String> = r.suites.iter().map(|s| format!("{:.3}", s.accuracy)).collect();
        eprintln!(
            "epoch {:>3}  loss {}  lr {:.2e}  acc [{}]  {:.0}s",
            r.epoch,
            r.train_loss.map_or("-".into(), |l| format!("{l:.4}")),
            r.lr,
            acc.join(", "),
            started.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalTable {
    columns: Vec<String>,
    accuracy: Vec<f64>,
    mean_loss: Vec<f64>,
    samples: usize,
}

fn eval_dataset(a: &EvalArgs, model: &ModelConfig) -> Result<Dataset> {
    let need = |p: &Option<PathBuf>, flag: &str| p.clone().with_context(|| format!("--dataset idx needs {flag}"));
    let cifar = |labels: CifarLabels| -> Result<Dataset> {
        let Some((first, rest)) = a.cifar_files.split_first() else {
            bail!("CIFAR datasets need at least one --cifar-file");
        };
        let mut d = load_cifar_bin(first, labels)?;
        for p in rest {
            d = d.concat(&load_cifar_bin(p, labels)?)?;
        }
        Ok(d)
    };
    let d = match a.dataset {
        DatasetKind::Synth => gen_synthetic(model.classes, a.synth_per_class, a.synth_size, a.synth_seed)?,
        DatasetKind::Idx => load_idx(&need(&a.images, "--images")?, &need(&a.labels, "--labels")?)?,
        DatasetKind::Cifar10 => cifar(CifarLabels::Cifar10)?,
        DatasetKind::Cifar100Coarse => cifar(CifarLabels::Coarse)?,
        DatasetKind::Cifar100Fine => cifar(CifarLabels::Fine)?,
    };
    let d = match a.limit {
        Some(n) if n < d.len() => d.subset(&(0..n).collect::<Vec<_>>(), d.name().to_string()),
        _ => d,
    };
    Ok(d)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.model;
    let base = eval_dataset(&a, model.config())?;
    check_compatible(model.config(), &base)?;
    let run = RunConfig::default();
    let suites = make_test_suites(&base, &run.suites, a.suite_seed)?;
    let labels = run.suites.labels();
    let metrics = evaluate_suites(&model, &suites, &labels, a.batch)?;

    let mut w = csv::Writer::from_writer(sink(a.csv.as_deref())?);
    w.write_record(["suite", "max_translation", "rotation_deg", "accuracy", "mean_loss"])?;
    for (m, level) in metrics.iter().zip(&run.suites.levels) {
        w.write_record([
            m.suite.clone(),
            level.max_translation.to_string(),
            level.rotation_deg.1.to_string(),
            m.accuracy.to_string(),
            m.mean_loss.to_string(),
        ])?;
    }
    w.flush()?;
    if let Some(p) = &a.json {
        let table = EvalTable {
            columns: labels,
            accuracy: metrics.iter().map(|m| m.accuracy).collect(),
            mean_loss: metrics.iter().map(|m| m.mean_loss).collect(),
            samples: base.len(),
        };
        fs::write(p, serde_json::to_string_pretty(&table)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn audit(a: AuditArgs) -> Result<ExitCode> {
    let model = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => Model::build(a.cfg.resolve()?.model, a.seed)?,
    };
    let model = match a.mode {
        AuditMode::Exact => model.with_config(model.config().audit_mode())?,
        AuditMode::Configured => model,
    };
    let c = model.config().image_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let n = a.batch * c * a.size * a.size;
    let x = Tensor::new(
        vec![a.batch, c, a.size, a.size],
        (0..n).map(|_| rng.gen::<f64>()).collect(),
    )?;
    let elements = audit_elements(a.translations, a.max_shift, a.seed.wrapping_add(1));
    let report = audit_model(&model, &x, &elements)?;

    println!("{:<16} max relative error ({} elements)", "layer", report.elements);
    for l in &report.layers {
        println!("{:<16} {:.3e}", l.layer, l.max_rel_error);
    }
    for l in &report.routing {
        println!("{:<16} {:.3e}", format!("{}.routing", l.layer), l.max_rel_error);
    }
    if let Some(p) = &a.json {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    if a.mode == AuditMode::Exact && !report.passes(AUDIT_TOL) {
        eprintln!("audit failed: max error {:.3e} >= {AUDIT_TOL:e}", report.max_error());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn quantize(t: &Tensor) -> Vec<u8> {
    t.data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn gen_synth(a: GenSynthArgs) -> Result<ExitCode> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (split, per_class, seed) in [
        ("train", a.train_per_class, a.seed),
        ("test", a.test_per_class, a.seed.wrapping_add(1)),
    ] {
        let d = gen_synthetic(a.classes, per_class, a.size, seed)?;
        let s = d.images().shape();
        let labels: Vec<u8> = d.labels().iter().map(|&l| l as u8).collect();
        write_idx(
            &a.out.join(format!("{split}-images-idx3-ubyte")),
            &[s[0], s[2], s[3]],
            &quantize(d.images()),
        )?;
        write_idx(&a.out.join(format!("{split}-labels-idx1-ubyte")), &[s[0]], &labels)?;
        eprintln!("{split}: {} images of {}x{}", s[0], s[2], s[3]);
    }
    Ok(ExitCode::SUCCESS)
}

fn bench_routing(a: BenchArgs) -> Result<ExitCode> {
    if a.reps == 0 {
        bail!("--reps must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut w = csv::Writer::from_writer(sink(a.out.as_deref())?);
    w.write_record(["n", "k", "num_iter", "dim", "out_types", "positions", "median_ms"])?;
    for &n in &a.n {
        let shape = vec![n, a.out_types, a.dim, 4, a.size, a.size];
        let len = shape.iter().product();
        let pred = PredictionField::new(Tensor::new(
            shape,
            (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?)?;
        for &k in a.k.iter().filter(|&&k| k >= 1 && k < n) {
            for &num_iter in &a.iters {
                let cfg = ICRConfig {
                    k,
                    num_iter,
                    ..ICRConfig::default()
                };
                let mut times: Vec<f64> = (0..a.reps)
                    .map(|_| {
                        let t = Instant::now();
                        icr_weights(&pred, &cfg).map(|_| t.elapsed().as_secs_f64() * 1e3)
                    })
                    .collect::<icrcaps::Result<_>>()?;
                times.sort_by(f64::total_cmp);
                w.write_record([
                    n.to_string(),
                    k.to_string(),
                    num_iter.to_string(),
                    a.dim.to_string(),
                    a.out_types.to_string(),
                    (4 * a.size * a.size).to_string(),
                    format!("{:.4}", times[times.len() / 2]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}
