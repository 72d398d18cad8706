//! Command implementations behind the `wsms` binary.

mod rundir;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use wsms::checkpoint::{self, Checkpoint};
use wsms::config::{DataKind, DataSection, RunConfig};
use wsms::cost::analyze;
use wsms::data::{
    load_cifar, normalize_per_channel, synth_scale_dataset, write_synth_dataset, CifarVariant, Dataset, Normalizer,
    SynthScaleConfig, SynthScaleData,
};
use wsms::gradcheck::{run_gradcheck, GradcheckOptions};
use wsms::tensor::{Precision, Primitive, Scalar};
use wsms::trainer::{compare_preds, evaluate, read_predictions, train, write_metrics, write_predictions, TrainData};
use wsms::wsms::build_wsms;
use wsms::Error;

pub use rundir::{RunDir, RunManifest};

/// Environment variable naming the default dataset directory.
pub const DATA_ROOT_ENV: &str = "WSMS_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "wsms", version, about = "Weight-shared multi-stage CNNs: cost model, training and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Seed for initialization, shuffling and augmentation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Single-threaded, bitwise-reproducible run; wallclock is recorded as 0.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true, default_value = "f32")]
    pub precision: Precision,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// CSV output path.
    #[arg(long, global = true)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and multiplication counts of a model config.
    Count {
        config: PathBuf,
        /// Input resolution as HxW.
        #[arg(long, default_value = "32x32")]
        input: String,
    },
    /// Finite-difference gradient verification in double precision.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        size: String,
        /// Deliberately corrupt one primitive's backward rule.
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Train a model and write a run directory.
    Train {
        config: PathBuf,
        /// Dataset directory (overrides the config and the data root).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Exclude batch-norm gamma and beta from weight decay.
        #[arg(long)]
        no_bn_decay: bool,
    },
    /// Evaluate a checkpoint and dump per-example predictions.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to evaluate: test, train, or an extra split such as held_out.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Render the synthetic scale dataset to disk.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
    },
    /// Ids misclassified by every baseline and classified correctly by the target.
    ComparePreds {
        #[arg(long, num_args = 1.., required = true)]
        baselines: Vec<PathBuf>,
        #[arg(long)]
        target: PathBuf,
    },
}

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad usage, configuration or input files.
    Usage(String),
    /// Non-finite loss or failed gradient check.
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } => Failure::Numerical(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

pub type CmdResult = std::result::Result<(), Failure>;

pub fn main_with(cli: Cli) -> ExitCode {
    let threads = if cli.global.deterministic { 1 } else { cli.global.threads };
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Numerical(m) => eprintln!("numerical failure: {m}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

pub fn run(cli: &Cli) -> CmdResult {
    let g = &cli.global;
    match &cli.command {
        Command::Count { config, input } => cmd_count(g, config, input),
        Command::Gradcheck { size, fault } => cmd_gradcheck(g, size, fault.as_deref()),
        Command::Train { config, data, epochs, no_bn_decay } => match g.precision {
            Precision::F32 => cmd_train::<f32>(g, config, data.as_deref(), *epochs, *no_bn_decay),
            Precision::F64 => cmd_train::<f64>(g, config, data.as_deref(), *epochs, *no_bn_decay),
        },
        Command::Eval { config, checkpoint, data, split } => match g.precision {
            Precision::F32 => cmd_eval::<f32>(g, config, checkpoint, data.as_deref(), split),
            Precision::F64 => cmd_eval::<f64>(g, config, checkpoint, data.as_deref(), split),
        },
        Command::SynthData { config, train_per_class, test_per_class } => {
            cmd_synth_data(g, config.as_deref(), *train_per_class, *test_per_class)
        }
        Command::ComparePreds { baselines, target } => cmd_compare_preds(g, baselines, target),
    }
}

pub fn parse_hw(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("input size `{s}` is not of the form HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn cmd_count(g: &Global, config: &Path, input: &str) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let report = analyze(&cfg.model, parse_hw(input)?)?;
    print!("{}", report.to_table());
    println!("depth={}", cfg.model.depth());
    println!("{}", report.summary_line());
    if let Some(csv) = &g.csv {
        fs::write(csv, report.to_csv())?;
    }
    Ok(())
}

fn cmd_gradcheck(g: &Global, size: &str, fault: Option<&str>) -> CmdResult {
    if size != "tiny" {
        return Err(Failure::Usage(format!("unknown gradcheck size `{size}` (only `tiny` is available)")));
    }
    let fault = fault
        .map(|f| Primitive::from_name(f).ok_or_else(|| Failure::Usage(format!("unknown primitive `{f}`"))))
        .transpose()?;
    let opts = GradcheckOptions { seed: g.seed.unwrap_or(0), fault, ..Default::default() };
    let report = run_gradcheck(&opts)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Numerical(report.to_string().lines().last().unwrap_or("FAIL").to_string()))
    }
}

/// Splits ready for training, with the identity of the source data.
pub struct LoadedData {
    pub data: TrainData,
    pub digest: String,
    pub source: String,
}

/// SHA-256 over labels and 8-bit pixels of the given splits.
pub fn dataset_digest(splits: &[&Dataset]) -> String {
    let mut h = Sha256::new();
    for ds in splits {
        h.update((ds.len() as u64).to_le_bytes());
        for i in 0..ds.len() {
            h.update((ds.labels[i] as u32).to_le_bytes());
            let px: Vec<u8> = ds.pixels_of(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            h.update(&px);
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)
}

/// Loads and normalizes the configured dataset. With `normalizer` given,
/// those statistics are applied instead of being refitted.
pub fn load_data(cfg: &RunConfig, override_path: Option<&Path>, normalizer: Option<&Normalizer>) -> Result<LoadedData, Failure> {
    let section = cfg
        .data
        .clone()
        .ok_or_else(|| Failure::Usage("the config has no [data] section".into()))?;
    let path = override_path.map(Path::to_path_buf).or_else(|| section.resolve_path(data_root().as_deref()));
    let (mut train, mut test, mut extra, source) = match section.kind {
        DataKind::Synth => {
            let spec = &cfg.model.backbone;
            let (synth, source) = match path.as_ref().filter(|p| p.join("manifest.json").is_file()) {
                Some(p) => (SynthScaleData::load(p)?.1, p.display().to_string()),
                None => {
                    let sc = section.synth_config(spec.class_count, spec.input_size);
                    (synth_scale_dataset(&sc)?, format!("synth(seed={})", sc.seed))
                }
            };
            (synth.train, synth.test_seen, vec![("held_out".to_string(), synth.test_held_out)], source)
        }
        DataKind::Cifar10 | DataKind::Cifar100 => {
            let variant = if section.kind == DataKind::Cifar10 { CifarVariant::C10 } else { CifarVariant::C100 };
            let dir = path.ok_or_else(|| {
                Failure::Usage(format!("no dataset path: set [data].path, pass --data or set {DATA_ROOT_ENV}"))
            })?;
            let splits = load_cifar(&dir, variant)?;
            (splits.train, splits.test, Vec::new(), dir.display().to_string())
        }
    };
    if let Some(n) = section.train_subset {
        train = train.take(n);
    }
    if let Some(n) = section.test_subset {
        test = test.take(n);
    }
    let mut all: Vec<&Dataset> = vec![&train, &test];
    all.extend(extra.iter().map(|(_, d)| d));
    let digest = dataset_digest(&all);
    let normalizer = match normalizer {
        Some(n) => {
            n.apply(&mut train)?;
            n.apply(&mut test)?;
            for (_, d) in extra.iter_mut() {
                n.apply(d)?;
            }
            n.clone()
        }
        None => {
            let mut others: Vec<&mut Dataset> = vec![&mut test];
            others.extend(extra.iter_mut().map(|(_, d)| d));
            let report = normalize_per_channel(&mut train, &mut others)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            report.normalizer
        }
    };
    Ok(LoadedData {
        data: TrainData { train, test, extra, normalizer: Some(normalizer) },
        digest,
        source,
    })
}

fn default_run_dir(config: &Path, seed: u64) -> PathBuf {
    let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    PathBuf::from("runs").join(format!("{stem}-seed{seed}"))
}

#[derive(Serialize)]
struct Summary {
    final_epoch: usize,
    final_test_error: f64,
    best_epoch: usize,
    best_test_error: f64,
    final_extra: std::collections::BTreeMap<String, f64>,
}

fn cmd_train<T: Scalar>(g: &Global, config: &Path, data: Option<&Path>, epochs: Option<usize>, no_bn_decay: bool) -> CmdResult {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if no_bn_decay {
        cfg.train.bn_decay = false;
    }
    cfg.train.deterministic = g.deterministic;
    let loaded = load_data(&cfg, data, None)?;
    let out = g.out.clone().unwrap_or_else(|| default_run_dir(config, cfg.train.seed));
    let run = RunDir::create(&out)?;
    let manifest = RunManifest::new(&cfg, config, &loaded, T::PRECISION, g);
    run.write_json("manifest.json", &manifest)?;
    fs::copy(config, run.path().join("config.toml"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let (net, mut store) = build_wsms::<T>(&cfg.model, &mut rng)?;
    let metrics_path = run.path().join("metrics.jsonl");
    let mut lines = String::new();
    let outcome = train(&net, &mut store, &loaded.data, &cfg.train, &mut |r| {
        println!("{}", r.to_json());
        lines.push_str(&r.to_json());
        lines.push('\n');
        fs::write(&metrics_path, &lines)?;
        Ok(())
    })?;
    write_metrics(&metrics_path, &outcome.metrics)?;
    checkpoint::save(&run.path().join("final.ckpt"), &outcome.final_checkpoint)?;
    checkpoint::save(&run.path().join("best.ckpt"), &outcome.best_checkpoint)?;
    let eval = evaluate(&net, &store, &loaded.data.test, cfg.train.batch_size)?;
    write_predictions(&run.path().join("predictions.csv"), &eval.predictions)?;
    let last = outcome.metrics.last().expect("epoch 0 record");
    let summary = Summary {
        final_epoch: last.epoch,
        final_test_error: outcome.final_test_error,
        best_epoch: outcome.best_epoch,
        best_test_error: outcome.best_test_error,
        final_extra: last.extra.clone(),
    };
    run.write_json("summary.json", &summary)?;
    println!(
        "final test error {:.2}% (epoch {}), best {:.2}% (epoch {}); run directory {}",
        summary.final_test_error,
        summary.final_epoch,
        summary.best_test_error,
        summary.best_epoch,
        run.path().display()
    );
    Ok(())
}

fn cmd_eval<T: Scalar>(g: &Global, config: &Path, ckpt_path: &Path, data: Option<&Path>, split: &str) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let ckpt: Checkpoint<T> = checkpoint::load(ckpt_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (net, mut store) = build_wsms::<T>(&cfg.model, &mut rng)?;
    ckpt.restore_into(&mut store)?;
    let loaded = load_data(&cfg, data, ckpt.normalizer.as_ref())?;
    let d = &loaded.data;
    let ds = match split {
        "test" => &d.test,
        "train" => &d.train,
        other => d
            .extra
            .iter()
            .find(|(n, _)| n == other)
            .map(|(_, ds)| ds)
            .ok_or_else(|| Failure::Usage(format!("unknown split `{other}`")))?,
    };
    let eval = evaluate(&net, &store, ds, cfg.train.batch_size)?;
    let dump = g
        .csv
        .clone()
        .or_else(|| g.out.as_ref().map(|o| o.join(format!("predictions-{split}.csv"))))
        .unwrap_or_else(|| PathBuf::from(format!("predictions-{split}.csv")));
    if let Some(parent) = dump.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_predictions(&dump, &eval.predictions)?;
    println!("{split} error {}% over {} examples; predictions written to {}", eval.error, ds.len(), dump.display());
    Ok(())
}

fn cmd_synth_data(g: &Global, config: Option<&Path>, train_pc: Option<usize>, test_pc: Option<usize>) -> CmdResult {
    let mut sc = match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            let section: DataSection = cfg
                .data
                .filter(|d| d.kind == DataKind::Synth)
                .ok_or_else(|| Failure::Usage(format!("{}: no synthetic [data] section", p.display())))?;
            section.synth_config(cfg.model.backbone.class_count, cfg.model.backbone.input_size)
        }
        None => SynthScaleConfig::default(),
    };
    if let Some(s) = g.seed {
        sc.seed = s;
    }
    if let Some(n) = train_pc {
        sc.train_per_class = n;
    }
    if let Some(n) = test_pc {
        sc.test_per_class = n;
    }
    let data = synth_scale_dataset(&sc)?;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("synth-data"));
    write_synth_dataset(&out, &sc, &data)?;
    println!(
        "wrote {} train, {} test (seen scales), {} test (held-out scales) images to {}",
        data.train.len(),
        data.test_seen.len(),
        data.test_held_out.len(),
        out.display()
    );
    Ok(())
}

fn cmd_compare_preds(g: &Global, baselines: &[PathBuf], target: &Path) -> CmdResult {
    if baselines.is_empty() {
        return Err(Failure::Usage("at least one baseline dump is required".into()));
    }
    let base = baselines.iter().map(|p| read_predictions(p)).collect::<Result<Vec<_>, _>>()?;
    let tgt = read_predictions(target)?;
    let ids = compare_preds(&base, &tgt)?;
    let mut out = String::from("id\n");
    for id in &ids {
        out.push_str(&format!("{id}\n"));
    }
    print!("{out}");
    eprintln!("{} examples misclassified by all baselines and classified correctly by the target", ids.len());
    if let Some(csv) = &g.csv {
        fs::write(csv, out)?;
    }
    Ok(())
}
