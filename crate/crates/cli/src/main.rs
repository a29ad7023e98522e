use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand, ValueEnum};

use lcreg::config::{apply_pairs, parse_flat};
use lcreg::diffcore::Fault;
use lcreg::gradsuite::full_suite;
use lcreg::longtail_data::{
    cache_root, ensure_cached, load_cached, realized_imbalance, split_classes, CachedDataset, DataSource, DatasetRecipe,
    ImbalanceProfile, ProfileKind, SampleShape,
};
use lcreg::model::{load_checkpoint, save_checkpoint};
use lcreg::trainer::{
    component_grid, config_hash, evaluate, latent_usage, render_table, run, run_ablation, summarize, weight_grid,
    RunRecord, TrainConfig, RUN_FORMAT,
};

/// Long-tailed classification with a shared latent category pool.
#[derive(Parser)]
#[command(name = "lcreg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build (or reuse) a cached long-tailed train/val pair.
    BuildDataset(BuildArgs),
    /// Train one configuration, or an ablation grid with --ablate.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a cached dataset.
    Eval(EvalArgs),
    /// Run the gradient-check suite.
    Gradcheck(GradcheckArgs),
    /// Summarize results files into accuracy tables.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Mixture,
    ImageMixture,
    Corpus,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Exponential,
    Step,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    nmax: usize,
    /// Imbalance factor: largest over smallest class count.
    #[arg(long = "if")]
    imbalance: f64,
    #[arg(long, value_enum, default_value = "exponential")]
    profile: ProfileArg,
    /// Input dimension of vector mixtures.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Side length of image mixtures.
    #[arg(long, default_value_t = 8)]
    image_size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    parts: usize,
    #[arg(long, default_value_t = 3)]
    parts_per_class: usize,
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    #[arg(long, default_value_t = 1.0)]
    stdev: f64,
    /// Balanced corpus directory (required for --kind corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    val_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cache root; defaults to $LCREG_CACHE_DIR or .lcreg-cache.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Cache entry printed by build-dataset.
    #[arg(long)]
    data: PathBuf,
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Run a grid instead of a single configuration.
    #[arg(long)]
    ablate: bool,
    #[arg(long, value_enum, default_value = "components")]
    grid: GridArg,
    /// Seeds of the ablation grid.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    /// Retrain even when an up-to-date results file exists.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Components,
    Weights,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate on the training set instead of the validation set.
    #[arg(long)]
    train_split: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, hide = true, value_enum)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SigmoidBackwardSign,
}

#[derive(Args)]
struct ReportArgs {
    /// Results files or directories containing them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Write per-sample latent usage to this CSV (needs --checkpoint and --data).
    #[arg(long, requires_all = ["checkpoint", "data"])]
    histogram: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

fn usage_error(kind: ErrorKind, msg: impl std::fmt::Display) -> ! {
    Cli::command().error(kind, msg).exit()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildDataset(a) => build_dataset(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn build_dataset(a: BuildArgs) -> Result<ExitCode> {
    let kind = match a.profile {
        ProfileArg::Exponential => ProfileKind::Exponential,
        ProfileArg::Step => ProfileKind::Step,
    };
    let profile = ImbalanceProfile::new(a.classes, a.nmax, a.imbalance, kind)
        .unwrap_or_else(|e| usage_error(ErrorKind::InvalidValue, e));
    let mixture = |sample| DataSource::Mixture {
        sample,
        num_parts: a.parts,
        parts_per_class: a.parts_per_class,
        scale: a.scale,
        stdev: a.stdev,
    };
    let data = match a.kind {
        DataKind::Mixture => mixture(SampleShape::Vector { dim: a.dim }),
        DataKind::ImageMixture => mixture(SampleShape::Image {
            channels: a.channels,
            height: a.image_size,
            width: a.image_size,
        }),
        DataKind::Corpus => match a.corpus {
            Some(path) => DataSource::Corpus { path },
            None => usage_error(ErrorKind::MissingRequiredArgument, "--kind corpus requires --corpus <DIR>"),
        },
    };
    let recipe = DatasetRecipe {
        data,
        profile,
        val_per_class: a.val_per_class,
        seed: a.seed,
    };
    let root = a.cache_dir.unwrap_or_else(cache_root);
    let cached = ensure_cached(&root, &recipe)?;
    let counts = &cached.train.counts;
    let split = split_classes(counts);
    println!("cache: {}", cached.dir.display());
    println!("status: {}", if cached.built { "built" } else { "reused" });
    println!("counts: {counts:?}");
    println!("realized_if: {}", realized_imbalance(counts));
    println!(
        "splits: many={} medium={} few={}",
        split.many.len(),
        split.medium.len(),
        split.few.len()
    );
    println!("train_samples: {} val_samples: {}", cached.train.len(), cached.val.len());
    Ok(ExitCode::SUCCESS)
}

fn open_cache(dir: &Path) -> Result<CachedDataset> {
    if !dir.join("recipe.json").is_file() {
        bail!("no dataset cache at {} (run build-dataset first)", dir.display());
    }
    load_cached(dir).with_context(|| format!("reading dataset cache {}", dir.display()))
}

fn load_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut pairs = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_flat(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => Vec::new(),
    };
    for o in &a.overrides {
        let Some((k, v)) = o.split_once('=') else {
            usage_error(ErrorKind::InvalidValue, format!("--set expects KEY=VALUE, got {o:?}"));
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        pairs.retain(|(p, _)| *p != k);
        pairs.push((k, v));
    }
    if let Some(seed) = a.seed {
        pairs.retain(|(p, _)| p != "seed");
        pairs.push(("seed".into(), seed.to_string()));
    }
    let config = apply_pairs(&TrainConfig::default(), &pairs)?;
    config.validate()?;
    Ok(config)
}

fn run_stem(record_label: &str, seed: u64) -> String {
    format!("{record_label}-seed{seed}")
}

fn write_record(out: &Path, record: &RunRecord) -> Result<PathBuf> {
    let stem = run_stem(&record.label, record.seed);
    let path = out.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(record)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    let log = out.join(format!("{stem}.jsonl"));
    fs::write(&log, record.log_lines().join("\n") + "\n").with_context(|| format!("writing {}", log.display()))?;
    Ok(path)
}

fn up_to_date(path: &Path, config: &TrainConfig, dataset: &str) -> bool {
    let Ok(text) = fs::read_to_string(path) else {
        return false;
    };
    let Ok(prev) = serde_json::from_str::<RunRecord>(&text) else {
        return false;
    };
    prev.config == *config && prev.dataset.as_deref() == Some(dataset)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let config = load_config(&a)?;
    let cached = open_cache(&a.data)?;
    let key = cached.recipe.key();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    if a.ablate {
        let rows = match a.grid {
            GridArg::Components => component_grid(&config),
            GridArg::Weights => weight_grid(&config),
        };
        let started = Instant::now();
        let cells = run_ablation(&rows, &a.seeds, |_| Ok((cached.train.clone(), cached.val.clone())))?;
        let mut records = Vec::new();
        let mut failed = 0;
        for cell in cells {
            match cell.record {
                Some(mut r) => {
                    r.dataset = Some(key.clone());
                    write_record(&a.out, &r)?;
                    records.push(r);
                }
                None => {
                    failed += 1;
                    eprintln!("{} seed {}: {}", cell.label, cell.seed, cell.error.unwrap_or_default());
                }
            }
        }
        let table = render_table(&summarize(&records));
        fs::write(a.out.join("ablation-summary.txt"), &table)?;
        print!("{table}");
        println!("grid time: {:.1}s", started.elapsed().as_secs_f64());
        return Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE });
    }

    let label = config.variant_label();
    let stem = run_stem(&label, config.seed);
    let results = a.out.join(format!("{stem}.json"));
    if !a.force && up_to_date(&results, &config, &key) {
        println!("up to date: {}", results.display());
        return Ok(ExitCode::SUCCESS);
    }
    let out = run(&config, &cached.train, &cached.val, &label)?;
    let ckpt_path = a.out.join(format!("{stem}.ckpt"));
    save_checkpoint(&ckpt_path, &out.checkpoint)?;
    let mut record = out.record;
    record.dataset = Some(key);
    record.checkpoint = Some(ckpt_path.display().to_string());
    let path = write_record(&a.out, &record)?;
    let m = &record.final_metrics;
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
    println!("results: {}", path.display());
    println!("config_hash: {}", record.config_hash);
    println!(
        "top1 overall={} many={} medium={} few={}",
        pct(Some(m.top1_overall)),
        pct(m.top1_many),
        pct(m.top1_medium),
        pct(m.top1_few)
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cached = open_cache(&a.data)?;
    let split = split_classes(&cached.train.counts);
    let ds = if a.train_split { &cached.train } else { &cached.val };
    let metrics = evaluate(&ckpt.model, ds, &split)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let fault = a.inject_fault.map(|FaultArg::SigmoidBackwardSign| Fault::SigmoidBackwardSign);
    let started = Instant::now();
    let reports = full_suite(a.seed, a.instances, fault)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!(
        "{} checks, {failed} failed, {:.1}s",
        reports.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn collect_results(inputs: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .with_context(|| format!("listing {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    let mut records = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", f.display()))?;
        if value.get("format").and_then(|v| v.as_str()) != Some(RUN_FORMAT) {
            continue;
        }
        records.push(serde_json::from_value(value).with_context(|| format!("parsing {}", f.display()))?);
    }
    Ok(records)
}

fn report(a: ReportArgs) -> Result<ExitCode> {
    let records = collect_results(&a.inputs)?;
    if records.is_empty() {
        bail!("no results files found");
    }
    print!("{}", render_table(&summarize(&records)));
    let hashes: Vec<String> = records.iter().map(|r| config_hash(&r.config)).collect();
    if hashes.iter().zip(&records).any(|(h, r)| *h != r.config_hash) {
        eprintln!("warning: some results files carry a config hash that does not match their config");
    }
    if let (Some(out), Some(ckpt), Some(data)) = (&a.histogram, &a.checkpoint, &a.data) {
        let ckpt = load_checkpoint(ckpt)?;
        let cached = open_cache(data)?;
        let usage = latent_usage(&ckpt.model, &cached.val)?;
        let m = usage.first().map_or(0, Vec::len);
        let mut csv = String::from("sample,label");
        for k in 0..m {
            csv.push_str(&format!(",latent_{k}"));
        }
        csv.push('\n');
        for (i, row) in usage.iter().enumerate() {
            csv.push_str(&format!("{i},{}", cached.val.labels[i]));
            for v in row {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
        println!("histogram: {}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}
