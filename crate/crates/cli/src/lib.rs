//! Command line driver: dataset generation, training, evaluation, scoring
//! of label files, gradient checks and the method-grid benchmark.
//!
//! Every command writes `manifest.json` next to its outputs with the fully
//! resolved configuration, the seed, and SHA-256 hashes of its inputs and
//! artifacts. Paths in the manifest are relative to the data or output
//! directory, so two runs with the same inputs produce identical manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use viewseg::data::io::{load_dataset, read_classes, read_labels_auto, save_dataset};
use viewseg::data::{generate_synthetic, GeneratorConfig, SEEN_GROUP};
use viewseg::gradcheck::{self, TOLERANCE};
use viewseg::metrics::{evaluate_all_with, score_recording, EvalReport, MetricOptions, METRIC_COLUMNS};
use viewseg::trainer::{train, Method, TrainConfig};
use viewseg::{checkpoint, ModelState};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const REPORT: &str = "report.csv";
pub const GENERATOR: &str = "generator.json";
pub const BENCH_CSV: &str = "bench.csv";
pub const BENCH_SEEDS_CSV: &str = "bench_per_seed.csv";

static QUIET: AtomicBool = AtomicBool::new(false);

/// Prints command output to stdout unless `--quiet` was given.
macro_rules! say {
    ($($arg:tt)*) => {
        if !QUIET.load(Ordering::Relaxed) {
            print!($($arg)*);
        }
    };
}

/// Exit status of a gradient check with an error above tolerance.
pub const EXIT_GRADCHECK_FAILED: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "viewseg", version, about = "Cross-view action segmentation experiments")]
struct Cli {
    /// Suppress result summaries on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite artifacts of an earlier run.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    Gen(Common),
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on the evaluation sequences of a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score predicted label files against ground-truth label files.
    Score {
        #[command(flatten)]
        common: Common,
        /// Prediction file; repeat and pair with `--gt` in order.
        #[arg(long)]
        pred: Vec<PathBuf>,
        #[arg(long)]
        gt: Vec<PathBuf>,
        /// Class list for plain-text label files.
        #[arg(long)]
        classes: Option<PathBuf>,
    },
    /// Finite-difference checks of every primitive and loss.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Train the method grid on generated datasets and tabulate the results.
    Bench(Common),
}

/// Evaluation options.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: MetricOptions,
}

/// One prediction/ground-truth pair of the `score` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorePair {
    pub pred: PathBuf,
    pub gt: PathBuf,
    #[serde(default = "default_group")]
    pub group: String,
}

fn default_group() -> String {
    "all".to_string()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub pairs: Vec<ScorePair>,
    pub classes: Option<PathBuf>,
    pub metrics: MetricOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { trials: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    /// One generated dataset and one training run per method for each seed.
    pub seeds: Vec<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config: &'a C,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Hashes of `files`, keyed by their path relative to `root`.
fn hash_all(root: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    files
        .iter()
        .map(|f| Ok((f.to_string_lossy().replace('\\', "/"), hash_file(&root.join(f))?)))
        .collect()
}

fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let dir = root.join(&rel);
        let mut entries: Vec<_> = fs::read_dir(&dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = rel.join(e.file_name());
            if e.file_type()?.is_dir() {
                stack.push(path);
            } else if path != Path::new(MANIFEST) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn write_manifest<C: Serialize>(
    out: &Path,
    command: &str,
    seed: Option<u64>,
    config: &C,
    inputs: BTreeMap<String, String>,
    artifacts: &[PathBuf],
) -> Result<()> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
        inputs,
        artifacts: hash_all(out, artifacts)?,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out.join(MANIFEST), text).with_context(|| format!("writing manifest in {}", out.display()))
}

fn read_config<C: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// Creates `out`; refuses to reuse a directory holding an earlier run unless
/// `force` is set.
fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.join(MANIFEST).exists() && !force {
        bail!("{} already holds a run; pass --force to overwrite it", out.display());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dataset_inputs(data: &Path) -> Result<BTreeMap<String, String>> {
    let files = list_files(data)?;
    Ok(hash_all(data, &files)?
        .into_iter()
        .map(|(k, v)| (format!("data/{k}"), v))
        .collect())
}

fn cmd_gen(c: &Common) -> Result<()> {
    let mut cfg: GeneratorConfig = read_config(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    prepare_out(&c.out, c.force)?;
    let g = generate_synthetic(&cfg)?;
    let mut files = save_dataset(&c.out, &g.dataset, &g.split)?;
    write_text(&c.out.join(GENERATOR), &(serde_json::to_string_pretty(&cfg)? + "\n"))?;
    files.push(PathBuf::from(GENERATOR));
    files.sort();
    write_manifest(&c.out, "gen", Some(cfg.seed), &cfg, BTreeMap::new(), &files)?;
    say!(
        "generated {} recordings of {} sequences in {}
",
        g.dataset.recordings.len(),
        cfg.num_sequences,
        c.out.display()
    );
    Ok(())
}

fn cmd_train(c: &Common, data: &Path) -> Result<()> {
    let mut cfg: TrainConfig = read_config(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let (dataset, split) = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    cfg.fit_to(&dataset);
    prepare_out(&c.out, c.force)?;
    let (state, log) = train::<f64>(&cfg, &dataset, &split)?;
    checkpoint::save(&c.out.join(CHECKPOINT), &state)?;
    write_text(&c.out.join(TRAIN_LOG), &log.to_csv(&split.group_names()))?;
    let report = log.final_report().cloned().unwrap_or_default();
    write_text(&c.out.join(REPORT), &report.to_csv())?;
    let files = [CHECKPOINT, REPORT, TRAIN_LOG].map(PathBuf::from);
    write_manifest(&c.out, "train", Some(cfg.seed), &cfg, dataset_inputs(data)?, &files)?;
    say!("{}", report.to_csv());
    Ok(())
}

fn cmd_eval(c: &Common, data: &Path, ckpt: &Path) -> Result<()> {
    let cfg: EvalConfig = read_config(c.config.as_deref())?;
    let (dataset, split) = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let state: ModelState = checkpoint::load(ckpt)?;
    if state.config.input_dim != dataset.feature_dim || state.config.num_classes != dataset.num_classes {
        bail!(
            "checkpoint expects {} features and {} classes, dataset has {} and {}",
            state.config.input_dim,
            state.config.num_classes,
            dataset.feature_dim,
            dataset.num_classes
        );
    }
    prepare_out(&c.out, c.force)?;
    let report = evaluate_all_with(&state, &dataset, &split, &cfg.metrics)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_text(&c.out.join(REPORT), &report.to_csv())?;
    let mut inputs = dataset_inputs(data)?;
    inputs.insert("checkpoint".to_string(), hash_file(ckpt)?);
    write_manifest(&c.out, "eval", c.seed, &cfg, inputs, &[PathBuf::from(REPORT)])?;
    say!("{}", report.to_csv());
    Ok(())
}

fn cmd_score(c: &Common, pred: &[PathBuf], gt: &[PathBuf], classes: Option<&Path>) -> Result<()> {
    let mut cfg: ScoreConfig = read_config(c.config.as_deref())?;
    if pred.len() != gt.len() {
        bail!("{} --pred files but {} --gt files", pred.len(), gt.len());
    }
    cfg.pairs.extend(pred.iter().zip(gt).map(|(p, g)| ScorePair {
        pred: p.clone(),
        gt: g.clone(),
        group: default_group(),
    }));
    if let Some(classes) = classes {
        cfg.classes = Some(classes.to_path_buf());
    }
    if cfg.pairs.is_empty() {
        bail!("nothing to score: give --pred/--gt or pairs in the config");
    }
    let class_names = match &cfg.classes {
        Some(p) => read_classes(p)?,
        None => Vec::new(),
    };
    let mut scored = Vec::new();
    let mut groups: Vec<String> = Vec::new();
    let mut inputs = BTreeMap::new();
    for (k, pair) in cfg.pairs.iter().enumerate() {
        let p = read_labels_auto(&pair.pred, &class_names)?;
        let g = read_labels_auto(&pair.gt, &class_names)?;
        let s = score_recording(&p, &g, &cfg.metrics)
            .with_context(|| format!("scoring {} against {}", pair.pred.display(), pair.gt.display()))?;
        if !groups.contains(&pair.group) {
            groups.push(pair.group.clone());
        }
        scored.push((pair.group.clone(), s));
        inputs.insert(format!("pair{k:04}/pred"), hash_file(&pair.pred)?);
        inputs.insert(format!("pair{k:04}/gt"), hash_file(&pair.gt)?);
    }
    prepare_out(&c.out, c.force)?;
    let report = EvalReport::aggregate(&groups, &scored);
    write_text(&c.out.join(REPORT), &report.to_csv())?;
    write_manifest(&c.out, "score", c.seed, &cfg.metrics, inputs, &[PathBuf::from(REPORT)])?;
    say!("{}", report.to_csv());
    Ok(())
}

/// Returns whether every case passed.
fn cmd_gradcheck(config: Option<&Path>, out: Option<&Path>, seed: Option<u64>, force: bool) -> Result<bool> {
    let mut cfg: GradcheckConfig = read_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if cfg.trials == 0 {
        bail!("trials must be positive");
    }
    let results = gradcheck::run_suite(cfg.trials, cfg.seed)?;
    let mut csv = String::from("case,trials,max_error,passed\n");
    for r in &results {
        say!("{:<36} {:>4} trials  max rel err {:.3e}  {}\n", r.name, r.trials, r.max_error, if r.passed() { "ok" } else { "FAIL" });
        csv.push_str(&format!("{},{},{:e},{}\n", r.name, r.trials, r.max_error, r.passed()));
    }
    let passed = results.iter().all(|r| r.passed());
    say!("{} cases, tolerance {TOLERANCE:e}: {}\n", results.len(), if passed { "all passed" } else { "FAILED" });
    if let Some(out) = out {
        prepare_out(out, force)?;
        write_text(&out.join("gradcheck.csv"), &csv)?;
        write_manifest(out, "gradcheck", Some(cfg.seed), &cfg, BTreeMap::new(), &[PathBuf::from("gradcheck.csv")])?;
    }
    Ok(passed)
}

/// Final report of one grid cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub report: EvalReport,
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("VIEWSEG_THREADS") {
        let n: usize = v.parse().with_context(|| format!("VIEWSEG_THREADS={v:?} is not a number"))?;
        builder = builder.num_threads(n.max(1));
    }
    Ok(builder.build()?)
}

/// Averages cell reports per method and group over seeds, rows ordered by
/// the method list and then the split's group order.
pub fn bench_table(methods: &[Method], groups: &[String], cells: &[CellResult]) -> String {
    let mut out = String::from("method,group");
    for m in METRIC_COLUMNS {
        out.push(',');
        out.push_str(m);
    }
    out.push_str(",count,seeds\n");
    for &method in methods {
        for group in groups {
            let rows: Vec<_> = cells
                .iter()
                .filter(|c| c.method == method)
                .filter_map(|c| c.report.group(group))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            out.push_str(&format!("{},{}", method.name(), group));
            for k in 0..METRIC_COLUMNS.len() {
                let mean = rows.iter().map(|r| r.values()[k]).sum::<f64>() / n;
                out.push_str(&format!(",{mean:.6}"));
            }
            out.push_str(&format!(",{},{}\n", rows.iter().map(|r| r.count).sum::<usize>(), rows.len()));
        }
    }
    out
}

fn cmd_bench(c: &Common) -> Result<()> {
    let mut cfg: BenchConfig = read_config(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        let n = cfg.seeds.len().max(1) as u64;
        cfg.seeds = (0..n).map(|k| seed + k).collect();
    }
    if cfg.methods.is_empty() || cfg.seeds.is_empty() {
        bail!("bench needs at least one method and one seed");
    }
    prepare_out(&c.out, c.force)?;
    let datasets = cfg
        .seeds
        .iter()
        .map(|&seed| generate_synthetic(&GeneratorConfig { seed, ..cfg.generator.clone() }))
        .collect::<viewseg::Result<Vec<_>>>()?;
    let groups = datasets[0].split.group_names();
    let grid: Vec<(usize, Method)> = (0..cfg.seeds.len())
        .flat_map(|s| cfg.methods.iter().map(move |&m| (s, m)))
        .collect();
    let pool = thread_pool()?;
    let cells = pool.install(|| {
        grid.par_iter()
            .map(|&(s, method)| -> Result<(CellResult, Vec<PathBuf>)> {
                let g = &datasets[s];
                let seed = cfg.seeds[s];
                let mut tc = TrainConfig { method, seed, ..cfg.train.clone() };
                tc.fit_to(&g.dataset);
                let (state, log) = train::<f64>(&tc, &g.dataset, &g.split)
                    .with_context(|| format!("training {} with seed {seed}", method.name()))?;
                let cell = PathBuf::from("cells").join(format!("{}_seed{seed}", method.name()));
                let dir = c.out.join(&cell);
                fs::create_dir_all(&dir)?;
                checkpoint::save(&dir.join(CHECKPOINT), &state)?;
                write_text(&dir.join(TRAIN_LOG), &log.to_csv(&g.split.group_names()))?;
                let report = log.final_report().cloned().unwrap_or_default();
                write_text(&dir.join(REPORT), &report.to_csv())?;
                let files = [CHECKPOINT, REPORT, TRAIN_LOG].map(|f| cell.join(f)).to_vec();
                log::info!(
                    "{} seed {seed}: unseen F1@50 {:.2}, seen F1@50 {:.2}",
                    method.name(),
                    report.unseen_mean(|g| g.f1_50).unwrap_or(f64::NAN),
                    report.group(SEEN_GROUP).map_or(f64::NAN, |g| g.f1_50)
                );
                Ok((CellResult { method, seed, report }, files))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (cells, cell_files): (Vec<CellResult>, Vec<Vec<PathBuf>>) = cells.into_iter().unzip();

    let table = bench_table(&cfg.methods, &groups, &cells);
    write_text(&c.out.join(BENCH_CSV), &table)?;
    let mut per_seed = String::from("method,seed,");
    per_seed.push_str(&EvalReport::CSV_HEADER.to_string());
    per_seed.push('\n');
    for cell in &cells {
        for line in cell.report.to_csv().lines().skip(1) {
            per_seed.push_str(&format!("{},{},{line}\n", cell.method.name(), cell.seed));
        }
    }
    write_text(&c.out.join(BENCH_SEEDS_CSV), &per_seed)?;
    let mut files: Vec<PathBuf> = cell_files.into_iter().flatten().collect();
    files.push(PathBuf::from(BENCH_CSV));
    files.push(PathBuf::from(BENCH_SEEDS_CSV));
    files.sort();
    write_manifest(&c.out, "bench", cfg.seeds.first().copied(), &cfg, BTreeMap::new(), &files)?;
    say!("{table}");
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on configuration, format or runtime
/// errors, 2 when a gradient check exceeds its tolerance.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    QUIET.store(cli.quiet, Ordering::Relaxed);
    let outcome = match &cli.command {
        Command::Gen(c) => cmd_gen(c).map(|_| 0),
        Command::Train { common, data } => cmd_train(common, data).map(|_| 0),
        Command::Eval { common, data, checkpoint } => cmd_eval(common, data, checkpoint).map(|_| 0),
        Command::Score { common, pred, gt, classes } => cmd_score(common, pred, gt, classes.as_deref()).map(|_| 0),
        Command::Gradcheck { config, out, seed, force } => {
            cmd_gradcheck(config.as_deref(), out.as_deref(), *seed, *force)
                .map(|ok| if ok { 0 } else { EXIT_GRADCHECK_FAILED })
        }
        Command::Bench(c) => cmd_bench(c).map(|_| 0),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
