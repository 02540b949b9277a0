//! Release gate. Each check prints one `PASS` or `FAIL` line; the process
//! exits non-zero if any check fails.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viewseg::autodiff::{Tape, Tensor};
use viewseg::data::{generate_synthetic, GeneratedDataset, SEEN_GROUP};
use viewseg::gradcheck::{self, TOLERANCE};
use viewseg::losses::{
    action_loss, framewise_similarity, sequence_loss, smoothing_loss, LossWeights, SegmentEmbedding, SimilarityKind,
    SimilarityOptions,
};
use viewseg::metrics::{segmental_edit_score, segmental_f1, F1_THRESHOLDS};
use viewseg::model::{predictor_forward, EncoderConfig, ModelState};
use viewseg::trainer::{train, Method, TrainConfig};
use viewseg_cli::BenchConfig;

const GRADIENT_TRIALS: usize = 100;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const METRIC_INSTANCES: usize = 400;
const METRIC_BUDGET: Duration = Duration::from_secs(60);
const MAX_GREEDY_DISAGREEMENT: f64 = 0.02;
const ALGEBRA_INSTANCES: u64 = 200;
const SCALE_TOLERANCE: f64 = 1e-9;
const SMOOTHING_TOLERANCE: f64 = 1e-12;
const INERT_EPOCHS: usize = 3;
const BENCH_SEEDS: [u64; 3] = [0, 1, 2];
const OURS_MARGIN: f64 = 3.0;
const SINGLE_LOSS_MARGIN: f64 = 1.0;
const SEEN_SLACK: f64 = 1.0;
const BENCH_BUDGET: Duration = Duration::from_secs(15 * 60);
const SYNC_SHIFT: usize = 10;

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn report(check: &Check) {
    let mut out = std::io::stdout().lock();
    let status = if check.passed { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "{status} {}: {}", check.name, check.detail);
    let _ = out.flush();
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let results = gradcheck::run_suite(GRADIENT_TRIALS, 2024).expect("gradient suite");
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let trials: usize = results.iter().map(|r| r.trials).sum();
    Check {
        name: "gradient suite",
        passed: failing.is_empty() && elapsed <= GRADIENT_BUDGET && !worst.is_nan(),
        detail: format!(
            "{} cases x {GRADIENT_TRIALS} trials ({trials} checks), worst relative error {worst:.2e} (limit {TOLERANCE:.0e}), {:.1}s; failing: {failing:?}",
            results.len(),
            elapsed.as_secs_f64()
        ),
    }
}

fn metric_oracles() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut edit_mismatch, mut greedy_mismatch, mut above_optimal) = (0, 0, 0);
    let mut disagreements = 0;
    for _ in 0..METRIC_INSTANCES {
        let (pred, gt) = oracles::random_instance(&mut rng);
        if segmental_edit_score(&pred, &gt) != oracles::edit_score(&pred, &gt) {
            edit_mismatch += 1;
        }
        let mut differs = false;
        for tau in F1_THRESHOLDS {
            let got = segmental_f1(&pred, &gt, tau).expect("equal lengths");
            let optimal = oracles::optimal_f1(&pred, &gt, tau);
            if got != oracles::greedy_f1(&pred, &gt, tau) {
                greedy_mismatch += 1;
            }
            if got > optimal {
                above_optimal += 1;
            }
            differs |= got != optimal;
        }
        disagreements += usize::from(differs);
    }
    let elapsed = start.elapsed();
    let rate = disagreements as f64 / METRIC_INSTANCES as f64;
    Check {
        name: "metric oracles",
        passed: edit_mismatch == 0
            && greedy_mismatch == 0
            && above_optimal == 0
            && rate < MAX_GREEDY_DISAGREEMENT
            && elapsed <= METRIC_BUDGET,
        detail: format!(
            "{METRIC_INSTANCES} instances: edit mismatches {edit_mismatch}, greedy reference mismatches {greedy_mismatch}, \
             greedy below maximum matching on {disagreements} ({:.2}%, limit {:.0}%), {:.2}s",
            100.0 * rate,
            100.0 * MAX_GREEDY_DISAGREEMENT,
            elapsed.as_secs_f64()
        ),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

fn predictor(dim: usize, seed: u64) -> ModelState<f64> {
    let cfg = EncoderConfig { input_dim: 2, embed_dim: dim, num_classes: 2, num_stages: 1, layers_per_stage: 1, kernel_size: 3 };
    ModelState::init(cfg, seed).unwrap()
}

/// Loss values of both argument orders; `None` pooling uses the raw frames.
fn both_orders(
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    state: &ModelState<f64>,
    opts: SimilarityOptions,
    action: bool,
) -> (f64, f64) {
    let eval = |x: &Tensor<f64>, y: &Tensor<f64>| {
        let tape = Tape::new();
        let bound = state.bind_frozen(&tape);
        let (zx, zy) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let loss = if action {
            let sx = SegmentEmbedding { z: zx, label: 0 };
            let sy = SegmentEmbedding { z: zy, label: 0 };
            action_loss(sx, sy, &bound.predictor, opts)
        } else {
            sequence_loss(zx, zy, &bound.predictor, opts)
        };
        loss.unwrap().item().unwrap()
    };
    (eval(a, b), eval(b, a))
}

/// Gradients of the sequence loss, and of the same objective with the
/// targets supplied as detached constants.
fn stop_grad_gradients(a: &Tensor<f64>, b: &Tensor<f64>, state: &ModelState<f64>) -> [Vec<Tensor<f64>>; 2] {
    let tape = Tape::new();
    let bound = state.bind_frozen(&tape);
    let (za, zb) = (tape.param(a.clone()), tape.param(b.clone()));
    sequence_loss(za, zb, &bound.predictor, SimilarityOptions::default()).unwrap().backward().unwrap();
    let library = vec![za.grad().unwrap(), zb.grad().unwrap()];

    let tape = Tape::new();
    let bound = state.bind_frozen(&tape);
    let (za, zb) = (tape.param(a.clone()), tape.param(b.clone()));
    let forward = framewise_similarity(
        predictor_forward(&bound.predictor, za).unwrap(),
        tape.constant(b.clone()),
        SimilarityKind::Cosine,
    )
    .unwrap();
    let backward = framewise_similarity(
        predictor_forward(&bound.predictor, zb).unwrap(),
        tape.constant(a.clone()),
        SimilarityKind::Cosine,
    )
    .unwrap();
    forward.add(backward).unwrap().scale(-0.5).backward().unwrap();
    [library, vec![za.grad().unwrap(), zb.grad().unwrap()]]
}

fn loss_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures: Vec<String> = Vec::new();
    let mut worst_scale = 0.0f64;
    let kinds = [SimilarityKind::Cosine, SimilarityKind::Mse, SimilarityKind::Kl];
    for instance in 0..ALGEBRA_INSTANCES {
        let frames = rng.random_range(1..=8);
        let dim = rng.random_range(1..=6);
        let state = predictor(dim, instance);
        let a = random_matrix(&mut rng, frames, dim);
        let b = random_matrix(&mut rng, frames, dim);
        let other_len = rng.random_range(1..=8);
        let c = random_matrix(&mut rng, other_len, dim);
        let pool = if rng.random_bool(0.5) { Some(rng.random_range(1..=frames)) } else { None };

        for kind in kinds {
            for stop_grad in [true, false] {
                let opts = SimilarityOptions { kind, stop_grad, pool_len: pool };
                let (ab, ba) = both_orders(&a, &b, &state, opts, false);
                if ab.to_bits() != ba.to_bits() {
                    failures.push(format!("#{instance} sequence swap {kind:?}: {ab} vs {ba}"));
                }
                let (ac, ca) = both_orders(&a, &c, &state, opts, true);
                if ac.to_bits() != ca.to_bits() {
                    failures.push(format!("#{instance} action swap {kind:?}: {ac} vs {ca}"));
                }
                if kind == SimilarityKind::Cosine {
                    for v in [ab, ac] {
                        if !(-1.0..=1.0).contains(&v) {
                            failures.push(format!("#{instance} cosine loss {v} outside [-1, 1]"));
                        }
                    }
                }
            }
        }

        let factor = rng.random_range(1e-3..1e3);
        let tape = Tape::new();
        let base = framewise_similarity(tape.constant(a.clone()), tape.constant(b.clone()), SimilarityKind::Cosine)
            .unwrap()
            .item()
            .unwrap();
        for (p, z) in [(a.map(|v| v * factor), b.clone()), (a.clone(), b.map(|v| v * factor))] {
            let scaled = framewise_similarity(tape.constant(p), tape.constant(z), SimilarityKind::Cosine)
                .unwrap()
                .item()
                .unwrap();
            worst_scale = worst_scale.max((scaled - base).abs());
        }

        let [library, detached] = stop_grad_gradients(&a, &b, &state);
        if library != detached {
            failures.push(format!("#{instance} stop-gradient target branch contributes"));
        }

        let classes = rng.random_range(2..=4);
        let row: Vec<f64> = (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect();
        let frames = frames.max(2);
        let mut logits: Vec<f64> = (0..frames).flat_map(|_| row.clone()).collect();
        let smooth = |data: &[f64]| {
            let tape = Tape::new();
            let t = Tensor::new(vec![frames, classes], data.to_vec()).unwrap();
            smoothing_loss(tape.constant(t), LossWeights::default().smooth_clamp).unwrap().unwrap().item().unwrap()
        };
        let flat = smooth(&logits);
        if flat.abs() > SMOOTHING_TOLERANCE {
            failures.push(format!("#{instance} smoothing {flat:e} on constant logits"));
        }
        let (t, k) = (rng.random_range(0..frames), rng.random_range(0..classes));
        logits[t * classes + k] += rng.random_range(0.01..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let bumped = smooth(&logits);
        if bumped <= SMOOTHING_TOLERANCE {
            failures.push(format!("#{instance} smoothing {bumped:e} on changing logits"));
        }
    }
    if worst_scale > SCALE_TOLERANCE {
        failures.push(format!("cosine scale drift {worst_scale:e}"));
    }
    Check {
        name: "loss algebra",
        passed: failures.is_empty(),
        detail: format!(
            "{ALGEBRA_INSTANCES} instances: swap symmetry, cosine bounds, scale drift {worst_scale:.1e} (limit {SCALE_TOLERANCE:.0e}), \
             stop-gradient, smoothing zero iff constant; {} violations {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    }
}

fn bench_data(seed: u64) -> GeneratedDataset {
    let cfg = BenchConfig::default();
    generate_synthetic(&viewseg::data::GeneratorConfig { seed, ..cfg.generator }).expect("generator")
}

fn config(method: Method, seed: u64, data: &GeneratedDataset) -> TrainConfig {
    let mut cfg = TrainConfig { method, seed, ..BenchConfig::default().train };
    cfg.fit_to(&data.dataset);
    cfg
}

fn inertness() -> Check {
    let data = bench_data(0);
    let base = TrainConfig { epochs: INERT_EPOCHS, eval_every: 1, ..config(Method::Baseline, 0, &data) };
    let ours = TrainConfig {
        method: Method::Ours,
        weights: LossWeights { lambda: 0.0, beta: 0.0, ..base.weights },
        ..base.clone()
    };
    let (a, la) = train::<f64>(&base, &data.dataset, &data.split).expect("baseline");
    let (b, lb) = train::<f64>(&ours, &data.dataset, &data.split).expect("ours");
    let groups = data.split.group_names();
    let same_params = a.params.named().iter().zip(b.params.named()).all(|((_, x), (_, y))| {
        x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    let same_log = la.to_csv(&groups) == lb.to_csv(&groups);
    Check {
        name: "inertness",
        passed: same_params && same_log,
        detail: format!("{INERT_EPOCHS} epochs, parameters bit-identical: {same_params}, logs identical: {same_log}"),
    }
}

/// Unseen-view and seen-view F1@50 of one run.
fn run_cell(cfg: &TrainConfig, data: &GeneratedDataset) -> (f64, f64) {
    let (_, log) = train::<f64>(cfg, &data.dataset, &data.split).expect("training");
    let report = log.final_report().expect("final evaluation");
    (
        report.unseen_mean(|g| g.f1_50).expect("unseen groups"),
        report.group(SEEN_GROUP).expect("seen group").f1_50,
    )
}

struct Averages {
    unseen: f64,
    seen: f64,
}

fn averaged(cells: &[(f64, f64)]) -> Averages {
    let n = cells.len() as f64;
    Averages {
        unseen: cells.iter().map(|c| c.0).sum::<f64>() / n,
        seen: cells.iter().map(|c| c.1).sum::<f64>() / n,
    }
}

fn method_grid(datasets: &[GeneratedDataset]) -> (Vec<(Method, Averages)>, Duration) {
    let start = Instant::now();
    let methods = [Method::Baseline, Method::OursNoAction, Method::OursNoSeq, Method::Ours];
    let rows = methods
        .iter()
        .map(|&m| {
            let cells: Vec<_> = BENCH_SEEDS
                .iter()
                .zip(datasets)
                .map(|(&seed, data)| run_cell(&config(m, seed, data), data))
                .collect();
            (m, averaged(&cells))
        })
        .collect();
    (rows, start.elapsed())
}

fn directional(rows: &[(Method, Averages)], elapsed: Duration) -> Check {
    let get = |m: Method| &rows.iter().find(|r| r.0 == m).expect("method row").1;
    let base = get(Method::Baseline);
    let ours = get(Method::Ours);
    let seq_only = get(Method::OursNoAction);
    let action_only = get(Method::OursNoSeq);
    let a = ours.unseen >= base.unseen + OURS_MARGIN;
    let b = seq_only.unseen >= base.unseen + SINGLE_LOSS_MARGIN && action_only.unseen >= base.unseen + SINGLE_LOSS_MARGIN;
    let c = ours.seen >= base.seen - SEEN_SLACK;
    let in_band = (20.0..=60.0).contains(&base.unseen);
    let fast = elapsed <= BENCH_BUDGET;
    Check {
        name: "directional benchmark",
        passed: a && b && c && in_band && fast,
        detail: format!(
            "unseen F1@50 baseline {:.2} (band 20-60: {in_band}), ours {:.2} ({:+.2}, need +{OURS_MARGIN}: {a}), \
             seq only {:.2} ({:+.2}), action only {:.2} ({:+.2}) (each need +{SINGLE_LOSS_MARGIN}: {b}); \
             seen F1@50 baseline {:.2}, ours {:.2} (slack {SEEN_SLACK}: {c}); {:.0}s of {}s",
            base.unseen,
            ours.unseen,
            ours.unseen - base.unseen,
            seq_only.unseen,
            seq_only.unseen - base.unseen,
            action_only.unseen,
            action_only.unseen - base.unseen,
            base.seen,
            ours.seen,
            elapsed.as_secs_f64(),
            BENCH_BUDGET.as_secs()
        ),
    }
}

fn variant(datasets: &[GeneratedDataset], tweak: impl Fn(&mut TrainConfig)) -> Averages {
    let cells: Vec<_> = BENCH_SEEDS
        .iter()
        .zip(datasets)
        .map(|(&seed, data)| {
            let mut cfg = config(Method::Ours, seed, data);
            tweak(&mut cfg);
            run_cell(&cfg, data)
        })
        .collect();
    averaged(&cells)
}

fn sync_shift(datasets: &[GeneratedDataset], ours: &Averages) -> Check {
    let shifted = variant(datasets, |c| c.sync_shift = SYNC_SHIFT);
    Check {
        name: "sync-shift trend",
        passed: shifted.unseen < ours.unseen,
        detail: format!(
            "unseen F1@50 of ours: synchronized {:.2}, shift up to {SYNC_SHIFT} frames {:.2} ({:+.2})",
            ours.unseen,
            shifted.unseen,
            shifted.unseen - ours.unseen
        ),
    }
}

fn same_view(datasets: &[GeneratedDataset], ours: &Averages) -> Check {
    let same = variant(datasets, |c| c.allow_same_view = true);
    Check {
        name: "same-view ablation",
        passed: same.unseen <= ours.unseen,
        detail: format!(
            "unseen F1@50 of ours: cross-view pairs {:.2}, same-view pairs allowed {:.2} ({:+.2})",
            ours.unseen,
            same.unseen,
            same.unseen - ours.unseen
        ),
    }
}

fn cli(args: &[&str]) -> bool {
    viewseg_cli::run(["viewseg", "--quiet"].iter().chain(args)) == 0
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("listing run directory") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).expect("reading artifact")));
            }
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Check {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut runs = Vec::new();
    for k in 0..2 {
        let root = tmp.path().join(format!("run{k}"));
        let (data, model) = (root.join("data"), root.join("model"));
        let ok = cli(&["gen", "--out", data.to_str().unwrap(), "--seed", "3"])
            && cli(&["train", "--data", data.to_str().unwrap(), "--out", model.to_str().unwrap(), "--seed", "3"]);
        if !ok {
            return Check { name: "reproducibility", passed: false, detail: format!("run {k} failed") };
        }
        runs.push(files_under(&root));
    }
    let names: Vec<&str> = runs[0].iter().map(|f| f.0.as_str()).collect();
    let differing: Vec<&str> = runs[0]
        .iter()
        .zip(&runs[1])
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let covered = ["data/manifest.json", "model/manifest.json", "model/model.ckpt", "model/train_log.csv", "model/report.csv"]
        .iter()
        .all(|f| names.contains(f));
    Check {
        name: "reproducibility",
        passed: runs[0].len() == runs[1].len() && differing.is_empty() && covered,
        detail: format!(
            "two gen+train runs, {} files each (manifests, checkpoint, CSVs present: {covered}), differing: {differing:?}",
            runs[0].len()
        ),
    }
}

fn main() {
    let mut checks = Vec::new();
    let mut record = |c: Check| {
        report(&c);
        checks.push(c.passed);
    };
    record(gradient_suite());
    record(metric_oracles());
    record(loss_algebra());
    record(inertness());

    let datasets: Vec<GeneratedDataset> = BENCH_SEEDS.iter().map(|&s| bench_data(s)).collect();
    let (rows, elapsed) = method_grid(&datasets);
    record(directional(&rows, elapsed));
    let ours = &rows.iter().find(|r| r.0 == Method::Ours).expect("ours row").1;
    record(sync_shift(&datasets, ours));
    record(same_view(&datasets, ours));
    record(reproducibility());

    let failed = checks.iter().filter(|p| !**p).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
