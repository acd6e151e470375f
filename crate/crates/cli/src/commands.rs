//! The subcommands. Each returns its artifact as text and leaves writing it
//! to [`emit`], so tests can call them in-process.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use minsharp::baseline_ns::{normalized_sharpness_of, NsReport};
use minsharp::checkpoint::{self, CheckpointMeta};
use minsharp::data::{corrupt_labels, load_idx, synthetic_blobs};
use minsharp::hessian::{oracle_kron_trace, trace_exact, LayerTraces, NormConvention};
use minsharp::network::{EpochStats, SgdConfig};
use minsharp::sharpness::{alpha_transform, minimum_sharpness_of, Alpha, SharpnessReport};
use minsharp::{Dataset, Mlp, Rng};

use crate::config::{InjectedBug, RunConfig, FORMAT_VERSION};
use crate::exit::CheckFailed;
use crate::stats::{mean_std, pearson, spearman};
use crate::verify::{oracle_suite, Check};

/// RNG streams derived from a run seed.
const DATA_STREAM: u64 = 100;
const INIT_STREAM: u64 = 200;
const CORRUPT_STREAM: u64 = 300;

/// Small FCNN used for timing: two hidden layers of width 20.
pub const BENCH_HIDDEN: [usize; 2] = [20, 20];

/// Relative agreement required between the exact trace and its oracle.
pub const TRACE_AGREEMENT: f64 = 1e-10;

pub const DEFAULT_CHECKPOINT: &str = "checkpoint.json";

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref().with_context(|| format!("{flag} is required unless --synthetic is set"))
}

fn take_shuffled(data: &Dataset, n: Option<usize>, rng: &mut Rng) -> Result<Dataset> {
    let n = n.unwrap_or(data.len());
    if n > data.len() {
        bail!("requested {n} samples but only {} are available", data.len());
    }
    let order = rng.permutation(data.len());
    Ok(data.subset(&order[..n])?)
}

/// Train and test sets as configured. Splits depend on the base seed only,
/// so every seed of an experiment sees the same samples.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let k = *cfg.dims.last().expect("validated dims");
    let mut rng = Rng::derive(cfg.sgd.seed, DATA_STREAM);
    if cfg.synthetic {
        let n_train = cfg.n_train.unwrap_or(2000);
        let n_test = cfg.n_test.unwrap_or(1000);
        let pool = synthetic_blobs(n_train + n_test, cfg.dims[0], k, cfg.separation, &mut rng)?;
        let (train, test) = pool.shuffled_split(n_train, n_test, &mut rng)?;
        return Ok(Splits { train, test });
    }
    let images = required(&cfg.data_images, "--data-images")?;
    let labels = required(&cfg.data_labels, "--data-labels")?;
    let pool = load_idx(images, labels, k)?;
    match (&cfg.test_images, &cfg.test_labels) {
        (Some(ti), Some(tl)) => {
            let test_pool = load_idx(ti, tl, k)?;
            let train = take_shuffled(&pool, cfg.n_train, &mut rng)?;
            let test = take_shuffled(&test_pool, cfg.n_test, &mut rng)?;
            Ok(Splits { train, test })
        }
        (None, None) => {
            // Without a test file, hold out a sixth of the pool by default.
            let n_test = cfg.n_test.unwrap_or(pool.len() / 6);
            let n_train = cfg.n_train.unwrap_or(pool.len().saturating_sub(n_test));
            if n_train + n_test > pool.len() {
                bail!("{n_train} training plus {n_test} test samples exceed the {} available", pool.len());
            }
            let (train, test) = pool.shuffled_split(n_train, n_test, &mut rng)?;
            Ok(Splits { train, test })
        }
        _ => bail!("--test-images and --test-labels must be given together"),
    }
}

fn check_input_width(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    if data.input_dim() != cfg.dims[0] {
        bail!("data has {} features but --dims starts with {}", data.input_dim(), cfg.dims[0]);
    }
    Ok(())
}

/// Writes `text` to `out`, or to stdout when no path is given.
pub fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| minsharp::Error::Io { path: path.display().to_string(), source })?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn csv_preamble(cfg: &RunConfig) -> String {
    format!("# format: {FORMAT_VERSION}\n# config: {}\n", cfg.to_json())
}

fn sgd_for_seed(cfg: &RunConfig, seed: u64) -> SgdConfig {
    SgdConfig { seed, ..cfg.sgd }
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: String,
    pub metrics_csv: String,
    pub summary: serde_json::Value,
}

pub fn train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    let splits = load_splits(cfg)?;
    check_input_width(cfg, &splits.train)?;
    let seed = cfg.sgd.seed;
    let init = Mlp::init(&cfg.dims, &mut Rng::derive(seed, INIT_STREAM))?;
    let mut metrics = csv_preamble(cfg);
    metrics.push_str("epoch,loss,train_acc\n");
    let outcome = init.train_with(&splits.train, &cfg.sgd, |s: &EpochStats| {
        metrics.push_str(&format!("{},{},{}\n", s.epoch, s.loss, s.train_acc));
    })?;
    let meta = CheckpointMeta {
        seed: Some(seed),
        epochs: Some(cfg.sgd.epochs),
        dataset: Some(splits.train.fingerprint()),
        format: Some(FORMAT_VERSION.into()),
        config: Some(cfg.to_json()),
    };
    let checkpoint = checkpoint::to_json(&outcome.net, &meta)?;
    let summary = json!({
        "format": FORMAT_VERSION,
        "config": cfg.to_json(),
        "train_loss": outcome.net.loss(&splits.train)?,
        "train_acc": outcome.net.accuracy(&splits.train)?,
        "test_acc": outcome.net.accuracy(&splits.test)?,
    });
    Ok(TrainArtifacts { checkpoint, metrics_csv: metrics, summary })
}

/// Checkpoint path and the metrics CSV beside it.
pub fn train_paths(cfg: &RunConfig) -> (PathBuf, PathBuf) {
    let checkpoint = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_CHECKPOINT));
    let metrics = checkpoint.with_extension("csv");
    (checkpoint, metrics)
}

#[derive(Debug, Clone, Serialize)]
pub struct SharpnessOutput {
    pub format: &'static str,
    pub config: serde_json::Value,
    pub n: usize,
    pub total_trace: f64,
    pub sharpness: SharpnessReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ns: Option<NsReport>,
}

pub fn sharpness(cfg: &RunConfig) -> Result<SharpnessOutput> {
    let path = cfg.checkpoint.as_deref().context("--checkpoint is required")?;
    let (mut net, _) = checkpoint::load(path)?;
    if let Some(values) = &cfg.apply_alpha {
        net = alpha_transform(&net, &Alpha::new(values.clone())?)?;
    }
    let data = load_splits(cfg)?.train;
    let report = minimum_sharpness_of(&net, &data).context("checkpoint and data disagree")?;
    let ns = if cfg.with_ns { Some(normalized_sharpness_of(&net, &data, &cfg.ns)?) } else { None };
    Ok(SharpnessOutput {
        format: FORMAT_VERSION,
        config: cfg.to_json(),
        n: data.len(),
        total_trace: report.layer_traces.total(),
        sharpness: report,
        ns,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOutput {
    pub format: &'static str,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub checks: Vec<(u64, Check)>,
    pub passed: bool,
}

pub fn norm_convention(cfg: &RunConfig) -> NormConvention {
    match cfg.inject_bug {
        Some(InjectedBug::NormUnsquared) => NormConvention::Unsquared,
        None => NormConvention::Squared,
    }
}

pub fn verify(cfg: &RunConfig) -> Result<VerifyOutput> {
    let seeds = cfg.seed_list();
    let per_seed = seeds
        .par_iter()
        .map(|&seed| oracle_suite(seed, norm_convention(cfg)).map(|c| c.into_iter().map(move |c| (seed, c))))
        .collect::<minsharp::Result<Vec<_>>>()?;
    let checks: Vec<(u64, Check)> = per_seed.into_iter().flatten().collect();
    let passed = checks.iter().all(|(_, c)| c.passed);
    Ok(VerifyOutput { format: FORMAT_VERSION, config: cfg.to_json(), seeds, checks, passed })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: &'static str,
    pub n: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub trace_value: f64,
}

fn time_traces(trials: usize, f: impl Fn() -> minsharp::Result<LayerTraces>) -> Result<(f64, f64, LayerTraces)> {
    let mut times = Vec::with_capacity(trials);
    let mut last = None;
    for _ in 0..trials {
        let start = Instant::now();
        let t = f()?;
        times.push(start.elapsed().as_secs_f64());
        last = Some(t);
    }
    let (mean, std) = mean_std(&times);
    Ok((mean, std, last.expect("trials >= 1")))
}

/// Times the oracle and the exact trace on the first `n` samples for every
/// `n`. Returns the rows and the worst per-layer disagreement.
pub fn bench_rows(net: &Mlp, data: &Dataset, n_list: &[usize], trials: usize) -> Result<(Vec<BenchRow>, f64)> {
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for &n in n_list {
        if n > data.len() {
            bail!("bench needs {n} samples but only {} are available", data.len());
        }
        let subset = data.range(0..n)?;
        // Warm caches and the thread pool before timing.
        trace_exact(net, &subset)?;
        let (om, os, oracle) = time_traces(trials, || oracle_kron_trace(net, &subset))?;
        let (em, es, exact) = time_traces(trials, || trace_exact(net, &subset))?;
        for (a, b) in exact.per_layer.iter().zip(&oracle.per_layer) {
            let scale = a.abs().max(b.abs());
            if scale > 0.0 {
                worst = worst.max((a - b).abs() / scale);
            }
        }
        rows.push(BenchRow { method: "oracle_kron", n, mean_seconds: om, std_seconds: os, trace_value: oracle.total() });
        rows.push(BenchRow { method: "exact", n, mean_seconds: em, std_seconds: es, trace_value: exact.total() });
    }
    Ok((rows, worst))
}

pub fn bench_data(cfg: &RunConfig, input_dim: usize, k: usize, n: usize) -> Result<Dataset> {
    let mut rng = Rng::derive(cfg.sgd.seed, DATA_STREAM);
    if cfg.synthetic || cfg.data_images.is_none() {
        return Ok(synthetic_blobs(n.max(k), input_dim, k, cfg.separation, &mut rng)?);
    }
    let pool = load_idx(required(&cfg.data_images, "--data-images")?, required(&cfg.data_labels, "--data-labels")?, k)?;
    take_shuffled(&pool, Some(n), &mut rng)
}

#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub csv: String,
    pub rows: Vec<BenchRow>,
    pub worst_disagreement: f64,
}

/// Bench architecture: input and class counts from `--dims`, hidden widths
/// fixed at [`BENCH_HIDDEN`].
pub fn bench_dims(cfg: &RunConfig) -> Vec<usize> {
    let mut dims = vec![cfg.dims[0]];
    dims.extend(BENCH_HIDDEN);
    dims.push(*cfg.dims.last().expect("validated dims"));
    dims
}

pub fn bench(cfg: &RunConfig) -> Result<BenchOutput> {
    let dims = bench_dims(cfg);
    let max_n = cfg.n_list.iter().copied().max().context("--n-list is empty")?;
    let data = bench_data(cfg, dims[0], dims[3], max_n)?;
    let net = Mlp::init(&dims, &mut Rng::derive(cfg.sgd.seed, INIT_STREAM))?;
    let (rows, worst) = bench_rows(&net, &data, &cfg.n_list, cfg.trials)?;
    let mut csv = csv_preamble(cfg);
    csv.push_str("method,n,mean_seconds,std_seconds,trace_value\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.method, r.n, r.mean_seconds, r.std_seconds, r.trace_value));
    }
    Ok(BenchOutput { csv, rows, worst_disagreement: worst })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub ratio: f64,
    pub seed: u64,
    pub gap: f64,
    pub ms: f64,
    pub ns: Option<f64>,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutput {
    pub rows: Vec<ExperimentRow>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub spearman_ns: Option<f64>,
    /// `(ratio, mean gap over seeds)` in configured ratio order.
    pub mean_gap: Vec<(f64, f64)>,
    pub csv: String,
}

impl ExperimentOutput {
    /// Mean gap strictly increases along the ratio list.
    pub fn gap_strictly_increasing(&self) -> bool {
        self.mean_gap.windows(2).all(|w| w[1].1 > w[0].1)
    }

    pub fn summary(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        let mut s = format!("pearson(gap, ms) = {}\nspearman(gap, ms) = {}\n", fmt(self.pearson), fmt(self.spearman));
        if self.spearman_ns.is_some() {
            s.push_str(&format!("spearman(gap, ns) = {}\n", fmt(self.spearman_ns)));
        }
        for (ratio, gap) in &self.mean_gap {
            s.push_str(&format!("ratio {ratio}: mean gap {gap:.4}\n"));
        }
        s
    }
}

fn experiment_run(cfg: &RunConfig, splits: &Splits, ratio: f64, seed: u64) -> Result<ExperimentRow> {
    // One corruption stream per seed: larger ratios corrupt a superset of
    // the samples corrupted at smaller ones.
    let train = corrupt_labels(&splits.train, ratio, &mut Rng::derive(seed, CORRUPT_STREAM))?;
    let test = if cfg.corrupt_test {
        corrupt_labels(&splits.test, ratio, &mut Rng::derive(seed, CORRUPT_STREAM + 1))?
    } else {
        splits.test.clone()
    };
    let init = Mlp::init(&cfg.dims, &mut Rng::derive(seed, INIT_STREAM))?;
    let net = init.train(&train, &sgd_for_seed(cfg, seed))?.net;
    let train_acc = net.accuracy(&train)?;
    let test_acc = net.accuracy(&test)?;
    let ms = minimum_sharpness_of(&net, &train)?.ms;
    let ns = if cfg.with_ns { Some(normalized_sharpness_of(&net, &train, &cfg.ns)?.total) } else { None };
    Ok(ExperimentRow { ratio, seed, gap: train_acc - test_acc, ms, ns, train_acc, test_acc })
}

pub fn experiment(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let splits = load_splits(cfg)?;
    check_input_width(cfg, &splits.train)?;
    let jobs: Vec<(f64, u64)> = cfg.ratios.iter().flat_map(|&r| cfg.seed_list().into_iter().map(move |s| (r, s))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(ratio, seed)| {
            let row = experiment_run(cfg, &splits, ratio, seed)?;
            eprintln!(
                "ratio {ratio} seed {seed}: train {:.4} test {:.4} gap {:.4} ms {:.6e}",
                row.train_acc, row.test_acc, row.gap, row.ms
            );
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let gaps: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    let ms: Vec<f64> = rows.iter().map(|r| r.ms).collect();
    let spearman_ns = if cfg.with_ns {
        let ns: Vec<f64> = rows.iter().map(|r| r.ns.unwrap_or(f64::NAN)).collect();
        spearman(&gaps, &ns)
    } else {
        None
    };
    let mean_gap = cfg
        .ratios
        .iter()
        .map(|&ratio| {
            let g: Vec<f64> = rows.iter().filter(|r| r.ratio == ratio).map(|r| r.gap).collect();
            (ratio, mean_std(&g).0)
        })
        .collect();
    let mut csv = csv_preamble(cfg);
    csv.push_str("ratio,seed,gap,ms,ns,train_acc,test_acc\n");
    for r in &rows {
        let ns = r.ns.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{},{},{},{}\n", r.ratio, r.seed, r.gap, r.ms, ns, r.train_acc, r.test_acc));
    }
    Ok(ExperimentOutput {
        pearson: pearson(&gaps, &ms),
        spearman: spearman(&gaps, &ms),
        spearman_ns,
        mean_gap,
        rows,
        csv,
    })
}

/// Converts a failed agreement into the numerical-failure exit path.
pub fn require(ok: bool, what: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CheckFailed(what.into()).into())
    }
}
