//! Run configuration: profile defaults, then an optional JSON file, then
//! command-line flags, each layer overriding the previous one.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use minsharp::baseline_ns::NsConfig;
use minsharp::network::SgdConfig;

/// Embedded in every artifact the CLI writes.
pub const FORMAT_VERSION: &str = "minsharp/1";

/// Deliberate defects used to prove that the verification suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InjectedBug {
    /// Per-layer trace built from unsquared Frobenius norms.
    NormUnsquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data_images: Option<PathBuf>,
    pub data_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Gaussian blobs instead of IDX files.
    pub synthetic: bool,
    /// Distance of the blob centres from the origin.
    pub separation: f64,
    pub dims: Vec<usize>,
    /// Training subset size; `None` keeps every available sample.
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub sgd: SgdConfig,
    /// Number of seeds, counting up from `sgd.seed`.
    pub seeds: usize,
    pub ratios: Vec<f64>,
    pub with_ns: bool,
    pub ns: NsConfig,
    pub apply_alpha: Option<Vec<f64>>,
    pub corrupt_test: bool,
    pub paper_scale: bool,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub inject_bug: Option<InjectedBug>,
    /// Sample counts for `bench`.
    pub n_list: Vec<usize>,
    /// Timing repetitions per method and sample count.
    pub trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Laptop-sized profile.
    pub fn desk() -> Self {
        Self {
            data_images: None,
            data_labels: None,
            test_images: None,
            test_labels: None,
            synthetic: false,
            separation: 3.0,
            dims: vec![784, 128, 128, 10],
            n_train: Some(2000),
            n_test: Some(1000),
            sgd: SgdConfig {
                learning_rate: 0.1,
                momentum: 0.9,
                weight_decay: 1e-5,
                batch_size: 128,
                epochs: 200,
                seed: 0,
            },
            seeds: 3,
            ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            with_ns: false,
            ns: NsConfig::default(),
            apply_alpha: None,
            corrupt_test: false,
            paper_scale: false,
            threads: None,
            out: None,
            checkpoint: None,
            inject_bug: None,
            n_list: vec![10, 100, 1000],
            trials: 3,
        }
    }

    /// Full-size training recipe: every available sample, batch 1024,
    /// 3000 epochs and an 11-point ratio grid.
    pub fn paper() -> Self {
        Self {
            n_train: None,
            n_test: None,
            sgd: SgdConfig::default(),
            ratios: (0..=10).map(|i| i as f64 / 10.0).collect(),
            paper_scale: true,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            bail!("--dims needs at least two positive widths, got {:?}", self.dims);
        }
        self.sgd.validate()?;
        self.ns.validate()?;
        if self.seeds == 0 {
            bail!("--seeds must be at least 1");
        }
        if self.trials == 0 {
            bail!("--trials must be at least 1");
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            bail!("ratio {r} is outside [0, 1]");
        }
        if self.n_list.contains(&0) {
            bail!("--n-list entries must be positive");
        }
        if self.threads == Some(0) {
            bail!("--threads must be at least 1");
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            bail!("--separation must be finite and non-negative");
        }
        Ok(())
    }

    /// Seeds `sgd.seed, sgd.seed + 1, ...`, `seeds` of them.
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|s| self.sgd.seed.wrapping_add(s)).collect()
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config is plain data")
    }
}

/// Flags shared by every subcommand. Unset flags leave the configured value
/// alone.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON file with configuration keys; flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// IDX image file (pre-decompressed) used for training.
    #[arg(long, global = true, value_name = "PATH")]
    pub data_images: Option<PathBuf>,
    /// IDX label file matching --data-images.
    #[arg(long, global = true, value_name = "PATH")]
    pub data_labels: Option<PathBuf>,
    /// IDX image file for evaluation; without it the test set is carved out
    /// of the training file.
    #[arg(long, global = true, value_name = "PATH")]
    pub test_images: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub test_labels: Option<PathBuf>,
    /// Use Gaussian blobs instead of IDX files.
    #[arg(long, global = true)]
    pub synthetic: bool,
    /// Blob centre distance for --synthetic.
    #[arg(long, global = true)]
    pub separation: Option<f64>,
    /// Layer widths from input to classes, e.g. 784,128,128,10.
    #[arg(long, global = true, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub n_train: Option<usize>,
    #[arg(long, global = true)]
    pub n_test: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub momentum: Option<f64>,
    #[arg(long, global = true)]
    pub weight_decay: Option<f64>,
    /// Base seed for data splits, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, global = true)]
    pub seeds: Option<usize>,
    /// Label corruption ratios. A selected label is redrawn uniformly from
    /// all classes, so it may keep its original value.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    /// Also compute normalized sharpness.
    #[arg(long, global = true)]
    pub with_ns: bool,
    /// Per-layer weight scales with unit product, applied before measuring.
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    pub apply_alpha: Option<Vec<f64>>,
    /// Corrupt test labels as well as training labels.
    #[arg(long, global = true)]
    pub corrupt_test: bool,
    /// Full-size defaults: all samples, 3000 epochs, batch 1024, 11 ratios.
    #[arg(long, global = true)]
    pub paper_scale: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file (stdout when absent, except for checkpoints).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Sample counts for bench.
    #[arg(long, global = true, value_delimiter = ',')]
    pub n_list: Option<Vec<usize>>,
    /// Timing repetitions for bench.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Enable a known defect to check that verification catches it.
    #[arg(long, global = true, value_enum)]
    pub inject_bug: Option<InjectedBug>,
}

/// Recursively overlays `patch` onto `base`; nested objects merge key by key.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|source| minsharp::Error::Io { path: path.display().to_string(), source })?;
    match serde_json::from_str(&text).with_context(|| format!("{}: not valid JSON", path.display()))? {
        Value::Object(map) => Ok(map),
        _ => bail!("{}: expected a JSON object", path.display()),
    }
}

impl Flags {
    pub fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(path) => Some(read_config_file(path)?),
            None => None,
        };
        let paper = self.paper_scale || file.as_ref().and_then(|m| m.get("paper_scale")).and_then(Value::as_bool) == Some(true);
        let mut cfg = if paper { RunConfig::paper() } else { RunConfig::desk() };
        if let Some(map) = file {
            let mut value = cfg.to_json();
            merge(&mut value, Value::Object(map));
            cfg = serde_json::from_value(value).context("invalid configuration file")?;
        }
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
            if let Some(v) = value {
                *slot = v.clone();
            }
        }
        fn set_some<T: Clone>(slot: &mut Option<T>, value: &Option<T>) {
            if value.is_some() {
                *slot = value.clone();
            }
        }
        set_some(&mut cfg.data_images, &self.data_images);
        set_some(&mut cfg.data_labels, &self.data_labels);
        set_some(&mut cfg.test_images, &self.test_images);
        set_some(&mut cfg.test_labels, &self.test_labels);
        cfg.synthetic |= self.synthetic;
        set(&mut cfg.separation, &self.separation);
        set(&mut cfg.dims, &self.dims);
        set_some(&mut cfg.n_train, &self.n_train);
        set_some(&mut cfg.n_test, &self.n_test);
        set(&mut cfg.sgd.epochs, &self.epochs);
        set(&mut cfg.sgd.learning_rate, &self.lr);
        set(&mut cfg.sgd.batch_size, &self.batch_size);
        set(&mut cfg.sgd.momentum, &self.momentum);
        set(&mut cfg.sgd.weight_decay, &self.weight_decay);
        set(&mut cfg.sgd.seed, &self.seed);
        set(&mut cfg.seeds, &self.seeds);
        set(&mut cfg.ratios, &self.ratios);
        cfg.with_ns |= self.with_ns;
        set_some(&mut cfg.apply_alpha, &self.apply_alpha);
        cfg.corrupt_test |= self.corrupt_test;
        cfg.paper_scale |= self.paper_scale;
        set_some(&mut cfg.threads, &self.threads);
        set_some(&mut cfg.out, &self.out);
        set_some(&mut cfg.checkpoint, &self.checkpoint);
        set(&mut cfg.n_list, &self.n_list);
        set(&mut cfg.trials, &self.trials);
        set_some(&mut cfg.inject_bug, &self.inject_bug);
    }
}
