//! Acceptance criteria, one line per criterion. Runs without the libtest
//! harness so the lines are always shown; exits non-zero if any fails.

use std::path::PathBuf;
use std::time::Instant;

use minsharp::hessian::NormConvention;
use minsharp::{Dataset, Mlp, Rng};
use minsharp_cli::commands::{bench_rows, experiment};
use minsharp_cli::config::RunConfig;
use minsharp_cli::verify::{
    check_am_gm, check_finite_differences, check_invariance, check_kron_oracle, check_normalized_sharpness,
    check_optimality, check_scaling_laws, check_single_layer, stochastic_study, Check,
};

const SEED: u64 = 20240;

struct Outcome {
    id: &'static str,
    title: &'static str,
    passed: bool,
    seconds: f64,
    budget: f64,
    detail: String,
}

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k")
}

fn mnist_config() -> RunConfig {
    let dir = mnist_dir();
    RunConfig {
        data_images: Some(dir.join("images-idx3-ubyte")),
        data_labels: Some(dir.join("labels-idx1-ubyte")),
        ..RunConfig::desk()
    }
}

fn summarize(checks: &[Check]) -> (bool, String) {
    let passed = checks.iter().all(|c| c.passed);
    let detail = checks
        .iter()
        .map(|c| format!("{}{} {:.2e}/{:.0e}", if c.passed { "" } else { "FAILED " }, c.name, c.deviation, c.tolerance))
        .collect::<Vec<_>>()
        .join("; ");
    (passed, detail)
}

fn run_checks(f: impl Fn(u64) -> minsharp::Result<Vec<Check>>) -> (bool, String) {
    match f(SEED) {
        Ok(checks) => summarize(&checks),
        Err(e) => (false, format!("error: {e}")),
    }
}

fn criterion_efficiency() -> (bool, String) {
    let cfg = mnist_config();
    let k = 10;
    let images = cfg.data_images.clone().expect("set");
    let labels = cfg.data_labels.clone().expect("set");
    let pool = match minsharp::data::load_idx(&images, &labels, k) {
        Ok(p) => p,
        Err(e) => return (false, format!("cannot load digits: {e}")),
    };
    let data: Dataset = pool.range(0..100).expect("pool has 100 samples");
    let net = Mlp::init(&[784, 20, 20, 10], &mut Rng::seed_from_u64(SEED)).expect("valid dims");
    match bench_rows(&net, &data, &[100], 3) {
        Ok((rows, worst)) => {
            let speedup = rows[0].mean_seconds / rows[1].mean_seconds;
            (
                speedup >= 50.0 && worst <= 1e-10,
                format!(
                    "oracle {:.3}s, exact {:.5}s, speedup {speedup:.0}x (need 50x), trace agreement {worst:.1e}",
                    rows[0].mean_seconds, rows[1].mean_seconds
                ),
            )
        }
        Err(e) => (false, format!("error: {e:#}")),
    }
}

fn criterion_mnist_experiment() -> (bool, String) {
    match experiment(&mnist_config()) {
        Ok(out) => {
            let rho = out.spearman.unwrap_or(f64::NAN);
            let increasing = out.gap_strictly_increasing();
            let gaps: Vec<String> = out.mean_gap.iter().map(|(r, g)| format!("{r}:{g:.3}")).collect();
            (
                rho >= 0.6 && increasing,
                format!("spearman {rho:.3} (need 0.6), mean gap by ratio [{}] increasing={increasing}", gaps.join(" ")),
            )
        }
        Err(e) => (false, format!("error: {e:#}")),
    }
}

/// Separable blobs stand in for the digits.
fn synthetic_smoke_config() -> RunConfig {
    RunConfig {
        synthetic: true,
        separation: 3.0,
        dims: vec![50, 64, 64, 10],
        n_train: Some(1000),
        n_test: Some(500),
        sgd: minsharp::SgdConfig { epochs: 100, ..RunConfig::desk().sgd },
        ..RunConfig::desk()
    }
}

fn criterion_synthetic_experiment() -> (bool, String) {
    match experiment(&synthetic_smoke_config()) {
        Ok(out) => {
            let rho = out.spearman.unwrap_or(f64::NAN);
            (rho > 0.0, format!("spearman {rho:.3} (need > 0), {} runs", out.rows.len()))
        }
        Err(e) => (false, format!("error: {e:#}")),
    }
}

fn criterion_ns() -> (bool, String) {
    let (checks_ok, checks_detail) = run_checks(check_normalized_sharpness);
    match stochastic_study(SEED, 10, 10, 1000) {
        Ok(s) => {
            let decreasing = s.median_many < s.median_few;
            let large = s.median_few > 0.1;
            (
                checks_ok && decreasing && large,
                format!(
                    "{checks_detail}; stochastic median rel error {:.3} at 10 draws, {:.3} at 1000 draws",
                    s.median_few, s.median_many
                ),
            )
        }
        Err(e) => (false, format!("error: {e}")),
    }
}

fn criterion_mutation() -> (bool, String) {
    match check_kron_oracle(SEED, NormConvention::Unsquared) {
        Ok(checks) => {
            let caught = checks.iter().any(|c| !c.passed);
            let (_, detail) = summarize(&checks);
            (caught, format!("unsquared norms must fail the oracle check: {detail}"))
        }
        Err(e) => (false, format!("error: {e}")),
    }
}

fn timed(id: &'static str, title: &'static str, budget: f64, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = f();
    let seconds = start.elapsed().as_secs_f64();
    let outcome = Outcome { id, title, passed, seconds, budget, detail };
    print_line(&outcome);
    outcome
}

fn print_line(o: &Outcome) {
    let status = if o.passed { "PASS" } else { "FAIL" };
    let over = if o.seconds > o.budget { " (over time budget)" } else { "" };
    println!("[{status}] {:<3} {:<34} {:>7.1}s{over}  {}", o.id, o.title, o.seconds, o.detail);
}

fn main() {
    // Honour `cargo test -- <filter>` loosely: any argument that is not a
    // flag restricts the run to criteria whose id or title contains it.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str, title: &str| filters.is_empty() || filters.iter().any(|f| id == f || title.contains(f.as_str()));

    type Criterion = (&'static str, &'static str, f64, Box<dyn FnOnce() -> (bool, String)>);
    let criteria: Vec<Criterion> = vec![
        ("1", "single-layer closed form", 1.0, Box::new(|| run_checks(check_single_layer))),
        ("2", "Kronecker oracle equivalence", 30.0, Box::new(|| run_checks(|s| check_kron_oracle(s, NormConvention::Squared)))),
        ("3", "finite-difference agreement", 30.0, Box::new(|| run_checks(check_finite_differences))),
        ("4", "scaling law", 30.0, Box::new(|| run_checks(check_scaling_laws))),
        ("5", "minimum sharpness invariance", 60.0, Box::new(|| run_checks(check_invariance))),
        ("6", "closed-form optimality", 60.0, Box::new(|| run_checks(check_optimality))),
        ("7", "AM-GM bound", 10.0, Box::new(|| run_checks(check_am_gm))),
        ("8", "efficiency on [784,20,20,10]", 300.0, Box::new(criterion_efficiency)),
        ("9a", "randomized labels, MNIST desk", 1800.0, Box::new(criterion_mnist_experiment)),
        ("9b", "randomized labels, synthetic", 120.0, Box::new(criterion_synthetic_experiment)),
        ("10", "normalized sharpness baseline", 600.0, Box::new(criterion_ns)),
        ("11", "mutation sentinel", 30.0, Box::new(criterion_mutation)),
    ];

    let mut outcomes = Vec::new();
    for (id, title, budget, f) in criteria {
        if wanted(id, title) {
            outcomes.push(timed(id, title, budget, f));
        }
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!("acceptance: {} passed, {} failed", outcomes.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
