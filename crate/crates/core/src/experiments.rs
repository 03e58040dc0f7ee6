//! Fixtures and experiment drivers.
//!
//! [`run`] executes one [`ExperimentSpec`], writes a JSON summary (plus CSV
//! tables where relevant) into its output directory and maps the
//! outcome onto a process exit code.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::lmi::{self, build_operators, delta_from_eta, ForgeOptions, ForgeResult};
use crate::sdp::{self, SolveOptions};
use crate::sensing::{CertifyTolerances, SensingInstance, Verdict};
use crate::sgd::{self, Classifier, SgdConfig};

pub const MAX_FORGE_N: usize = 16;
pub const MAX_SEARCH_N: usize = 12;

/// The two-dimensional rank-one instance with `z = (1, 0)` and a spurious
/// second-order critical point at `(0, 1/sqrt 2)`.
pub fn example1_instance() -> SensingInstance {
    let s2 = 2f64.sqrt();
    let s32 = 1.5f64.sqrt();
    let a1 = DMatrix::from_row_slice(2, 2, &[s2, 0.0, 0.0, 1.0 / s2]);
    let a2 = DMatrix::from_row_slice(2, 2, &[0.0, s32, s32, 0.0]);
    let a3 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, s32]);
    let z = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    SensingInstance::new(vec![a1, a2, a3], z).expect("fixture is valid")
}

/// The spurious point of [`example1_instance`].
pub fn example1_spurious_point() -> DMatrix<f64> {
    DMatrix::from_column_slice(2, 1, &[0.0, 1.0 / 2f64.sqrt()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeKind {
    /// Gaussian `x, z`; `||z z^T||_F = 1`, `||x x^T||_F = 4`.
    Bad,
    /// Rank one, `x` orthogonal to `z`, `||z|| = 1`, `||x||^2 = 1/2`.
    Good,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Recipe {
    Sampled(RecipeKind),
    /// Given factors; `mu` overrides the default margin `1e-3 ||z||^2`.
    Explicit {
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        mu: Option<f64>,
    },
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, r: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, r, |_, _| rng.sample(StandardNormal))
}

/// Scale `f` so that `||f f^T||_F = target`.
fn scale_gram(f: DMatrix<f64>, target: f64) -> DMatrix<f64> {
    let g = (&f * f.transpose()).norm();
    f * (target / g).sqrt()
}

pub fn sample_recipe(kind: RecipeKind, n: usize, r: usize, rng: &mut ChaCha8Rng) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    match kind {
        RecipeKind::Bad => {
            let z = scale_gram(gaussian(rng, n, r), 1.0);
            let x = scale_gram(gaussian(rng, n, r), 4.0);
            Ok((x, z))
        }
        RecipeKind::Good => {
            if r != 1 || n < 2 {
                return Err(Error::InvalidInput("the good recipe needs r = 1 and n >= 2".into()));
            }
            let z = gaussian(rng, n, 1);
            let z = &z / z.norm();
            let w = gaussian(rng, n, 1);
            let x = &w - &z * z.dot(&w);
            let x = &x * (0.5f64.sqrt() / x.norm());
            Ok((x, z))
        }
    }
}

fn check_dims(n: usize, r: usize, max_n: usize) -> Result<()> {
    if n == 0 || n > max_n {
        return Err(Error::InvalidInput(format!(
            "dimension exceeds supported range: n = {n}, allowed 1..={max_n}"
        )));
    }
    if !(1..=2).contains(&r) {
        return Err(Error::InvalidInput(format!("rank must be 1 or 2, got {r}")));
    }
    if r > n {
        return Err(Error::InvalidInput(format!("rank {r} exceeds n = {n}")));
    }
    Ok(())
}

/// Sample `(x, z)` per the recipe, forge with `mu = 1e-3 ||z||^2`, and check
/// the result before returning it.
pub fn forge_instance(n: usize, r: usize, seed: u64, recipe: &Recipe) -> Result<ForgeResult> {
    check_dims(n, r, MAX_FORGE_N)?;
    let (x, z, mu) = match recipe {
        Recipe::Sampled(kind) => {
            let (x, z) = sample_recipe(*kind, n, r, &mut ChaCha8Rng::seed_from_u64(seed))?;
            (x, z, None)
        }
        Recipe::Explicit { x, z, mu } => {
            if x.shape() != (n, r) || z.shape() != (n, r) {
                return Err(Error::InvalidInput(format!("explicit factors must be {n}x{r}")));
            }
            (x.clone(), z.clone(), *mu)
        }
    };
    let mut opts = ForgeOptions::for_ground_truth(&z);
    if let Some(mu) = mu {
        if !(mu >= 0.0) {
            return Err(Error::InvalidInput(format!("mu must be nonnegative, got {mu}")));
        }
        opts.mu = mu;
    }
    let result = lmi::forge(&x, &z, &opts)?;
    let rip = result.instance.rip_full();
    if !(rip.delta_full < 1.0) {
        return Err(Error::Certification(format!("forged instance has delta = {}", rip.delta_full)));
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSample {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub delta_ub: f64,
    pub delta_lb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSearchReport {
    pub samples: Vec<DeltaSample>,
    pub skipped: usize,
    pub min_delta_ub: f64,
    pub min_delta_lb: f64,
    pub wall_clock_secs: f64,
}

/// `delta_ub` from the conditioning problem with `mu = 0`, and `delta_lb`
/// restricted to `range([x, z])`.
pub fn delta_sample(x: &DMatrix<f64>, z: &DMatrix<f64>, opts: &SolveOptions) -> Result<DeltaSample> {
    let ops = build_operators(x, z)?;
    if ops.is_degenerate() {
        return Err(Error::Degenerate("x x^T = z z^T".into()));
    }
    let u = lmi::orthonormal_subspace(x, z)?;
    let sol = sdp::solve(&lmi::assemble_opt(&ops, 0.0)?, opts)?;
    lmi::accept_solution(&sol, opts.tol)?;
    let delta_ub = delta_from_eta(sol.objective);
    let delta_lb = lmi::delta_lb(&ops, &u, opts)?;
    Ok(DeltaSample {
        x: x.clone(),
        z: z.clone(),
        delta_ub,
        delta_lb,
    })
}

/// Sample Gaussian `(x, z)` pairs and bound `delta` for each. Sample `k`
/// uses stream `k` of the seeded generator. Failed or degenerate samples are
/// logged and skipped. With a time budget the search stops early once it is
/// spent.
pub fn delta_search(
    n: usize,
    r: usize,
    samples: usize,
    seed: u64,
    time_budget: Option<Duration>,
) -> Result<DeltaSearchReport> {
    check_dims(n, r, MAX_SEARCH_N)?;
    if samples == 0 {
        return Err(Error::InvalidInput("at least one sample is required".into()));
    }
    let start = Instant::now();
    let opts = SolveOptions::default();
    let mut out = Vec::new();
    let mut skipped = 0;
    for k in 0..samples {
        if time_budget.is_some_and(|b| start.elapsed() >= b) {
            log::info!("time budget spent after {k} samples");
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let x = gaussian(&mut rng, n, r);
        let z = gaussian(&mut rng, n, r);
        match delta_sample(&x, &z, &opts) {
            Ok(s) => out.push(s),
            Err(e) => {
                log::warn!("sample {k} skipped: {e}");
                skipped += 1;
            }
        }
    }
    Ok(DeltaSearchReport {
        min_delta_ub: out.iter().map(|s| s.delta_ub).fold(f64::INFINITY, f64::min),
        min_delta_lb: out.iter().map(|s| s.delta_lb).fold(f64::INFINITY, f64::min),
        samples: out,
        skipped,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExperimentSpec {
    VerifyExample1 {
        out: PathBuf,
    },
    Forge {
        n: usize,
        r: usize,
        recipe: RecipeKind,
        seed: u64,
        out: PathBuf,
    },
    SgdHistogram {
        /// An instance or forge-result JSON file, or `example1`.
        instance: String,
        trials: usize,
        steps: usize,
        lr: f64,
        momentum: f64,
        seed: u64,
        out: PathBuf,
    },
    GammaSweep {
        instance: String,
        /// JSON list of rows; defaults to the forged point when `instance`
        /// is a forge result.
        xloc: Option<PathBuf>,
        gammas: Vec<f64>,
        trials: usize,
        steps: usize,
        lr: f64,
        momentum: f64,
        seed: u64,
        out: PathBuf,
    },
    DeltaSearch {
        n: usize,
        r: usize,
        samples: usize,
        seed: u64,
        time_budget_secs: Option<f64>,
        out: PathBuf,
    },
}

impl ExperimentSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::VerifyExample1 { .. } => "verify_example1",
            Self::Forge { .. } => "forge",
            Self::SgdHistogram { .. } => "sgd_histogram",
            Self::GammaSweep { .. } => "gamma_sweep",
            Self::DeltaSearch { .. } => "delta_search",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            Self::VerifyExample1 { out }
            | Self::Forge { out, .. }
            | Self::SgdHistogram { out, .. }
            | Self::GammaSweep { out, .. }
            | Self::DeltaSearch { out, .. } => out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{what} must be positive")))
            }
        };
        match self {
            Self::VerifyExample1 { .. } => Ok(()),
            Self::Forge { n, r, recipe, .. } => {
                check_dims(*n, *r, MAX_FORGE_N)?;
                if *recipe == RecipeKind::Good && *r != 1 {
                    return Err(Error::InvalidInput("the good recipe is rank one".into()));
                }
                Ok(())
            }
            Self::SgdHistogram { trials, steps, lr, momentum, .. } => {
                if *trials == 0 || *steps == 0 {
                    return Err(Error::InvalidInput("trials and steps must be positive".into()));
                }
                positive(*lr, "learning rate")?;
                if !(0.0..1.0).contains(momentum) {
                    return Err(Error::InvalidInput("momentum must lie in [0, 1)".into()));
                }
                Ok(())
            }
            Self::GammaSweep { gammas, trials, steps, lr, momentum, .. } => {
                if gammas.is_empty() || gammas.iter().any(|g| !(0.0..=1.0).contains(g)) {
                    return Err(Error::InvalidInput("gammas must be a nonempty list in [0, 1]".into()));
                }
                if *trials == 0 || *steps == 0 {
                    return Err(Error::InvalidInput("trials and steps must be positive".into()));
                }
                positive(*lr, "learning rate")?;
                if !(0.0..1.0).contains(momentum) {
                    return Err(Error::InvalidInput("momentum must lie in [0, 1)".into()));
                }
                Ok(())
            }
            Self::DeltaSearch { n, r, samples, time_budget_secs, .. } => {
                check_dims(*n, *r, MAX_SEARCH_N)?;
                if *samples == 0 {
                    return Err(Error::InvalidInput("samples must be positive".into()));
                }
                if let Some(t) = time_budget_secs {
                    positive(*t, "time budget")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub category: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: String,
    pub exit_code: i32,
    pub assertions: Vec<Assertion>,
    pub results: serde_json::Value,
    pub error: Option<ErrorReport>,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_INVALID_INPUT: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Shape { .. }
        | Error::InvalidInput(_)
        | Error::InvalidInstance(_)
        | Error::NotOrthonormal(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => EXIT_INVALID_INPUT,
        Error::Degenerate(_) | Error::Indefinite { .. } | Error::Solver(_) => EXIT_SOLVER,
        Error::Certification(_) => EXIT_ASSERTION,
    }
}

fn category(err: &Error) -> &'static str {
    match exit_code_for(err) {
        EXIT_INVALID_INPUT => "invalid_input",
        EXIT_ASSERTION => "assertion",
        _ => "solver",
    }
}

/// An instance from a file (plain instance or forge result), or the built-in
/// `example1`. Returns the forged point when the file carries one.
pub fn load_instance(source: &str) -> Result<(SensingInstance, Option<DMatrix<f64>>)> {
    if source == "example1" {
        return Ok((example1_instance(), Some(example1_spurious_point())));
    }
    let text = fs::read_to_string(source)?;
    if let Ok(forged) = ForgeResult::from_json(&text) {
        return Ok((forged.instance, Some(forged.x)));
    }
    Ok((SensingInstance::from_json(&text)?, None))
}

/// Read an `n x r` matrix stored as a JSON list of rows.
pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(&fs::read_to_string(path)?)?;
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidInput(format!("{} is not a rectangular matrix", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Execute the experiment, write `summary.json` (and CSV tables) into the
/// output directory, and report the exit code.
pub fn run(spec: &ExperimentSpec) -> RunReport {
    let mut assertions = Vec::new();
    let outcome = spec.validate().and_then(|_| {
        fs::create_dir_all(spec.out())?;
        execute(spec, &mut assertions)
    });
    let (results, error, exit_code) = match outcome {
        Ok(v) => {
            let code = if assertions.iter().all(|a| a.passed) { EXIT_OK } else { EXIT_ASSERTION };
            (v, None, code)
        }
        Err(e) => (
            serde_json::Value::Null,
            Some(ErrorReport {
                category: category(&e).into(),
                message: e.to_string(),
            }),
            exit_code_for(&e),
        ),
    };
    let report = RunReport {
        experiment: spec.name().into(),
        exit_code,
        assertions,
        results,
        error,
    };
    if spec.out().is_dir() {
        let write = serde_json::to_string_pretty(&report)
            .map_err(Error::from)
            .and_then(|s| fs::write(spec.out().join("summary.json"), s).map_err(Error::from));
        if let Err(e) = write {
            log::error!("could not write summary: {e}");
        }
    }
    report
}

fn execute(spec: &ExperimentSpec, checks: &mut Vec<Assertion>) -> Result<serde_json::Value> {
    match spec {
        ExperimentSpec::VerifyExample1 { .. } => verify_example1(checks),
        ExperimentSpec::Forge { n, r, recipe, seed, out } => {
            let result = forge_instance(*n, *r, *seed, &Recipe::Sampled(*recipe))?;
            let rip = result.instance.rip_full();
            checks.push(Assertion::new(
                "spurious point certified",
                matches!(result.certificate.verdict, Verdict::StrictLocalMin),
                format!("{:?}", result.certificate.verdict),
            ));
            checks.push(Assertion::new("delta below one", rip.delta_full < 1.0, format!("{}", rip.delta_full)));
            fs::write(out.join("forge.json"), result.to_json()?)?;
            fs::write(out.join("instance.json"), result.instance.to_json()?)?;
            Ok(json!({
                "n": n, "r": r, "recipe": recipe, "seed": seed,
                "eta": result.eta, "delta_n": result.delta_n, "rip": rip,
                "certificate": result.certificate,
            }))
        }
        ExperimentSpec::SgdHistogram { instance, trials, steps, lr, momentum, seed, out } => {
            let (inst, _) = load_instance(instance)?;
            let is_example1 = inst == example1_instance();
            let classifier = if is_example1 {
                Classifier::FailureAbove(0.5)
            } else {
                Classifier::SuccessBelow(0.01)
            };
            let cfg = SgdConfig::new(*lr, *momentum, *steps, *seed).with_classifier(classifier);
            let (summary, records) = sgd::failure_rate_experiment(&inst, &cfg, *trials)?;
            let hist = summary.histogram.as_ref().expect("histogram present");
            checks.push(Assertion::new(
                "histogram holds every trial",
                hist.total() == *trials as u64,
                format!("{} of {trials}", hist.total()),
            ));
            if is_example1 && *trials >= 10_000 {
                checks.push(Assertion::new(
                    "failure rate in [0.08, 0.16]",
                    (0.08..=0.16).contains(&summary.failure_rate),
                    format!("{}", summary.failure_rate),
                ));
            }
            hist.write_csv(fs::File::create(out.join("histogram.csv"))?)?;
            sgd::write_trials_csv(&records, fs::File::create(out.join("trials.csv"))?)?;
            Ok(serde_json::to_value(&summary)?)
        }
        ExperimentSpec::GammaSweep { instance, xloc, gammas, trials, steps, lr, momentum, seed, out } => {
            let (inst, forged_x) = load_instance(instance)?;
            let x_loc = match (xloc, forged_x) {
                (Some(p), _) => load_matrix(p)?,
                (None, Some(x)) => x,
                (None, None) => {
                    return Err(Error::InvalidInput("no x_loc given and the instance file carries none".into()))
                }
            };
            let cfg = SgdConfig::new(*lr, *momentum, *steps, *seed);
            let summary = sgd::gamma_sweep(&inst, &x_loc, gammas, &cfg, *trials)?;
            checks.push(Assertion::new(
                "one band per gamma",
                summary.bands.len() == gammas.len(),
                format!("{}", summary.bands.len()),
            ));
            summary.write_bands_csv(fs::File::create(out.join("bands.csv"))?)?;
            Ok(serde_json::to_value(&summary)?)
        }
        ExperimentSpec::DeltaSearch { n, r, samples, seed, time_budget_secs, out } => {
            let budget = time_budget_secs.map(Duration::from_secs_f64);
            let report = delta_search(*n, *r, *samples, *seed, budget)?;
            let slack = 2.0 * SolveOptions::default().tol;
            let worst = report
                .samples
                .iter()
                .map(|s| s.delta_lb - s.delta_ub)
                .fold(f64::NEG_INFINITY, f64::max);
            checks.push(Assertion::new(
                "delta_lb <= delta_ub on every sample",
                report.samples.iter().all(|s| s.delta_lb <= s.delta_ub + slack),
                format!("max excess {worst:.3e}"),
            ));
            let mut w = csv::Writer::from_path(out.join("samples.csv"))?;
            w.write_record(["sample", "delta_ub", "delta_lb"])?;
            for (k, s) in report.samples.iter().enumerate() {
                w.write_record([k.to_string(), s.delta_ub.to_string(), s.delta_lb.to_string()])?;
            }
            w.flush()?;
            Ok(serde_json::to_value(&report)?)
        }
    }
}

fn verify_example1(checks: &mut Vec<Assertion>) -> Result<serde_json::Value> {
    const TOL: f64 = 1e-10;
    let inst = example1_instance();
    let x = example1_spurious_point();
    let f = inst.objective_value(&x)?;
    let g = inst.gradient(&x)?;
    let h = inst.hessian(&x)?;
    let rip = inst.rip_full();
    let cert = inst.certify(&x, 0.0, &CertifyTolerances::default_for(&inst))?;
    let at_z = inst.certify(inst.z(), 0.0, &CertifyTolerances::default_for(&inst))?;
    let expected_h = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 8.0]);
    checks.push(Assertion::new("objective is 3/2", (f - 1.5).abs() <= TOL, format!("{f}")));
    checks.push(Assertion::new("gradient vanishes", g.amax() <= TOL, format!("{}", g.amax())));
    checks.push(Assertion::new(
        "Hessian is diag(0, 8)",
        (&h - &expected_h).amax() <= TOL,
        format!("{h}"),
    ));
    checks.push(Assertion::new(
        "RIP spectrum [1, 3]",
        (rip.lambda_min - 1.0).abs() <= TOL && (rip.lambda_max - 3.0).abs() <= TOL,
        format!("[{}, {}]", rip.lambda_min, rip.lambda_max),
    ));
    checks.push(Assertion::new("delta is 1/2", (rip.delta_full - 0.5).abs() <= TOL, format!("{}", rip.delta_full)));
    checks.push(Assertion::new(
        "spurious point is second-order critical",
        cert.verdict == Verdict::SecondOrderCritical,
        format!("{:?}", cert.verdict),
    ));
    checks.push(Assertion::new(
        "ground truth is global",
        at_z.verdict == Verdict::GlobalMin,
        format!("{:?}", at_z.verdict),
    ));
    Ok(json!({ "certificate": cert, "ground_truth": at_z, "rip": rip }))
}
