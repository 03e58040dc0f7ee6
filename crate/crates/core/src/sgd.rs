//! Stochastic gradient descent with heavy-ball momentum on sensing instances,
//! and the statistics gathered over many independent trials.
//!
//! Each step samples one measurement uniformly with replacement and moves
//! along the gradient of its squared residual. Trial `k` draws all of its
//! randomness from a ChaCha stream keyed by `(master_seed, k)`, so results do
//! not depend on execution order or thread count.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::sensing::{measure_into, CertifyTolerances, SensingInstance, Verdict};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitScheme {
    /// Every entry i.i.d. standard normal.
    Gaussian,
    /// `x = gamma w + (1 - gamma) x_loc` with fresh Gaussian `w`.
    Interpolated { gamma: f64, x_loc: DMatrix<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "threshold")]
pub enum Classifier {
    /// Success iff the relative error is below the threshold.
    SuccessBelow(f64),
    /// Failure iff the relative error exceeds the threshold.
    FailureAbove(f64),
}

impl Classifier {
    pub fn succeeded(&self, rel_error: f64, diverged: bool) -> bool {
        if diverged || !rel_error.is_finite() {
            return false;
        }
        match *self {
            Classifier::SuccessBelow(t) => rel_error < t,
            Classifier::FailureAbove(t) => rel_error <= t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub master_seed: u64,
    pub init: InitScheme,
    pub classifier: Classifier,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, momentum: f64, steps: usize, master_seed: u64) -> Self {
        Self {
            learning_rate,
            momentum,
            steps,
            batch_size: 1,
            master_seed,
            init: InitScheme::Gaussian,
            classifier: Classifier::SuccessBelow(0.01),
        }
    }

    pub fn with_init(mut self, init: InitScheme) -> Self {
        self.init = init;
        self
    }

    pub fn with_classifier(mut self, classifier: Classifier) -> Self {
        self.classifier = classifier;
        self
    }

    pub fn validate(&self, inst: &SensingInstance) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput("momentum must lie in [0, 1)".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidInput("steps must be positive".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::InvalidInput("only batch size 1 is supported".into()));
        }
        if let InitScheme::Interpolated { gamma, x_loc } = &self.init {
            if !(0.0..=1.0).contains(gamma) {
                return Err(Error::InvalidInput(format!("gamma must lie in [0, 1], got {gamma}")));
            }
            if x_loc.shape() != (inst.n(), inst.r()) {
                return Err(shape_err("x_loc", format!("{}x{}", inst.n(), inst.r()), format!("{:?}", x_loc.shape())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: u64,
    pub final_x: DMatrix<f64>,
    pub final_abs_error: f64,
    pub final_rel_error: f64,
    pub diverged: bool,
    pub succeeded: bool,
}

pub fn classify(record: &TrialRecord, mode: Classifier) -> bool {
    mode.succeeded(record.final_rel_error, record.diverged)
}

/// Measurements packed contiguously for the inner loop.
struct Packed<'a> {
    inst: &'a SensingInstance,
    mats: Vec<f64>,
}

impl<'a> Packed<'a> {
    fn new(inst: &'a SensingInstance) -> Self {
        let mut mats = Vec::with_capacity(inst.m() * inst.n() * inst.n());
        for a in inst.measurements() {
            mats.extend_from_slice(a.as_slice());
        }
        Self { inst, mats }
    }
}

fn final_errors(inst: &SensingInstance, x: &DMatrix<f64>) -> (f64, f64) {
    let truth = inst.ground_truth();
    let abs = (x * x.transpose() - &truth).norm();
    (abs, abs / truth.norm())
}

fn run_one(p: &Packed, cfg: &SgdConfig, trial_index: u64) -> TrialRecord {
    let inst = p.inst;
    let (n, r, m) = (inst.n(), inst.r(), inst.m());
    let nn = n * n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    rng.set_stream(trial_index);
    let mut x = match &cfg.init {
        InitScheme::Gaussian => DMatrix::from_fn(n, r, |_, _| rng.sample(StandardNormal)),
        InitScheme::Interpolated { gamma, x_loc } => {
            let w: DMatrix<f64> = DMatrix::from_fn(n, r, |_, _| rng.sample(StandardNormal));
            w * *gamma + x_loc * (1.0 - gamma)
        }
    };
    let limit = (1e6 * inst.z().norm()).powi(2);
    let b = inst.b();
    let mut v = vec![0.0; n * r];
    let mut ax = vec![0.0; n * r];
    let mut diverged = false;
    for _ in 0..cfg.steps {
        let i = rng.random_range(0..m);
        let a = &p.mats[i * nn..(i + 1) * nn];
        let res = measure_into(a, x.as_slice(), n, r, &mut ax) - b[i];
        // Gradient of the sampled term r_i^2 is 4 r_i A_i x.
        let coef = 4.0 * cfg.learning_rate * res;
        let mut norm2 = 0.0;
        for ((xk, vk), gk) in x.as_mut_slice().iter_mut().zip(v.iter_mut()).zip(&ax) {
            *vk = cfg.momentum * *vk - coef * gk;
            *xk += *vk;
            norm2 += *xk * *xk;
        }
        if !(norm2 <= limit) {
            diverged = true;
            break;
        }
    }
    let (abs, rel) = if diverged {
        (f64::INFINITY, f64::INFINITY)
    } else {
        final_errors(inst, &x)
    };
    TrialRecord {
        trial_index,
        final_x: x,
        final_abs_error: abs,
        final_rel_error: rel,
        diverged,
        succeeded: cfg.classifier.succeeded(rel, diverged),
    }
}

pub fn sgd_run(inst: &SensingInstance, config: &SgdConfig, trial_index: u64) -> Result<TrialRecord> {
    config.validate(inst)?;
    Ok(run_one(&Packed::new(inst), config, trial_index))
}

/// Trials `first .. first + count`, in index order, run in parallel.
pub fn run_trials(inst: &SensingInstance, config: &SgdConfig, first: u64, count: usize) -> Result<Vec<TrialRecord>> {
    config.validate(inst)?;
    let packed = Packed::new(inst);
    Ok((0..count as u64)
        .into_par_iter()
        .map(|k| run_one(&packed, config, first + k))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Uniform bins on `[lo, hi]`; values outside are clamped into the end
    /// bins (non-finite values land in the last bin).
    pub fn uniform(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Self {
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
        let mut counts = vec![0u64; bins];
        for v in values {
            let k = if v.is_nan() || v >= hi {
                bins - 1
            } else if v <= lo {
                0
            } else {
                (((v - lo) / width) as usize).min(bins - 1)
            };
            counts[k] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        0.5 * (self.edges[k] + self.edges[k + 1])
    }

    /// Centers of bins that are strict local maxima of the counts (plateaus
    /// count once, at their first bin), highest count first.
    pub fn modes(&self) -> Vec<f64> {
        let c = &self.counts;
        let mut out: Vec<(u64, f64)> = Vec::new();
        let mut k = 0;
        while k < c.len() {
            let mut end = k;
            while end + 1 < c.len() && c[end + 1] == c[k] {
                end += 1;
            }
            let left = k == 0 || c[k - 1] < c[k];
            let right = end + 1 == c.len() || c[end + 1] < c[k];
            if c[k] > 0 && left && right {
                out.push((c[k], self.bin_center(k)));
            }
            k = end + 1;
        }
        out.sort_by(|a, b| b.0.cmp(&a.0));
        out.into_iter().map(|(_, x)| x).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin_lo", "bin_hi", "count"])?;
        for (k, c) in self.counts.iter().enumerate() {
            out.write_record([self.edges[k].to_string(), self.edges[k + 1].to_string(), c.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileBand {
    pub min: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    if lo == hi || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        sorted[lo] + t * (sorted[hi] - sorted[lo])
    }
}

impl QuantileBand {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            min: v[0],
            q05: quantile_sorted(&v, 0.05),
            median: quantile_sorted(&v, 0.5),
            q95: quantile_sorted(&v, 0.95),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaBand {
    pub gamma: f64,
    pub trials: usize,
    pub failure_rate: f64,
    pub rel_error: QuantileBand,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub trials: usize,
    pub failure_count: usize,
    pub failure_rate: f64,
    /// `3 sqrt(p (1 - p) / trials)`.
    pub half_width_3sigma: f64,
    pub classifier: Classifier,
    pub histogram: Option<Histogram>,
    pub bands: Vec<GammaBand>,
}

impl ExperimentSummary {
    fn from_records(records: &[TrialRecord], classifier: Classifier) -> Self {
        let trials = records.len();
        let failure_count = records.iter().filter(|r| !r.succeeded).count();
        let p = if trials == 0 { 0.0 } else { failure_count as f64 / trials as f64 };
        Self {
            trials,
            failure_count,
            failure_rate: p,
            half_width_3sigma: if trials == 0 { 0.0 } else { 3.0 * (p * (1.0 - p) / trials as f64).sqrt() },
            classifier,
            histogram: None,
            bands: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_bands_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["gamma", "trials", "failure_rate", "min", "q05", "median", "q95", "max"])?;
        for b in &self.bands {
            let q = &b.rel_error;
            out.write_record(
                [b.gamma, b.trials as f64, b.failure_rate, q.min, q.q05, q.median, q.q95, q.max].map(|v| v.to_string()),
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn write_trials_csv<W: Write>(records: &[TrialRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["trial_index", "final_abs_error", "final_rel_error", "succeeded"])?;
    for r in records {
        out.write_record([
            r.trial_index.to_string(),
            r.final_abs_error.to_string(),
            r.final_rel_error.to_string(),
            r.succeeded.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `trials` independent runs; the summary carries a 100-bin histogram of the
/// final absolute error on `[0, 2 ||Z||_F]`.
pub fn failure_rate_experiment(
    inst: &SensingInstance,
    config: &SgdConfig,
    trials: usize,
) -> Result<(ExperimentSummary, Vec<TrialRecord>)> {
    if trials == 0 {
        return Err(Error::InvalidInput("at least one trial is required".into()));
    }
    let records = run_trials(inst, config, 0, trials)?;
    let mut summary = ExperimentSummary::from_records(&records, config.classifier);
    let hi = 2.0 * inst.ground_truth().norm();
    summary.histogram = Some(Histogram::uniform(records.iter().map(|r| r.final_abs_error), 0.0, hi, 100));
    Ok((summary, records))
}

/// For each `gamma`, run `trials_per_gamma` trials started at
/// `gamma w + (1 - gamma) x_loc` and summarize the final relative errors.
/// `x_loc` must certify as at least second-order critical.
pub fn gamma_sweep(
    inst: &SensingInstance,
    x_loc: &DMatrix<f64>,
    gammas: &[f64],
    config: &SgdConfig,
    trials_per_gamma: usize,
) -> Result<ExperimentSummary> {
    if trials_per_gamma == 0 || gammas.is_empty() {
        return Err(Error::InvalidInput("need at least one gamma and one trial".into()));
    }
    let cert = inst.certify(x_loc, 0.0, &CertifyTolerances::default_for(inst))?;
    if !matches!(cert.verdict, Verdict::StrictLocalMin | Verdict::SecondOrderCritical) {
        return Err(Error::Certification(format!(
            "x_loc is not a second-order critical point (verdict {:?})",
            cert.verdict
        )));
    }
    let mut all = Vec::new();
    let mut bands = Vec::new();
    for (g, &gamma) in gammas.iter().enumerate() {
        let cfg = config.clone().with_init(InitScheme::Interpolated {
            gamma,
            x_loc: x_loc.clone(),
        });
        let records = run_trials(inst, &cfg, (g * trials_per_gamma) as u64, trials_per_gamma)?;
        let rel: Vec<f64> = records.iter().map(|r| r.final_rel_error).collect();
        let failures = records.iter().filter(|r| !r.succeeded).count();
        bands.push(GammaBand {
            gamma,
            trials: records.len(),
            failure_rate: failures as f64 / records.len() as f64,
            rel_error: QuantileBand::from_values(&rel).expect("nonempty"),
        });
        all.extend(records);
    }
    let mut summary = ExperimentSummary::from_records(&all, config.classifier);
    summary.bands = bands;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::example1_instance;

    fn record(rel: f64) -> TrialRecord {
        TrialRecord {
            trial_index: 0,
            final_x: DMatrix::zeros(1, 1),
            final_abs_error: rel,
            final_rel_error: rel,
            diverged: false,
            succeeded: false,
        }
    }

    #[test]
    fn classifier_thresholds() {
        assert!(classify(&record(0.006), Classifier::SuccessBelow(0.01)));
        assert!(classify(&record(0.0), Classifier::SuccessBelow(0.01)));
        assert!(classify(&record(0.0), Classifier::FailureAbove(0.5)));
        assert!(!classify(&record(0.51), Classifier::FailureAbove(0.5)));
        assert!(!classify(&record(0.2), Classifier::SuccessBelow(0.01)));
        let mut d = record(0.0);
        d.diverged = true;
        assert!(!classify(&d, Classifier::FailureAbove(0.5)));
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let inst = example1_instance();
        let cfg = SgdConfig::new(1e-3, 0.9, 500, 7).with_init(InitScheme::Interpolated {
            gamma: 0.0,
            x_loc: inst.z().clone(),
        });
        let rec = sgd_run(&inst, &cfg, 3).unwrap();
        assert_eq!(&rec.final_x, inst.z());
        assert_eq!(rec.final_abs_error, 0.0);
        assert!(rec.succeeded);
    }

    #[test]
    fn trials_are_reproducible_and_order_independent() {
        let inst = example1_instance();
        let cfg = SgdConfig::new(1e-3, 0.9, 200, 42);
        let batch = run_trials(&inst, &cfg, 0, 16).unwrap();
        for k in [15u64, 3, 0, 9] {
            assert_eq!(sgd_run(&inst, &cfg, k).unwrap(), batch[k as usize]);
        }
        let other = run_trials(&inst, &SgdConfig::new(1e-3, 0.9, 200, 43), 0, 16).unwrap();
        assert_ne!(batch[0].final_x, other[0].final_x);
    }

    #[test]
    fn divergence_is_a_failure() {
        let inst = example1_instance();
        let cfg = SgdConfig::new(10.0, 0.9, 1000, 1);
        let rec = sgd_run(&inst, &cfg, 0).unwrap();
        assert!(rec.diverged);
        assert!(!rec.succeeded);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let inst = example1_instance();
        assert!(sgd_run(&inst, &SgdConfig::new(-1.0, 0.9, 10, 0), 0).is_err());
        assert!(sgd_run(&inst, &SgdConfig::new(1e-3, 1.0, 10, 0), 0).is_err());
        assert!(sgd_run(&inst, &SgdConfig::new(1e-3, 0.9, 0, 0), 0).is_err());
        let bad_gamma = SgdConfig::new(1e-3, 0.9, 10, 0).with_init(InitScheme::Interpolated {
            gamma: 1.5,
            x_loc: inst.z().clone(),
        });
        assert!(sgd_run(&inst, &bad_gamma, 0).is_err());
    }

    #[test]
    fn histogram_conserves_mass_and_clamps() {
        let h = Histogram::uniform([0.0, 0.5, 1.0, 2.5, -1.0, f64::INFINITY], 0.0, 2.0, 4);
        assert_eq!(h.total(), 6);
        assert_eq!(h.counts, vec![2, 1, 1, 2]);
        assert_eq!(h.edges.len(), 5);
    }

    #[test]
    fn histogram_modes() {
        let h = Histogram {
            edges: (0..=6).map(f64::from).collect(),
            counts: vec![5, 1, 0, 2, 2, 1],
        };
        assert_eq!(h.modes(), vec![0.5, 3.5]);
    }

    #[test]
    fn quantiles_interpolate() {
        let b = QuantileBand::from_values(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!(b.min, 1.0);
        assert_eq!(b.max, 5.0);
        assert_eq!(b.median, 3.0);
        assert!((b.q05 - 1.2).abs() < 1e-12);
        assert!((b.q95 - 4.8).abs() < 1e-12);
        assert!(QuantileBand::from_values(&[]).is_none());
    }

    #[test]
    fn all_trials_at_ground_truth_never_fail() {
        let inst = example1_instance();
        let cfg = SgdConfig::new(1e-3, 0.9, 100, 0).with_init(InitScheme::Interpolated {
            gamma: 0.0,
            x_loc: inst.z().clone(),
        });
        let (s, _) = failure_rate_experiment(&inst, &cfg, 10).unwrap();
        assert_eq!(s.failure_rate, 0.0);
        assert_eq!(s.half_width_3sigma, 0.0);
        assert_eq!(s.histogram.unwrap().total(), 10);
    }

    #[test]
    fn csv_outputs_have_headers() {
        let inst = example1_instance();
        let cfg = SgdConfig::new(1e-3, 0.9, 50, 0);
        let (s, recs) = failure_rate_experiment(&inst, &cfg, 4).unwrap();
        let mut buf = Vec::new();
        write_trials_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("trial_index,final_abs_error,final_rel_error,succeeded"));
        assert_eq!(text.lines().count(), 5);
        let mut buf = Vec::new();
        s.histogram.unwrap().write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 101);
    }

    #[test]
    fn gamma_sweep_requires_critical_point() {
        let inst = example1_instance();
        let cfg = SgdConfig::new(1e-3, 0.9, 50, 0);
        let not_critical = DMatrix::from_column_slice(2, 1, &[0.3, 0.2]);
        assert!(gamma_sweep(&inst, &not_critical, &[0.0], &cfg, 2).is_err());
        let x_loc = DMatrix::from_column_slice(2, 1, &[0.0, 1.0 / 2f64.sqrt()]);
        let s = gamma_sweep(&inst, &x_loc, &[0.0, 1.0], &cfg, 8).unwrap();
        assert_eq!(s.bands.len(), 2);
        assert_eq!(s.trials, 16);
        for b in &s.bands {
            let q = b.rel_error;
            assert!(q.min <= q.q05 && q.q05 <= q.median && q.median <= q.q95 && q.q95 <= q.max);
        }
    }
}
