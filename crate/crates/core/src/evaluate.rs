//! Monte Carlo sensitivity and bias measurement for any estimator, and the
//! assembly of sensitivity-versus-OPL curves and hierarchy reports.
//!
//! Sensitivity is the standard deviation of repeated estimates of an
//! unchanging scene under shot noise. Failed repetitions (Carré radicand
//! or degeneracy errors) are excluded from the statistics and counted
//! separately; a majority of failures invalidates the estimate.

use crate::error::{Error, Result};
use crate::estimators::{CarreEstimator, OplEstimator};
use crate::fisher;
use crate::net::Network;
use crate::rng::SeedTree;
use crate::signal::{mean_intensities, sample_observation, SceneParams, WavenumberGrid};
use crate::training::NetworkBank;
use serde::Serialize;
use std::io::Write as _;
use std::path::Path;

/// Result of one Monte Carlo sensitivity run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSensitivity {
    /// Sample standard deviation of the successful estimates, um.
    pub sigma: f64,
    /// Standard error of `sigma`, Gaussian approximation `sigma/sqrt(2n)`.
    pub stderr: f64,
    /// Mean estimate minus the estimator's reference value for the true
    /// OPL, um.
    pub bias: f64,
    /// Number of repetitions the estimator rejected.
    pub failures: usize,
    /// Total repetitions attempted.
    pub reps: usize,
}

/// Draw `reps` noisy observations of the scene and run the estimator on
/// all of them. Returns the successful estimates and the failure count.
/// Results are deterministic in `seed` and independent of `workers`.
pub fn mc_estimates(
    est: &dyn OplEstimator,
    p: &SceneParams,
    grid: &WavenumberGrid,
    reps: usize,
    seed: SeedTree,
    workers: usize,
) -> (Vec<f64>, usize) {
    let mean = mean_intensities(p, grid);
    let make_obs = |i: usize| -> [f64; 4] {
        let mut rng = seed.child(i as u64).rng();
        sample_observation(&mean, grid, &mut rng).as_f64()
    };
    let observations: Vec<[f64; 4]> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool");
        pool.install(|| {
            use rayon::prelude::*;
            (0..reps).into_par_iter().map(make_obs).collect()
        })
    } else {
        (0..reps).map(make_obs).collect()
    };
    let mut ok = Vec::with_capacity(reps);
    let mut failures = 0usize;
    for r in est.estimate_batch(&observations) {
        match r {
            Ok(v) => ok.push(v),
            Err(_) => failures += 1,
        }
    }
    (ok, failures)
}

/// Sample mean and standard deviation (n-1 denominator).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Sample skewness and excess kurtosis (biased moment estimators; fine at
/// the 10^4 sample sizes used here).
pub fn skewness_excess_kurtosis(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
}

/// Monte Carlo sensitivity of an estimator at one scene point.
pub fn mc_sensitivity(
    est: &dyn OplEstimator,
    p: &SceneParams,
    grid: &WavenumberGrid,
    reps: usize,
    seed: SeedTree,
    workers: usize,
) -> Result<McSensitivity> {
    if reps < 100 {
        return Err(Error::InvalidParameter(format!(
            "sensitivity needs at least 100 repetitions, got {reps}"
        )));
    }
    let (ok, failures) = mc_estimates(est, p, grid, reps, seed, workers);
    if failures * 2 > reps {
        return Err(Error::TooManyFailures { failed: failures, reps });
    }
    let (mean, sigma) = mean_std(&ok);
    Ok(McSensitivity {
        sigma,
        stderr: sigma / (2.0 * ok.len() as f64).sqrt(),
        bias: mean - est.reference_opl(p.opl),
        failures,
        reps,
    })
}

/// Tabulated sensitivity versus OPL for one estimator at fixed (alpha, V).
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityCurve {
    pub estimator: String,
    pub alpha: f64,
    pub visibility: f64,
    pub opl_um: Vec<f64>,
    pub sigma_um: Vec<f64>,
    pub stderr_um: Vec<f64>,
    pub bias_um: Vec<f64>,
    pub failures: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
}

/// What to sweep: a Monte Carlo estimator or a closed-form bound.
pub enum CurveEstimator<'a> {
    Carre { k0: f64 },
    Network(&'a Network),
    Bank(&'a NetworkBank),
    Crb,
    Spcrb,
}

impl CurveEstimator<'_> {
    fn tag(&self) -> String {
        match self {
            CurveEstimator::Carre { .. } => "CARRE".to_string(),
            CurveEstimator::Network(n) => n.tag(),
            CurveEstimator::Bank(b) => b.tag(),
            CurveEstimator::Crb => "CRB".to_string(),
            CurveEstimator::Spcrb => "SPCRB".to_string(),
        }
    }
}

/// Sweep sensitivity across an OPL grid at fixed (alpha, V).
///
/// Monte Carlo estimators get `reps` repetitions per point with seed path
/// `seed/point/rep`; bounds are evaluated in closed form with zero
/// standard error. A single network must cover the whole sweep with its
/// training window; a bank selects the member nearest each true OPL.
pub fn sweep_curve(
    est: &CurveEstimator,
    alpha: f64,
    visibility: f64,
    opls: &[f64],
    grid: &WavenumberGrid,
    reps: usize,
    seed: u64,
    workers: usize,
) -> Result<SensitivityCurve> {
    if opls.is_empty() {
        return Err(Error::InvalidParameter("empty OPL grid".into()));
    }
    if opls.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(
            "OPL grid must be strictly increasing".into(),
        ));
    }
    let tree = SeedTree::new(seed);
    let mut sigma = Vec::with_capacity(opls.len());
    let mut stderr = Vec::with_capacity(opls.len());
    let mut bias = Vec::with_capacity(opls.len());
    let mut failures = Vec::with_capacity(opls.len());
    for (i, &l) in opls.iter().enumerate() {
        let p = SceneParams::new(alpha, visibility, l)?;
        match est {
            CurveEstimator::Crb => {
                sigma.push(fisher::crb(&p, grid)?.sigma);
                stderr.push(0.0);
                bias.push(0.0);
                failures.push(0);
            }
            CurveEstimator::Spcrb => {
                sigma.push(fisher::spcrb(&p, grid)?.sigma);
                stderr.push(0.0);
                bias.push(0.0);
                failures.push(0);
            }
            CurveEstimator::Carre { k0 } => {
                let mc = mc_sensitivity(
                    &CarreEstimator { k0: *k0 },
                    &p,
                    grid,
                    reps,
                    tree.child(i as u64),
                    workers,
                )?;
                sigma.push(mc.sigma);
                stderr.push(mc.stderr);
                bias.push(mc.bias);
                failures.push(mc.failures);
            }
            CurveEstimator::Network(net) => {
                let (lo, hi) = net.opl_window;
                if l < lo || l > hi {
                    return Err(Error::OutOfSpan {
                        estimate_um: l,
                        lo_um: lo,
                        hi_um: hi,
                    });
                }
                let mc = mc_sensitivity(*net, &p, grid, reps, tree.child(i as u64), workers)?;
                sigma.push(mc.sigma);
                stderr.push(mc.stderr);
                bias.push(mc.bias);
                failures.push(mc.failures);
            }
            CurveEstimator::Bank(bank) => {
                let net = bank.select(l)?;
                let mc = mc_sensitivity(net, &p, grid, reps, tree.child(i as u64), workers)?;
                sigma.push(mc.sigma);
                stderr.push(mc.stderr);
                bias.push(mc.bias);
                failures.push(mc.failures);
            }
        }
    }
    Ok(SensitivityCurve {
        estimator: est.tag(),
        alpha,
        visibility,
        opl_um: opls.to_vec(),
        sigma_um: sigma,
        stderr_um: stderr,
        bias_um: bias,
        failures,
        reps,
        seed,
    })
}

/// Result of checking one adjacent inequality of the sensitivity chain.
#[derive(Debug, Clone, Serialize)]
pub struct HierarchyViolation {
    pub upper: String,
    pub lower: String,
    pub opl_um: f64,
    pub sigma_upper: f64,
    pub sigma_lower: f64,
    /// How much slack the Monte Carlo errors allowed.
    pub allowance: f64,
}

/// Pointwise verdicts for each adjacent pair in a sensitivity chain.
#[derive(Debug, Clone, Serialize)]
pub struct HierarchyReport {
    /// Adjacent pairs in the order checked, upper bound first.
    pub pairs: Vec<(String, String)>,
    /// `ok[pair][point]`: inequality holds within slack.
    pub ok: Vec<Vec<bool>>,
    pub violations: Vec<HierarchyViolation>,
    /// Slack multiplier in combined standard errors.
    pub slack_stderrs: f64,
}

impl HierarchyReport {
    pub fn all_ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// Render as a structured-text (TOML) document.
    pub fn to_toml(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            slack_stderrs: f64,
            pairs: Vec<PairDoc>,
            violations: &'a [HierarchyViolation],
        }
        #[derive(Serialize)]
        struct PairDoc {
            upper: String,
            lower: String,
            points_checked: usize,
            points_ok: usize,
        }
        let doc = Doc {
            slack_stderrs: self.slack_stderrs,
            pairs: self
                .pairs
                .iter()
                .zip(&self.ok)
                .map(|((u, l), oks)| PairDoc {
                    upper: u.clone(),
                    lower: l.clone(),
                    points_checked: oks.len(),
                    points_ok: oks.iter().filter(|b| **b).count(),
                })
                .collect(),
            violations: &self.violations,
        };
        toml::to_string_pretty(&doc).expect("hierarchy report serializes")
    }
}

/// Check the sensitivity ordering pointwise for curves given in chain
/// order, upper bounds first: each curve must dominate the next within
/// `slack_stderrs` combined Monte Carlo standard errors.
pub fn hierarchy_check(curves: &[&SensitivityCurve], slack_stderrs: f64) -> Result<HierarchyReport> {
    if curves.len() < 2 {
        return Err(Error::InvalidParameter(
            "hierarchy check needs at least two curves".into(),
        ));
    }
    let first = curves[0];
    for c in &curves[1..] {
        if c.opl_um.len() != first.opl_um.len()
            || c.opl_um
                .iter()
                .zip(&first.opl_um)
                .any(|(a, b)| (a - b).abs() > 1e-12)
        {
            return Err(Error::MismatchedGrids(format!(
                "{} and {} have different OPL grids",
                first.estimator, c.estimator
            )));
        }
        if (c.alpha - first.alpha).abs() > 1e-12 || (c.visibility - first.visibility).abs() > 1e-12
        {
            return Err(Error::MismatchedGrids(format!(
                "{} and {} were evaluated at different (alpha, V)",
                first.estimator, c.estimator
            )));
        }
    }
    let mut pairs = Vec::new();
    let mut ok = Vec::new();
    let mut violations = Vec::new();
    for w in curves.windows(2) {
        let (upper, lower) = (w[0], w[1]);
        let mut point_ok = Vec::with_capacity(upper.opl_um.len());
        for i in 0..upper.opl_um.len() {
            let allowance = slack_stderrs
                * (upper.stderr_um[i].powi(2) + lower.stderr_um[i].powi(2)).sqrt();
            let holds = upper.sigma_um[i] >= lower.sigma_um[i] - allowance;
            if !holds {
                violations.push(HierarchyViolation {
                    upper: upper.estimator.clone(),
                    lower: lower.estimator.clone(),
                    opl_um: upper.opl_um[i],
                    sigma_upper: upper.sigma_um[i],
                    sigma_lower: lower.sigma_um[i],
                    allowance,
                });
            }
            point_ok.push(holds);
        }
        pairs.push((upper.estimator.clone(), lower.estimator.clone()));
        ok.push(point_ok);
    }
    Ok(HierarchyReport {
        pairs,
        ok,
        violations,
        slack_stderrs,
    })
}

/// Write curves as CSV rows, one row per (curve, OPL point).
pub fn write_curves_csv(path: &Path, curves: &[&SensitivityCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "opl_um",
        "sigma_um",
        "stderr_um",
        "bias_um",
        "failures",
        "estimator",
        "alpha",
        "visibility",
        "reps",
        "seed",
    ])
    .map_err(|e| Error::format("curve csv", e.to_string()))?;
    for c in curves {
        for i in 0..c.opl_um.len() {
            w.write_record([
                c.opl_um[i].to_string(),
                c.sigma_um[i].to_string(),
                c.stderr_um[i].to_string(),
                c.bias_um[i].to_string(),
                c.failures[i].to_string(),
                c.estimator.clone(),
                c.alpha.to_string(),
                c.visibility.to_string(),
                c.reps.to_string(),
                c.seed.to_string(),
            ])
            .map_err(|e| Error::format("curve csv", e.to_string()))?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format("curve csv", e.to_string()))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Read curves back from CSV, grouped by estimator tag in order of first
/// appearance.
pub fn read_curves_csv(path: &Path) -> Result<Vec<SensitivityCurve>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{}: {e}", path.display()),
        )),
        _ => Error::format("curve csv", e.to_string()),
    })?;
    let mut curves: Vec<SensitivityCurve> = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| Error::format("curve csv", e.to_string()))?;
        let field = |i: usize| -> Result<&str> {
            r.get(i)
                .ok_or_else(|| Error::format("curve csv", format!("missing column {i}")))
        };
        let parse = |i: usize| -> Result<f64> {
            field(i)?
                .parse::<f64>()
                .map_err(|e| Error::format("curve csv", format!("column {i}: {e}")))
        };
        let estimator = field(5)?.to_string();
        let alpha = parse(6)?;
        let visibility = parse(7)?;
        let reps: usize = field(8)?
            .parse()
            .map_err(|e| Error::format("curve csv", format!("reps: {e}")))?;
        let seed: u64 = field(9)?
            .parse()
            .map_err(|e| Error::format("curve csv", format!("seed: {e}")))?;
        let curve = match curves.iter_mut().find(|c| c.estimator == estimator) {
            Some(c) => c,
            None => {
                curves.push(SensitivityCurve {
                    estimator,
                    alpha,
                    visibility,
                    opl_um: Vec::new(),
                    sigma_um: Vec::new(),
                    stderr_um: Vec::new(),
                    bias_um: Vec::new(),
                    failures: Vec::new(),
                    reps,
                    seed,
                });
                curves.last_mut().expect("just pushed")
            }
        };
        curve.opl_um.push(parse(0)?);
        curve.sigma_um.push(parse(1)?);
        curve.stderr_um.push(parse(2)?);
        curve.bias_um.push(parse(3)?);
        curve.failures.push(
            field(4)?
                .parse()
                .map_err(|e| Error::format("curve csv", format!("failures: {e}")))?,
        );
    }
    if curves.is_empty() {
        return Err(Error::format("curve csv", "no data rows".to_string()));
    }
    Ok(curves)
}
