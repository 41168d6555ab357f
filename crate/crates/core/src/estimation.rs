//! EM estimation of a fixed model, the MAP rule, BIC and ICL.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::likelihood::{log_integrated_complete, CriterionKind, LogCriterion};
use crate::model::{free_param_count, Hyperparams, MixtureParams, ModelSpec, Partition};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Components whose total responsibility falls below this are treated as empty.
const EMPTY_WEIGHT: f64 = 1e-6;

/// Slack allowed when checking that the log-likelihood never decreases.
pub const MONOTONE_SLACK: f64 = 1e-10;

/// A start that fails numerically is redrawn, up to this many draws per requested start.
pub const MAX_ATTEMPTS_PER_START: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmMode {
    /// Maximum likelihood.
    #[default]
    Mle,
    /// Posterior mode under the conjugate priors.
    Map,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop when the relative change of the log-likelihood drops below this.
    pub rel_tol: f64,
    /// Variance floor as a fraction of each column's variance.
    pub var_floor: f64,
    pub n_em_starts: usize,
    pub mode: EmMode,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-8,
            var_floor: 1e-8,
            n_em_starts: 10,
            mode: EmMode::Mle,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.n_em_starts == 0 {
            return Err(Error::InvalidArgument("EM needs at least one iteration and one start".into()));
        }
        if !(self.rel_tol > 0.0 && self.var_floor > 0.0) {
            return Err(Error::InvalidArgument("EM tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: ModelSpec,
    pub params: MixtureParams,
    /// Observed-data log-likelihood at `params`.
    pub loglik: f64,
    /// `n x g` row-major posterior membership probabilities.
    pub responsibilities: Vec<f64>,
    pub map_partition: Partition,
    pub bic: LogCriterion,
    pub icl: LogCriterion,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after each iteration of the retained start.
    pub loglik_trace: Vec<f64>,
    /// Decreases of the log-likelihood (beyond rounding slack) seen over all starts.
    pub monotonicity_violations: usize,
}

/// One EM run from a given initialization.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub params: MixtureParams,
    pub responsibilities: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

impl EmRun {
    pub fn violations(&self) -> usize {
        count_decreases(&self.trace)
    }
}

pub fn count_decreases(trace: &[f64]) -> usize {
    trace.windows(2).filter(|w| w[1] < w[0] - MONOTONE_SLACK).count()
}

#[inline]
fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean) * (x - mean) / var)
}

/// Posterior membership probabilities (row-normalized by log-sum-exp) and the
/// observed-data log-likelihood.
pub fn e_step(x: &DataMatrix, m: &ModelSpec, params: &MixtureParams) -> Result<(Vec<f64>, f64)> {
    let (n, d, g) = (x.n(), x.d(), m.g);
    let relevant = m.relevant();
    let irrelevant: Vec<usize> = (0..d).filter(|&j| !m.omega[j]).collect();

    let mut comp_const = vec![0.0; g];
    let mut inv_var = vec![0.0; g * relevant.len()];
    let mut means = vec![0.0; g * relevant.len()];
    for k in 0..g {
        let mut c = params.proportions[k].ln();
        for (r, &j) in relevant.iter().enumerate() {
            let var = params.variance(k, j);
            c -= 0.5 * (LN_2PI + var.ln());
            inv_var[k * relevant.len() + r] = 1.0 / var;
            means[k * relevant.len() + r] = params.mean(k, j);
        }
        comp_const[k] = c;
    }

    let mut resp = vec![0.0; n * g];
    let mut loglik = 0.0;
    for (i, row) in x.rows().enumerate() {
        let shared: f64 = irrelevant
            .iter()
            .map(|&j| log_normal(row[j], params.mean(0, j), params.variance(0, j)))
            .sum();
        let out = &mut resp[i * g..(i + 1) * g];
        let mut max = f64::NEG_INFINITY;
        for k in 0..g {
            let base = k * relevant.len();
            let mut q = 0.0;
            for (r, &j) in relevant.iter().enumerate() {
                let diff = row[j] - means[base + r];
                q += diff * diff * inv_var[base + r];
            }
            out[k] = comp_const[k] - 0.5 * q;
            max = max.max(out[k]);
        }
        if !max.is_finite() {
            return Err(Error::ZeroDensity { row: i + 1 });
        }
        let mut total = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in out.iter_mut() {
            *v /= total;
        }
        loglik += max + total.ln() + shared;
    }
    Ok((resp, loglik))
}

/// Per-column variance floors: `var_floor` times the column variance, with a
/// tiny absolute minimum for constant columns.
pub fn variance_floors(x: &DataMatrix, config: &EmConfig) -> Vec<f64> {
    (0..x.d())
        .map(|j| (config.var_floor * x.column_variance(j)).max(f64::MIN_POSITIVE.sqrt()))
        .collect()
}

/// Parameter update from responsibilities. MLE mode maximizes the expected
/// complete-data log-likelihood; MAP mode returns the posterior mode under the
/// Dirichlet(1/2) and normal/inverse-gamma priors.
pub fn m_step(
    x: &DataMatrix,
    m: &ModelSpec,
    resp: &[f64],
    config: &EmConfig,
    hp: &Hyperparams,
    floors: &[f64],
) -> Result<MixtureParams> {
    let (n, d, g) = (x.n(), x.d(), m.g);
    let mut weight = vec![0.0; g];
    let mut wsum = vec![0.0; g * d];
    for (i, row) in x.rows().enumerate() {
        for k in 0..g {
            let t = resp[i * g + k];
            weight[k] += t;
            for j in 0..d {
                if m.omega[j] {
                    wsum[k * d + j] += t * row[j];
                }
            }
        }
    }
    if let Some(k) = weight.iter().position(|&w| w < EMPTY_WEIGHT) {
        return Err(Error::EmptyComponent { component: k + 1 });
    }
    let map = config.mode == EmMode::Map;

    let proportions: Vec<f64> = if map {
        let denom = n as f64 - 0.5 * g as f64;
        weight
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                if w <= 0.5 {
                    Err(Error::EmptyComponent { component: k + 1 })
                } else {
                    Ok((w - 0.5) / denom)
                }
            })
            .collect::<Result<_>>()?
    } else {
        weight.iter().map(|w| w / n as f64).collect()
    };

    let mut means = vec![0.0; g * d];
    let mut variances = vec![0.0; g * d];
    let mut scatter = vec![0.0; g * d];
    for k in 0..g {
        for j in 0..d {
            if m.omega[j] {
                means[k * d + j] = wsum[k * d + j] / weight[k];
            }
        }
    }
    for (i, row) in x.rows().enumerate() {
        for k in 0..g {
            let t = resp[i * g + k];
            for j in 0..d {
                if m.omega[j] {
                    let diff = row[j] - means[k * d + j];
                    scatter[k * d + j] += t * diff * diff;
                }
            }
        }
    }

    for j in 0..d {
        let prior = hp.column(j);
        if m.omega[j] {
            for k in 0..g {
                let idx = k * d + j;
                let (mean, var) = if map {
                    posterior_mode(weight[k], means[idx], scatter[idx], &prior)
                } else {
                    (means[idx], scatter[idx] / weight[k])
                };
                means[idx] = mean;
                variances[idx] = var.max(floors[j]);
            }
        } else {
            let mean = x.column_means()[j];
            let ss: f64 = x.rows().map(|r| (r[j] - mean).powi(2)).sum();
            let (mean, var) = if map {
                posterior_mode(n as f64, mean, ss, &prior)
            } else {
                (mean, ss / n as f64)
            };
            let var = var.max(floors[j]);
            for k in 0..g {
                means[k * d + j] = mean;
                variances[k * d + j] = var;
            }
        }
    }
    Ok(MixtureParams {
        proportions,
        means,
        variances,
    })
}

/// Joint mode of (mean, variance) given weight `w`, weighted mean and weighted
/// centered scatter.
fn posterior_mode(w: f64, mean: f64, scatter: f64, prior: &crate::model::ColumnPrior) -> (f64, f64) {
    let post_mean = (prior.delta * prior.lambda + w * mean) / (prior.delta + w);
    let shrink = w * prior.delta / (w + prior.delta) * (mean - prior.lambda).powi(2);
    let var = (prior.beta * prior.beta + scatter + shrink) / (prior.alpha + w + 3.0);
    (post_mean, var)
}

/// MAP rule: each observation goes to its most probable component, ties to the smallest index.
pub fn map_partition(resp: &[f64], g: usize) -> Partition {
    let labels = resp
        .chunks_exact(g)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &t)| if t > best.1 { (k, t) } else { best })
                .0
        })
        .collect();
    Partition::from_labels(labels, g).expect("argmax is a valid class")
}

/// Random one-hot responsibilities.
pub fn random_responsibilities<R: Rng + ?Sized>(n: usize, g: usize, rng: &mut R) -> Vec<f64> {
    let mut resp = vec![0.0; n * g];
    for i in 0..n {
        resp[i * g + rng.random_range(0..g)] = 1.0;
    }
    resp
}

/// One-hot responsibilities assigning each row to the nearest of `g` rows drawn by
/// squared-distance weighted seeding. Distances are variance-scaled and use the
/// relevant columns of `m`, or all columns when none is relevant.
pub fn seeded_responsibilities<R: Rng + ?Sized>(x: &DataMatrix, m: &ModelSpec, rng: &mut R) -> Vec<f64> {
    let (n, g) = (x.n(), m.g);
    let mut cols = m.relevant();
    if cols.is_empty() {
        cols = (0..x.d()).collect();
    }
    let scale: Vec<f64> = cols
        .iter()
        .map(|&j| {
            let v = x.column_variance(j);
            if v > 0.0 { 1.0 / v } else { 0.0 }
        })
        .collect();
    let dist = |a: usize, b: usize| -> f64 {
        let (ra, rb) = (x.row(a), x.row(b));
        cols.iter().zip(&scale).map(|(&j, w)| w * (ra[j] - rb[j]).powi(2)).sum()
    };
    let mut nearest = vec![f64::INFINITY; n];
    let mut owner = vec![0usize; n];
    let mut center = rng.random_range(0..n);
    for k in 0..g {
        for i in 0..n {
            let d = dist(i, center);
            if d < nearest[i] {
                nearest[i] = d;
                owner[i] = k;
            }
        }
        if k + 1 == g {
            break;
        }
        let total: f64 = nearest.iter().sum();
        center = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            nearest
                .iter()
                .position(|&d| {
                    u -= d;
                    u < 0.0
                })
                .unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).expect("positive total"))
        } else {
            rng.random_range(0..n)
        };
    }
    let mut resp = vec![0.0; n * g];
    for i in 0..n {
        resp[i * g + owner[i]] = 1.0;
    }
    resp
}

/// Runs EM from initial responsibilities for at most `max_iters` iterations.
pub fn run_em(
    x: &DataMatrix,
    m: &ModelSpec,
    hp: &Hyperparams,
    config: &EmConfig,
    floors: &[f64],
    init: Vec<f64>,
    max_iters: usize,
) -> Result<EmRun> {
    let mut resp = init;
    let mut trace = Vec::new();
    let mut params;
    let mut loglik;
    let mut converged = false;
    let mut iterations = 0;
    loop {
        params = m_step(x, m, &resp, config, hp, floors)?;
        let (r, l) = e_step(x, m, &params)?;
        resp = r;
        loglik = l;
        iterations += 1;
        if m.g == 1 {
            converged = true;
        } else if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            converged = (loglik - prev).abs() <= config.rel_tol * prev.abs();
        }
        trace.push(loglik);
        if converged || iterations >= max_iters {
            break;
        }
    }
    Ok(EmRun {
        params,
        responsibilities: resp,
        loglik,
        iterations,
        converged,
        trace,
    })
}

/// `ln p(x | theta) - (nu / 2) ln n`.
pub fn bic(loglik: f64, m: &ModelSpec, n: usize) -> f64 {
    loglik - 0.5 * free_param_count(m, m.d()) as f64 * (n as f64).ln()
}

/// Fits model `m` by EM from `n_em_starts` random one-hot initializations and
/// keeps the start with the highest log-likelihood.
pub fn fit_em<R: Rng + ?Sized>(
    x: &DataMatrix,
    m: &ModelSpec,
    hp: &Hyperparams,
    config: &EmConfig,
    rng: &mut R,
) -> Result<FitResult> {
    config.validate()?;
    if m.d() != x.d() {
        return Err(Error::LengthMismatch { expected: x.d(), actual: m.d() });
    }
    let floors = variance_floors(x, config);
    let starts = if m.g == 1 { 1 } else { config.n_em_starts };
    let mut best: Option<EmRun> = None;
    let mut violations = 0;
    let mut completed = 0;
    let mut attempts = 0;
    while completed < starts && attempts < starts * MAX_ATTEMPTS_PER_START {
        attempts += 1;
        let init = random_responsibilities(x.n(), m.g, rng);
        let run = match run_em(x, m, hp, config, &floors, init, config.max_iters) {
            Ok(run) => run,
            Err(e) if e.is_numerical() => continue,
            Err(e) => return Err(e),
        };
        completed += 1;
        if config.mode == EmMode::Mle {
            violations += run.violations();
        }
        if best.as_ref().is_none_or(|b| run.loglik > b.loglik) {
            best = Some(run);
        }
    }
    let run = best.ok_or(Error::FitFailed { starts: attempts })?;
    let map_partition = map_partition(&run.responsibilities, m.g);
    let icl = log_integrated_complete(x, &map_partition, m, hp)?;
    Ok(FitResult {
        model: m.clone(),
        bic: LogCriterion::new(CriterionKind::Bic, bic(run.loglik, m, x.n())),
        icl: LogCriterion::new(CriterionKind::Icl, icl),
        params: run.params,
        loglik: run.loglik,
        responsibilities: run.responsibilities,
        map_partition,
        iterations: run.iterations,
        converged: run.converged,
        loglik_trace: run.trace,
        monotonicity_violations: violations,
    })
}
