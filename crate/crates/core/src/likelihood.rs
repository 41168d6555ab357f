//! Closed-form integrated complete-data likelihood `ln p(x, z | m)`.
//!
//! With a Jeffreys Dirichlet prior on the proportions and a normal/inverse-gamma
//! prior on each (mean, variance) pair, the parameters integrate out and the
//! criterion splits into a partition term plus one term per variable. An
//! irrelevant variable contributes a single pooled marginal that does not depend
//! on the partition; a relevant one contributes the sum of per-class marginals.
//!
//! [`IncrementalState`] keeps per-class sufficient statistics and cached class
//! terms so the change caused by moving one observation costs `O(d)`.

use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::model::{ColumnPrior, Hyperparams, ModelSpec, Partition};

const LN_PI: f64 = 1.144_729_885_849_400_2;

/// Centered sums of squares below this fraction of the raw sum of squares are
/// recomputed with the two-pass formula.
const CANCELLATION_RATIO: f64 = 1e-12;

#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriterionKind {
    Micl,
    Icl,
    Bic,
    IntegratedComplete,
}

impl CriterionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CriterionKind::Micl => "MICL",
            CriterionKind::Icl => "ICL",
            CriterionKind::Bic => "BIC",
            CriterionKind::IntegratedComplete => "integrated-complete",
        }
    }
}

/// A criterion value on the natural-log scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogCriterion {
    pub kind: CriterionKind,
    pub value: f64,
}

impl LogCriterion {
    pub fn new(kind: CriterionKind, value: f64) -> Self {
        Self { kind, value }
    }
}

/// `ln p(z | g)` under a symmetric Dirichlet(1/2) prior on the proportions.
pub fn log_p_partition(counts: &[usize]) -> f64 {
    let g = counts.len() as f64;
    let n: usize = counts.iter().sum();
    let classes: f64 = counts.iter().map(|&c| ln_gamma(c as f64 + 0.5)).sum();
    ln_gamma(g / 2.0) - g * ln_gamma(0.5) + classes - ln_gamma(n as f64 + g / 2.0)
}

/// Log marginal likelihood of a group of observations sharing one (mean, variance)
/// pair. Uses the two-pass centered sum of squares. `None` when the scatter term is
/// not a positive finite number.
fn log_group_marginal(values: &[f64], prior: &ColumnPrior) -> Option<f64> {
    let m = values.len();
    if m == 0 {
        return Some(0.0);
    }
    let mf = m as f64;
    let mean = values.iter().sum::<f64>() / mf;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let dev = mean - prior.lambda;
    let s2 = prior.beta * prior.beta + ss + mf * prior.delta / (mf + prior.delta) * dev * dev;
    if !(s2.is_finite() && s2 > 0.0) {
        return None;
    }
    Some(
        -0.5 * mf * LN_PI + ln_gamma(0.5 * (mf + prior.alpha)) - ln_gamma(0.5 * prior.alpha)
            + prior.alpha * prior.beta.ln()
            - 0.5 * (prior.alpha + mf) * s2.ln()
            + 0.5 * (prior.delta.ln() - (mf + prior.delta).ln()),
    )
}

/// `ln p(x_.j | g, omega_j, z)` for one column, computed from scratch.
///
/// The irrelevant branch pools the whole column; the relevant branch sums the
/// per-class marginals, empty classes contributing zero. `class` in a returned
/// [`Error::Degenerate`] is 1-based and `column` is left at 0 for the caller.
pub fn log_p_column(
    column: &[f64],
    partition: Option<&Partition>,
    relevant: bool,
    prior: &ColumnPrior,
) -> Result<f64> {
    match partition {
        Some(z) if relevant => {
            let mut groups: Vec<Vec<f64>> = vec![Vec::new(); z.g()];
            for (&v, &k) in column.iter().zip(z.labels()) {
                groups[k].push(v);
            }
            groups.iter().enumerate().try_fold(0.0, |acc, (k, vals)| {
                log_group_marginal(vals, prior)
                    .map(|t| acc + t)
                    .ok_or(Error::Degenerate { column: 0, class: k + 1 })
            })
        }
        _ => log_group_marginal(column, prior).ok_or(Error::Degenerate { column: 0, class: 0 }),
    }
}

/// `ln p(x, z | m)`: partition term plus one term per column.
pub fn log_integrated_complete(
    x: &DataMatrix,
    z: &Partition,
    m: &ModelSpec,
    hp: &Hyperparams,
) -> Result<f64> {
    check_shapes(x, z, m)?;
    let mut total = log_p_partition(z.counts());
    for j in 0..x.d() {
        total += log_p_column(&x.column(j), Some(z), m.omega[j], &hp.column(j))
            .map_err(|e| with_column(e, j))?;
    }
    Ok(total)
}

fn with_column(e: Error, j: usize) -> Error {
    match e {
        Error::Degenerate { class, .. } => Error::Degenerate { column: j + 1, class },
        other => other,
    }
}

fn check_shapes(x: &DataMatrix, z: &Partition, m: &ModelSpec) -> Result<()> {
    if z.n() != x.n() {
        return Err(Error::LengthMismatch { expected: x.n(), actual: z.n() });
    }
    if m.d() != x.d() {
        return Err(Error::LengthMismatch { expected: x.d(), actual: m.d() });
    }
    if z.g() != m.g {
        return Err(Error::InvalidArgument(format!(
            "partition has {} classes but the model has {}",
            z.g(),
            m.g
        )));
    }
    Ok(())
}

/// Column-major copy of the data with every column shifted to zero mean.
///
/// The criterion is invariant under shifting a column together with its prior
/// centre, and centering keeps `Q - S^2/n` well conditioned.
#[derive(Debug, Clone)]
pub struct Columns {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl Columns {
    pub fn new(x: &DataMatrix) -> Self {
        let (n, d) = (x.n(), x.d());
        let mut values = vec![0.0; n * d];
        for j in 0..d {
            let mean = x.column_means()[j];
            for i in 0..n {
                values[j * n + i] = x.get(i, j) - mean;
            }
        }
        Self { n, d, values }
    }

    #[inline]
    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.values[j * self.n + i]
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        &self.values[j * self.n..(j + 1) * self.n]
    }
}

/// Per-class counts, sums and sums of squares of the centered columns, plus
/// whole-column totals.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    g: usize,
    d: usize,
    counts: Vec<usize>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    total_sum: Vec<f64>,
    total_sum_sq: Vec<f64>,
}

impl SuffStats {
    pub fn from_partition(cols: &Columns, z: &Partition) -> Self {
        let (g, d) = (z.g(), cols.d);
        let mut sum = vec![0.0; g * d];
        let mut sum_sq = vec![0.0; g * d];
        let mut total_sum = vec![0.0; d];
        let mut total_sum_sq = vec![0.0; d];
        for j in 0..d {
            for (i, &v) in cols.column(j).iter().enumerate() {
                let k = z.label(i);
                sum[k * d + j] += v;
                sum_sq[k * d + j] += v * v;
                total_sum[j] += v;
                total_sum_sq[j] += v * v;
            }
        }
        Self {
            g,
            d,
            counts: z.counts().to_vec(),
            sum,
            sum_sq,
            total_sum,
            total_sum_sq,
        }
    }

    /// Moves observation `i` to class `to`, updating both the statistics and `z`.
    pub fn apply_move(&mut self, cols: &Columns, z: &mut Partition, i: usize, to: usize) {
        let from = z.label(i);
        if from == to {
            return;
        }
        let d = self.d;
        for j in 0..d {
            let v = cols.get(j, i);
            self.sum[from * d + j] -= v;
            self.sum_sq[from * d + j] -= v * v;
            self.sum[to * d + j] += v;
            self.sum_sq[to * d + j] += v * v;
        }
        self.counts[from] -= 1;
        self.counts[to] += 1;
        if self.counts[from] == 0 {
            self.sum[from * d..(from + 1) * d].fill(0.0);
            self.sum_sq[from * d..(from + 1) * d].fill(0.0);
        }
        z.reassign(i, to);
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    #[inline]
    pub fn sum(&self, k: usize, j: usize) -> f64 {
        self.sum[k * self.d + j]
    }

    #[inline]
    pub fn sum_sq(&self, k: usize, j: usize) -> f64 {
        self.sum_sq[k * self.d + j]
    }

    pub fn total_sum(&self, j: usize) -> f64 {
        self.total_sum[j]
    }

    pub fn total_sum_sq(&self, j: usize) -> f64 {
        self.total_sum_sq[j]
    }

    /// Largest discrepancy with `other`, each entry scaled by
    /// `1 + |column total sum of squares|` of its column.
    pub fn max_scaled_diff(&self, other: &SuffStats) -> f64 {
        assert_eq!((self.g, self.d), (other.g, other.d));
        if self.counts != other.counts {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for k in 0..self.g {
            for j in 0..self.d {
                let scale = 1.0 + self.total_sum_sq[j].abs();
                let idx = k * self.d + j;
                worst = worst
                    .max((self.sum[idx] - other.sum[idx]).abs() / scale)
                    .max((self.sum_sq[idx] - other.sum_sq[idx]).abs() / scale);
            }
        }
        worst
    }
}

/// Data-dependent tables shared by every evaluation on one data set.
#[derive(Debug, Clone)]
pub struct Kernel {
    n: usize,
    d: usize,
    cols: Columns,
    /// Priors with `lambda` shifted into centered coordinates.
    priors: Vec<ColumnPrior>,
    /// Everything in a class term except the `ln s^2` part, indexed `j * (n + 1) + m`.
    group_const: Vec<f64>,
    /// `ln Gamma(m + 1/2)` for `m = 0..=n`.
    lgamma_half: Vec<f64>,
    /// Pooled (irrelevant-branch) term of each column.
    pooled: Vec<f64>,
}

impl Kernel {
    pub fn new(x: &DataMatrix, hp: &Hyperparams) -> Result<Self> {
        hp.validate(x.d())?;
        let (n, d) = (x.n(), x.d());
        let cols = Columns::new(x);
        let priors: Vec<ColumnPrior> = (0..d)
            .map(|j| {
                let mut p = hp.column(j);
                p.lambda -= x.column_means()[j];
                p
            })
            .collect();
        let mut group_const = vec![0.0; d * (n + 1)];
        for (j, p) in priors.iter().enumerate() {
            let base = -ln_gamma(0.5 * p.alpha) + p.alpha * p.beta.ln() + 0.5 * p.delta.ln();
            for m in 1..=n {
                let mf = m as f64;
                group_const[j * (n + 1) + m] = base - 0.5 * mf * LN_PI
                    + ln_gamma(0.5 * (mf + p.alpha))
                    - 0.5 * (mf + p.delta).ln();
            }
        }
        let lgamma_half = (0..=n + 1).map(|m| ln_gamma(m as f64 + 0.5)).collect();
        let pooled = (0..d)
            .map(|j| {
                log_group_marginal(cols.column(j), &priors[j])
                    .ok_or(Error::Degenerate { column: j + 1, class: 0 })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n,
            d,
            cols,
            priors,
            group_const,
            lgamma_half,
            pooled,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn columns(&self) -> &Columns {
        &self.cols
    }

    /// Irrelevant-branch term of column `j`.
    pub fn pooled_term(&self, j: usize) -> f64 {
        self.pooled[j]
    }

    /// `ln p(z | g)` from the cached log-gamma table.
    pub fn partition_term(&self, counts: &[usize]) -> f64 {
        let g = counts.len() as f64;
        let classes: f64 = counts.iter().map(|&c| self.lgamma_half[c]).sum();
        ln_gamma(g / 2.0) - g * self.lgamma_half[0] + classes - ln_gamma(self.n as f64 + g / 2.0)
    }

    /// Class term of column `j` for a class with `m` members and centered sums `s`, `q`.
    #[inline]
    fn group_term(&self, j: usize, m: usize, s: f64, q: f64, two_pass: impl FnOnce() -> f64) -> f64 {
        if m == 0 {
            return 0.0;
        }
        let mf = m as f64;
        let mean = s / mf;
        let ss = if m == 1 {
            0.0
        } else {
            let fast = q - s * mean;
            if fast <= CANCELLATION_RATIO * q && q > 0.0 {
                two_pass()
            } else {
                fast
            }
        };
        let p = &self.priors[j];
        let dev = mean - p.lambda;
        let s2 = p.beta * p.beta + ss + mf * p.delta / (mf + p.delta) * dev * dev;
        debug_assert!(s2 > 0.0 && s2.is_finite());
        self.group_const[j * (self.n + 1) + m] - 0.5 * (p.alpha + mf) * s2.ln()
    }

    /// Builds the incremental state for a starting partition.
    pub fn state(&self, z: Partition) -> IncrementalState {
        let stats = SuffStats::from_partition(&self.cols, &z);
        let mut state = IncrementalState {
            terms: vec![0.0; z.g() * self.d],
            z,
            stats,
        };
        for k in 0..state.z.g() {
            state.refresh_class(self, k);
        }
        state
    }
}

/// Partition, its sufficient statistics and the cached per-class column terms.
#[derive(Debug, Clone)]
pub struct IncrementalState {
    z: Partition,
    stats: SuffStats,
    /// `terms[k * d + j]`: relevant-branch contribution of class `k` to column `j`.
    terms: Vec<f64>,
}

impl IncrementalState {
    pub fn partition(&self) -> &Partition {
        &self.z
    }

    pub fn into_partition(self) -> Partition {
        self.z
    }

    pub fn stats(&self) -> &SuffStats {
        &self.stats
    }

    /// Relevant-branch term of column `j`: the sum of its class terms.
    pub fn relevant_term(&self, j: usize) -> f64 {
        let d = self.stats.d;
        (0..self.z.g()).map(|k| self.terms[k * d + j]).sum()
    }

    /// `ln p(x, z | g, omega)` from the cached terms.
    pub fn value(&self, kernel: &Kernel, omega: &[bool]) -> f64 {
        let columns: f64 = omega
            .iter()
            .enumerate()
            .map(|(j, &w)| if w { self.relevant_term(j) } else { kernel.pooled_term(j) })
            .sum();
        kernel.partition_term(self.z.counts()) + columns
    }

    /// Centered sum of squares of class `k` in column `j` after optionally adding
    /// and/or removing one observation, by the two-pass formula.
    fn two_pass_ss(&self, kernel: &Kernel, j: usize, k: usize, add: Option<usize>, remove: Option<usize>) -> f64 {
        let col = kernel.cols.column(j);
        let members = || {
            col.iter()
                .enumerate()
                .filter(move |&(i, _)| (self.z.label(i) == k && Some(i) != remove) || Some(i) == add)
                .map(|(_, &v)| v)
        };
        let (count, total) = members().fold((0usize, 0.0), |(c, s), v| (c + 1, s + v));
        if count == 0 {
            return 0.0;
        }
        let mean = total / count as f64;
        members().map(|v| (v - mean).powi(2)).sum()
    }

    fn refresh_class(&mut self, kernel: &Kernel, k: usize) {
        let d = self.stats.d;
        let m = self.stats.counts[k];
        for j in 0..d {
            let t = kernel.group_term(j, m, self.stats.sum(k, j), self.stats.sum_sq(k, j), || {
                self.two_pass_ss(kernel, j, k, None, None)
            });
            self.terms[k * d + j] = t;
        }
    }

    fn partition_delta(&self, kernel: &Kernel, from: usize, to: usize) -> f64 {
        let (nf, nt) = (self.stats.counts[from], self.stats.counts[to]);
        let t = &kernel.lgamma_half;
        t[nf - 1] - t[nf] + t[nt + 1] - t[nt]
    }

    fn removal_term(&self, kernel: &Kernel, j: usize, i: usize, from: usize) -> f64 {
        let x = kernel.cols.get(j, i);
        let m = self.stats.counts[from] - 1;
        kernel.group_term(
            j,
            m,
            self.stats.sum(from, j) - x,
            self.stats.sum_sq(from, j) - x * x,
            || self.two_pass_ss(kernel, j, from, None, Some(i)),
        )
    }

    fn addition_term(&self, kernel: &Kernel, j: usize, i: usize, to: usize) -> f64 {
        let x = kernel.cols.get(j, i);
        let m = self.stats.counts[to] + 1;
        kernel.group_term(
            j,
            m,
            self.stats.sum(to, j) + x,
            self.stats.sum_sq(to, j) + x * x,
            || self.two_pass_ss(kernel, j, to, Some(i), None),
        )
    }

    /// `ln p(x, z'|m) - ln p(x, z|m)` where `z'` moves observation `i` to class `to`.
    /// Only relevant columns contribute; irrelevant ones cancel exactly.
    pub fn delta_move(&self, kernel: &Kernel, omega: &[bool], i: usize, to: usize) -> f64 {
        let from = self.z.label(i);
        if from == to {
            return 0.0;
        }
        let d = self.stats.d;
        let mut delta = self.partition_delta(kernel, from, to);
        for j in (0..d).filter(|&j| omega[j]) {
            delta += self.removal_term(kernel, j, i, from) - self.terms[from * d + j]
                + self.addition_term(kernel, j, i, to)
                - self.terms[to * d + j];
        }
        delta
    }

    /// Best class for observation `i` other than its current one, with its delta.
    /// Ties go to the smallest class index. `None` when `g == 1`.
    pub fn best_move(&self, kernel: &Kernel, relevant: &[usize], i: usize) -> Option<(usize, f64)> {
        let g = self.z.g();
        if g < 2 {
            return None;
        }
        let d = self.stats.d;
        let from = self.z.label(i);
        let removal: f64 = relevant
            .iter()
            .map(|&j| self.removal_term(kernel, j, i, from) - self.terms[from * d + j])
            .sum();
        let mut best: Option<(usize, f64)> = None;
        for to in (0..g).filter(|&k| k != from) {
            let mut delta = self.partition_delta(kernel, from, to) + removal;
            for &j in relevant {
                delta += self.addition_term(kernel, j, i, to) - self.terms[to * d + j];
            }
            if best.is_none_or(|(_, b)| delta > b) {
                best = Some((to, delta));
            }
        }
        best
    }

    /// Moves observation `i` to class `to` and refreshes the two affected classes.
    pub fn apply_move(&mut self, kernel: &Kernel, i: usize, to: usize) {
        let from = self.z.label(i);
        if from == to {
            return;
        }
        self.stats.apply_move(&kernel.cols, &mut self.z, i, to);
        self.refresh_class(kernel, from);
        self.refresh_class(kernel, to);
    }
}
