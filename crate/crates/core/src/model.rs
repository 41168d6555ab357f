//! Models, partitions, priors and mixture parameters.

use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};

/// A candidate model: number of components and the relevance indicator of each variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelSpec {
    pub g: usize,
    pub omega: Vec<bool>,
}

impl ModelSpec {
    pub fn new(g: usize, omega: Vec<bool>) -> Result<Self> {
        if g == 0 {
            return Err(Error::InvalidArgument("component count must be at least 1".into()));
        }
        if omega.is_empty() {
            return Err(Error::InvalidArgument("relevance vector is empty".into()));
        }
        Ok(Self { g, omega })
    }

    pub fn all_irrelevant(g: usize, d: usize) -> Self {
        Self { g, omega: vec![false; d] }
    }

    pub fn d(&self) -> usize {
        self.omega.len()
    }

    /// Indices of the relevant variables.
    pub fn relevant(&self) -> Vec<usize> {
        self.omega
            .iter()
            .enumerate()
            .filter_map(|(j, &w)| w.then_some(j))
            .collect()
    }

    pub fn n_relevant(&self) -> usize {
        self.omega.iter().filter(|&&w| w).count()
    }

    /// Parses a bitstring such as `"1100"`.
    pub fn parse_omega(bits: &str, d: usize) -> Result<Vec<bool>> {
        let omega = bits
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::InvalidArgument(format!(
                    "relevance bitstring '{bits}' contains '{other}'"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        if omega.len() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                actual: omega.len(),
            });
        }
        Ok(omega)
    }

    pub fn omega_string(&self) -> String {
        self.omega.iter().map(|&w| if w { '1' } else { '0' }).collect()
    }
}

/// Number of free parameters: `g-1` proportions, `2g` per relevant variable and
/// 2 per irrelevant one.
pub fn free_param_count(model: &ModelSpec, d: usize) -> usize {
    let r = model.n_relevant();
    (model.g - 1) + 2 * model.g * r + 2 * (d - r)
}

/// Hard assignment of observations to classes `0..g`. Empty classes are allowed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<usize>,
    counts: Vec<usize>,
}

impl Partition {
    pub fn from_labels(labels: Vec<usize>, g: usize) -> Result<Self> {
        if g == 0 {
            return Err(Error::InvalidArgument("partition needs at least one class".into()));
        }
        let mut counts = vec![0; g];
        for (i, &k) in labels.iter().enumerate() {
            if k >= g {
                return Err(Error::InvalidArgument(format!(
                    "observation {} has class {} but only {g} classes exist",
                    i + 1,
                    k + 1
                )));
            }
            counts[k] += 1;
        }
        Ok(Self { labels, counts })
    }

    pub fn single_class(n: usize, g: usize) -> Self {
        let mut counts = vec![0; g];
        counts[0] = n;
        Self { labels: vec![0; n], counts }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn g(&self) -> usize {
        self.counts.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Moves observation `i` to class `to`.
    pub fn reassign(&mut self, i: usize, to: usize) {
        let from = self.labels[i];
        self.counts[from] -= 1;
        self.counts[to] += 1;
        self.labels[i] = to;
    }

    /// Relabels classes in order of first appearance; empty classes go last.
    pub fn canonical(&self) -> Self {
        let g = self.g();
        let mut map = vec![usize::MAX; g];
        let mut next = 0;
        for &k in &self.labels {
            if map[k] == usize::MAX {
                map[k] = next;
                next += 1;
            }
        }
        for slot in map.iter_mut().filter(|m| **m == usize::MAX) {
            *slot = next;
            next += 1;
        }
        let labels = self.labels.iter().map(|&k| map[k]).collect();
        Self::from_labels(labels, g).expect("relabeling keeps labels in range")
    }

    /// Labels as 1-based class numbers.
    pub fn one_based(&self) -> Vec<usize> {
        self.labels.iter().map(|k| k + 1).collect()
    }
}

/// Hyperparameters of one variable's conjugate prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnPrior {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub delta: f64,
}

/// Per-variable prior hyperparameters: variances are inverse-gamma with shape
/// `alpha/2` and scale `beta^2/2`, means are normal around `lambda` with
/// variance `sigma^2/delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub delta: Vec<f64>,
}

impl Hyperparams {
    pub const DEFAULT_ALPHA: f64 = 1.0;
    pub const DEFAULT_BETA: f64 = 1.0;
    pub const DEFAULT_DELTA: f64 = 0.01;

    /// `alpha = beta = 1`, `delta = 0.01` and `lambda` set to the column means.
    pub fn default_for(data: &DataMatrix) -> Self {
        Self::with_scalars(data, Self::DEFAULT_ALPHA, Self::DEFAULT_BETA, Self::DEFAULT_DELTA)
            .expect("default hyperparameters are valid")
    }

    pub fn with_scalars(data: &DataMatrix, alpha: f64, beta: f64, delta: f64) -> Result<Self> {
        let d = data.d();
        let hp = Self {
            alpha: vec![alpha; d],
            beta: vec![beta; d],
            lambda: data.column_means().to_vec(),
            delta: vec![delta; d],
        };
        hp.validate(d)?;
        Ok(hp)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        for len in [self.alpha.len(), self.beta.len(), self.lambda.len(), self.delta.len()] {
            if len != d {
                return Err(Error::LengthMismatch { expected: d, actual: len });
            }
        }
        let positive = |v: &[f64], name: &str| -> Result<()> {
            match v.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
                Some(j) => Err(Error::InvalidArgument(format!(
                    "{name} for variable {} must be positive and finite",
                    j + 1
                ))),
                None => Ok(()),
            }
        };
        positive(&self.alpha, "alpha")?;
        positive(&self.beta, "beta")?;
        positive(&self.delta, "delta")?;
        if self.lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidArgument("lambda must be finite".into()));
        }
        Ok(())
    }

    pub fn column(&self, j: usize) -> ColumnPrior {
        ColumnPrior {
            alpha: self.alpha[j],
            beta: self.beta[j],
            lambda: self.lambda[j],
            delta: self.delta[j],
        }
    }
}

/// Fitted parameters of a diagonal Gaussian mixture. `means` and `variances`
/// are `g x d`, row-major by component. Irrelevant variables hold the same
/// value in every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub proportions: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl MixtureParams {
    pub fn g(&self) -> usize {
        self.proportions.len()
    }

    pub fn d(&self) -> usize {
        self.means.len() / self.proportions.len().max(1)
    }

    #[inline]
    pub fn mean(&self, k: usize, j: usize) -> f64 {
        self.means[k * self.d() + j]
    }

    #[inline]
    pub fn variance(&self, k: usize, j: usize) -> f64 {
        self.variances[k * self.d() + j]
    }

    /// Reorders components: component `k` of the result is component `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.d();
        let mut out = self.clone();
        for (k, &src) in perm.iter().enumerate() {
            out.proportions[k] = self.proportions[src];
            out.means[k * d..(k + 1) * d].copy_from_slice(&self.means[src * d..(src + 1) * d]);
            out.variances[k * d..(k + 1) * d]
                .copy_from_slice(&self.variances[src * d..(src + 1) * d]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(g: usize, bits: &str) -> ModelSpec {
        ModelSpec::new(g, ModelSpec::parse_omega(bits, bits.len()).unwrap()).unwrap()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(free_param_count(&spec(2, "1100"), 4), 13);
        assert_eq!(free_param_count(&spec(1, "1010"), 4), 8);
        assert_eq!(free_param_count(&spec(1, "0000"), 4), 8);
        assert_eq!(free_param_count(&spec(3, "11111"), 5), 32);
    }

    #[test]
    fn omega_parsing_rejects_bad_input() {
        assert!(ModelSpec::parse_omega("10x0", 4).is_err());
        assert!(matches!(
            ModelSpec::parse_omega("101", 4),
            Err(Error::LengthMismatch { .. })
        ));
        assert_eq!(spec(2, "0110").relevant(), vec![1, 2]);
    }

    #[test]
    fn default_hyperparameters_follow_data() {
        let data = DataMatrix::from_rows(&[vec![1.0, 10.0], vec![3.0, 20.0]]).unwrap();
        let hp = Hyperparams::default_for(&data);
        assert_eq!(hp.lambda, vec![2.0, 15.0]);
        assert_eq!(hp.alpha, vec![1.0, 1.0]);
        assert_eq!(hp.delta, vec![0.01, 0.01]);
        assert!(Hyperparams::with_scalars(&data, 1.0, 0.0, 0.01).is_err());
    }

    #[test]
    fn canonical_relabeling() {
        let z = Partition::from_labels(vec![2, 2, 0, 2], 4).unwrap();
        let c = z.canonical();
        assert_eq!(c.labels(), &[0, 0, 1, 0]);
        assert_eq!(c.counts(), &[3, 1, 0, 0]);
        assert!(Partition::from_labels(vec![0, 3], 3).is_err());
    }

    proptest! {
        #[test]
        fn counts_sum_to_n(labels in prop::collection::vec(0usize..5, 1..60)) {
            let z = Partition::from_labels(labels.clone(), 5).unwrap();
            prop_assert_eq!(z.counts().iter().sum::<usize>(), labels.len());
            for k in 0..5 {
                prop_assert_eq!(z.counts()[k], labels.iter().filter(|&&l| l == k).count());
            }
        }

        #[test]
        fn param_count_depends_only_on_relevant_count(
            g in 2usize..6,
            omega in prop::collection::vec(any::<bool>(), 1..10),
            shuffle_seed in any::<u64>(),
        ) {
            let d = omega.len();
            let m = ModelSpec::new(g, omega.clone()).unwrap();
            let mut rotated = omega.clone();
            rotated.rotate_left((shuffle_seed as usize) % d);
            let m2 = ModelSpec::new(g, rotated).unwrap();
            prop_assert_eq!(free_param_count(&m, d), free_param_count(&m2, d));
            if let Some(j) = omega.iter().position(|w| !w) {
                let mut more = omega.clone();
                more[j] = true;
                let m3 = ModelSpec::new(g, more).unwrap();
                prop_assert!(free_param_count(&m3, d) >= free_param_count(&m, d));
            }
        }
    }
}
