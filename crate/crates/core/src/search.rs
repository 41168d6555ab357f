//! Maximization of the integrated complete-data likelihood over partitions and
//! relevance indicators, and selection of the component count.
//!
//! For a fixed `g` each start alternates two exact coordinate ascents:
//! a partition step that reassigns single observations to their best class,
//! and a model step that sets every relevance bit to its better branch. Both
//! steps never decrease the criterion, so every start climbs to a fixed point.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::estimation::{count_decreases, run_em, seeded_responsibilities, variance_floors, EmConfig};
use crate::likelihood::{log_integrated_complete, log_p_column, CriterionKind, IncrementalState, Kernel, LogCriterion};
use crate::model::{Hyperparams, ModelSpec, Partition};
use crate::rng::stream;

/// Minimum gain for a reassignment or a relevance flip to be taken.
pub const MOVE_EPS: f64 = 1e-10;

/// Starts whose criterion is within this distance of the best count as hits.
pub const HIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub g_max: usize,
    /// Restrict the search to this single component count.
    pub fixed_g: Option<usize>,
    pub n_starts: usize,
    pub seed: u64,
    /// Cap on partition sweeps between two model steps.
    pub max_sweeps: usize,
    /// EM iterations used to build each starting partition.
    pub init_em_iters: usize,
    /// Cap on partition/model alternations per start.
    pub max_rounds: usize,
    /// Keep the per-start criterion traces in the result.
    pub record_trace: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            g_max: 6,
            fixed_g: None,
            n_starts: 50,
            seed: 0,
            max_sweeps: 200,
            init_em_iters: 20,
            max_rounds: 1000,
            record_trace: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{what} must be at least 1")));
        if self.g_max == 0 {
            return bad("g_max");
        }
        if self.fixed_g == Some(0) {
            return bad("g");
        }
        if self.n_starts == 0 {
            return bad("number of starts");
        }
        if self.max_sweeps == 0 || self.max_rounds == 0 || self.init_em_iters == 0 {
            return bad("iteration caps");
        }
        Ok(())
    }

    pub fn component_counts(&self) -> Vec<usize> {
        match self.fixed_g {
            Some(g) => vec![g],
            None => (1..=self.g_max).collect(),
        }
    }
}

/// Outcome of one start.
#[derive(Debug, Clone, PartialEq)]
pub struct StartOutcome {
    pub start: usize,
    pub partition: Partition,
    pub omega: Vec<bool>,
    pub value: f64,
    /// Criterion after initialization, after every improving sweep and after every model step.
    pub trace: Vec<f64>,
    pub sweeps: usize,
    pub rounds: usize,
    /// The EM initialization failed and a uniform random partition was used instead.
    pub init_fallback: bool,
    pub em_violations: usize,
}

/// Best result for one component count.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub model: ModelSpec,
    pub partition: Partition,
    /// Criterion of the best start, recomputed from scratch.
    pub micl: f64,
    pub hits: usize,
    pub n_starts: usize,
    pub trace_violations: usize,
    pub em_violations: usize,
    pub starts: Vec<StartOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerG {
    pub g: usize,
    pub micl: f64,
    pub omega: Vec<bool>,
    pub hits: usize,
    pub n_starts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartTrace {
    pub g: usize,
    pub start: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_model: ModelSpec,
    pub best_partition: Partition,
    pub micl: LogCriterion,
    pub per_g: Vec<PerG>,
    pub trace: Option<Vec<StartTrace>>,
    /// Decreases found in any within-start criterion trace.
    pub monotonicity_violations: usize,
    /// Decreases found in any initialization EM log-likelihood trace.
    pub em_violations: usize,
}

/// One sweep over all observations in a fresh random order. Each observation
/// moves to the class with the largest gain if that gain is positive.
/// Returns whether anything moved.
pub fn partition_step<R: Rng + ?Sized>(
    kernel: &Kernel,
    state: &mut IncrementalState,
    omega: &[bool],
    rng: &mut R,
) -> bool {
    if state.partition().g() < 2 {
        return false;
    }
    let relevant: Vec<usize> = (0..omega.len()).filter(|&j| omega[j]).collect();
    let mut order: Vec<usize> = (0..kernel.n()).collect();
    order.shuffle(rng);
    let mut moved = false;
    for i in order {
        if let Some((to, delta)) = state.best_move(kernel, &relevant, i) {
            if delta > MOVE_EPS {
                state.apply_move(kernel, i, to);
                moved = true;
            }
        }
    }
    moved
}

/// Relevance indicators maximizing the criterion for the state's partition.
/// A variable is relevant only if that branch wins by more than [`MOVE_EPS`].
pub fn model_step_cached(kernel: &Kernel, state: &IncrementalState) -> Vec<bool> {
    if state.partition().g() == 1 {
        return vec![false; kernel.d()];
    }
    (0..kernel.d())
        .map(|j| state.relevant_term(j) > kernel.pooled_term(j) + MOVE_EPS)
        .collect()
}

/// Exact coordinate-wise argmax of the relevance vector for partition `z`,
/// evaluated from scratch. Ties keep the variable irrelevant.
pub fn model_step(x: &DataMatrix, z: &Partition, hp: &Hyperparams) -> Result<ModelSpec> {
    let omega = (0..x.d())
        .map(|j| {
            let col = x.column(j);
            let prior = hp.column(j);
            let pooled = log_p_column(&col, None, false, &prior)?;
            let split = log_p_column(&col, Some(z), true, &prior)?;
            Ok(split > pooled)
        })
        .collect::<Result<Vec<_>>>()?;
    ModelSpec::new(z.g(), omega)
}

fn initial_partition<R: Rng + ?Sized>(
    x: &DataMatrix,
    hp: &Hyperparams,
    g: usize,
    omega: &[bool],
    config: &SearchConfig,
    rng: &mut R,
) -> (Partition, bool, usize) {
    let n = x.n();
    if g == 1 {
        return (Partition::single_class(n, 1), false, 0);
    }
    let m = ModelSpec { g, omega: omega.to_vec() };
    let em = EmConfig::default();
    let floors = variance_floors(x, &em);
    let init = seeded_responsibilities(x, &m, rng);
    match run_em(x, &m, hp, &em, &floors, init, config.init_em_iters) {
        Ok(run) => {
            let z = crate::estimation::map_partition(&run.responsibilities, g);
            (z, false, run.violations())
        }
        Err(_) => {
            let labels = (0..n).map(|_| rng.random_range(0..g)).collect();
            (Partition::from_labels(labels, g).expect("labels below g"), true, 0)
        }
    }
}

/// Runs one start for `g` components. With `fixed_omega` only the partition is optimized.
pub fn run_single_start(
    kernel: &Kernel,
    x: &DataMatrix,
    hp: &Hyperparams,
    g: usize,
    config: &SearchConfig,
    start: usize,
    fixed_omega: Option<&[bool]>,
) -> StartOutcome {
    let mut rng = stream(config.seed, &[g as u64, start as u64]);
    let mut omega: Vec<bool> = match fixed_omega {
        Some(w) => w.to_vec(),
        None => (0..x.d()).map(|_| rng.random::<bool>()).collect(),
    };
    let (z0, init_fallback, em_violations) = initial_partition(x, hp, g, &omega, config, &mut rng);
    let mut state = kernel.state(z0);
    let mut trace = vec![state.value(kernel, &omega)];
    let mut sweeps = 0;
    let mut rounds = 0;
    while rounds < config.max_rounds {
        rounds += 1;
        let mut settled = false;
        for _ in 0..config.max_sweeps {
            sweeps += 1;
            if !partition_step(kernel, &mut state, &omega, &mut rng) {
                settled = true;
                break;
            }
            trace.push(state.value(kernel, &omega));
        }
        if fixed_omega.is_some() {
            if settled {
                break;
            }
            continue;
        }
        let next = model_step_cached(kernel, &state);
        if next == omega {
            if settled {
                break;
            }
        } else {
            omega = next;
            trace.push(state.value(kernel, &omega));
        }
    }
    let value = state.value(kernel, &omega);
    StartOutcome {
        start,
        partition: state.into_partition().canonical(),
        omega,
        value,
        trace,
        sweeps,
        rounds,
        init_fallback,
        em_violations,
    }
}

fn better(a: &StartOutcome, b: &StartOutcome) -> bool {
    match a.value.total_cmp(&b.value) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => (&a.omega, a.partition.labels()) < (&b.omega, b.partition.labels()),
    }
}

fn reduce_starts(
    x: &DataMatrix,
    hp: &Hyperparams,
    g: usize,
    starts: Vec<StartOutcome>,
) -> Result<GroupResult> {
    let best = starts
        .iter()
        .fold(None::<&StartOutcome>, |acc, s| match acc {
            Some(b) if !better(s, b) => Some(b),
            _ => Some(s),
        })
        .expect("at least one start");
    let hits = starts.iter().filter(|s| (s.value - best.value).abs() <= HIT_TOLERANCE).count();
    let model = ModelSpec::new(g, best.omega.clone())?;
    let micl = log_integrated_complete(x, &best.partition, &model, hp)?;
    Ok(GroupResult {
        partition: best.partition.clone(),
        model,
        micl,
        hits,
        n_starts: starts.len(),
        trace_violations: starts.iter().map(|s| count_decreases(&s.trace)).sum(),
        em_violations: starts.iter().map(|s| s.em_violations).sum(),
        starts,
    })
}

fn run_starts(
    kernel: &Kernel,
    x: &DataMatrix,
    hp: &Hyperparams,
    g: usize,
    config: &SearchConfig,
    fixed_omega: Option<&[bool]>,
) -> Vec<StartOutcome> {
    (0..config.n_starts)
        .into_par_iter()
        .map(|s| run_single_start(kernel, x, hp, g, config, s, fixed_omega))
        .collect()
}

/// Best (partition, relevance) pair for `g` components over `n_starts` starts.
pub fn search_g(x: &DataMatrix, g: usize, hp: &Hyperparams, config: &SearchConfig) -> Result<GroupResult> {
    config.validate()?;
    let kernel = Kernel::new(x, hp)?;
    search_g_with(&kernel, x, g, hp, config)
}

pub fn search_g_with(
    kernel: &Kernel,
    x: &DataMatrix,
    g: usize,
    hp: &Hyperparams,
    config: &SearchConfig,
) -> Result<GroupResult> {
    if g == 0 {
        return Err(Error::InvalidArgument("g must be at least 1".into()));
    }
    let starts = run_starts(kernel, x, hp, g, config, None);
    reduce_starts(x, hp, g, starts)
}

/// Maximizes over partitions only, for a fully specified model.
pub fn search_partition(
    kernel: &Kernel,
    x: &DataMatrix,
    m: &ModelSpec,
    hp: &Hyperparams,
    config: &SearchConfig,
) -> Result<GroupResult> {
    if m.d() != x.d() {
        return Err(Error::LengthMismatch { expected: x.d(), actual: m.d() });
    }
    let starts = run_starts(kernel, x, hp, m.g, config, Some(&m.omega));
    reduce_starts(x, hp, m.g, starts)
}

/// Searches every component count in the configured range and keeps the best.
/// Ties between component counts go to the smaller one.
pub fn select_model(x: &DataMatrix, hp: &Hyperparams, config: &SearchConfig) -> Result<SearchResult> {
    config.validate()?;
    let kernel = Kernel::new(x, hp)?;
    let mut groups = Vec::new();
    for g in config.component_counts() {
        groups.push(search_g_with(&kernel, x, g, hp, config)?);
    }
    let best = groups
        .iter()
        .fold(None::<&GroupResult>, |acc, r| match acc {
            Some(b) if r.micl <= b.micl => Some(b),
            _ => Some(r),
        })
        .expect("at least one component count");
    let trace = config.record_trace.then(|| {
        groups
            .iter()
            .flat_map(|r| {
                r.starts.iter().map(move |s| StartTrace {
                    g: r.model.g,
                    start: s.start,
                    values: s.trace.clone(),
                })
            })
            .collect()
    });
    Ok(SearchResult {
        best_model: best.model.clone(),
        best_partition: best.partition.clone(),
        micl: LogCriterion::new(CriterionKind::Micl, best.micl),
        per_g: groups
            .iter()
            .map(|r| PerG {
                g: r.model.g,
                micl: r.micl,
                omega: r.model.omega.clone(),
                hits: r.hits,
                n_starts: r.n_starts,
            })
            .collect(),
        trace,
        monotonicity_violations: groups.iter().map(|r| r.trace_violations).sum(),
        em_violations: groups.iter().map(|r| r.em_violations).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(n: usize, d: usize, sep: f64, seed: u64) -> DataMatrix {
        let mut rng = stream(seed, &[]);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        if j == 0 { noise + if i % 2 == 0 { sep } else { -sep } } else { noise }
                    })
                    .collect()
            })
            .collect();
        DataMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_component_is_trivial() {
        let x = blobs(30, 3, 3.0, 1);
        let hp = Hyperparams::default_for(&x);
        let kernel = Kernel::new(&x, &hp).unwrap();
        let config = SearchConfig::default();
        let mut state = kernel.state(Partition::single_class(30, 1));
        assert!(!partition_step(&kernel, &mut state, &[true, true, true], &mut stream(0, &[])));
        let out = run_single_start(&kernel, &x, &hp, 1, &config, 0, None);
        assert_eq!(out.omega, vec![false; 3]);
        assert!(out.rounds <= 2);
        assert!(out.partition.labels().iter().all(|&k| k == 0));
        assert_eq!(model_step(&x, &Partition::single_class(30, 1), &hp).unwrap().omega, vec![false; 3]);
    }

    #[test]
    fn constant_column_stays_irrelevant() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![if i < 10 { -5.0 } else { 5.0 }, 2.5]).collect();
        let x = DataMatrix::from_rows(&rows).unwrap();
        let hp = Hyperparams::default_for(&x);
        let z = Partition::from_labels((0..20).map(|i| usize::from(i >= 10)).collect(), 2).unwrap();
        assert_eq!(model_step(&x, &z, &hp).unwrap().omega, vec![true, false]);
    }

    #[test]
    fn sweeps_never_decrease_the_criterion() {
        for seed in 0..10 {
            let x = blobs(40, 4, 1.0, seed);
            let hp = Hyperparams::default_for(&x);
            let kernel = Kernel::new(&x, &hp).unwrap();
            let mut rng = stream(seed, &[7]);
            let labels = (0..40).map(|_| rng.random_range(0..3)).collect();
            let mut state = kernel.state(Partition::from_labels(labels, 3).unwrap());
            let omega = vec![true, false, true, true];
            let m = ModelSpec::new(3, omega.clone()).unwrap();
            let mut prev = log_integrated_complete(&x, state.partition(), &m, &hp).unwrap();
            for _ in 0..5 {
                partition_step(&kernel, &mut state, &omega, &mut rng);
                let now = log_integrated_complete(&x, state.partition(), &m, &hp).unwrap();
                assert!(now >= prev - 1e-10);
                prev = now;
            }
        }
    }

    #[test]
    fn fixed_point_has_no_improving_neighbour() {
        let x = blobs(40, 3, 1.5, 3);
        let hp = Hyperparams::default_for(&x);
        let kernel = Kernel::new(&x, &hp).unwrap();
        let out = run_single_start(&kernel, &x, &hp, 3, &SearchConfig::default(), 0, None);
        let m = ModelSpec::new(3, out.omega.clone()).unwrap();
        let base = log_integrated_complete(&x, &out.partition, &m, &hp).unwrap();
        assert!((base - out.value).abs() < 1e-8);
        for i in 0..40 {
            for k in 0..3 {
                let mut z = out.partition.clone();
                z.reassign(i, k);
                assert!(log_integrated_complete(&x, &z, &m, &hp).unwrap() <= base + 1e-9);
            }
        }
        for j in 0..3 {
            let mut flipped = m.clone();
            flipped.omega[j] = !flipped.omega[j];
            assert!(log_integrated_complete(&x, &out.partition, &flipped, &hp).unwrap() <= base + 1e-9);
        }
        assert_eq!(count_decreases(&out.trace), 0);
    }

    #[test]
    fn one_start_search_equals_single_start() {
        let x = blobs(30, 2, 2.0, 5);
        let hp = Hyperparams::default_for(&x);
        let config = SearchConfig { n_starts: 1, seed: 9, ..SearchConfig::default() };
        let kernel = Kernel::new(&x, &hp).unwrap();
        let single = run_single_start(&kernel, &x, &hp, 2, &config, 0, None);
        let group = search_g(&x, 2, &hp, &config).unwrap();
        assert_eq!(group.partition, single.partition);
        assert_eq!(group.model.omega, single.omega);
        assert_eq!(group.hits, 1);
    }

    #[test]
    fn more_starts_never_lower_the_optimum() {
        let x = blobs(40, 4, 0.8, 6);
        let hp = Hyperparams::default_for(&x);
        let small = SearchConfig { n_starts: 5, seed: 3, ..SearchConfig::default() };
        let large = SearchConfig { n_starts: 10, ..small.clone() };
        let a = search_g(&x, 3, &hp, &small).unwrap();
        let b = search_g(&x, 3, &hp, &large).unwrap();
        assert!(b.micl >= a.micl - 1e-12);
        assert!(a.hits <= 5 && b.hits <= 10);
    }

    #[test]
    fn separated_clusters_are_recovered() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![if i % 2 == 0 { 10.0 } else { -10.0 } + 0.1 * (i as f64 % 5.0)])
            .collect();
        let x = DataMatrix::from_rows(&rows).unwrap();
        let hp = Hyperparams::default_for(&x);
        let kernel = Kernel::new(&x, &hp).unwrap();
        let m = ModelSpec::new(2, vec![true]).unwrap();
        let config = SearchConfig { n_starts: 5, ..SearchConfig::default() };
        let result = search_partition(&kernel, &x, &m, &hp, &config).unwrap();
        assert_eq!(result.hits, 5);
        let labels = result.partition.labels();
        for i in 0..20 {
            assert_eq!(labels[i] == labels[0], i % 2 == 0);
        }
    }

    #[test]
    fn selection_is_deterministic_and_consistent() {
        let x = blobs(60, 3, 3.0, 8);
        let hp = Hyperparams::default_for(&x);
        let config = SearchConfig { g_max: 3, n_starts: 8, seed: 11, ..SearchConfig::default() };
        let a = select_model(&x, &hp, &config).unwrap();
        let b = select_model(&x, &hp, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.best_model.g, 2, "{:?}", a.per_g);
        assert_eq!(a.best_model.omega, vec![true, false, false]);
        let recomputed = log_integrated_complete(&x, &a.best_partition, &a.best_model, &hp).unwrap();
        assert!((recomputed - a.micl.value).abs() < 1e-8);
        assert_eq!(a.monotonicity_violations, 0);
        assert_eq!(a.per_g.len(), 3);
    }
}
