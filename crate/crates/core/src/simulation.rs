//! Simulated designs, evaluation metrics and the replicate-experiment runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{CriterionContext, CriterionRegistry};
use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::estimation::{fit_em, EmConfig};
use crate::model::{Hyperparams, ModelSpec};
use crate::rng::{derive_seed, stream};
use crate::search::{select_model, SearchConfig};

/// Upper bound on `2^d * g_max` for exhaustive model enumeration.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

const DATA_TAG: u64 = 0xDA7A;
const FIT_TAG: u64 = 0xF17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    WellSpecified,
    MisspecifiedUniform,
    ThreeComponent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n: usize,
    /// Number of relevant variables; they are the first `r` columns.
    pub r: usize,
    pub d: usize,
    pub epsilon: f64,
    pub g_true: usize,
    pub design: DesignKind,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.r > self.d {
            return Err(Error::InvalidArgument(format!("need 1 <= r <= d, got r={} d={}", self.r, self.d)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.n < self.g_true {
            return Err(Error::InvalidArgument(format!("n={} is below g={}", self.n, self.g_true)));
        }
        let fixed = match self.design {
            DesignKind::WellSpecified | DesignKind::MisspecifiedUniform => Some((2, 2, 4)),
            DesignKind::ThreeComponent => None,
        };
        if let Some((g, r, d)) = fixed {
            if (self.g_true, self.r, self.d) != (g, r, d) {
                return Err(Error::InvalidArgument("two-component designs have g=2, r=2, d=4".into()));
            }
        } else if self.g_true != 3 {
            return Err(Error::InvalidArgument("three-component design has g=3".into()));
        }
        Ok(())
    }

    pub fn true_omega(&self) -> Vec<bool> {
        (0..self.d).map(|j| j < self.r).collect()
    }
}

fn labels_at_random<R: Rng + ?Sized>(n: usize, g: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..g)).collect()
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Two equal-weight unit-variance Gaussian components on four variables; the first
/// two have means `epsilon` and `-epsilon`, the last two are standard normal.
pub fn gen_well_specified<R: Rng + ?Sized>(n: usize, epsilon: f64, rng: &mut R) -> Result<(DataMatrix, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidArgument("n must be at least 2".into()));
    }
    let labels = labels_at_random(n, 2, rng);
    let mut values = Vec::with_capacity(n * 4);
    for &k in &labels {
        let mu = if k == 0 { epsilon } else { -epsilon };
        for j in 0..4 {
            values.push(normal(rng) + if j < 2 { mu } else { 0.0 });
        }
    }
    Ok((DataMatrix::new(values, n, 4, None)?, labels))
}

/// As [`gen_well_specified`] but the first two variables are uniform of width 2
/// centred on `epsilon` and `-epsilon`.
pub fn gen_misspecified<R: Rng + ?Sized>(n: usize, epsilon: f64, rng: &mut R) -> Result<(DataMatrix, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidArgument("n must be at least 2".into()));
    }
    let labels = labels_at_random(n, 2, rng);
    let mut values = Vec::with_capacity(n * 4);
    for &k in &labels {
        let c = if k == 0 { epsilon } else { -epsilon };
        for j in 0..4 {
            values.push(if j < 2 { rng.random_range(c - 1.0..=c + 1.0) } else { normal(rng) });
        }
    }
    Ok((DataMatrix::new(values, n, 4, None)?, labels))
}

/// Generates one sample from `spec`. The three-component design has means
/// `epsilon`, `-epsilon` and 0 on every relevant variable.
pub fn gen_scenario<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<(DataMatrix, Vec<usize>)> {
    spec.validate()?;
    match spec.design {
        DesignKind::WellSpecified => gen_well_specified(spec.n, spec.epsilon, rng),
        DesignKind::MisspecifiedUniform => gen_misspecified(spec.n, spec.epsilon, rng),
        DesignKind::ThreeComponent => {
            let labels = labels_at_random(spec.n, 3, rng);
            let mut values = Vec::with_capacity(spec.n * spec.d);
            for &k in &labels {
                let mu = [spec.epsilon, -spec.epsilon, 0.0][k];
                for j in 0..spec.d {
                    values.push(normal(rng) + if j < spec.r { mu } else { 0.0 });
                }
            }
            Ok((DataMatrix::new(values, spec.n, spec.d, None)?, labels))
        }
    }
}

fn choose2(x: u64) -> f64 {
    (x as f64) * (x.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand index between two labelings of the same observations.
/// Returns 1 when both labelings are a single class or all singletons alike.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), actual: b.len() });
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sb: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(a.len() as u64);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Outcome of one criterion on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub g: usize,
    pub omega: Vec<bool>,
    /// Agreement of the fitted MAP partition with the true labels; absent if the fit failed.
    pub ari: Option<f64>,
    pub nrv: usize,
    pub rrr: f64,
    /// Absent when there are no irrelevant variables.
    pub rir: Option<f64>,
    #[serde(skip)]
    pub wall_time: f64,
}

impl TrialReport {
    pub fn new(g: usize, omega: Vec<bool>, true_omega: &[bool], ari: Option<f64>, wall_time: f64) -> Self {
        let r = true_omega.iter().filter(|&&w| w).count();
        let irrelevant = true_omega.len() - r;
        let hit_rel = omega.iter().zip(true_omega).filter(|(&s, &t)| s && t).count();
        let hit_irr = omega.iter().zip(true_omega).filter(|(&s, &t)| !s && !t).count();
        Self {
            g,
            nrv: omega.iter().filter(|&&w| w).count(),
            rrr: if r == 0 { 1.0 } else { hit_rel as f64 / r as f64 },
            rir: (irrelevant > 0).then(|| hit_irr as f64 / irrelevant as f64),
            omega,
            ari,
            wall_time,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExperimentMode {
    /// Score every model with `g <= g_max` under each criterion.
    Exhaustive { g_max: usize },
    /// Run the alternating search with the component count fixed.
    Search { g: usize },
}

/// A named simulation design that can be re-parameterized by sample size and overlap.
pub trait ExperimentDesign: Send + Sync {
    fn name(&self) -> &str;
    fn base(&self) -> ScenarioSpec;
    fn mode(&self) -> ExperimentMode;

    fn scenario(&self, n: Option<usize>, epsilon: Option<f64>) -> Result<ScenarioSpec> {
        let mut s = self.base();
        if let Some(n) = n {
            s.n = n;
        }
        if let Some(e) = epsilon {
            s.epsilon = e;
        }
        s.validate()?;
        Ok(s)
    }
}

pub struct TableDesign {
    name: String,
    base: ScenarioSpec,
    mode: ExperimentMode,
}

impl TableDesign {
    pub fn new(name: &str, base: ScenarioSpec, mode: ExperimentMode) -> Self {
        Self { name: name.to_string(), base, mode }
    }
}

impl ExperimentDesign for TableDesign {
    fn name(&self) -> &str {
        &self.name
    }

    fn base(&self) -> ScenarioSpec {
        self.base.clone()
    }

    fn mode(&self) -> ExperimentMode {
        self.mode
    }
}

#[derive(Clone, Default)]
pub struct DesignRegistry {
    entries: BTreeMap<String, Arc<dyn ExperimentDesign>>,
}

impl DesignRegistry {
    pub fn with_builtin() -> Self {
        let mut r = Self::default();
        let two = |design| ScenarioSpec { n: 400, r: 2, d: 4, epsilon: 1.26, g_true: 2, design };
        let exhaustive = ExperimentMode::Exhaustive { g_max: 6 };
        r.register(Arc::new(TableDesign::new("table1", two(DesignKind::WellSpecified), exhaustive)));
        r.register(Arc::new(TableDesign::new("table2", two(DesignKind::MisspecifiedUniform), exhaustive)));
        let scenarios = [(30, 5, 25, 0.6), (30, 5, 25, 1.7), (300, 5, 25, 1.7), (300, 5, 100, 1.7), (300, 50, 500, 1.7)];
        for (i, (n, r_, d, epsilon)) in scenarios.into_iter().enumerate() {
            let spec = ScenarioSpec { n, r: r_, d, epsilon, g_true: 3, design: DesignKind::ThreeComponent };
            let name = format!("table4-scenario{}", i + 1);
            r.register(Arc::new(TableDesign::new(&name, spec, ExperimentMode::Search { g: 3 })));
        }
        r
    }

    pub fn register(&mut self, design: Arc<dyn ExperimentDesign>) {
        self.entries.insert(design.name().to_string(), design);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ExperimentDesign>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Unknown { kind: "design", name: name.to_string() })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Criteria scored in exhaustive mode; search mode always uses MICL.
    pub criteria: Vec<String>,
    pub search: SearchConfig,
    pub em: EmConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            replicates: 20,
            seed: 0,
            criteria: vec!["micl".into(), "icl".into(), "bic".into()],
            search: SearchConfig::default(),
            em: EmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub trials: BTreeMap<String, TrialReport>,
    pub search_violations: usize,
    pub em_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionSummary {
    pub criterion: String,
    pub g_correct_rate: f64,
    pub model_correct_rate: f64,
    pub mean_nrv: f64,
    pub mean_rrr: f64,
    pub mean_rir: Option<f64>,
    pub mean_ari: Option<f64>,
    /// Count of replicates selecting each component count.
    pub selected_g: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub design: String,
    pub scenario: ScenarioSpec,
    pub mode: ExperimentMode,
    pub config: ExperimentConfig,
    pub summaries: Vec<CriterionSummary>,
    pub replicates: Vec<ReplicateRecord>,
    pub search_violations: usize,
    pub em_violations: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, c) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (c > 0).then(|| s / c as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl ExperimentTable {
    /// Tab-separated summary, one row per criterion.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("criterion\treplicates\tg_correct\tmodel_correct\tmean_nrv\tmean_rrr\tmean_rir\tmean_ari\n");
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}",
                s.criterion,
                self.replicates.len(),
                s.g_correct_rate,
                s.model_correct_rate,
                s.mean_nrv,
                s.mean_rrr,
                fmt_opt(s.mean_rir),
                fmt_opt(s.mean_ari)
            );
        }
        out
    }

    pub fn summary(&self, criterion: &str) -> Option<&CriterionSummary> {
        self.summaries.iter().find(|s| s.criterion == criterion)
    }
}

fn summarize(criterion: &str, scenario: &ScenarioSpec, records: &[ReplicateRecord]) -> CriterionSummary {
    let truth = scenario.true_omega();
    let trials: Vec<&TrialReport> = records.iter().filter_map(|r| r.trials.get(criterion)).collect();
    let rate = |pred: &dyn Fn(&TrialReport) -> bool| {
        mean(trials.iter().map(|t| f64::from(u8::from(pred(t))))).unwrap_or(0.0)
    };
    let mut selected_g = BTreeMap::new();
    for t in &trials {
        *selected_g.entry(t.g).or_insert(0) += 1;
    }
    CriterionSummary {
        criterion: criterion.to_string(),
        g_correct_rate: rate(&|t| t.g == scenario.g_true),
        model_correct_rate: rate(&|t| t.g == scenario.g_true && t.omega == truth),
        mean_nrv: mean(trials.iter().map(|t| t.nrv as f64)).unwrap_or(0.0),
        mean_rrr: mean(trials.iter().map(|t| t.rrr)).unwrap_or(0.0),
        mean_rir: mean(trials.iter().filter_map(|t| t.rir)),
        mean_ari: mean(trials.iter().filter_map(|t| t.ari)),
        selected_g,
    }
}

/// All candidate models with `g <= g_max`. For one component every relevance
/// vector gives the same criterion value, so only the all-irrelevant one is listed.
pub fn enumerate_models(d: usize, g_max: usize) -> Result<Vec<ModelSpec>> {
    let count = 1u128.checked_shl(d as u32).unwrap_or(u128::MAX).saturating_mul(g_max as u128);
    if d >= 64 || count > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge { count, limit: ENUMERATION_LIMIT });
    }
    let mut models = vec![ModelSpec::all_irrelevant(1, d)];
    for g in 2..=g_max {
        for code in 0..(1u64 << d) {
            models.push(ModelSpec { g, omega: (0..d).map(|j| code >> (d - 1 - j) & 1 == 1).collect() });
        }
    }
    Ok(models)
}

fn run_exhaustive(
    x: &DataMatrix,
    truth: &[usize],
    scenario: &ScenarioSpec,
    g_max: usize,
    config: &ExperimentConfig,
    replicate_seed: u64,
    registry: &CriterionRegistry,
) -> Result<ReplicateRecord> {
    let hp = Hyperparams::default_for(x);
    let search = SearchConfig { seed: replicate_seed, ..config.search.clone() };
    let ctx = CriterionContext::new(x, &hp, config.em.clone(), search.clone())?;
    let models = enumerate_models(x.d(), g_max)?;
    let true_omega = scenario.true_omega();
    let mut trials = BTreeMap::new();
    let mut search_violations = 0;
    for name in &config.criteria {
        let started = Instant::now();
        let criterion = registry.get(name)?;
        let mut best: Option<(f64, &ModelSpec)> = None;
        for m in &models {
            let score = if criterion.name() == "micl" {
                let r = crate::search::search_partition(ctx.kernel(), x, m, &hp, &search)?;
                search_violations += r.trace_violations;
                r.micl
            } else {
                match criterion.score(&ctx, m) {
                    Ok(v) => v,
                    Err(e) if e.is_numerical() => f64::NEG_INFINITY,
                    Err(e) => return Err(e),
                }
            };
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, m));
            }
        }
        let (_, chosen) = best.expect("at least one model");
        let ari = ctx.fit(chosen).ok().and_then(|f| adjusted_rand_index(f.map_partition.labels(), truth).ok());
        let elapsed = started.elapsed().as_secs_f64();
        trials.insert(
            criterion.name().to_string(),
            TrialReport::new(chosen.g, chosen.omega.clone(), &true_omega, ari, elapsed),
        );
    }
    let em_violations = models.iter().filter_map(|m| ctx.cached_fit(m)).map(|f| f.monotonicity_violations).sum();
    Ok(ReplicateRecord { replicate: 0, trials, search_violations, em_violations })
}

fn run_search(
    x: &DataMatrix,
    truth: &[usize],
    scenario: &ScenarioSpec,
    g: usize,
    config: &ExperimentConfig,
    replicate_seed: u64,
) -> Result<ReplicateRecord> {
    let started = Instant::now();
    let hp = Hyperparams::default_for(x);
    let search = SearchConfig { seed: replicate_seed, fixed_g: Some(g), ..config.search.clone() };
    let result = select_model(x, &hp, &search)?;
    let fit = fit_em(x, &result.best_model, &hp, &config.em, &mut stream(replicate_seed, &[FIT_TAG]));
    let ari = fit.as_ref().ok().and_then(|f| adjusted_rand_index(f.map_partition.labels(), truth).ok());
    let em_violations = result.em_violations + fit.as_ref().map_or(0, |f| f.monotonicity_violations);
    let trial = TrialReport::new(
        result.best_model.g,
        result.best_model.omega.clone(),
        &scenario.true_omega(),
        ari,
        started.elapsed().as_secs_f64(),
    );
    Ok(ReplicateRecord {
        replicate: 0,
        trials: BTreeMap::from([("micl".to_string(), trial)]),
        search_violations: result.monotonicity_violations,
        em_violations,
    })
}

/// Runs `config.replicates` independent replicates of `design` in parallel and
/// aggregates per-criterion selection rates and mean metrics.
pub fn run_table_experiment(
    design: &dyn ExperimentDesign,
    scenario: &ScenarioSpec,
    config: &ExperimentConfig,
    registry: &CriterionRegistry,
) -> Result<ExperimentTable> {
    scenario.validate()?;
    config.search.validate()?;
    config.em.validate()?;
    let mode = design.mode();
    let criteria: Vec<String> = match mode {
        ExperimentMode::Exhaustive { g_max } => {
            enumerate_models(scenario.d, g_max)?;
            for c in &config.criteria {
                registry.get(c)?;
            }
            config.criteria.iter().map(|c| c.to_ascii_lowercase()).collect()
        }
        ExperimentMode::Search { .. } => vec!["micl".to_string()],
    };
    let run_config = ExperimentConfig { criteria: criteria.clone(), ..config.clone() };
    let replicates: Vec<ReplicateRecord> = (0..config.replicates)
        .into_par_iter()
        .map(|rep| {
            let (x, truth) = gen_scenario(scenario, &mut stream(config.seed, &[DATA_TAG, rep as u64]))?;
            let replicate_seed = derive_seed(config.seed, &[rep as u64]);
            let mut record = match mode {
                ExperimentMode::Exhaustive { g_max } => {
                    run_exhaustive(&x, &truth, scenario, g_max, &run_config, replicate_seed, registry)?
                }
                ExperimentMode::Search { g } => run_search(&x, &truth, scenario, g, &run_config, replicate_seed)?,
            };
            record.replicate = rep;
            Ok(record)
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentTable {
        design: design.name().to_string(),
        scenario: scenario.clone(),
        mode,
        config: run_config,
        summaries: criteria.iter().map(|c| summarize(c, scenario, &replicates)).collect(),
        search_violations: replicates.iter().map(|r| r.search_violations).sum(),
        em_violations: replicates.iter().map(|r| r.em_violations).sum(),
        replicates,
    })
}
