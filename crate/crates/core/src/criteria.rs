//! Model-selection criteria behind a common interface, looked up by name.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use crate::data::DataMatrix;
use crate::error::Result;
use crate::estimation::{fit_em, EmConfig, FitResult};
use crate::likelihood::{CriterionKind, Kernel};
use crate::model::{Hyperparams, ModelSpec};
use crate::rng::stream;
use crate::search::{search_partition, SearchConfig};

const FIT_TAG: u64 = 0x4649_5400;

/// Shared inputs for scoring models on one dataset. EM fits are cached per model
/// so criteria that need the same fit do not refit.
pub struct CriterionContext<'a> {
    pub data: &'a DataMatrix,
    pub hp: &'a Hyperparams,
    pub em: EmConfig,
    pub search: SearchConfig,
    kernel: Kernel,
    fits: Mutex<HashMap<ModelSpec, Arc<FitResult>>>,
}

impl<'a> CriterionContext<'a> {
    pub fn new(data: &'a DataMatrix, hp: &'a Hyperparams, em: EmConfig, search: SearchConfig) -> Result<Self> {
        Ok(Self {
            kernel: Kernel::new(data, hp)?,
            data,
            hp,
            em,
            search,
            fits: Mutex::new(HashMap::new()),
        })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// Previously computed fit of `m`, if any.
    pub fn cached_fit(&self, m: &ModelSpec) -> Option<Arc<FitResult>> {
        self.fits.lock().expect("fit cache poisoned").get(m).cloned()
    }

    /// EM fit of `m`, seeded from the search seed and the model itself.
    pub fn fit(&self, m: &ModelSpec) -> Result<Arc<FitResult>> {
        if let Some(hit) = self.fits.lock().expect("fit cache poisoned").get(m) {
            return Ok(Arc::clone(hit));
        }
        let mut tags = vec![FIT_TAG, m.g as u64];
        tags.extend(m.omega.chunks(64).map(|c| c.iter().fold(0u64, |acc, &b| (acc << 1) | u64::from(b))));
        let fit = Arc::new(fit_em(self.data, m, self.hp, &self.em, &mut stream(self.search.seed, &tags))?);
        self.fits.lock().expect("fit cache poisoned").insert(m.clone(), Arc::clone(&fit));
        Ok(fit)
    }
}

/// A criterion to be maximized over candidate models.
pub trait Criterion: Send + Sync {
    fn name(&self) -> &str;
    fn kind(&self) -> CriterionKind;
    fn score(&self, ctx: &CriterionContext<'_>, m: &ModelSpec) -> Result<f64>;
}

/// Maximum over partitions of the integrated complete-data likelihood.
pub struct Micl;

impl Criterion for Micl {
    fn name(&self) -> &str {
        "micl"
    }

    fn kind(&self) -> CriterionKind {
        CriterionKind::Micl
    }

    fn score(&self, ctx: &CriterionContext<'_>, m: &ModelSpec) -> Result<f64> {
        Ok(search_partition(ctx.kernel(), ctx.data, m, ctx.hp, &ctx.search)?.micl)
    }
}

/// Integrated complete-data likelihood at the MAP partition of the EM fit.
pub struct Icl;

impl Criterion for Icl {
    fn name(&self) -> &str {
        "icl"
    }

    fn kind(&self) -> CriterionKind {
        CriterionKind::Icl
    }

    fn score(&self, ctx: &CriterionContext<'_>, m: &ModelSpec) -> Result<f64> {
        Ok(ctx.fit(m)?.icl.value)
    }
}

/// Penalized maximum log-likelihood.
pub struct Bic;

impl Criterion for Bic {
    fn name(&self) -> &str {
        "bic"
    }

    fn kind(&self) -> CriterionKind {
        CriterionKind::Bic
    }

    fn score(&self, ctx: &CriterionContext<'_>, m: &ModelSpec) -> Result<f64> {
        Ok(ctx.fit(m)?.bic.value)
    }
}

#[derive(Clone, Default)]
pub struct CriterionRegistry {
    entries: BTreeMap<String, Arc<dyn Criterion>>,
}

impl CriterionRegistry {
    pub fn with_builtin() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(Micl));
        r.register(Arc::new(Icl));
        r.register(Arc::new(Bic));
        r
    }

    /// Adds or replaces the criterion under its own name.
    pub fn register(&mut self, c: Arc<dyn Criterion>) {
        self.entries.insert(c.name().to_string(), c);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Criterion>> {
        self.entries
            .get(&name.to_ascii_lowercase())
            .cloned()
            .ok_or_else(|| crate::error::Error::Unknown { kind: "criterion", name: name.to_string() })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}
