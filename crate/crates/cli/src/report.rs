//! Machine-readable run report and its human rendering.

use std::fmt::Write as _;

use micl_core::search::PerG;
use micl_core::search::StartTrace;
use micl_core::{FitResult, Hyperparams, MixtureParams, ModelSpec};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub n: usize,
    pub d: usize,
    pub column_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub g_max: Option<usize>,
    pub fixed_g: Option<usize>,
    pub n_starts: Option<usize>,
    pub em_starts: usize,
    pub seed: u64,
    pub hyperparameters: Hyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedModel {
    pub g: usize,
    pub omega: String,
    pub relevant_variables: Vec<String>,
}

impl SelectedModel {
    pub fn new(m: &ModelSpec, names: &[String]) -> Self {
        Self {
            g: m.g,
            omega: m.omega_string(),
            relevant_variables: m.relevant().into_iter().map(|j| names[j].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionTable {
    /// Best MICL per component count, with the number of starts reaching it.
    pub per_g: Vec<PerG>,
    pub micl: Option<f64>,
    pub icl: Option<f64>,
    pub bic: Option<f64>,
    pub loglik: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub params: MixtureParams,
    pub iterations: usize,
    pub converged: bool,
    /// 1-based MAP labels of the fitted mixture.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub input: InputDigest,
    pub config: ConfigEcho,
    pub selected: SelectedModel,
    pub criteria: CriterionTable,
    /// 1-based partition maximizing the integrated complete-data likelihood.
    pub micl_partition: Option<Vec<usize>>,
    pub fit: Option<FitSummary>,
    /// Set when the final EM fit failed; search results are kept.
    pub fit_error: Option<String>,
    /// Agreement of the fitted labels with the supplied reference labels.
    pub ari: Option<f64>,
    pub search_violations: usize,
    pub em_violations: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<Vec<StartTrace>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_secs: Option<f64>,
}

impl RunReport {
    pub fn attach_fit(&mut self, fit: &FitResult) {
        self.criteria.icl = Some(fit.icl.value);
        self.criteria.bic = Some(fit.bic.value);
        self.criteria.loglik = Some(fit.loglik);
        self.em_violations += fit.monotonicity_violations;
        self.fit = Some(FitSummary {
            params: fit.params.clone(),
            iterations: fit.iterations,
            converged: fit.converged,
            labels: fit.map_partition.one_based(),
        });
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is serializable");
        s.push('\n');
        s
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "input: {} (n={}, d={})", self.input.path, self.input.n, self.input.d);
        let _ = writeln!(
            out,
            "selected model: g={} omega={} relevant=[{}]",
            self.selected.g,
            self.selected.omega,
            self.selected.relevant_variables.join(", ")
        );
        if !self.criteria.per_g.is_empty() {
            let _ = writeln!(out, "  g  {:>14}  hits  omega", "MICL");
            for row in &self.criteria.per_g {
                let omega: String = row.omega.iter().map(|&b| if b { '1' } else { '0' }).collect();
                let _ = writeln!(out, "{:>3}  {:>14.4}  {:>2}/{:<2} {}", row.g, row.micl, row.hits, row.n_starts, omega);
            }
        }
        let show = |label: &str, v: Option<f64>, out: &mut String| {
            if let Some(v) = v {
                let _ = writeln!(out, "{label:<8}{v:.4}");
            }
        };
        show("MICL", self.criteria.micl, &mut out);
        show("ICL", self.criteria.icl, &mut out);
        show("BIC", self.criteria.bic, &mut out);
        show("loglik", self.criteria.loglik, &mut out);
        show("ARI", self.ari, &mut out);
        if let Some(fit) = &self.fit {
            let _ = writeln!(out, "EM: {} iterations, converged={}", fit.iterations, fit.converged);
            let _ = writeln!(out, "proportions: {:?}", fit.params.proportions);
        }
        if let Some(e) = &self.fit_error {
            let _ = writeln!(out, "fit failed: {e}");
        }
        if let Some(t) = self.wall_time_secs {
            let _ = writeln!(out, "wall time: {t:.2}s");
        }
        out
    }
}
