//! Run configuration: flat `key = value` files or JSON, with flag overrides.

use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use psm_core::problems::{builtin, ProblemSpec, BUILTIN_NAMES};
use psm_core::runner::RunSettings;
use psm_core::{MetricSpec, SolverKind};
use serde::{Deserialize, Serialize};

/// A user-facing run description. Unset fields take the problem's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_domain: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_boundary: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pde_norm: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_weak: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_growth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precondition_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Fully resolved settings echoed into every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ResolvedConfig {
    pub problem: String,
    pub solver: SolverKind,
    pub n_domain: usize,
    pub n_boundary: usize,
    pub pde_norm: String,
    pub boundary_weak: bool,
    pub tau: f64,
    pub tau_growth: f64,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub eval_points: usize,
    pub precondition_every: usize,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn for_problem(problem: &str) -> Self {
        Self {
            problem: problem.into(),
            ..Self::default()
        }
    }

    /// Read a config file; JSON if it starts with `{`, otherwise `key = value` lines.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            return serde_json::from_str(text).map_err(|e| anyhow!("invalid JSON config: {e}"));
        }
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", lineno + 1))?;
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(cfg)
    }

    /// Set one field by its kebab-case key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>()
                .map_err(|e| anyhow!("invalid value '{v}' for {key}: {e}"))
        }
        let key = key.replace('_', "-");
        match key.as_str() {
            "problem" => self.problem = value.to_string(),
            "solver" => self.solver = Some(SolverKind::from_str(value)?),
            "n-domain" => self.n_domain = Some(num(&key, value)?),
            "n-boundary" => self.n_boundary = Some(num(&key, value)?),
            "pde-norm" => {
                MetricSpec::from_str(value)?;
                self.pde_norm = Some(value.to_string());
            }
            "boundary-weak" => self.boundary_weak = Some(num(&key, value)?),
            "tau" => self.tau = Some(num(&key, value)?),
            "tau-growth" => self.tau_growth = Some(num(&key, value)?),
            "max-iters" => self.max_iters = Some(num(&key, value)?),
            "tol" => self.tol = Some(num(&key, value)?),
            "eval-points" => self.eval_points = Some(num(&key, value)?),
            "precondition-every" => self.precondition_every = Some(num(&key, value)?),
            "seed" => self.seed = Some(num(&key, value)?),
            _ => bail!("unknown config key '{key}'"),
        }
        Ok(())
    }

    /// Overlay the fields set in `other`.
    pub fn merge(&mut self, other: &RunConfig) {
        if !other.problem.is_empty() {
            self.problem = other.problem.clone();
        }
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f.clone(); } )* };
        }
        take!(
            solver,
            n_domain,
            n_boundary,
            pde_norm,
            boundary_weak,
            tau,
            tau_growth,
            max_iters,
            tol,
            eval_points,
            precondition_every,
            seed
        );
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        if self.problem.is_empty() {
            bail!(
                "no problem given; valid names: {}",
                BUILTIN_NAMES.join(", ")
            );
        }
        Ok(builtin(&self.problem)?)
    }

    /// Apply this config on top of the problem defaults.
    pub fn resolve(
        &self,
        spec: &ProblemSpec,
        smoke: bool,
    ) -> Result<(ResolvedConfig, RunSettings)> {
        let mut s = if smoke {
            RunSettings::smoke_for(spec)
        } else {
            RunSettings::defaults_for(spec)
        };
        if let Some(v) = self.solver {
            s.solver = v;
        }
        if let Some(v) = self.n_domain {
            s.n_domain = v;
        }
        if let Some(v) = self.n_boundary {
            s.n_boundary = v;
        }
        if let Some(v) = &self.pde_norm {
            s.pde_metric = MetricSpec::from_str(v)?;
        }
        if let Some(v) = self.boundary_weak {
            s.boundary_weak = v;
        }
        if let Some(v) = self.tau {
            s.tau = v;
        }
        if let Some(v) = self.tau_growth {
            s.tau_growth = v;
        }
        if let Some(v) = self.eval_points {
            s.eval_points = v;
        }
        if let Some(v) = self.precondition_every {
            s.precondition_every = v;
        }
        s.max_iters = self.max_iters;
        s.tol = self.tol;
        if s.n_domain < 1 || s.n_boundary < 1 {
            bail!("degrees must be at least 1");
        }
        if s.tau.is_nan() || s.tau <= 0.0 || s.tau_growth.is_nan() || s.tau_growth < 1.0 {
            bail!("tau must be positive and tau-growth at least 1");
        }
        if s.eval_points < 1 {
            bail!("eval-points must be at least 1");
        }
        let resolved = ResolvedConfig {
            problem: spec.name.clone(),
            solver: s.solver,
            n_domain: s.n_domain,
            n_boundary: s.n_boundary,
            pde_norm: s.pde_metric.to_string(),
            boundary_weak: s.boundary_weak,
            tau: s.tau,
            tau_growth: s.tau_growth,
            max_iters: s.max_iters,
            tol: s.tol,
            eval_points: s.eval_points,
            precondition_every: s.precondition_every,
            seed: self.seed,
        };
        Ok((resolved, s))
    }
}
