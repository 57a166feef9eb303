//! Run-configuration files: a JSON document selecting registry models,
//! hypotheses, the design space, outer-loop settings and integrator
//! tolerances. Model right-hand sides are referenced by registry key; configs
//! carry no code.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criterion::SwitchingParams;
use crate::design::{DesignError, DesignSpec, PerturbSlot, UNBOUNDED};
use crate::integrator::{IntegratorConfig, IntegratorError};
use crate::models::{ErrorModel, HypothesisSet, ModelError, ModelFamily, ModelSpec};
use crate::outer::OuterConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config schema violation: {0}")]
    Schema(String),
    #[error("unknown model name '{0}' in hypotheses")]
    UnknownModelName(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error("outer config: {0}")]
    Outer(String),
    #[error("override '{0}' is malformed (expected dotted.path=value)")]
    BadOverride(String),
    #[error("override path '{0}' does not exist")]
    OverridePath(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub fixed: BTreeMap<String, f64>,
    #[serde(default)]
    pub free: BTreeMap<String, [f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HypothesesEntry {
    pub null: Vec<String>,
    pub alt: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DtBoundsEntry {
    pub default: [f64; 2],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<DtOverride>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DtOverride {
    /// 1-based spacing indices.
    pub indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PerturbEntry {
    /// 1-based measurement indices after which species may be added.
    pub indices: Vec<usize>,
    pub bounds: [f64; 2],
    /// State indices that may receive additions.
    pub targets: Vec<usize>,
    #[serde(default)]
    pub initial: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<PerturbOverride>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PerturbOverride {
    pub indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct YiEntry {
    pub bounds: Vec<[f64; 2]>,
    pub initial: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodesEntry {
    #[serde(default = "default_node_bounds")]
    pub default: [f64; 2],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_state: Vec<NodeOverride>,
}

fn default_node_bounds() -> [f64; 2] {
    [-UNBOUNDED, UNBOUNDED]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodeOverride {
    pub state: usize,
    pub bounds: [f64; 2],
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DesignEntry {
    pub n: usize,
    #[serde(rename = "T_end")]
    pub t_end: f64,
    pub dt_bounds: DtBoundsEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<PerturbEntry>,
    #[serde(rename = "yI")]
    pub y_i: YiEntry,
    pub gates: SwitchingParams,
    #[serde(default = "default_true")]
    pub use_perturb_gate: bool,
    #[serde(default)]
    pub symmetrized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<NodesEntry>,
}

/// Top-level run configuration. All numbers IEEE double, UTF-8, no comments.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub models: Vec<ModelEntry>,
    pub hypotheses: HypothesesEntry,
    pub design: DesignEntry,
    pub outer: OuterConfig,
    pub integrator: IntegratorConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))
    }

    pub fn from_value(v: serde_json::Value) -> Result<Self, ConfigError> {
        serde_json::from_value(v).map_err(|e| ConfigError::Schema(e.to_string()))
    }

    /// Resolve into the fully validated run setup.
    pub fn resolve(
        &self,
    ) -> Result<(HypothesisSet, DesignSpec, OuterConfig, IntegratorConfig), ConfigError> {
        // models
        let mut specs: Vec<ModelSpec> = Vec::new();
        for entry in &self.models {
            let family = ModelFamily::from_key(&entry.key)
                .ok_or_else(|| ModelError::UnknownKey(entry.key.clone()))?;
            let name = entry.name.clone().unwrap_or_else(|| entry.key.clone());
            let free: Vec<(String, [f64; 2])> =
                entry.free.iter().map(|(k, v)| (k.clone(), *v)).collect();
            specs.push(ModelSpec::new(
                name,
                family,
                entry.fixed.clone(),
                free,
                family.default_observable(),
                ErrorModel::HomoscedasticEqual { sigma: 1.0 },
            )?);
        }
        let find = |name: &str| -> Result<ModelSpec, ConfigError> {
            specs
                .iter()
                .find(|m| m.name == name)
                .cloned()
                .ok_or_else(|| ConfigError::UnknownModelName(name.to_string()))
        };
        let null_models: Vec<ModelSpec> =
            self.hypotheses.null.iter().map(|n| find(n)).collect::<Result<_, _>>()?;
        let alt_models: Vec<ModelSpec> =
            self.hypotheses.alt.iter().map(|n| find(n)).collect::<Result<_, _>>()?;
        let hyp = HypothesisSet::new(null_models, alt_models)?;

        let design = self.design.resolve(hyp.m_max)?;
        design.validate(hyp.m_max)?;
        self.outer.validate().map_err(ConfigError::Outer)?;
        self.integrator.validate()?;
        Ok((hyp, design, self.outer.clone(), self.integrator.clone()))
    }
}

impl DesignEntry {
    fn resolve(&self, m_max: usize) -> Result<DesignSpec, ConfigError> {
        let n = self.n;
        if n < 2 {
            return Err(DesignError::TooFewPoints(n).into());
        }
        let mut dt_bounds = vec![self.dt_bounds.default; n];
        let mut dt_fixed: Vec<Option<f64>> = vec![None; n];
        for ov in &self.dt_bounds.overrides {
            for &idx in &ov.indices {
                if idx == 0 || idx > n {
                    return Err(ConfigError::Schema(format!(
                        "dt override index {idx} outside 1..={n}"
                    )));
                }
                if let Some(b) = ov.bounds {
                    dt_bounds[idx - 1] = b;
                }
                if let Some(v) = ov.initial {
                    dt_fixed[idx - 1] = Some(v);
                }
            }
        }
        // remaining spacings share the leftover horizon equally
        let fixed_sum: f64 = dt_fixed.iter().flatten().sum();
        let n_open = dt_fixed.iter().filter(|v| v.is_none()).count();
        let leftover = self.t_end - fixed_sum;
        if n_open == 0 {
            if (fixed_sum - self.t_end).abs() > 1e-8 * self.t_end.max(1.0) {
                return Err(DesignError::InfeasibleInitialDt {
                    sum: fixed_sum,
                    t_end: self.t_end,
                }
                .into());
            }
        } else if leftover < 0.0 {
            return Err(
                DesignError::InfeasibleInitialDt { sum: fixed_sum, t_end: self.t_end }.into()
            );
        }
        let open_each = if n_open > 0 { leftover / n_open as f64 } else { 0.0 };
        let dt_initial: Vec<f64> =
            dt_fixed.iter().map(|v| v.unwrap_or(open_each)).collect();

        let mut perturb = Vec::new();
        let mut perturb_targets = Vec::new();
        if let Some(p) = &self.perturb {
            perturb_targets = p.targets.clone();
            let mut slots: BTreeMap<usize, PerturbSlot> = p
                .indices
                .iter()
                .map(|&idx| (idx, PerturbSlot { idx, bounds: p.bounds, initial: p.initial }))
                .collect();
            for ov in &p.overrides {
                for idx in &ov.indices {
                    let slot = slots.get_mut(idx).ok_or_else(|| {
                        ConfigError::Schema(format!(
                            "perturb override index {idx} is not a perturbation index"
                        ))
                    })?;
                    if let Some(b) = ov.bounds {
                        slot.bounds = b;
                    }
                    if let Some(v) = ov.initial {
                        slot.initial = v;
                    }
                }
            }
            perturb = slots.into_values().collect();
        }

        let mut node_bounds =
            vec![self.nodes.as_ref().map(|e| e.default).unwrap_or(default_node_bounds()); m_max];
        if let Some(nodes) = &self.nodes {
            for ov in &nodes.per_state {
                if ov.state >= m_max {
                    return Err(ConfigError::Schema(format!(
                        "node bound state {} outside 0..{m_max}",
                        ov.state
                    )));
                }
                node_bounds[ov.state] = ov.bounds;
            }
        }

        Ok(DesignSpec {
            n,
            t_end: self.t_end,
            dt_bounds,
            dt_initial,
            perturb,
            perturb_targets,
            y_i_bounds: self.y_i.bounds.clone(),
            y_i_initial: self.y_i.initial.clone(),
            node_bounds,
            gates: self.gates,
            use_perturb_gate: self.use_perturb_gate,
            symmetrized: self.symmetrized,
        })
    }
}

/// Load and resolve a run configuration from a file.
pub fn load_config(
    path: impl AsRef<Path>,
) -> Result<(HypothesisSet, DesignSpec, OuterConfig, IntegratorConfig), ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
    RunConfig::from_json(&text)?.resolve()
}

/// Apply one dotted-path override (`outer.homotopy_steps=0`) to a parsed JSON
/// document. The value side is parsed as JSON, falling back to a string.
pub fn apply_override(doc: &mut serde_json::Value, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(assignment.to_string()))?;
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| ConfigError::OverridePath(path.to_string()))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(ConfigError::OverridePath(path.to_string()));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| ConfigError::OverridePath(path.to_string()))?;
    }
    Err(ConfigError::BadOverride(assignment.to_string()))
}
