//! Candidate models, parameter boxes, observables, error models and the two
//! built-in benchmark problems.

mod families;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use families::ModelFamily;

#[derive(Debug, Clone, Error)]
pub enum ModelError {
    #[error("unknown model key '{0}'")]
    UnknownKey(String),
    #[error("model '{model}': unknown parameter '{param}'")]
    UnknownParam { model: String, param: String },
    #[error("model '{model}': parameter '{param}' is both fixed and free")]
    DuplicateParam { model: String, param: String },
    #[error("model '{model}': parameter '{param}' has no value (not fixed, not free)")]
    MissingParam { model: String, param: String },
    #[error("model '{model}': empty interval [{lo}, {hi}] for '{param}'")]
    EmptyInterval { model: String, param: String, lo: f64, hi: f64 },
    #[error("model '{model}': non-finite bound for '{param}'")]
    NonFiniteBound { model: String, param: String },
    #[error("model '{model}': observable index {idx} out of range (dim {dim})")]
    BadObservable { model: String, idx: usize, dim: usize },
    #[error("observable dimension mismatch: '{a}' observes {da}, '{b}' observes {db}")]
    ObservableMismatch { a: String, da: usize, b: String, db: usize },
    #[error("hypothesis set needs at least one null and one alternative model")]
    EmptyHypothesis,
    #[error("error model produced a non-positive standard deviation")]
    NonPositiveVariance,
    #[error("error model '{model}': {reason}")]
    BadErrorModel { model: String, reason: String },
}

/// Observation error model. Variances are diagonal; the standard deviation of
/// observable k may depend on the expected observation, the time point and
/// the model parameters.
#[derive(Clone)]
pub enum ErrorModel {
    /// One sigma for every observable.
    HomoscedasticEqual { sigma: f64 },
    /// One sigma per observable component.
    PerObservableConstant { sigmas: Vec<f64> },
    /// Fully state-dependent standard deviations `v(O, t, theta)`.
    StateDependent(Arc<dyn Fn(&[f64], f64, &[f64]) -> Vec<f64> + Send + Sync>),
}

impl fmt::Debug for ErrorModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorModel::HomoscedasticEqual { sigma } => {
                write!(f, "HomoscedasticEqual {{ sigma: {sigma} }}")
            }
            ErrorModel::PerObservableConstant { sigmas } => {
                write!(f, "PerObservableConstant {{ sigmas: {sigmas:?} }}")
            }
            ErrorModel::StateDependent(_) => write!(f, "StateDependent(..)"),
        }
    }
}

impl ErrorModel {
    /// Standard deviations at one measurement. Errors on non-positive output.
    pub fn std_devs(
        &self,
        obs: &[f64],
        t: f64,
        theta: &[f64],
        out: &mut [f64],
    ) -> Result<(), ModelError> {
        match self {
            ErrorModel::HomoscedasticEqual { sigma } => {
                if !(*sigma > 0.0) {
                    return Err(ModelError::NonPositiveVariance);
                }
                out.fill(*sigma);
            }
            ErrorModel::PerObservableConstant { sigmas } => {
                for (o, s) in out.iter_mut().zip(sigmas) {
                    if !(*s > 0.0) {
                        return Err(ModelError::NonPositiveVariance);
                    }
                    *o = *s;
                }
            }
            ErrorModel::StateDependent(f) => {
                let v = f(obs, t, theta);
                for (o, s) in out.iter_mut().zip(&v) {
                    if !(*s > 0.0) || !s.is_finite() {
                        return Err(ModelError::NonPositiveVariance);
                    }
                    *o = *s;
                }
            }
        }
        Ok(())
    }

    /// True when the standard deviations do not depend on the observation,
    /// which lets gradient code skip the dv/dO chain term.
    pub fn is_constant(&self) -> bool {
        !matches!(self, ErrorModel::StateDependent(_))
    }
}

/// One candidate ODE model: a compiled family plus fixed parameter values,
/// free-parameter box, observable selection and error model.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub family: ModelFamily,
    pub fixed: BTreeMap<String, f64>,
    /// Free parameters in family parameter order: (name, [lo, hi]).
    pub free: Vec<(String, [f64; 2])>,
    /// Observed state indices (shared dimension o across a problem).
    pub observable: Vec<usize>,
    pub error: ErrorModel,
    /// Full parameter vector with fixed values filled in and free slots at
    /// their box midpoint (callers overwrite free slots via `resolve_theta`).
    theta_template: Vec<f64>,
    /// Full-parameter index of each free parameter.
    free_idx: Vec<usize>,
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        family: ModelFamily,
        fixed: BTreeMap<String, f64>,
        free: Vec<(String, [f64; 2])>,
        observable: Vec<usize>,
        error: ErrorModel,
    ) -> Result<Self, ModelError> {
        let name = name.into();
        let pnames = family.param_names();
        for k in fixed.keys() {
            if !pnames.contains(&k.as_str()) {
                return Err(ModelError::UnknownParam { model: name, param: k.clone() });
            }
        }
        for (k, [lo, hi]) in &free {
            if !pnames.contains(&k.as_str()) {
                return Err(ModelError::UnknownParam { model: name, param: k.clone() });
            }
            if fixed.contains_key(k) {
                return Err(ModelError::DuplicateParam { model: name, param: k.clone() });
            }
            if !lo.is_finite() || !hi.is_finite() {
                return Err(ModelError::NonFiniteBound { model: name, param: k.clone() });
            }
            if lo > hi {
                return Err(ModelError::EmptyInterval {
                    model: name,
                    param: k.clone(),
                    lo: *lo,
                    hi: *hi,
                });
            }
        }
        // sort free params into family order
        let mut free = free;
        free.sort_by_key(|(k, _)| pnames.iter().position(|p| p == k).unwrap());
        let mut theta_template = Vec::with_capacity(pnames.len());
        let mut free_idx = Vec::new();
        for (i, p) in pnames.iter().enumerate() {
            if let Some(v) = fixed.get(*p) {
                theta_template.push(*v);
            } else if let Some((_, [lo, hi])) = free.iter().find(|(k, _)| k == p) {
                free_idx.push(i);
                theta_template.push(0.5 * (lo + hi));
            } else {
                return Err(ModelError::MissingParam { model: name, param: p.to_string() });
            }
        }
        let dim = {
            use crate::integrator::OdeSystem;
            family.dim()
        };
        if observable.is_empty() {
            return Err(ModelError::BadObservable { model: name, idx: 0, dim });
        }
        for &idx in &observable {
            if idx >= dim {
                return Err(ModelError::BadObservable { model: name, idx, dim });
            }
        }
        if let ErrorModel::PerObservableConstant { sigmas } = &error {
            if sigmas.len() != observable.len() {
                return Err(ModelError::BadErrorModel {
                    model: name,
                    reason: format!(
                        "{} sigmas for {} observables",
                        sigmas.len(),
                        observable.len()
                    ),
                });
            }
        }
        Ok(Self { name, family, fixed, free, observable, error, theta_template, free_idx })
    }

    pub fn dim(&self) -> usize {
        use crate::integrator::OdeSystem;
        self.family.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.observable.len()
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    /// Full-parameter index of each free parameter, in free order.
    pub fn free_indices(&self) -> &[usize] {
        &self.free_idx
    }

    /// Build the full parameter vector from free values.
    pub fn resolve_theta(&self, free_vals: &[f64]) -> Vec<f64> {
        assert_eq!(free_vals.len(), self.free_idx.len());
        let mut th = self.theta_template.clone();
        for (slot, v) in self.free_idx.iter().zip(free_vals) {
            th[*slot] = *v;
        }
        th
    }

    /// Box midpoints, the default inner starting point.
    pub fn free_midpoint(&self) -> Vec<f64> {
        self.free.iter().map(|(_, [lo, hi])| 0.5 * (lo + hi)).collect()
    }

    pub fn free_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.free.iter().map(|(_, [lo, _])| *lo).collect(),
            self.free.iter().map(|(_, [_, hi])| *hi).collect(),
        )
    }

    /// Copy the observed components of a state vector into `out`.
    pub fn observe(&self, y: &[f64], out: &mut [f64]) {
        for (o, &idx) in out.iter_mut().zip(&self.observable) {
            *o = y[idx];
        }
    }

    /// The compiled ODE system behind this model.
    pub fn family_sys(&self) -> &dyn crate::integrator::OdeSystem {
        &self.family
    }
}

/// The rival model sets: null hypothesis models versus alternatives, with the
/// shared state dimensions every design vector must use.
#[derive(Debug, Clone)]
pub struct HypothesisSet {
    pub null_models: Vec<ModelSpec>,
    pub alt_models: Vec<ModelSpec>,
    pub m_max: usize,
    pub m_min: usize,
}

impl HypothesisSet {
    pub fn new(null_models: Vec<ModelSpec>, alt_models: Vec<ModelSpec>) -> Result<Self, ModelError> {
        if null_models.is_empty() || alt_models.is_empty() {
            return Err(ModelError::EmptyHypothesis);
        }
        let all = null_models.iter().chain(&alt_models);
        let o = null_models[0].obs_dim();
        for m in all.clone() {
            if m.obs_dim() != o {
                return Err(ModelError::ObservableMismatch {
                    a: null_models[0].name.clone(),
                    da: o,
                    b: m.name.clone(),
                    db: m.obs_dim(),
                });
            }
        }
        let m_max = all.clone().map(|m| m.dim()).max().unwrap();
        let m_min = all.map(|m| m.dim()).min().unwrap();
        Ok(Self { null_models, alt_models, m_max, m_min })
    }

    pub fn obs_dim(&self) -> usize {
        self.null_models[0].obs_dim()
    }

    /// All (null index, alt index) pairs, in deterministic order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r1 in 0..self.null_models.len() {
            for r2 in 0..self.alt_models.len() {
                out.push((r1, r2));
            }
        }
        out
    }

    pub fn pair(&self, p: (usize, usize)) -> (&ModelSpec, &ModelSpec) {
        (&self.null_models[p.0], &self.alt_models[p.1])
    }
}

/// The glycolytic oscillation benchmark: the allosteric cooperative model
/// with known parameters against the Michaelis-Menten variant with a free
/// four-parameter box.
pub fn builtin_glycolysis() -> HypothesisSet {
    let m1 = ModelSpec::new(
        "glycolysis_m1",
        ModelFamily::GlycolysisM1,
        BTreeMap::from([
            ("nu".into(), 0.22),
            ("sigma".into(), 0.92),
            ("q1".into(), 2.01),
            ("ks".into(), 0.11),
            ("L1".into(), 17206.10),
        ]),
        vec![],
        vec![0, 1],
        ErrorModel::HomoscedasticEqual { sigma: 1.0 },
    )
    .expect("builtin glycolysis m1");
    let m2 = ModelSpec::new(
        "glycolysis_m2",
        ModelFamily::GlycolysisM2,
        BTreeMap::from([("nu".into(), 0.22)]),
        vec![
            ("q2".into(), [1e-7, 100.0]),
            ("rs".into(), [1e-7, 100.0]),
            ("mu".into(), [1e-7, 100.0]),
            ("L2".into(), [100.0, 300.0]),
        ],
        vec![0, 1],
        ErrorModel::HomoscedasticEqual { sigma: 1.0 },
    )
    .expect("builtin glycolysis m2");
    HypothesisSet::new(vec![m1], vec![m2]).expect("builtin glycolysis set")
}

/// The Dictyostelium signal-sensing benchmark: both models extended by the
/// constant ligand state S; only k_i2 of model 2 is free. The ligand is not
/// observed, so the discrimination sum runs over (A, I, R*).
pub fn builtin_dicty() -> HypothesisSet {
    let fixed_common = [
        ("k_minus_a".to_string(), 2.0),
        ("k_a".to_string(), 3.0),
        ("k_minus_i".to_string(), 0.1),
        ("k_r".to_string(), 1.0),
        ("k_minus_r".to_string(), 1.0),
        ("R_T".to_string(), 23.0 / 30.0),
    ];
    let mut fixed1: BTreeMap<String, f64> = fixed_common.iter().cloned().collect();
    fixed1.insert("k_i1".into(), 1.0);
    let m1 = ModelSpec::new(
        "dicty_m1",
        ModelFamily::DictyM1,
        fixed1,
        vec![],
        vec![0, 1, 2],
        ErrorModel::HomoscedasticEqual { sigma: 1.0 },
    )
    .expect("builtin dicty m1");
    let fixed2: BTreeMap<String, f64> = fixed_common.iter().cloned().collect();
    let m2 = ModelSpec::new(
        "dicty_m2",
        ModelFamily::DictyM2,
        fixed2,
        vec![("k_i2".into(), [0.0, 2.0])],
        vec![0, 1, 2],
        ErrorModel::HomoscedasticEqual { sigma: 1.0 },
    )
    .expect("builtin dicty m2");
    HypothesisSet::new(vec![m1], vec![m2]).expect("builtin dicty set")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glycolysis_builtin_values() {
        let h = builtin_glycolysis();
        assert_eq!(h.null_models[0].fixed["sigma"], 0.92);
        assert_eq!(h.null_models[0].fixed["q1"], 2.01);
        assert_eq!(h.null_models[0].fixed["ks"], 0.11);
        assert_eq!(h.null_models[0].fixed["L1"], 17206.10);
        let l2 = h.alt_models[0].free.iter().find(|(k, _)| k == "L2").unwrap().1;
        assert_eq!(l2, [100.0, 300.0]);
        assert_eq!(h.m_max, 2);
        assert_eq!(h.m_min, 2);
        assert_eq!(h.obs_dim(), 2);
    }

    #[test]
    fn dicty_builtin_values() {
        let h = builtin_dicty();
        assert_eq!(h.null_models[0].fixed["R_T"], 23.0 / 30.0);
        let ki2 = h.alt_models[0].free.iter().find(|(k, _)| k == "k_i2").unwrap().1;
        assert_eq!(ki2, [0.0, 2.0]);
        assert_eq!(h.null_models[0].dim(), 4);
        assert_eq!(h.alt_models[0].dim(), 4);
        // S excluded from the observable
        assert_eq!(h.obs_dim(), 3);
        assert!(!h.null_models[0].observable.contains(&3));
    }

    #[test]
    fn resolve_theta_orders_free_params() {
        let h = builtin_glycolysis();
        let m2 = &h.alt_models[0];
        // family order: nu, q2, rs, mu, L2
        let th = m2.resolve_theta(&[1.0, 2.0, 3.0, 200.0]);
        assert_eq!(th, vec![0.22, 1.0, 2.0, 3.0, 200.0]);
        assert_eq!(m2.free_indices(), &[1, 2, 3, 4]);
    }

    #[test]
    fn validation_errors() {
        let err = ModelSpec::new(
            "bad",
            ModelFamily::GlycolysisM2,
            BTreeMap::from([("nu".into(), 0.22)]),
            vec![
                ("q2".into(), [1e-7, 100.0]),
                ("rs".into(), [1e-7, 100.0]),
                ("mu".into(), [1e-7, 100.0]),
                ("L2".into(), [300.0, 100.0]),
            ],
            vec![0, 1],
            ErrorModel::HomoscedasticEqual { sigma: 1.0 },
        );
        assert!(matches!(err, Err(ModelError::EmptyInterval { .. })));

        let err = ModelSpec::new(
            "bad",
            ModelFamily::GlycolysisM1,
            BTreeMap::from([
                ("nu".into(), 0.22),
                ("sigma".into(), 0.92),
                ("q1".into(), 2.01),
                ("ks".into(), 0.11),
            ]),
            vec![],
            vec![0, 1],
            ErrorModel::HomoscedasticEqual { sigma: 1.0 },
        );
        assert!(matches!(err, Err(ModelError::MissingParam { .. })));
    }
}
