//! Design vectors and design-space specifications: what is optimized, within
//! which bounds, and from which starting point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criterion::SwitchingParams;

pub const UNBOUNDED: f64 = 1e19;

#[derive(Debug, Clone, Error)]
pub enum DesignError {
    #[error("design needs at least 2 measurement points, got {0}")]
    TooFewPoints(usize),
    #[error("T_end must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("initial spacings sum to {sum}, horizon is {t_end}")]
    InfeasibleInitialDt { sum: f64, t_end: f64 },
    #[error("perturbation index {idx} outside 1..={max} (c_n is fixed to zero)")]
    BadPerturbIndex { idx: usize, max: usize },
    #[error("perturbation target state {state} outside 0..{m_max}")]
    BadPerturbTarget { state: usize, m_max: usize },
    #[error("bounds [{lo}, {hi}] are empty or not finite where required ({what})")]
    BadBounds { what: String, lo: f64, hi: f64 },
    #[error("{what} has {got} entries, expected {want}")]
    WrongLength { what: String, got: usize, want: usize },
    #[error("initial value {value} outside bounds [{lo}, {hi}] ({what})")]
    InitialOutsideBounds { what: String, value: f64, lo: f64, hi: f64 },
    #[error("invalid switching parameters: {0}")]
    BadGates(String),
}

/// One perturbation slot: species quantities may be added right after
/// measurement `idx` (1-based, strictly before the final point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSlot {
    pub idx: usize,
    /// Componentwise bounds for the targeted states.
    pub bounds: [f64; 2],
    /// Initial value for each targeted component.
    pub initial: f64,
}

/// Fully resolved design space for one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    /// Number of candidate measurement points n.
    pub n: usize,
    pub t_end: f64,
    /// Per-index spacing bounds, length n.
    pub dt_bounds: Vec<[f64; 2]>,
    /// Initial spacings, length n, summing to t_end.
    pub dt_initial: Vec<f64>,
    /// Perturbation slots, strictly increasing indices in 1..=n-1.
    pub perturb: Vec<PerturbSlot>,
    /// States (indices < m_max) that may receive additions.
    pub perturb_targets: Vec<usize>,
    /// Initial-state bounds per state, length m_max.
    pub y_i_bounds: Vec<[f64; 2]>,
    pub y_i_initial: Vec<f64>,
    /// Shooting-node bounds per state, length m_max.
    pub node_bounds: Vec<[f64; 2]>,
    pub gates: SwitchingParams,
    pub use_perturb_gate: bool,
    pub symmetrized: bool,
}

impl DesignSpec {
    /// An equispaced design with everything else at library defaults; used by
    /// tests and as a base for builders.
    pub fn equispaced(n: usize, t_end: f64, m_max: usize, gates: SwitchingParams) -> Self {
        Self {
            n,
            t_end,
            dt_bounds: vec![[1e-7, UNBOUNDED]; n],
            dt_initial: vec![t_end / n as f64; n],
            perturb: Vec::new(),
            perturb_targets: Vec::new(),
            y_i_bounds: vec![[1e-7, UNBOUNDED]; m_max],
            y_i_initial: vec![1.0; m_max],
            node_bounds: vec![[-UNBOUNDED, UNBOUNDED]; m_max],
            gates,
            use_perturb_gate: true,
            symmetrized: false,
        }
    }

    pub fn validate(&self, m_max: usize) -> Result<(), DesignError> {
        if self.n < 2 {
            return Err(DesignError::TooFewPoints(self.n));
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(DesignError::BadHorizon(self.t_end));
        }
        self.gates.validate().map_err(DesignError::BadGates)?;
        let check_len = |what: &str, got: usize, want: usize| {
            if got != want {
                Err(DesignError::WrongLength { what: what.into(), got, want })
            } else {
                Ok(())
            }
        };
        check_len("dt_bounds", self.dt_bounds.len(), self.n)?;
        check_len("dt_initial", self.dt_initial.len(), self.n)?;
        check_len("yI bounds", self.y_i_bounds.len(), m_max)?;
        check_len("yI initial", self.y_i_initial.len(), m_max)?;
        check_len("node bounds", self.node_bounds.len(), m_max)?;
        for (what, bounds, initial) in [
            ("dt", &self.dt_bounds, &self.dt_initial),
            ("yI", &self.y_i_bounds, &self.y_i_initial),
        ] {
            for ([lo, hi], v) in bounds.iter().zip(initial.iter()) {
                if !(lo <= hi) {
                    return Err(DesignError::BadBounds { what: what.into(), lo: *lo, hi: *hi });
                }
                if *v < *lo || *v > *hi {
                    return Err(DesignError::InitialOutsideBounds {
                        what: what.into(),
                        value: *v,
                        lo: *lo,
                        hi: *hi,
                    });
                }
            }
        }
        for [lo, hi] in &self.node_bounds {
            if !(lo <= hi) {
                return Err(DesignError::BadBounds { what: "node".into(), lo: *lo, hi: *hi });
            }
        }
        let sum: f64 = self.dt_initial.iter().sum();
        if (sum - self.t_end).abs() > 1e-8 * self.t_end.max(1.0) {
            return Err(DesignError::InfeasibleInitialDt { sum, t_end: self.t_end });
        }
        let mut last = 0usize;
        for p in &self.perturb {
            if p.idx == 0 || p.idx > self.n - 1 {
                return Err(DesignError::BadPerturbIndex { idx: p.idx, max: self.n - 1 });
            }
            if p.idx <= last && last != 0 {
                return Err(DesignError::BadPerturbIndex { idx: p.idx, max: self.n - 1 });
            }
            last = p.idx;
            if !(p.bounds[0] <= p.bounds[1]) {
                return Err(DesignError::BadBounds {
                    what: format!("c_{}", p.idx),
                    lo: p.bounds[0],
                    hi: p.bounds[1],
                });
            }
            if p.initial < p.bounds[0] || p.initial > p.bounds[1] {
                return Err(DesignError::InitialOutsideBounds {
                    what: format!("c_{}", p.idx),
                    value: p.initial,
                    lo: p.bounds[0],
                    hi: p.bounds[1],
                });
            }
        }
        if !self.perturb.is_empty() && self.perturb_targets.is_empty() {
            return Err(DesignError::BadPerturbTarget { state: 0, m_max });
        }
        for &s in &self.perturb_targets {
            if s >= m_max {
                return Err(DesignError::BadPerturbTarget { state: s, m_max });
            }
        }
        Ok(())
    }

    /// Free perturbation variables in layout order: (slot index into
    /// `perturb`, state index).
    pub fn free_c_layout(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (slot, _) in self.perturb.iter().enumerate() {
            for &state in &self.perturb_targets {
                out.push((slot, state));
            }
        }
        out
    }

    /// Number of free design variables: y_I + dt + free c components.
    pub fn n_design_vars(&self, m_max: usize) -> usize {
        m_max + self.n + self.free_c_layout().len()
    }

    /// The initial design vector.
    pub fn initial_design(&self, m_max: usize) -> DesignVector {
        let mut c = DMatrix::zeros(m_max, self.n.saturating_sub(1));
        for p in &self.perturb {
            for &state in &self.perturb_targets {
                c[(state, p.idx - 1)] = p.initial;
            }
        }
        DesignVector {
            y_i: DVector::from_column_slice(&self.y_i_initial),
            dt: DVector::from_column_slice(&self.dt_initial),
            c,
        }
    }
}

/// A concrete design: initial concentrations, measurement spacings, and the
/// full perturbation matrix (column i-1 holds c_i; entries outside the free
/// layout are zero).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignVector {
    pub y_i: DVector<f64>,
    pub dt: DVector<f64>,
    /// m_max x (n-1); c_n is fixed to zero and has no column.
    pub c: DMatrix<f64>,
}

impl DesignVector {
    pub fn n_points(&self) -> usize {
        self.dt.len()
    }

    /// Max-norm distance between two designs over all design variables.
    pub fn linf_distance(&self, other: &DesignVector) -> f64 {
        let mut d: f64 = 0.0;
        for (a, b) in self.y_i.iter().zip(other.y_i.iter()) {
            d = d.max((a - b).abs());
        }
        for (a, b) in self.dt.iter().zip(other.dt.iter()) {
            d = d.max((a - b).abs());
        }
        for (a, b) in self.c.iter().zip(other.c.iter()) {
            d = d.max((a - b).abs());
        }
        d
    }

    /// Perturbation vector c_i (1-based i in 1..=n-1) as a column view.
    pub fn c_at(&self, i: usize) -> nalgebra::DVectorView<'_, f64> {
        self.c.column(i - 1)
    }
}

/// Serialized form of a design (for design.json files and traces).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DesignFile {
    pub y_i: Vec<f64>,
    pub dt: Vec<f64>,
    /// Column-major m_max x (n-1) perturbation matrix, one inner vec per
    /// perturbation column c_1..c_{n-1}.
    pub c: Vec<Vec<f64>>,
}

impl From<&DesignVector> for DesignFile {
    fn from(d: &DesignVector) -> Self {
        DesignFile {
            y_i: d.y_i.as_slice().to_vec(),
            dt: d.dt.as_slice().to_vec(),
            c: (0..d.c.ncols()).map(|j| d.c.column(j).as_slice().to_vec()).collect(),
        }
    }
}

impl DesignFile {
    pub fn to_design(&self) -> Result<DesignVector, DesignError> {
        let m = self.y_i.len();
        let n = self.dt.len();
        if self.c.len() + 1 != n {
            return Err(DesignError::WrongLength {
                what: "c columns".into(),
                got: self.c.len(),
                want: n - 1,
            });
        }
        let mut c = DMatrix::zeros(m, n - 1);
        for (j, col) in self.c.iter().enumerate() {
            if col.len() != m {
                return Err(DesignError::WrongLength {
                    what: format!("c[{j}]"),
                    got: col.len(),
                    want: m,
                });
            }
            for (i, v) in col.iter().enumerate() {
                c[(i, j)] = *v;
            }
        }
        Ok(DesignVector {
            y_i: DVector::from_column_slice(&self.y_i),
            dt: DVector::from_column_slice(&self.dt),
            c,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gates() -> SwitchingParams {
        SwitchingParams { a1: 20.0, b1: 10.0, a2: 0.05, b2: 0.025 }
    }

    #[test]
    fn equispaced_is_valid() {
        let mut d = DesignSpec::equispaced(25, 400.0, 2, gates());
        d.y_i_initial = vec![15.0, 2.0];
        d.validate(2).unwrap();
        let x = d.initial_design(2);
        assert_eq!(x.dt.len(), 25);
        assert!((x.dt.iter().sum::<f64>() - 400.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_dt_sum_rejected() {
        let mut d = DesignSpec::equispaced(10, 100.0, 2, gates());
        d.dt_initial[3] += 1.0;
        assert!(matches!(d.validate(2), Err(DesignError::InfeasibleInitialDt { .. })));
    }

    #[test]
    fn perturb_index_validation() {
        let mut d = DesignSpec::equispaced(10, 100.0, 2, gates());
        d.perturb = vec![PerturbSlot { idx: 10, bounds: [0.0, 1.0], initial: 0.5 }];
        d.perturb_targets = vec![0];
        assert!(matches!(d.validate(2), Err(DesignError::BadPerturbIndex { .. })));
        d.perturb = vec![PerturbSlot { idx: 9, bounds: [0.0, 1.0], initial: 0.5 }];
        d.validate(2).unwrap();
    }

    #[test]
    fn design_file_roundtrip() {
        let mut spec = DesignSpec::equispaced(5, 10.0, 2, gates());
        spec.perturb = vec![PerturbSlot { idx: 2, bounds: [0.0, 2.0], initial: 1.0 }];
        spec.perturb_targets = vec![0, 1];
        let d = spec.initial_design(2);
        let f = DesignFile::from(&d);
        let d2 = f.to_design().unwrap();
        assert_eq!(d, d2);
        assert_eq!(d.c_at(2)[0], 1.0);
        assert_eq!(d.c_at(1)[0], 0.0);
    }
}
