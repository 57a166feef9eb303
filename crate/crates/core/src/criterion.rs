//! The smooth KL discrimination objective: tanh switching gates, the
//! per-time-point Gaussian KL term, the full criterion over a measurement
//! grid, and its symmetrized variant. Everything here is a pure function;
//! partial derivatives are provided for the optimization layers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum CriterionError {
    #[error("non-positive standard deviation in KL term")]
    NonPositiveVariance,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

/// Parameters of the two tanh switching functions. `b1` is the spacing below
/// which a measurement is switched off (the smooth stand-in for the minimal
/// spacing), `b2` the perturbation magnitude above which it is; `a1`/`a2` set
/// the width of the transition regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchingParams {
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
}

impl SwitchingParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.a1 > 0.0) || !(self.a2 > 0.0) {
            return Err(format!("gate widths must be positive: a1={}, a2={}", self.a1, self.a2));
        }
        if !self.b1.is_finite() || !self.b2.is_finite() {
            return Err("gate centers must be finite".into());
        }
        Ok(())
    }
}

/// Measurement gate: (tanh(6(dt - b1)/a1) + 1)/2, strictly increasing in dt,
/// 1/2 at dt = b1.
pub fn gate_measure(dt: f64, sp: &SwitchingParams) -> f64 {
    0.5 * ((6.0 * (dt - sp.b1) / sp.a1).tanh() + 1.0)
}

/// Measurement gate value and derivative with respect to dt.
pub fn gate_measure_deriv(dt: f64, sp: &SwitchingParams) -> (f64, f64) {
    let u = 6.0 * (dt - sp.b1) / sp.a1;
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    (0.5 * (t + 1.0), 3.0 / sp.a1 * sech2)
}

/// Perturbation gate: (tanh(-6(c - b2)/a2) + 1)/2, strictly decreasing in c,
/// 1/2 at c = b2.
pub fn gate_perturb(c: f64, sp: &SwitchingParams) -> f64 {
    0.5 * ((-6.0 * (c - sp.b2) / sp.a2).tanh() + 1.0)
}

/// Perturbation gate value and derivative with respect to c.
pub fn gate_perturb_deriv(c: f64, sp: &SwitchingParams) -> (f64, f64) {
    let u = -6.0 * (c - sp.b2) / sp.a2;
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    (0.5 * (t + 1.0), -3.0 / sp.a2 * sech2)
}

/// Input of one per-time-point KL term: expected observations and standard
/// deviations of both models, plus the combined gate factor.
#[derive(Debug, Clone)]
pub struct KlTermInput<'a> {
    pub o1: &'a [f64],
    pub o2: &'a [f64],
    pub v1: &'a [f64],
    pub v2: &'a [f64],
    pub gate: f64,
}

/// Gated KL term: gate * [ (1/2) sum_k ((v2_k^2 + (o2_k-o1_k)^2)/v1_k^2
/// - 2 ln(v2_k/v1_k)) - o/2 ]. This is the KL divergence of N(o2, v2^2)
/// against N(o1, v1^2) with independent components.
pub fn kl_term(input: &KlTermInput) -> Result<f64, CriterionError> {
    if input.o1.len() != input.o2.len()
        || input.o1.len() != input.v1.len()
        || input.o1.len() != input.v2.len()
    {
        return Err(CriterionError::LengthMismatch(format!(
            "o1={}, o2={}, v1={}, v2={}",
            input.o1.len(),
            input.o2.len(),
            input.v1.len(),
            input.v2.len()
        )));
    }
    Ok(input.gate * kl_raw(input.o1, input.o2, input.v1, input.v2)?)
}

/// Ungated KL sum over observables.
pub fn kl_raw(o1: &[f64], o2: &[f64], v1: &[f64], v2: &[f64]) -> Result<f64, CriterionError> {
    let o = o1.len() as f64;
    let mut s = 0.0;
    for k in 0..o1.len() {
        if !(v1[k] > 0.0) || !(v2[k] > 0.0) {
            return Err(CriterionError::NonPositiveVariance);
        }
        let d = o2[k] - o1[k];
        s += (v2[k] * v2[k] + d * d) / (v1[k] * v1[k]) - 2.0 * (v2[k] / v1[k]).ln();
    }
    Ok(0.5 * (s - o))
}

/// Value and partial derivatives of the ungated KL sum.
#[derive(Debug, Clone)]
pub struct KlRawPartials {
    pub value: f64,
    pub d_o1: Vec<f64>,
    pub d_o2: Vec<f64>,
    pub d_v1: Vec<f64>,
    pub d_v2: Vec<f64>,
}

pub fn kl_raw_partials(
    o1: &[f64],
    o2: &[f64],
    v1: &[f64],
    v2: &[f64],
) -> Result<KlRawPartials, CriterionError> {
    let n = o1.len();
    let mut p = KlRawPartials {
        value: kl_raw(o1, o2, v1, v2)?,
        d_o1: vec![0.0; n],
        d_o2: vec![0.0; n],
        d_v1: vec![0.0; n],
        d_v2: vec![0.0; n],
    };
    for k in 0..n {
        let d = o2[k] - o1[k];
        let v1sq = v1[k] * v1[k];
        p.d_o1[k] = -d / v1sq;
        p.d_o2[k] = d / v1sq;
        p.d_v1[k] = (v1sq - v2[k] * v2[k] - d * d) / (v1sq * v1[k]);
        p.d_v2[k] = v2[k] / v1sq - 1.0 / v2[k];
    }
    Ok(p)
}

/// Node data for the full criterion: per measurement point, observations and
/// standard deviations of both models. Lengths are the number of nodes `n`.
#[derive(Debug, Clone)]
pub struct CriterionInput<'a> {
    /// Expected observations of the null-side model at each node, each of
    /// shared dimension `o`.
    pub obs1: &'a [Vec<f64>],
    pub obs2: &'a [Vec<f64>],
    pub sd1: &'a [Vec<f64>],
    pub sd2: &'a [Vec<f64>],
    /// Spacings dt_i, length n.
    pub dt: &'a [f64],
    /// Perturbation gate arguments |c_i| (max-norm), length n-1; the final
    /// node always uses c_n = 0.
    pub c_norms: &'a [f64],
    pub sp: &'a SwitchingParams,
    pub use_perturb_gate: bool,
}

impl CriterionInput<'_> {
    fn check(&self) -> Result<(), CriterionError> {
        let n = self.dt.len();
        if self.obs1.len() != n || self.obs2.len() != n || self.sd1.len() != n || self.sd2.len() != n
        {
            return Err(CriterionError::LengthMismatch(format!(
                "nodes: obs1={}, obs2={}, sd1={}, sd2={}, dt={}",
                self.obs1.len(),
                self.obs2.len(),
                self.sd1.len(),
                self.sd2.len(),
                n
            )));
        }
        if n > 0 && self.c_norms.len() != n - 1 {
            return Err(CriterionError::LengthMismatch(format!(
                "c_norms has {} entries for {} nodes",
                self.c_norms.len(),
                n
            )));
        }
        Ok(())
    }

    fn perturb_gate_at(&self, i: usize) -> f64 {
        if !self.use_perturb_gate {
            return 1.0;
        }
        let c = if i + 1 < self.dt.len() { self.c_norms[i] } else { 0.0 };
        gate_perturb(c, self.sp)
    }
}

/// The full discrimination criterion: sum over nodes of
/// gate_measure(dt_i) * gate_perturb(|c_i|) * kl_raw_i.
pub fn criterion(input: &CriterionInput) -> Result<f64, CriterionError> {
    input.check()?;
    let mut total = 0.0;
    for i in 0..input.dt.len() {
        let g_m = gate_measure(input.dt[i], input.sp);
        let g_p = input.perturb_gate_at(i);
        let kl = kl_raw(&input.obs1[i], &input.obs2[i], &input.sd1[i], &input.sd2[i])?;
        total += g_m * g_p * kl;
    }
    Ok(total)
}

/// Symmetrized criterion: the mean of the criterion and the criterion with
/// the model roles swapped.
pub fn criterion_symmetrized(input: &CriterionInput) -> Result<f64, CriterionError> {
    let fwd = criterion(input)?;
    let swapped = CriterionInput {
        obs1: input.obs2,
        obs2: input.obs1,
        sd1: input.sd2,
        sd2: input.sd1,
        ..input.clone()
    };
    let bwd = criterion(&swapped)?;
    Ok(0.5 * (fwd + bwd))
}

/// Per-node pieces needed to assemble criterion gradients by chain rule.
#[derive(Debug, Clone)]
pub struct CriterionNodeGrad {
    /// d(total)/d(obs1_i[k]) holding gates fixed.
    pub d_o1: Vec<f64>,
    pub d_o2: Vec<f64>,
    /// d(total)/d(sd1_i[k]) — nonzero only for state-dependent error models.
    pub d_v1: Vec<f64>,
    pub d_v2: Vec<f64>,
    /// d(total)/d(dt_i) through the measurement gate.
    pub d_dt: f64,
    /// d(total)/d(c_norm_i) through the perturbation gate (0 at the last node
    /// and when the gate is disabled).
    pub d_cnorm: f64,
}

/// Criterion value together with all per-node partial derivatives.
///
/// `symmetrized` averages the swapped-role value and partials.
pub fn criterion_with_partials(
    input: &CriterionInput,
    symmetrized: bool,
) -> Result<(f64, Vec<CriterionNodeGrad>), CriterionError> {
    input.check()?;
    let n = input.dt.len();
    let o = if n > 0 { input.obs1[0].len() } else { 0 };
    let mut grads = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let (g_m, dg_m) = gate_measure_deriv(input.dt[i], input.sp);
        let (g_p, dg_p) = if !input.use_perturb_gate {
            (1.0, 0.0)
        } else if i + 1 < n {
            gate_perturb_deriv(input.c_norms[i], input.sp)
        } else {
            (gate_perturb(0.0, input.sp), 0.0)
        };
        let p12 = kl_raw_partials(&input.obs1[i], &input.obs2[i], &input.sd1[i], &input.sd2[i])?;
        let (kl, mut d_o1, mut d_o2, mut d_v1, mut d_v2) =
            (p12.value, p12.d_o1, p12.d_o2, p12.d_v1, p12.d_v2);
        let kl = if symmetrized {
            let p21 =
                kl_raw_partials(&input.obs2[i], &input.obs1[i], &input.sd2[i], &input.sd1[i])?;
            for k in 0..o {
                d_o1[k] = 0.5 * (d_o1[k] + p21.d_o2[k]);
                d_o2[k] = 0.5 * (d_o2[k] + p21.d_o1[k]);
                d_v1[k] = 0.5 * (d_v1[k] + p21.d_v2[k]);
                d_v2[k] = 0.5 * (d_v2[k] + p21.d_v1[k]);
            }
            0.5 * (kl + p21.value)
        } else {
            kl
        };
        let g = g_m * g_p;
        total += g * kl;
        for v in d_o1.iter_mut().chain(&mut d_o2).chain(&mut d_v1).chain(&mut d_v2) {
            *v *= g;
        }
        grads.push(CriterionNodeGrad {
            d_o1,
            d_o2,
            d_v1,
            d_v2,
            d_dt: dg_m * g_p * kl,
            d_cnorm: g_m * dg_p * kl,
        });
    }
    Ok((total, grads))
}

/// Max-norm of a perturbation vector and the index realizing it; used to gate
/// vector perturbations on their largest component.
pub fn cnorm_and_argmax(c: &[f64]) -> (f64, Option<usize>) {
    let mut best = 0.0;
    let mut arg = None;
    for (j, v) in c.iter().enumerate() {
        if v.abs() > best {
            best = v.abs();
            arg = Some(j);
        }
    }
    (best, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SP: SwitchingParams = SwitchingParams { a1: 20.0, b1: 10.0, a2: 0.05, b2: 0.025 };

    #[test]
    fn gate_measure_values() {
        // at dt = b1 the gate is exactly 1/2
        assert_eq!(gate_measure(10.0, &SP), 0.5);
        // dt = 0: (1 + tanh(-3))/2
        let expect = 0.5 * (1.0 + (-3.0f64).tanh());
        assert!((gate_measure(0.0, &SP) - expect).abs() < 1e-15);
        assert!((expect - 2.472623e-3).abs() < 1e-9);
        // saturation
        assert!((gate_measure(1e6, &SP) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_perturb_values() {
        assert_eq!(gate_perturb(0.025, &SP), 0.5);
        let expect = 0.5 * (1.0 + (3.0f64).tanh());
        assert!((gate_perturb(0.0, &SP) - expect).abs() < 1e-15);
        assert!((expect - 0.9975274).abs() < 1e-7);
        assert!(gate_perturb(1e6, &SP) < 1e-12);
    }

    #[test]
    fn gate_derivatives_match_fd() {
        for x in [0.0, 0.01, 0.025, 5.0, 10.0, 17.3] {
            let h = 1e-6;
            let (_, dm) = gate_measure_deriv(x, &SP);
            let fd = (gate_measure(x + h, &SP) - gate_measure(x - h, &SP)) / (2.0 * h);
            assert!((dm - fd).abs() < 1e-7 * (1.0 + fd.abs()));
            let (_, dp) = gate_perturb_deriv(x, &SP);
            let fd = (gate_perturb(x + h, &SP) - gate_perturb(x - h, &SP)) / (2.0 * h);
            assert!((dp - fd).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn kl_term_known_values() {
        // identical distributions
        let z = kl_term(&KlTermInput {
            o1: &[1.0, 2.0],
            o2: &[1.0, 2.0],
            v1: &[0.5, 2.0],
            v2: &[0.5, 2.0],
            gate: 1.0,
        })
        .unwrap();
        assert!(z.abs() < 1e-15);
        // o=1, equal unit variances, distance 2 -> d^2/2 = 2
        let v = kl_term(&KlTermInput { o1: &[0.0], o2: &[2.0], v1: &[1.0], v2: &[1.0], gate: 1.0 })
            .unwrap();
        assert!((v - 2.0).abs() < 1e-14);
        // o=1, v1=1, v2=2, same mean -> 1.5 - ln 2
        let v = kl_term(&KlTermInput { o1: &[3.0], o2: &[3.0], v1: &[1.0], v2: &[2.0], gate: 1.0 })
            .unwrap();
        assert!((v - (1.5 - (2.0f64).ln())).abs() < 1e-14);
        assert!((v - 0.8068528).abs() < 1e-7);
    }

    #[test]
    fn kl_term_rejects_bad_variance() {
        let r = kl_term(&KlTermInput { o1: &[0.0], o2: &[0.0], v1: &[0.0], v2: &[1.0], gate: 1.0 });
        assert!(matches!(r, Err(CriterionError::NonPositiveVariance)));
    }

    #[test]
    fn kl_nonnegative_random() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..10_000 {
            let o = rng.random_range(1..4);
            let o1: Vec<f64> = (0..o).map(|_| rng.random_range(-5.0..5.0)).collect();
            let o2: Vec<f64> = (0..o).map(|_| rng.random_range(-5.0..5.0)).collect();
            let v1: Vec<f64> = (0..o).map(|_| rng.random_range(0.05..4.0)).collect();
            let v2: Vec<f64> = (0..o).map(|_| rng.random_range(0.05..4.0)).collect();
            let v = kl_raw(&o1, &o2, &v1, &v2).unwrap();
            assert!(v >= -1e-12, "KL must be nonnegative, got {v}");
        }
    }

    #[test]
    fn kl_partials_match_fd() {
        let o1 = [0.3, -1.2];
        let o2 = [0.9, 0.4];
        let v1 = [0.7, 1.3];
        let v2 = [1.1, 0.6];
        let p = kl_raw_partials(&o1, &o2, &v1, &v2).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut a = o1;
            a[k] += h;
            let up = kl_raw(&a, &o2, &v1, &v2).unwrap();
            a[k] = o1[k] - h;
            let dn = kl_raw(&a, &o2, &v1, &v2).unwrap();
            assert!((p.d_o1[k] - (up - dn) / (2.0 * h)).abs() < 1e-8);
            let mut b = v2;
            b[k] += h;
            let up = kl_raw(&o1, &o2, &v1, &b).unwrap();
            b[k] = v2[k] - h;
            let dn = kl_raw(&o1, &o2, &v1, &b).unwrap();
            assert!((p.d_v2[k] - (up - dn) / (2.0 * h)).abs() < 1e-8);
        }
    }

    #[test]
    fn symmetrized_equals_plain_for_equal_variances() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..100 {
            let n = 4;
            let obs1: Vec<Vec<f64>> =
                (0..n).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let obs2: Vec<Vec<f64>> =
                (0..n).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let sd: Vec<Vec<f64>> = (0..n).map(|_| vec![1.3, 1.3]).collect();
            let dt: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..30.0)).collect();
            let c: Vec<f64> = (0..n - 1).map(|_| rng.random_range(0.0..0.1)).collect();
            let input = CriterionInput {
                obs1: &obs1,
                obs2: &obs2,
                sd1: &sd,
                sd2: &sd,
                dt: &dt,
                c_norms: &c,
                sp: &SP,
                use_perturb_gate: true,
            };
            let plain = criterion(&input).unwrap();
            let sym = criterion_symmetrized(&input).unwrap();
            assert!((plain - sym).abs() < 1e-12 * (1.0 + plain.abs()));
        }
    }

    #[test]
    fn gates_monotone() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(11);
        // random sorted grids spanning the transition regions; beyond them
        // tanh saturates to identical f64 values
        let mut xs: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..45.0)).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for w in xs.windows(2) {
            assert!(gate_measure(w[1], &SP) > gate_measure(w[0], &SP));
        }
        let mut xs: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..0.1)).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for w in xs.windows(2) {
            assert!(gate_perturb(w[1], &SP) < gate_perturb(w[0], &SP));
        }
    }
}
