//! Compiled right-hand-side registry. Configs select models by key and
//! parameterize them; the executable code lives here.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::integrator::OdeSystem;

/// The built-in model families, keyed by name in run configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelFamily {
    /// Glycolytic oscillations, allosteric enzyme with cooperativity and a
    /// linear product sink. States (alpha, gamma).
    GlycolysisM1,
    /// Glycolytic oscillations, no cooperativity, Michaelis-Menten sink.
    /// States (alpha, gamma).
    GlycolysisM2,
    /// Dictyostelium cAMP signal sensing, inhibitor driven by the ligand.
    /// States (A, I, R*, S) with dS/dt = 0.
    DictyM1,
    /// Dictyostelium cAMP signal sensing, inhibitor driven by the activator.
    /// States (A, I, R*, S) with dS/dt = 0.
    DictyM2,
}

impl ModelFamily {
    pub fn key(&self) -> &'static str {
        match self {
            ModelFamily::GlycolysisM1 => "glycolysis_m1",
            ModelFamily::GlycolysisM2 => "glycolysis_m2",
            ModelFamily::DictyM1 => "dicty_m1",
            ModelFamily::DictyM2 => "dicty_m2",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        match key {
            "glycolysis_m1" => Some(ModelFamily::GlycolysisM1),
            "glycolysis_m2" => Some(ModelFamily::GlycolysisM2),
            "dicty_m1" => Some(ModelFamily::DictyM1),
            "dicty_m2" => Some(ModelFamily::DictyM2),
            _ => None,
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            ModelFamily::GlycolysisM1 => &["nu", "sigma", "q1", "ks", "L1"],
            ModelFamily::GlycolysisM2 => &["nu", "q2", "rs", "mu", "L2"],
            ModelFamily::DictyM1 => {
                &["k_minus_a", "k_a", "k_minus_i", "k_i1", "k_r", "k_minus_r", "R_T"]
            }
            ModelFamily::DictyM2 => {
                &["k_minus_a", "k_a", "k_minus_i", "k_i2", "k_r", "k_minus_r", "R_T"]
            }
        }
    }

    pub fn state_names(&self) -> &'static [&'static str] {
        match self {
            ModelFamily::GlycolysisM1 | ModelFamily::GlycolysisM2 => &["alpha", "gamma"],
            ModelFamily::DictyM1 | ModelFamily::DictyM2 => &["A", "I", "Rstar", "S"],
        }
    }

    /// States observed by default: everything for the glycolysis models, the
    /// three kinetic states (excluding the ligand S) for Dictyostelium.
    pub fn default_observable(&self) -> Vec<usize> {
        match self {
            ModelFamily::GlycolysisM1 | ModelFamily::GlycolysisM2 => vec![0, 1],
            ModelFamily::DictyM1 | ModelFamily::DictyM2 => vec![0, 1, 2],
        }
    }
}

/// phi(alpha, gamma) of the cooperative allosteric model and its partials
/// with respect to (alpha, gamma, L1).
#[inline]
fn phi_coop(a: f64, g: f64, l1: f64) -> (f64, f64, f64, f64) {
    let one_a = 1.0 + a;
    let one_g = 1.0 + g;
    let n = a * one_a * one_g * one_g;
    let d = l1 + one_a * one_a * one_g * one_g;
    let n_a = (1.0 + 2.0 * a) * one_g * one_g;
    let d_a = 2.0 * one_a * one_g * one_g;
    let n_g = 2.0 * a * one_a * one_g;
    let d_g = 2.0 * one_a * one_a * one_g;
    let inv_d = 1.0 / d;
    let phi = n * inv_d;
    let phi_a = (n_a - phi * d_a) * inv_d;
    let phi_g = (n_g - phi * d_g) * inv_d;
    let phi_l = -phi * inv_d;
    (phi, phi_a, phi_g, phi_l)
}

/// phi(alpha, gamma) of the non-cooperative model and its partials with
/// respect to (alpha, gamma, L2).
#[inline]
fn phi_plain(a: f64, g: f64, l2: f64) -> (f64, f64, f64, f64) {
    let one_a = 1.0 + a;
    let one_g = 1.0 + g;
    let n = a * one_g;
    let d = l2 + one_a * one_g;
    let inv_d = 1.0 / d;
    let phi = n * inv_d;
    let phi_a = (one_g - phi * one_g) * inv_d;
    let phi_g = (a - phi * one_a) * inv_d;
    let phi_l = -phi * inv_d;
    (phi, phi_a, phi_g, phi_l)
}

impl OdeSystem for ModelFamily {
    fn dim(&self) -> usize {
        match self {
            ModelFamily::GlycolysisM1 | ModelFamily::GlycolysisM2 => 2,
            ModelFamily::DictyM1 | ModelFamily::DictyM2 => 4,
        }
    }

    fn n_params(&self) -> usize {
        self.param_names().len()
    }

    fn rhs(&self, y: &[f64], th: &[f64], dydt: &mut [f64]) {
        match self {
            ModelFamily::GlycolysisM1 => {
                let (nu, sigma, q1, ks, l1) = (th[0], th[1], th[2], th[3], th[4]);
                let (phi, _, _, _) = phi_coop(y[0], y[1], l1);
                dydt[0] = nu - sigma * phi;
                dydt[1] = q1 * sigma * phi - ks * y[1];
            }
            ModelFamily::GlycolysisM2 => {
                let (nu, q2, rs, mu, l2) = (th[0], th[1], th[2], th[3], th[4]);
                let (phi, _, _, _) = phi_plain(y[0], y[1], l2);
                dydt[0] = nu - phi;
                dydt[1] = q2 * phi - rs * y[1] / (mu + y[1]);
            }
            ModelFamily::DictyM1 | ModelFamily::DictyM2 => {
                let (kma, ka, kmi, ki, kr, kmr, rt) =
                    (th[0], th[1], th[2], th[3], th[4], th[5], th[6]);
                let (a, i, r, s) = (y[0], y[1], y[2], y[3]);
                dydt[0] = -kma * a + ka * s;
                dydt[1] = -kmi * i
                    + ki * if matches!(self, ModelFamily::DictyM1) { s } else { a };
                dydt[2] = -(kr * a + kmr * i) * r + kr * rt * a;
                dydt[3] = 0.0;
            }
        }
    }

    fn jac_state(&self, y: &[f64], th: &[f64], jac: &mut DMatrix<f64>) {
        jac.fill(0.0);
        match self {
            ModelFamily::GlycolysisM1 => {
                let (sigma, q1, ks, l1) = (th[1], th[2], th[3], th[4]);
                let (_, phi_a, phi_g, _) = phi_coop(y[0], y[1], l1);
                jac[(0, 0)] = -sigma * phi_a;
                jac[(0, 1)] = -sigma * phi_g;
                jac[(1, 0)] = q1 * sigma * phi_a;
                jac[(1, 1)] = q1 * sigma * phi_g - ks;
            }
            ModelFamily::GlycolysisM2 => {
                let (q2, rs, mu, l2) = (th[1], th[2], th[3], th[4]);
                let (_, phi_a, phi_g, _) = phi_plain(y[0], y[1], l2);
                let den = mu + y[1];
                jac[(0, 0)] = -phi_a;
                jac[(0, 1)] = -phi_g;
                jac[(1, 0)] = q2 * phi_a;
                jac[(1, 1)] = q2 * phi_g - rs * mu / (den * den);
            }
            ModelFamily::DictyM1 | ModelFamily::DictyM2 => {
                let (kma, ka, kmi, ki, kr, kmr, rt) =
                    (th[0], th[1], th[2], th[3], th[4], th[5], th[6]);
                let (a, i, r, _s) = (y[0], y[1], y[2], y[3]);
                jac[(0, 0)] = -kma;
                jac[(0, 3)] = ka;
                jac[(1, 1)] = -kmi;
                if matches!(self, ModelFamily::DictyM1) {
                    jac[(1, 3)] = ki;
                } else {
                    jac[(1, 0)] = ki;
                }
                jac[(2, 0)] = -kr * r + kr * rt;
                jac[(2, 1)] = -kmr * r;
                jac[(2, 2)] = -(kr * a + kmr * i);
                // S row is identically zero
            }
        }
    }

    fn jac_params(&self, y: &[f64], th: &[f64], jac: &mut DMatrix<f64>) {
        jac.fill(0.0);
        match self {
            ModelFamily::GlycolysisM1 => {
                let (sigma, q1, l1) = (th[1], th[2], th[4]);
                let (phi, _, _, phi_l) = phi_coop(y[0], y[1], l1);
                // params: nu, sigma, q1, ks, L1
                jac[(0, 0)] = 1.0;
                jac[(0, 1)] = -phi;
                jac[(0, 4)] = -sigma * phi_l;
                jac[(1, 1)] = q1 * phi;
                jac[(1, 2)] = sigma * phi;
                jac[(1, 3)] = -y[1];
                jac[(1, 4)] = q1 * sigma * phi_l;
            }
            ModelFamily::GlycolysisM2 => {
                let (q2, rs, mu, l2) = (th[1], th[2], th[3], th[4]);
                let (phi, _, _, phi_l) = phi_plain(y[0], y[1], l2);
                let den = mu + y[1];
                // params: nu, q2, rs, mu, L2
                jac[(0, 0)] = 1.0;
                jac[(0, 4)] = -phi_l;
                jac[(1, 1)] = phi;
                jac[(1, 2)] = -y[1] / den;
                jac[(1, 3)] = rs * y[1] / (den * den);
                jac[(1, 4)] = q2 * phi_l;
            }
            ModelFamily::DictyM1 | ModelFamily::DictyM2 => {
                let (kr, rt) = (th[4], th[6]);
                let (a, i, r, s) = (y[0], y[1], y[2], y[3]);
                // params: k_minus_a, k_a, k_minus_i, k_i{1,2}, k_r, k_minus_r, R_T
                jac[(0, 0)] = -a;
                jac[(0, 1)] = s;
                jac[(1, 2)] = -i;
                jac[(1, 3)] = if matches!(self, ModelFamily::DictyM1) { s } else { a };
                jac[(2, 4)] = -a * r + rt * a;
                jac[(2, 5)] = -i * r;
                jac[(2, 6)] = kr * a;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn fd_jacobians(fam: ModelFamily, y: &[f64], th: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let m = fam.dim();
        let p = fam.n_params();
        let mut js = DMatrix::zeros(m, m);
        let mut jp = DMatrix::zeros(m, p);
        let mut fp = vec![0.0; m];
        let mut fm = vec![0.0; m];
        for j in 0..m {
            let h = 1e-6 * (1.0 + y[j].abs());
            let mut yp = y.to_vec();
            yp[j] += h;
            fam.rhs(&yp, th, &mut fp);
            yp[j] = y[j] - h;
            fam.rhs(&yp, th, &mut fm);
            for i in 0..m {
                js[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        for j in 0..p {
            let h = 1e-6 * (1.0 + th[j].abs());
            let mut tp = th.to_vec();
            tp[j] += h;
            fam.rhs(y, &tp, &mut fp);
            tp[j] = th[j] - h;
            fam.rhs(y, &tp, &mut fm);
            for i in 0..m {
                jp[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        (js, jp)
    }

    /// Analytic Jacobians agree with central differences at random interior
    /// points, to 1e-5 relative.
    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        for fam in [
            ModelFamily::GlycolysisM1,
            ModelFamily::GlycolysisM2,
            ModelFamily::DictyM1,
            ModelFamily::DictyM2,
        ] {
            let m = fam.dim();
            let p = fam.n_params();
            for _ in 0..20 {
                let y: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..5.0)).collect();
                let th: Vec<f64> = match fam {
                    ModelFamily::GlycolysisM1 => vec![
                        0.22,
                        rng.random_range(0.5..2.0),
                        rng.random_range(1.0..3.0),
                        rng.random_range(0.05..0.5),
                        rng.random_range(100.0..20000.0),
                    ],
                    ModelFamily::GlycolysisM2 => vec![
                        0.22,
                        rng.random_range(0.5..50.0),
                        rng.random_range(0.5..50.0),
                        rng.random_range(0.5..50.0),
                        rng.random_range(100.0..300.0),
                    ],
                    _ => (0..p).map(|_| rng.random_range(0.1..3.0)).collect(),
                };
                let mut js = DMatrix::zeros(m, m);
                let mut jp = DMatrix::zeros(m, p);
                fam.jac_state(&y, &th, &mut js);
                fam.jac_params(&y, &th, &mut jp);
                let (fs, fp) = fd_jacobians(fam, &y, &th);
                let scale_s = js.amax().max(1.0);
                let scale_p = jp.amax().max(1.0);
                assert!(
                    (&js - &fs).amax() / scale_s < 1e-5,
                    "{fam:?} state jac mismatch: {}",
                    (&js - &fs).amax()
                );
                assert!(
                    (&jp - &fp).amax() / scale_p < 1e-5,
                    "{fam:?} param jac mismatch: {}",
                    (&jp - &fp).amax()
                );
            }
        }
    }

    /// Spot values of phi against independently coded limits.
    #[test]
    fn phi_limits() {
        // phi(0, 0) = 0 regardless of L1
        let (phi, _, _, _) = phi_coop(0.0, 0.0, 17206.10);
        assert_eq!(phi, 0.0);
        // L1 -> 0 limit: phi = a(1+a)(1+g)^2 / ((1+a)^2 (1+g)^2) = a/(1+a)
        for (a, g) in [(0.3, 1.7), (2.0, 0.1), (15.0, 2.0)] {
            let (phi, _, _, _) = phi_coop(a, g, 0.0);
            let expect = a / (1.0 + a);
            assert!((phi - expect).abs() < 1e-12 * expect.max(1.0));
        }
    }
}
