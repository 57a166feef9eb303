//! Shared test fixtures: a high-accuracy reference integrator independent of
//! the production stepper, and desk-scale design spaces for the two built-in
//! problems.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use oed_core::criterion::SwitchingParams;
use oed_core::design::{DesignSpec, PerturbSlot, UNBOUNDED};
use oed_core::integrator::OdeSystem;

/// Fixed-step implicit midpoint with Richardson extrapolation. The midpoint
/// rule is symmetric, so its global error has an even expansion in h and each
/// extrapolation level gains two orders. Completely independent of the
/// adaptive SDIRK production path.
pub fn reference_solve(
    sys: &dyn OdeSystem,
    t0: f64,
    t1: f64,
    y0: &[f64],
    theta: &[f64],
    base_steps: usize,
    levels: usize,
) -> (DVector<f64>, f64) {
    let mut table: Vec<DVector<f64>> = Vec::with_capacity(levels);
    for lv in 0..levels {
        let steps = base_steps << lv;
        table.push(midpoint_fixed(sys, t0, t1, y0, theta, steps));
    }
    // Richardson table for an h^2 expansion: T[k] = (4^k T_fine - T_coarse)/(4^k - 1)
    let mut prev_diag = table[0].clone();
    for k in 1..levels {
        for row in (k..levels).rev() {
            let fac = 4.0f64.powi(k as i32);
            let fine = table[row].clone();
            let coarse = table[row - 1].clone();
            table[row] = (fine * fac - coarse) / (fac - 1.0);
        }
        prev_diag = table[levels - 1].clone();
        let _ = &prev_diag;
    }
    // convergence check: last two diagonal entries
    let err = (&table[levels - 1] - &table[levels - 2]).amax();
    (table[levels - 1].clone(), err)
}

fn midpoint_fixed(
    sys: &dyn OdeSystem,
    t0: f64,
    t1: f64,
    y0: &[f64],
    theta: &[f64],
    steps: usize,
) -> DVector<f64> {
    let m = sys.dim();
    let h = (t1 - t0) / steps as f64;
    let mut y = DVector::from_column_slice(y0);
    let mut jac = DMatrix::zeros(m, m);
    let mut f = vec![0.0; m];
    for _ in 0..steps {
        // solve y1 = y + h f((y+y1)/2) by Newton on g(y1) = y1 - y - h f(mid)
        let mut y1 = y.clone();
        for _ in 0..50 {
            let mid: DVector<f64> = (&y + &y1) * 0.5;
            sys.rhs(mid.as_slice(), theta, &mut f);
            let mut g = DVector::from_column_slice(&f);
            g *= -h;
            g += &y1;
            g -= &y;
            sys.jac_state(mid.as_slice(), theta, &mut jac);
            let mut newton = DMatrix::identity(m, m);
            newton -= &jac * (0.5 * h);
            let delta = newton.lu().solve(&g).expect("reference Newton solve");
            y1 -= &delta;
            if delta.amax() < 1e-14 * (1.0 + y1.amax()) {
                break;
            }
        }
        y = y1;
    }
    y
}

pub fn glyc_gates() -> SwitchingParams {
    SwitchingParams { a1: 20.0, b1: 10.0, a2: 0.05, b2: 0.025 }
}

/// Desk-scale glycolysis design space without perturbations (run 1 shape).
pub fn glyc_design(n: usize, t_end: f64) -> DesignSpec {
    let mut d = DesignSpec::equispaced(n, t_end, 2, glyc_gates());
    d.y_i_bounds = vec![[1e-7, 25.0], [1e-7, 25.0]];
    d.y_i_initial = vec![15.0, 2.0];
    d
}

/// Glycolysis design space with perturbation slots (run 2 shape).
pub fn glyc_design_perturbed(n: usize, t_end: f64, idxs: &[usize]) -> DesignSpec {
    let mut d = glyc_design(n, t_end);
    d.perturb = idxs
        .iter()
        .map(|&idx| PerturbSlot { idx, bounds: [1e-7, 10.0], initial: 1.0 })
        .collect();
    d.perturb_targets = vec![0, 1];
    d
}

/// Desk-scale Dictyostelium design space: perturbations act on the ligand S
/// only, node bounds keep S inside the control interval, and the
/// perturbation gate is disabled.
pub fn dicty_design(n: usize, t_end: f64, idxs: &[usize]) -> DesignSpec {
    let gates = SwitchingParams { a1: 5.0, b1: 2.5, a2: 0.05, b2: 0.025 };
    let mut d = DesignSpec::equispaced(n, t_end, 4, gates);
    d.y_i_bounds = vec![[1e-7, 1.0], [1e-7, 1.0], [1e-7, 1.0], [0.01, 0.5]];
    d.y_i_initial = vec![1.0, 1e-4, 1e-4, 0.2];
    d.node_bounds = vec![
        [-UNBOUNDED, UNBOUNDED],
        [-UNBOUNDED, UNBOUNDED],
        [-UNBOUNDED, UNBOUNDED],
        [0.01, 0.5],
    ];
    d.perturb = idxs
        .iter()
        .enumerate()
        .map(|(k, &idx)| PerturbSlot {
            idx,
            bounds: [-UNBOUNDED, UNBOUNDED],
            initial: [0.3, -0.2, 0.2, -0.2][k % 4],
        })
        .collect();
    d.perturb_targets = vec![3];
    d.use_perturb_gate = false;
    d
}
