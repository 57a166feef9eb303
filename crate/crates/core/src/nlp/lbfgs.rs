//! Limited-memory BFGS in the compact representation: B = theta*I + U C U^T
//! with C^{-1} = -M available directly, which is exactly what the Woodbury
//! KKT solves need.

use nalgebra::DMatrix;

pub(crate) struct Lbfgs {
    mem: usize,
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    theta: f64,
}

/// Per-iteration snapshot of the low-rank part, plus a factorization of M
/// for computing B*x products.
pub(crate) struct BfgsRep {
    pub theta: f64,
    /// n x 2k matrix [theta*S, Y].
    pub u: DMatrix<f64>,
    /// 2k x 2k matrix C^{-1} = -M.
    pub c_inv: DMatrix<f64>,
    m_lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl Lbfgs {
    pub fn new(mem: usize) -> Self {
        Self { mem, s: Vec::new(), y: Vec::new(), theta: 1.0 }
    }

    pub fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.theta = 1.0;
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    /// Store a correction pair with Powell damping: when the raw curvature
    /// s.y falls below a fraction of s.Bs, y is blended with Bs so the
    /// update stays positive definite instead of being skipped.
    pub fn push_damped(&mut self, s: &[f64], y: &[f64]) -> bool {
        let n = s.len();
        let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
        let rep = self.rep(n);
        let mut bs = vec![0.0; n];
        rep.mult(s, &mut bs);
        let sbs: f64 = s.iter().zip(&bs).map(|(a, b)| a * b).sum();
        if !sbs.is_finite() || sbs <= 0.0 {
            return self.push(s, y);
        }
        if sy >= 0.2 * sbs {
            return self.push(s, y);
        }
        let phi = 0.8 * sbs / (sbs - sy);
        if !phi.is_finite() || !(0.0..=1.0).contains(&phi) {
            return false;
        }
        let ybar: Vec<f64> =
            y.iter().zip(&bs).map(|(yi, bi)| phi * yi + (1.0 - phi) * bi).collect();
        self.push(s, &ybar)
    }

    /// Store a correction pair; pairs with non-positive curvature are
    /// skipped. Returns whether the pair was accepted.
    pub fn push(&mut self, s: &[f64], y: &[f64]) -> bool {
        let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum::<f64>().sqrt();
        let yy: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(sy > 1e-9 * ss * yy) || !sy.is_finite() {
            return false;
        }
        if self.s.len() == self.mem {
            self.s.remove(0);
            self.y.remove(0);
        }
        self.s.push(s.to_vec());
        self.y.push(y.to_vec());
        let ynorm2: f64 = y.iter().map(|a| a * a).sum();
        self.theta = (ynorm2 / sy).clamp(1e-6, 1e8);
        true
    }

    /// Build the compact representation at the current pair set.
    pub fn rep(&self, n: usize) -> BfgsRep {
        let k = self.s.len();
        let theta = self.theta;
        let mut u = DMatrix::zeros(n, 2 * k);
        for (j, s) in self.s.iter().enumerate() {
            for (i, v) in s.iter().enumerate() {
                u[(i, j)] = theta * v;
            }
        }
        for (j, y) in self.y.iter().enumerate() {
            for (i, v) in y.iter().enumerate() {
                u[(i, k + j)] = *v;
            }
        }
        // M = [[theta S^T S, L], [L^T, -D]], L strictly lower (s_i . y_j, i>j)
        let mut m = DMatrix::zeros(2 * k, 2 * k);
        for i in 0..k {
            for j in 0..k {
                let dot: f64 = self.s[i].iter().zip(&self.s[j]).map(|(a, b)| a * b).sum();
                m[(i, j)] = theta * dot;
            }
        }
        for i in 0..k {
            for j in 0..k {
                let dot: f64 = self.s[i].iter().zip(&self.y[j]).map(|(a, b)| a * b).sum();
                if i > j {
                    m[(i, k + j)] = dot;
                    m[(k + j, i)] = dot;
                }
                if i == j {
                    m[(k + i, k + i)] = -dot;
                }
            }
        }
        let c_inv = -&m;
        let m_lu = if k > 0 { Some(nalgebra::LU::new(m)) } else { None };
        BfgsRep { theta, u, c_inv, m_lu }
    }
}

impl BfgsRep {
    pub fn q(&self) -> usize {
        self.u.ncols()
    }

    /// out = B x = theta x - U M^{-1} U^T x.
    pub fn mult(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        for i in 0..n {
            out[i] = self.theta * x[i];
        }
        if let Some(lu) = &self.m_lu {
            let xv = nalgebra::DVector::from_column_slice(x);
            let ut_x = self.u.transpose() * &xv;
            if let Some(sol) = lu.solve(&ut_x) {
                let corr = &self.u * sol;
                for i in 0..n {
                    out[i] -= corr[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Compare the compact form against the classic two-loop recursion-free
    /// dense BFGS update on a few random pairs.
    #[test]
    fn compact_matches_dense_update() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(5);
        let n = 6;
        let mut lb = Lbfgs::new(10);
        let mut pairs = Vec::new();
        for _ in 0..4 {
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            // make y = A s for an SPD A so curvature is positive
            let y: Vec<f64> = s.iter().enumerate().map(|(i, v)| (i as f64 + 1.5) * v).collect();
            if lb.push(&s, &y) {
                pairs.push((s, y));
            }
        }
        assert!(lb.len() >= 3);
        let rep = lb.rep(n);
        // dense reference: start from theta I and apply standard BFGS updates
        let mut b = DMatrix::identity(n, n) * rep.theta;
        for (s, y) in &pairs {
            let sv = nalgebra::DVector::from_column_slice(s);
            let yv = nalgebra::DVector::from_column_slice(y);
            let bs = &b * &sv;
            let sbs = sv.dot(&bs);
            let sy = sv.dot(&yv);
            b = b - (&bs * bs.transpose()) / sbs + (&yv * yv.transpose()) / sy;
        }
        let x: Vec<f64> = (0..n).map(|i| (i as f64) - 2.0).collect();
        let mut out = vec![0.0; n];
        rep.mult(&x, &mut out);
        let want = &b * nalgebra::DVector::from_column_slice(&x);
        for i in 0..n {
            assert!(
                (out[i] - want[i]).abs() < 1e-9 * (1.0 + want[i].abs()),
                "component {i}: {} vs {}",
                out[i],
                want[i]
            );
        }
    }

    #[test]
    fn negative_curvature_skipped() {
        let mut lb = Lbfgs::new(5);
        assert!(!lb.push(&[1.0, 0.0], &[-1.0, 0.0]));
        assert_eq!(lb.len(), 0);
    }
}
