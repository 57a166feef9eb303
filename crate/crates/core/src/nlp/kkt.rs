//! Linear algebra backends for the reduced primal-dual system
//!
//! ```text
//! [ W      A_e^T ] [dx]   [r1]          W = diag(d_w) + V C V^T,
//! [ A_e   -dc*I  ] [dl] = [r2]          C^{-1} = c_inv (given)
//! ```
//!
//! The dense backend assembles the equivalent augmented symmetric system and
//! factors it once; it is right for small problems. The chain backend
//! exploits the multiple-shooting structure: eliminating dx yields a Schur
//! complement that is block-tridiagonal per shooting chain plus a low-rank
//! coupling through the shared design variables, so one factorization costs
//! O(sum_chains n_blocks * m^3) plus two small dense factors.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{lu_factor, lu_solve};

#[derive(Debug, Clone)]
pub enum KktError {
    Singular(String),
    Structure(String),
}

impl std::fmt::Display for KktError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KktError::Singular(m) => write!(f, "singular KKT system: {m}"),
            KktError::Structure(m) => write!(f, "chain structure violation: {m}"),
        }
    }
}

/// One shooting chain: variables are `n_blocks` consecutive blocks of
/// `block_dim` starting at `var_start`; the matching rows for block i couple
/// only blocks i and i-1 plus coupling columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainBlock {
    pub var_start: usize,
    pub block_dim: usize,
    pub n_blocks: usize,
    pub row_start: usize,
}

/// Equality-Jacobian structure declaration for the chain backend.
#[derive(Debug, Clone, Default)]
pub struct ChainStructure {
    pub chains: Vec<ChainBlock>,
    /// Non-chain variables allowed to appear in equality rows.
    pub coupling_cols: Vec<usize>,
    /// Equality rows outside all chains (may touch coupling columns only).
    pub extra_rows: Vec<usize>,
}

pub(crate) struct KktInput<'a> {
    pub d_w: &'a [f64],
    pub jac_eq: &'a [Vec<(u32, f64)>],
    pub v: &'a DMatrix<f64>,
    pub c_inv: &'a DMatrix<f64>,
    pub delta_c: f64,
}

pub(crate) trait KktBackend {
    fn factor(&mut self, inp: &KktInput) -> Result<(), KktError>;
    fn solve(&mut self, r1: &[f64], r2: &[f64], dx: &mut [f64], dl: &mut [f64]);
}

// ---------------------------------------------------------------------------
// Dense backend
// ---------------------------------------------------------------------------

/// Assembles [diag, Ae^T, V; Ae, -dc I, 0; V^T, 0, -c_inv] and LU-factors it.
pub(crate) struct DenseKkt {
    n: usize,
    m_e: usize,
    q: usize,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl DenseKkt {
    pub fn new() -> Self {
        Self { n: 0, m_e: 0, q: 0, lu: None }
    }
}

impl KktBackend for DenseKkt {
    fn factor(&mut self, inp: &KktInput) -> Result<(), KktError> {
        let n = inp.d_w.len();
        let m_e = inp.jac_eq.len();
        let q = inp.v.ncols();
        let dim = n + m_e + q;
        let mut k = DMatrix::zeros(dim, dim);
        for i in 0..n {
            k[(i, i)] = inp.d_w[i];
        }
        for (r, row) in inp.jac_eq.iter().enumerate() {
            for (c, val) in row {
                k[(n + r, *c as usize)] = *val;
                k[(*c as usize, n + r)] = *val;
            }
            k[(n + r, n + r)] = -inp.delta_c;
        }
        for c in 0..q {
            for r in 0..n {
                let v = inp.v[(r, c)];
                k[(r, n + m_e + c)] = v;
                k[(n + m_e + c, r)] = v;
            }
            for c2 in 0..q {
                k[(n + m_e + c, n + m_e + c2)] = -inp.c_inv[(c, c2)];
            }
        }
        let lu = nalgebra::LU::new(k);
        // a fully singular factorization shows up as a zero diagonal in U
        if lu.u().diagonal().iter().any(|d| d.abs() < 1e-300 || !d.is_finite()) {
            return Err(KktError::Singular("dense KKT factorization failed".into()));
        }
        self.n = n;
        self.m_e = m_e;
        self.q = q;
        self.lu = Some(lu);
        Ok(())
    }

    fn solve(&mut self, r1: &[f64], r2: &[f64], dx: &mut [f64], dl: &mut [f64]) {
        let dim = self.n + self.m_e + self.q;
        let mut rhs = DVector::zeros(dim);
        rhs.as_mut_slice()[..self.n].copy_from_slice(r1);
        rhs.as_mut_slice()[self.n..self.n + self.m_e].copy_from_slice(r2);
        let sol = self.lu.as_ref().unwrap().solve(&rhs).unwrap_or_else(|| DVector::zeros(dim));
        dx.copy_from_slice(&sol.as_slice()[..self.n]);
        dl.copy_from_slice(&sol.as_slice()[self.n..self.n + self.m_e]);
    }
}

// ---------------------------------------------------------------------------
// Chain backend
// ---------------------------------------------------------------------------

struct ChainFactor {
    block: ChainBlock,
    /// Inverses of the pivot blocks P_i (m x m each).
    p_inv: Vec<DMatrix<f64>>,
    /// Elimination factors F_i = T_{i,i-1} P_{i-1}^{-1}, i >= 1.
    f: Vec<DMatrix<f64>>,
    /// Off-diagonal blocks T_{i,i-1}.
    sub: Vec<DMatrix<f64>>,
}

pub(crate) struct ChainKkt {
    structure: ChainStructure,
    n: usize,
    m_e: usize,
    q: usize,
    delta_c: f64,
    d_w: Vec<f64>,
    jac_eq: Vec<Vec<(u32, f64)>>,
    v: DMatrix<f64>,
    c_inv_lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    chains: Vec<ChainFactor>,
    /// map var index -> coupling column slot (usize::MAX if none)
    coupling_slot: Vec<usize>,
    /// V0 as rows: per eq row, (coupling slot, value).
    v0_rows: Vec<Vec<(u32, f64)>>,
    /// y = T^{-1} V0, n_eq x d.
    y_t: DMatrix<f64>,
    core0: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    yv_x: DMatrix<f64>,
    yv_l: DMatrix<f64>,
    core_q: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    /// rows not covered by chains (must have no chain-column entries)
    extra_rows: Vec<usize>,
    /// scratch marking chain membership of each variable
    chain_col: Vec<bool>,
}

impl ChainKkt {
    pub fn new(structure: ChainStructure) -> Self {
        Self {
            structure,
            n: 0,
            m_e: 0,
            q: 0,
            delta_c: 0.0,
            d_w: Vec::new(),
            jac_eq: Vec::new(),
            v: DMatrix::zeros(0, 0),
            c_inv_lu: None,
            chains: Vec::new(),
            coupling_slot: Vec::new(),
            v0_rows: Vec::new(),
            y_t: DMatrix::zeros(0, 0),
            core0: None,
            yv_x: DMatrix::zeros(0, 0),
            yv_l: DMatrix::zeros(0, 0),
            core_q: None,
            extra_rows: Vec::new(),
            chain_col: Vec::new(),
        }
    }

    /// Solve T x = r in place using the per-chain factors; entries of extra
    /// rows are scaled by 1/delta_c.
    fn t_solve(&self, r: &mut [f64]) {
        for ch in &self.chains {
            let m = ch.block.block_dim;
            let k = ch.block.n_blocks;
            let r0 = ch.block.row_start;
            // forward: z_i = r_i - F_i z_{i-1}
            for i in 1..k {
                let (prev, cur) = r.split_at_mut(r0 + i * m);
                let zprev = &prev[r0 + (i - 1) * m..];
                let f = &ch.f[i - 1];
                for a in 0..m {
                    let mut s = cur[a];
                    for b in 0..m {
                        s -= f[(a, b)] * zprev[b];
                    }
                    cur[a] = s;
                }
            }
            // backward: x_{k-1} = P^{-1} z; x_i = P_i^{-1}(z_i - T_{i,i+1} x_{i+1})
            let mut xbuf = vec![0.0; m];
            for i in (0..k).rev() {
                let base = r0 + i * m;
                if i + 1 < k {
                    // T_{i,i+1} = sub[i]^T (sub[i] = T_{i+1,i})
                    let sub = &ch.sub[i];
                    for a in 0..m {
                        let mut s = r[base + a];
                        for b in 0..m {
                            s -= sub[(b, a)] * r[r0 + (i + 1) * m + b];
                        }
                        xbuf[a] = s;
                    }
                } else {
                    xbuf.copy_from_slice(&r[base..base + m]);
                }
                let pinv = &ch.p_inv[i];
                for a in 0..m {
                    let mut s = 0.0;
                    for b in 0..m {
                        s += pinv[(a, b)] * xbuf[b];
                    }
                    r[base + a] = s;
                }
            }
        }
        for &er in &self.extra_rows {
            r[er] /= self.delta_c;
        }
    }

    /// Base solve of [diag(d_w), Ae^T; Ae, -dc I].
    fn base_solve(&self, r1: &[f64], r2: &[f64], dx: &mut [f64], dl: &mut [f64]) {
        let d = self.coupling_slot.iter().filter(|&&s| s != usize::MAX).count();
        // rhs_l = Ae (r1 / d_w) - r2
        let mut rl = vec![0.0; self.m_e];
        for (r, row) in self.jac_eq.iter().enumerate() {
            let mut s = 0.0;
            for (c, val) in row {
                s += val * r1[*c as usize] / self.d_w[*c as usize];
            }
            rl[r] = s - r2[r];
        }
        // S0^{-1} rl via inner Woodbury
        let mut t = rl.clone();
        self.t_solve(&mut t);
        if d > 0 {
            let mut u = vec![0.0; d];
            for (r, row) in self.v0_rows.iter().enumerate() {
                for (slot, val) in row {
                    u[*slot as usize] += val * t[r];
                }
            }
            let uv = DVector::from_column_slice(&u);
            if let Some(w) = self.core0.as_ref().unwrap().solve(&uv) {
                for r in 0..self.m_e {
                    let mut corr = 0.0;
                    for sl in 0..d {
                        corr += self.y_t[(r, sl)] * w[sl];
                    }
                    t[r] -= corr;
                }
            }
        }
        dl.copy_from_slice(&t);
        // dx = (r1 - Ae^T dl) / d_w
        dx.copy_from_slice(r1);
        for (r, row) in self.jac_eq.iter().enumerate() {
            for (c, val) in row {
                dx[*c as usize] -= val * dl[r];
            }
        }
        for (i, v) in dx.iter_mut().enumerate() {
            *v /= self.d_w[i];
        }
    }

    /// Full multiply r = K [x; l] for iterative refinement.
    fn apply(&self, x: &[f64], l: &[f64], out_x: &mut [f64], out_l: &mut [f64]) {
        for i in 0..self.n {
            out_x[i] = self.d_w[i] * x[i];
        }
        if self.q > 0 {
            let xv = DVector::from_column_slice(x);
            let vt_x = self.v.transpose() * &xv;
            if let Some(t) = self.c_inv_lu.as_ref().unwrap().solve(&vt_x) {
                let corr = &self.v * t;
                for i in 0..self.n {
                    out_x[i] += corr[i];
                }
            }
        }
        for (r, row) in self.jac_eq.iter().enumerate() {
            let mut s = 0.0;
            for (c, val) in row {
                s += val * x[*c as usize];
                out_x[*c as usize] += val * l[r];
            }
            out_l[r] = s - self.delta_c * l[r];
        }
    }

    fn solve_nore(&self, r1: &[f64], r2: &[f64], dx: &mut [f64], dl: &mut [f64]) {
        self.base_solve(r1, r2, dx, dl);
        if self.q > 0 {
            let xv = DVector::from_column_slice(dx);
            let t = self.v.transpose() * xv;
            if let Some(w) = self.core_q.as_ref().unwrap().solve(&t) {
                for i in 0..self.n {
                    let mut corr = 0.0;
                    for c in 0..self.q {
                        corr += self.yv_x[(i, c)] * w[c];
                    }
                    dx[i] -= corr;
                }
                for r in 0..self.m_e {
                    let mut corr = 0.0;
                    for c in 0..self.q {
                        corr += self.yv_l[(r, c)] * w[c];
                    }
                    dl[r] -= corr;
                }
            }
        }
    }
}

impl KktBackend for ChainKkt {
    fn factor(&mut self, inp: &KktInput) -> Result<(), KktError> {
        let n = inp.d_w.len();
        let m_e = inp.jac_eq.len();
        let q = inp.v.ncols();
        self.n = n;
        self.m_e = m_e;
        self.q = q;
        self.delta_c = inp.delta_c;
        self.d_w = inp.d_w.to_vec();
        self.jac_eq = inp.jac_eq.to_vec();
        self.v = inp.v.clone();
        self.c_inv_lu =
            if q > 0 { Some(nalgebra::LU::new(inp.c_inv.clone())) } else { None };

        // mark chain columns and rows
        self.chain_col = vec![false; n];
        let mut row_chain = vec![usize::MAX; m_e];
        for (ci, ch) in self.structure.chains.iter().enumerate() {
            let len = ch.block_dim * ch.n_blocks;
            for v in ch.var_start..ch.var_start + len {
                self.chain_col[v] = true;
            }
            for r in ch.row_start..ch.row_start + len {
                if r >= m_e {
                    return Err(KktError::Structure(format!(
                        "chain row {r} beyond {m_e} equality rows"
                    )));
                }
                row_chain[r] = ci;
            }
        }
        // coupling slots
        self.coupling_slot = vec![usize::MAX; n];
        for (slot, &col) in self.structure.coupling_cols.iter().enumerate() {
            self.coupling_slot[col] = slot;
        }
        let d = self.structure.coupling_cols.len();

        self.extra_rows.clear();
        for (r, &rc) in row_chain.iter().enumerate() {
            if rc == usize::MAX {
                self.extra_rows.push(r);
            }
        }

        // split rows into chain-local blocks and coupling entries
        self.v0_rows = vec![Vec::new(); m_e];
        let mut chain_factors = Vec::with_capacity(self.structure.chains.len());
        for ch in &self.structure.chains {
            let m = ch.block_dim;
            let k = ch.n_blocks;
            // local Jacobian blocks: diag D_i and sub E_i
            let mut d_blk = vec![DMatrix::zeros(m, m); k];
            let mut e_blk = vec![DMatrix::zeros(m, m); k];
            for i in 0..k {
                for a in 0..m {
                    let row = &inp.jac_eq[ch.row_start + i * m + a];
                    for (c, val) in row {
                        let c = *c as usize;
                        if self.chain_col[c] {
                            let off = c as isize - ch.var_start as isize;
                            let blk = off.div_euclid(m as isize);
                            let loc = off.rem_euclid(m as isize) as usize;
                            if blk == i as isize {
                                d_blk[i][(a, loc)] = *val;
                            } else if i > 0 && blk == i as isize - 1 {
                                e_blk[i][(a, loc)] = *val;
                            } else {
                                return Err(KktError::Structure(format!(
                                    "row {} touches chain block {blk}, expected {i} or {}",
                                    ch.row_start + i * m + a,
                                    i as isize - 1
                                )));
                            }
                        } else {
                            let slot = self.coupling_slot[c];
                            if slot == usize::MAX {
                                return Err(KktError::Structure(format!(
                                    "column {c} is neither chain nor coupling"
                                )));
                            }
                            self.v0_rows[ch.row_start + i * m + a].push((slot as u32, *val));
                        }
                    }
                }
            }
            // T blocks
            let inv_dx = |i: usize| -> Vec<f64> {
                (0..m).map(|a| 1.0 / inp.d_w[ch.var_start + i * m + a]).collect()
            };
            let mut p_inv = Vec::with_capacity(k);
            let mut fs = Vec::with_capacity(k.saturating_sub(1));
            let mut subs = Vec::with_capacity(k.saturating_sub(1));
            let mut p_prev_inv: Option<DMatrix<f64>> = None;
            for i in 0..k {
                let dxi = inv_dx(i);
                let mut t_ii = DMatrix::zeros(m, m);
                for a in 0..m {
                    for b in 0..m {
                        let mut s = 0.0;
                        for c in 0..m {
                            s += d_blk[i][(a, c)] * dxi[c] * d_blk[i][(b, c)];
                        }
                        t_ii[(a, b)] = s;
                    }
                }
                if i > 0 {
                    let dxp = inv_dx(i - 1);
                    for a in 0..m {
                        for b in 0..m {
                            let mut s = 0.0;
                            for c in 0..m {
                                s += e_blk[i][(a, c)] * dxp[c] * e_blk[i][(b, c)];
                            }
                            t_ii[(a, b)] += s;
                        }
                    }
                }
                for a in 0..m {
                    t_ii[(a, a)] += inp.delta_c;
                }
                let mut p_i = t_ii;
                if i > 0 {
                    // sub = T_{i,i-1} = E_i Dx_{i-1}^{-1} D_{i-1}^T
                    let dxp = inv_dx(i - 1);
                    let mut sub = DMatrix::zeros(m, m);
                    for a in 0..m {
                        for b in 0..m {
                            let mut s = 0.0;
                            for c in 0..m {
                                s += e_blk[i][(a, c)] * dxp[c] * d_blk[i - 1][(b, c)];
                            }
                            sub[(a, b)] = s;
                        }
                    }
                    let f_i = &sub * p_prev_inv.as_ref().unwrap();
                    p_i -= &f_i * sub.transpose();
                    fs.push(f_i);
                    subs.push(sub);
                }
                // invert P_i
                let mut lu = p_i.clone();
                let mut piv = Vec::new();
                if !lu_factor(&mut lu, &mut piv) {
                    return Err(KktError::Singular(format!("chain pivot block {i} singular")));
                }
                let mut inv = DMatrix::zeros(m, m);
                let mut col = vec![0.0; m];
                for j in 0..m {
                    col.iter_mut().for_each(|v| *v = 0.0);
                    col[j] = 1.0;
                    lu_solve(&lu, &piv, &mut col);
                    for a in 0..m {
                        inv[(a, j)] = col[a];
                    }
                }
                p_prev_inv = Some(inv.clone());
                p_inv.push(inv);
            }
            chain_factors.push(ChainFactor { block: ch.clone(), p_inv, f: fs, sub: subs });
        }
        self.chains = chain_factors;

        // extra rows must live on coupling columns only
        for &er in &self.extra_rows {
            for (c, _) in &inp.jac_eq[er] {
                let c = *c as usize;
                if self.chain_col[c] {
                    return Err(KktError::Structure(format!(
                        "extra row {er} touches chain column {c}"
                    )));
                }
                let slot = self.coupling_slot[c];
                if slot == usize::MAX {
                    return Err(KktError::Structure(format!(
                        "extra row {er}: column {c} not in coupling set"
                    )));
                }
            }
            let row = &inp.jac_eq[er];
            for (c, val) in row {
                let slot = self.coupling_slot[*c as usize];
                self.v0_rows[er].push((slot as u32, *val));
            }
        }

        // inner Woodbury: Y = T^{-1} V0, core0 = D0^{-1} + V0^T Y
        if d > 0 {
            let mut y_t = DMatrix::zeros(m_e, d);
            let mut col = vec![0.0; m_e];
            for slot in 0..d {
                col.iter_mut().for_each(|v| *v = 0.0);
                for (r, row) in self.v0_rows.iter().enumerate() {
                    for (s, val) in row {
                        if *s as usize == slot {
                            col[r] += val;
                        }
                    }
                }
                self.t_solve(&mut col);
                for r in 0..m_e {
                    y_t[(r, slot)] = col[r];
                }
            }
            let mut core0 = DMatrix::zeros(d, d);
            for slot in 0..d {
                core0[(slot, slot)] = inp.d_w[self.structure.coupling_cols[slot]];
            }
            for (r, row) in self.v0_rows.iter().enumerate() {
                for (s, val) in row {
                    for slot2 in 0..d {
                        core0[(*s as usize, slot2)] += val * y_t[(r, slot2)];
                    }
                }
            }
            let lu = nalgebra::LU::new(core0);
            if lu.u().diagonal().iter().any(|v| v.abs() < 1e-300 || !v.is_finite()) {
                return Err(KktError::Singular("coupling core singular".into()));
            }
            self.y_t = y_t;
            self.core0 = Some(lu);
        } else {
            self.y_t = DMatrix::zeros(m_e, 0);
            self.core0 = None;
        }

        // outer Woodbury: Yv = K0^{-1} [V; 0], coreQ = c_inv + V^T Yv_x
        if q > 0 {
            let mut yv_x = DMatrix::zeros(n, q);
            let mut yv_l = DMatrix::zeros(m_e, q);
            let zero_l = vec![0.0; m_e];
            let mut dx = vec![0.0; n];
            let mut dl = vec![0.0; m_e];
            for c in 0..q {
                let r1: Vec<f64> = (0..n).map(|i| inp.v[(i, c)]).collect();
                self.base_solve(&r1, &zero_l, &mut dx, &mut dl);
                for i in 0..n {
                    yv_x[(i, c)] = dx[i];
                }
                for r in 0..m_e {
                    yv_l[(r, c)] = dl[r];
                }
            }
            let core_q = inp.c_inv + inp.v.transpose() * &yv_x;
            let lu = nalgebra::LU::new(core_q);
            if lu.u().diagonal().iter().any(|v| v.abs() < 1e-300 || !v.is_finite()) {
                return Err(KktError::Singular("low-rank core singular".into()));
            }
            self.yv_x = yv_x;
            self.yv_l = yv_l;
            self.core_q = Some(lu);
        } else {
            self.yv_x = DMatrix::zeros(n, 0);
            self.yv_l = DMatrix::zeros(m_e, 0);
            self.core_q = None;
        }
        Ok(())
    }

    fn solve(&mut self, r1: &[f64], r2: &[f64], dx: &mut [f64], dl: &mut [f64]) {
        self.solve_nore(r1, r2, dx, dl);
        // two rounds of iterative refinement against the exact K
        let mut res_x = vec![0.0; self.n];
        let mut res_l = vec![0.0; self.m_e];
        let mut ex = vec![0.0; self.n];
        let mut el = vec![0.0; self.m_e];
        for _ in 0..2 {
            self.apply(dx, dl, &mut res_x, &mut res_l);
            let mut worst: f64 = 0.0;
            for i in 0..self.n {
                res_x[i] = r1[i] - res_x[i];
                worst = worst.max(res_x[i].abs());
            }
            for r in 0..self.m_e {
                res_l[r] = r2[r] - res_l[r];
                worst = worst.max(res_l[r].abs());
            }
            let scale = r1.iter().chain(r2.iter()).fold(0.0f64, |a, b| a.max(b.abs()));
            if worst <= 1e-13 * scale.max(1.0) {
                break;
            }
            self.solve_nore(&res_x, &res_l, &mut ex, &mut el);
            for i in 0..self.n {
                dx[i] += ex[i];
            }
            for r in 0..self.m_e {
                dl[r] += el[r];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Random chain-structured problem: compare the chain backend against the
    /// dense backend.
    #[test]
    fn chain_matches_dense() {
        let mut rng = StdRng::seed_from_u64(99);
        let m = 2; // block dim
        let k = 5; // blocks per chain
        let n_chains = 3;
        let d_design = 4; // coupling vars at the front
        let n = d_design + n_chains * m * k;
        let m_e = n_chains * m * k + 1; // chains + one extra row
        let q = 3;

        let mut structure = ChainStructure {
            chains: Vec::new(),
            coupling_cols: (0..d_design).collect(),
            extra_rows: vec![m_e - 1],
        };
        for c in 0..n_chains {
            structure.chains.push(ChainBlock {
                var_start: d_design + c * m * k,
                block_dim: m,
                n_blocks: k,
                row_start: c * m * k,
            });
        }

        let d_w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
        let mut jac: Vec<Vec<(u32, f64)>> = Vec::new();
        for ch in &structure.chains {
            for i in 0..k {
                for a in 0..m {
                    let mut row = Vec::new();
                    // identity on own block
                    row.push(((ch.var_start + i * m + a) as u32, 1.0));
                    if i > 0 {
                        for b in 0..m {
                            row.push((
                                (ch.var_start + (i - 1) * m + b) as u32,
                                rng.random_range(-1.0..1.0),
                            ));
                        }
                    }
                    // coupling entries
                    row.push((rng.random_range(0..d_design) as u32, rng.random_range(-1.0..1.0)));
                    jac.push(row);
                }
            }
        }
        // extra row on coupling columns only
        jac.push((0..d_design).map(|c| (c as u32, 1.0)).collect());
        assert_eq!(jac.len(), m_e);

        let v = DMatrix::from_fn(n, q, |_, _| rng.random_range(-0.5..0.5));
        // SPD-ish c_inv
        let a = DMatrix::from_fn(q, q, |_, _| rng.random_range(-0.5..0.5));
        let c_inv = &a * a.transpose() + DMatrix::identity(q, q);

        let inp =
            KktInput { d_w: &d_w, jac_eq: &jac, v: &v, c_inv: &c_inv, delta_c: 1e-8 };

        let mut dense = DenseKkt::new();
        dense.factor(&inp).unwrap();
        let mut chain = ChainKkt::new(structure);
        chain.factor(&inp).unwrap();

        let r1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r2: Vec<f64> = (0..m_e).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut dx_d = vec![0.0; n];
        let mut dl_d = vec![0.0; m_e];
        dense.solve(&r1, &r2, &mut dx_d, &mut dl_d);
        let mut dx_c = vec![0.0; n];
        let mut dl_c = vec![0.0; m_e];
        chain.solve(&r1, &r2, &mut dx_c, &mut dl_c);

        for i in 0..n {
            assert!(
                (dx_d[i] - dx_c[i]).abs() < 1e-8 * (1.0 + dx_d[i].abs()),
                "dx[{i}]: dense {} vs chain {}",
                dx_d[i],
                dx_c[i]
            );
        }
        for r in 0..m_e {
            assert!(
                (dl_d[r] - dl_c[r]).abs() < 1e-8 * (1.0 + dl_d[r].abs()),
                "dl[{r}]: dense {} vs chain {}",
                dl_d[r],
                dl_c[r]
            );
        }
    }

    #[test]
    fn structure_violation_detected() {
        let structure = ChainStructure {
            chains: vec![ChainBlock { var_start: 0, block_dim: 1, n_blocks: 2, row_start: 0 }],
            coupling_cols: vec![],
            extra_rows: vec![],
        };
        // row 0 touches chain block 1 (not allowed: only blocks i and i-1)
        let jac = vec![vec![(0u32, 1.0), (1u32, 0.5)], vec![(1u32, 1.0)]];
        let d_w = vec![1.0, 1.0];
        let v = DMatrix::zeros(2, 0);
        let c_inv = DMatrix::zeros(0, 0);
        let inp = KktInput { d_w: &d_w, jac_eq: &jac, v: &v, c_inv: &c_inv, delta_c: 1e-8 };
        let mut chain = ChainKkt::new(structure);
        assert!(matches!(chain.factor(&inp), Err(KktError::Structure(_))));
    }
}
