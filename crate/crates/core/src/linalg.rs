//! Small linear-algebra kernels for periodic grids.
//!
//! Every Newton system the solver forms is a symmetric matrix whose nonzeros
//! lie within a fixed cyclic distance of the diagonal (tridiagonal for the
//! integrand Hessian, pentadiagonal once the convexity barrier is added).
//! [`CyclicBanded`] stores those diagonals and factors them with an envelope
//! Cholesky: only the last `w` rows wrap around to column 0, so the factor
//! costs O(N·w²).

use nalgebra::{DMatrix, DVector};

/// Symmetric matrix with entries `M[i][(i + k) mod n]` for `k ≤ w`.
#[derive(Debug, Clone, PartialEq)]
pub struct CyclicBanded {
    n: usize,
    /// `diags[k][i] = M[i][(i + k) mod n]`.
    diags: Vec<Vec<f64>>,
}

impl CyclicBanded {
    pub fn zeros(n: usize, half_bandwidth: usize) -> Self {
        assert!(
            n > 2 * half_bandwidth + 1,
            "cyclic band of width {half_bandwidth} needs n > {}",
            2 * half_bandwidth + 1
        );
        CyclicBanded {
            n,
            diags: vec![vec![0.0; n]; half_bandwidth + 1],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.diags.len() - 1
    }

    /// Entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let n = self.n;
        let fwd = (j + n - i) % n;
        let bwd = (i + n - j) % n;
        let w = self.half_bandwidth();
        if fwd <= w {
            self.diags[fwd][i]
        } else if bwd <= w {
            self.diags[bwd][j]
        } else {
            0.0
        }
    }

    /// Adds `value` to the symmetric pair `(i, i+k)` / `(i+k, i)`.
    pub fn add(&mut self, i: usize, k: usize, value: f64) {
        self.diags[k][i % self.n] += value;
    }

    pub fn add_diagonal(&mut self, values: &[f64]) {
        for (d, v) in self.diags[0].iter_mut().zip(values) {
            *d += v;
        }
    }

    pub fn shift(&mut self, tau: f64) {
        for d in &mut self.diags[0] {
            *d += tau;
        }
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diags[0]
    }

    /// `self + other`, widening the band if needed.
    pub fn plus(&self, other: &CyclicBanded) -> CyclicBanded {
        assert_eq!(self.n, other.n);
        let w = self.half_bandwidth().max(other.half_bandwidth());
        let mut out = CyclicBanded::zeros(self.n, w);
        for src in [self, other] {
            for (k, diag) in src.diags.iter().enumerate() {
                for (o, v) in out.diags[k].iter_mut().zip(diag) {
                    *o += v;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y: Vec<f64> = self.diags[0].iter().zip(x).map(|(d, v)| d * v).collect();
        for (k, diag) in self.diags.iter().enumerate().skip(1) {
            for i in 0..n {
                let j = (i + k) % n;
                y[i] += diag[i] * x[j];
                y[j] += diag[i] * x[i];
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Envelope Cholesky factorization; `None` unless the matrix is
    /// numerically positive definite.
    pub fn cholesky(&self) -> Option<CyclicCholesky> {
        let n = self.n;
        let w = self.half_bandwidth();
        let first: Vec<usize> = (0..n)
            .map(|i| if i + w >= n { 0 } else { i.saturating_sub(w) })
            .collect();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let fi = first[i];
            let mut row = vec![0.0; i - fi + 1];
            for j in fi..i {
                let fj = first[j];
                let start = fi.max(fj);
                let mut s = self.get(i, j);
                let rj = &rows[j];
                for k in start..j {
                    s -= row[k - fi] * rj[k - fj];
                }
                row[j - fi] = s / rj[j - fj];
            }
            let mut d = self.diags[0][i];
            for v in &row[..i - fi] {
                d -= v * v;
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            row[i - fi] = d.sqrt();
            rows.push(row);
        }
        Some(CyclicCholesky { first, rows })
    }
}

/// Lower-triangular envelope factor `L` with `M = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct CyclicCholesky {
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl CyclicCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.rows.len();
        let mut y = b.to_vec();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.rows[i];
            let mut s = y[i];
            for j in fi..i {
                s -= row[j - fi] * y[j];
            }
            y[i] = s / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.rows[i];
            y[i] /= row[i - fi];
            let yi = y[i];
            for j in fi..i {
                y[j] -= row[j - fi] * yi;
            }
        }
        y
    }

    /// Solves `(M + ρ·v vᵀ) x = b` by Sherman–Morrison on top of this factor.
    pub fn solve_rank_one(&self, rho: f64, v: &[f64], b: &[f64]) -> Vec<f64> {
        let x = self.solve(b);
        if rho == 0.0 {
            return x;
        }
        let z = self.solve(v);
        let vx: f64 = v.iter().zip(&x).map(|(a, b)| a * b).sum();
        let vz: f64 = v.iter().zip(&z).map(|(a, b)| a * b).sum();
        let coef = rho * vx / (1.0 + rho * vz);
        x.iter().zip(&z).map(|(xi, zi)| xi - coef * zi).collect()
    }
}

/// Solves a symmetric tridiagonal system without wrap-around (Thomas
/// algorithm). Returns `None` on a zero pivot.
pub fn solve_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let m = diag.len();
    if m == 0 {
        return Some(Vec::new());
    }
    debug_assert_eq!(off.len() + 1, m);
    let mut c = vec![0.0; m];
    let mut x = rhs.to_vec();
    let mut piv = diag[0];
    if piv == 0.0 {
        return None;
    }
    x[0] /= piv;
    for i in 1..m {
        c[i - 1] = off[i - 1] / piv;
        piv = diag[i] - off[i - 1] * c[i - 1];
        if piv == 0.0 || !piv.is_finite() {
            return None;
        }
        x[i] = (x[i] - off[i - 1] * x[i - 1]) / piv;
    }
    for i in (0..m - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    Some(x)
}

/// Outcome of [`nnls`].
#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    pub residual: DVector<f64>,
    pub iterations: usize,
}

/// Nonnegative least squares `min ‖M x − b‖₂, x ≥ 0` for the columns flagged
/// in `nonneg`; the remaining columns are free.
///
/// Lawson–Hanson active-set iteration, warm-started from the unconstrained
/// solution so that square, nearly-determined systems finish in a handful of
/// passes.
pub fn nnls(m: &DMatrix<f64>, b: &DVector<f64>, nonneg: &[bool]) -> NnlsSolution {
    let ncols = m.ncols();
    assert_eq!(nonneg.len(), ncols);
    if ncols == 0 {
        return NnlsSolution {
            x: DVector::zeros(0),
            residual: b.clone(),
            iterations: 0,
        };
    }
    let scale = m.amax().max(1.0);
    let tol = 1e-12 * scale * (m.nrows().max(ncols) as f64);
    let max_iter = 3 * ncols + 30;

    let mut passive = vec![true; ncols];
    let mut x = DVector::zeros(ncols);
    let mut iterations = 0;

    // Warm start: drop the negative entries of the free solve on the passive set
    // until it is nonnegative, then hand over to the exchange loop.
    loop {
        iterations += 1;
        let z = lsq_on(m, b, &passive);
        let mut any_neg = false;
        for j in 0..ncols {
            if passive[j] && nonneg[j] && z[j] <= 0.0 {
                passive[j] = false;
                any_neg = true;
            }
        }
        if !any_neg {
            x = z;
            break;
        }
        if iterations > max_iter {
            break;
        }
    }

    // Main Lawson–Hanson loop.
    let exact = 1e-13 * (1.0 + b.amax());
    while iterations <= max_iter {
        let r = b - m * &x;
        if r.amax() <= exact {
            break;
        }
        let w = m.transpose() * &r;
        let mut best = None;
        let mut best_w = tol;
        for j in 0..ncols {
            if !passive[j] && w[j] > best_w {
                best_w = w[j];
                best = Some(j);
            }
        }
        let Some(enter) = best else { break };
        passive[enter] = true;
        loop {
            iterations += 1;
            let z = lsq_on(m, b, &passive);
            let mut alpha: f64 = 1.0;
            let mut blocked = false;
            for j in 0..ncols {
                if passive[j] && nonneg[j] && z[j] <= 0.0 {
                    blocked = true;
                    let denom = x[j] - z[j];
                    alpha = if denom > 0.0 {
                        alpha.min(x[j] / denom)
                    } else {
                        0.0
                    };
                }
            }
            if !blocked {
                x = z;
                break;
            }
            for j in 0..ncols {
                if passive[j] {
                    x[j] += alpha * (z[j] - x[j]);
                }
            }
            let mut removed = false;
            for j in 0..ncols {
                if passive[j] && nonneg[j] && x[j] <= tol {
                    passive[j] = false;
                    x[j] = 0.0;
                    removed = true;
                }
            }
            if !removed || iterations > max_iter {
                // Numerical stall: keep the clipped iterate.
                for j in 0..ncols {
                    if nonneg[j] && x[j] < 0.0 {
                        x[j] = 0.0;
                    }
                }
                break;
            }
        }
    }
    let residual = b - m * &x;
    NnlsSolution {
        x,
        residual,
        iterations,
    }
}

/// Least squares on the passive columns (others pinned to zero), via a
/// column-pivoted QR so rank-deficient column sets resolve to a basic solution.
fn lsq_on(m: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..m.ncols()).filter(|&j| passive[j]).collect();
    let mut out = DVector::zeros(m.ncols());
    if cols.is_empty() {
        return out;
    }
    let sub = m.select_columns(cols.iter());
    let sol = least_squares(&sub, b);
    for (k, &j) in cols.iter().enumerate() {
        out[j] = sol[k];
    }
    out
}

/// Basic least-squares solution of `A x ≈ b` from a column-pivoted QR:
/// columns beyond the numerical rank (pivots below `1e-13·|r₁₁|`) get zero
/// weight. Works for wide `A` as well.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (nr, nc) = a.shape();
    let d = nr.min(nc);
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let rmax = (0..d).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
    let rank = (0..d)
        .take_while(|&k| r[(k, k)].abs() > 1e-13 * rmax)
        .count();
    let mut qb = b.clone();
    qr.q_tr_mul(&mut qb);
    let mut top = qb.rows(0, rank).into_owned();
    let mut x = DVector::zeros(nc);
    if r.view((0, 0), (rank, rank))
        .solve_upper_triangular_mut(&mut top)
    {
        x.rows_mut(0, rank).copy_from(&top);
    }
    qr.p().inv_permute_rows(&mut x);
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(n: usize, w: usize, seed: u64) -> CyclicBanded {
        let mut m = CyclicBanded::zeros(n, w);
        let mut s = seed;
        let mut next = || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for k in 1..=w {
            for i in 0..n {
                m.add(i, k, next());
            }
        }
        for i in 0..n {
            m.add(i, 0, 2.0 * w as f64 + 1.0 + next().abs());
        }
        m
    }

    #[test]
    fn cholesky_matches_dense_solve() {
        for (n, w) in [(9, 1), (16, 2), (64, 2), (33, 3)] {
            let m = random_spd(n, w, n as u64);
            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
            let x = m.cholesky().expect("spd").solve(&b);
            let dense = m.to_dense();
            let xd = dense.lu().solve(&DVector::from_vec(b.clone())).unwrap();
            for i in 0..n {
                assert!((x[i] - xd[i]).abs() < 1e-12, "n={n} w={w} i={i}");
            }
            let back = m.mul_vec(&x);
            for i in 0..n {
                assert!((back[i] - b[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut m = CyclicBanded::zeros(12, 1);
        for i in 0..12 {
            m.add(i, 0, 1.0);
            m.add(i, 1, 1.0);
        }
        assert!(m.cholesky().is_none());
    }

    #[test]
    fn sherman_morrison_matches_dense() {
        let n = 20;
        let m = random_spd(n, 2, 3);
        let v: Vec<f64> = (0..n).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let x = m.cholesky().unwrap().solve_rank_one(3.5, &v, &b);
        let vv = DVector::from_vec(v);
        let dense = m.to_dense() + 3.5 * &vv * vv.transpose();
        let xd = dense.lu().solve(&DVector::from_vec(b)).unwrap();
        for i in 0..n {
            assert!((x[i] - xd[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn tridiagonal_solve() {
        let diag = [4.0, 5.0, 6.0, 7.0];
        let off = [1.0, -2.0, 0.5];
        let x_true = [1.0, -1.0, 2.0, 0.25];
        let rhs: Vec<f64> = (0..4)
            .map(|i| {
                let mut s = diag[i] * x_true[i];
                if i > 0 {
                    s += off[i - 1] * x_true[i - 1];
                }
                if i < 3 {
                    s += off[i] * x_true[i + 1];
                }
                s
            })
            .collect();
        let x = solve_tridiagonal(&diag, &off, &rhs).unwrap();
        for i in 0..4 {
            assert!((x[i] - x_true[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn nnls_known_solution() {
        // min ‖x − b‖ with x ≥ 0 clips negatives.
        let m = DMatrix::<f64>::identity(4, 4);
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0, -0.5]);
        let sol = nnls(&m, &b, &[true; 4]);
        for (x, want) in sol.x.iter().zip([1.0, 0.0, 3.0, 0.0]) {
            assert!((x - want).abs() < 1e-14, "{:?}", sol.x);
        }
    }

    #[test]
    fn nnls_kkt_conditions() {
        let m = DMatrix::from_row_slice(
            5,
            3,
            &[
                1.0, 2.0, 0.5, 0.3, -1.0, 1.0, 2.0, 0.1, -0.4, 0.0, 1.0, 1.0, -1.0, 0.5, 0.2,
            ],
        );
        let b = DVector::from_vec(vec![1.0, -1.0, 0.5, 2.0, -0.3]);
        let sol = nnls(&m, &b, &[true, true, false]);
        let w = m.transpose() * &sol.residual;
        for j in 0..2 {
            assert!(sol.x[j] >= 0.0);
            // Dual feasibility and complementarity.
            assert!(w[j] <= 1e-10);
            assert!((sol.x[j] * w[j]).abs() <= 1e-10);
        }
        assert!(w[2].abs() <= 1e-10);
    }
}
