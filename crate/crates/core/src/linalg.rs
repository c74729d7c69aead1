//! Dense helpers on top of nalgebra: strided GEMM through `matrixmultiply`,
//! a blocked Cholesky factorization, triangular solves, and small symmetric
//! eigen utilities.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const BLOCK: usize = 96;

/// `c <- alpha * op(a) * op(b) + beta * c` for arbitrary (column-major) views.
pub fn gemm_into(
    alpha: f64,
    a: DMatrixView<'_, f64>,
    trans_a: bool,
    b: DMatrixView<'_, f64>,
    trans_b: bool,
    beta: f64,
    mut c: DMatrixViewMut<'_, f64>,
) {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(c.shape(), (m, n), "output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale_mut(beta);
        return;
    }
    let (ars, acs) = a.strides();
    let (brs, bcs) = b.strides();
    let (crs, ccs) = c.strides();
    let (rsa, csa) = if trans_a { (acs, ars) } else { (ars, acs) };
    let (rsb, csb) = if trans_b { (bcs, brs) } else { (brs, bcs) };
    // SAFETY: pointers and strides come from live nalgebra views whose
    // shapes were checked above; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            crs as isize,
            ccs as isize,
        );
    }
}

/// `op(a) * op(b)` as a new matrix.
pub fn matmul(a: &DMatrix<f64>, trans_a: bool, b: &DMatrix<f64>, trans_b: bool) -> DMatrix<f64> {
    let m = if trans_a { a.ncols() } else { a.nrows() };
    let n = if trans_b { b.nrows() } else { b.ncols() };
    let mut c = DMatrix::zeros(m, n);
    gemm_into(1.0, a.as_view(), trans_a, b.as_view(), trans_b, 0.0, c.as_view_mut());
    c
}

/// `aᵀ a`, symmetrized.
pub fn gram_t(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = matmul(a, true, a, false);
    symmetrize(&mut g);
    g
}

/// `a aᵀ`, symmetrized.
pub fn gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = matmul(a, false, a, true);
    symmetrize(&mut g);
    g
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Eigendecomposition of a symmetric matrix with eigenvalues ascending.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let (values, _) = sym_eigen(m);
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Returns `f` with `f fᵀ = m` for a symmetric PSD `m`; negative eigenvalues
/// from roundoff are clipped to zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 1 {
        return DMatrix::from_element(1, 1, m[(0, 0)].max(0.0).sqrt());
    }
    let (values, vectors) = sym_eigen(m);
    let mut f = vectors;
    for j in 0..n {
        let s = values[j].max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    f
}

/// Symmetric square root of a symmetric PSD matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 1 {
        return DMatrix::from_element(1, 1, m[(0, 0)].max(0.0).sqrt());
    }
    let (values, vectors) = sym_eigen(m);
    let scaled = DMatrix::from_fn(n, n, |i, j| vectors[(i, j)] * values[j].max(0.0).sqrt());
    let mut s = matmul(&scaled, false, &vectors, true);
    symmetrize(&mut s);
    s
}

/// Clips negative eigenvalues of a symmetric matrix to zero.
pub fn clip_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let f = psd_factor(m);
    gram(&f)
}

/// Lower Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factorizes `a`; `None` when `a` is not numerically positive definite.
    pub fn new(a: &DMatrix<f64>) -> Option<Self> {
        assert_eq!(a.nrows(), a.ncols());
        let mut l = a.clone();
        if !chol_in_place(&mut l) {
            return None;
        }
        Some(Self { l })
    }

    /// Factorizes `a`, retrying once with a diagonal jitter of
    /// `1e-10 * trace / n` before giving up.
    pub fn new_jittered(a: &DMatrix<f64>) -> Result<Self> {
        if let Some(c) = Self::new(a) {
            return Ok(c);
        }
        let n = a.nrows().max(1);
        let jitter = 1e-10 * a.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
        let mut b = a.clone();
        for i in 0..a.nrows() {
            b[(i, i)] += jitter;
        }
        Self::new(&b).ok_or_else(|| {
            Error::Numerical(format!(
                "cholesky factorization failed after jitter {jitter:e}"
            ))
        })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L⁻¹ b`
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        solve_lower_in_place(self.l.as_view(), &mut x);
        x
    }

    /// `L⁻ᵀ b`
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        solve_lower_t_in_place(self.l.as_view(), &mut x);
        x
    }

    /// `A⁻¹ b`
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        solve_lower_in_place(self.l.as_view(), &mut x);
        solve_lower_t_in_place(self.l.as_view(), &mut x);
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        let x = self.solve(&m);
        DVector::from_column_slice(x.as_slice())
    }

    /// `A⁻¹` as a dense matrix.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let linv = self.solve_lower(&DMatrix::identity(n, n));
        let mut inv = matmul(&linv, true, &linv, false);
        symmetrize(&mut inv);
        inv
    }

    /// Trace of `A⁻¹`.
    pub fn inverse_trace(&self) -> f64 {
        let n = self.dim();
        let linv = self.solve_lower(&DMatrix::identity(n, n));
        linv.iter().map(|v| v * v).sum()
    }
}

fn chol_in_place(a: &mut DMatrix<f64>) -> bool {
    let n = a.nrows();
    if n <= BLOCK {
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= a[(j, k)] * a[(j, k)];
            }
            if d <= 0.0 || !d.is_finite() {
                return false;
            }
            let d = d.sqrt();
            a[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= a[(i, k)] * a[(j, k)];
                }
                a[(i, j)] = s / d;
            }
            for i in 0..j {
                a[(i, j)] = 0.0;
            }
        }
        return true;
    }
    let n1 = n / 2;
    let n2 = n - n1;
    let mut a11 = a.view((0, 0), (n1, n1)).clone_owned();
    if !chol_in_place(&mut a11) {
        return false;
    }
    // L21 = A21 L11⁻ᵀ  <=>  L21ᵀ = L11⁻¹ A21ᵀ
    let mut l21t = a.view((n1, 0), (n2, n1)).transpose();
    solve_lower_in_place(a11.as_view(), &mut l21t);
    let l21 = l21t.transpose();
    let mut a22 = a.view((n1, n1), (n2, n2)).clone_owned();
    gemm_into(-1.0, l21.as_view(), false, l21.as_view(), true, 1.0, a22.as_view_mut());
    if !chol_in_place(&mut a22) {
        return false;
    }
    a.view_mut((0, 0), (n1, n1)).copy_from(&a11);
    a.view_mut((n1, 0), (n2, n1)).copy_from(&l21);
    a.view_mut((0, n1), (n1, n2)).fill(0.0);
    a.view_mut((n1, n1), (n2, n2)).copy_from(&a22);
    true
}

fn solve_lower_in_place(l: DMatrixView<'_, f64>, b: &mut DMatrix<f64>) {
    let mut view = b.as_view_mut();
    solve_lower_view(l, &mut view);
}

fn solve_lower_view(l: DMatrixView<'_, f64>, b: &mut DMatrixViewMut<'_, f64>) {
    let n = l.nrows();
    let k = b.ncols();
    if n <= BLOCK {
        for c in 0..k {
            for i in 0..n {
                let mut s = b[(i, c)];
                for j in 0..i {
                    s -= l[(i, j)] * b[(j, c)];
                }
                b[(i, c)] = s / l[(i, i)];
            }
        }
        return;
    }
    let n1 = n / 2;
    let n2 = n - n1;
    let (mut top, mut bottom) = b.rows_range_pair_mut(0..n1, n1..n);
    solve_lower_view(l.view((0, 0), (n1, n1)), &mut top);
    gemm_into(-1.0, l.view((n1, 0), (n2, n1)), false, top.as_view(), false, 1.0, bottom.as_view_mut());
    solve_lower_view(l.view((n1, n1), (n2, n2)), &mut bottom);
}

fn solve_lower_t_in_place(l: DMatrixView<'_, f64>, b: &mut DMatrix<f64>) {
    let mut view = b.as_view_mut();
    solve_lower_t_view(l, &mut view);
}

fn solve_lower_t_view(l: DMatrixView<'_, f64>, b: &mut DMatrixViewMut<'_, f64>) {
    let n = l.nrows();
    let k = b.ncols();
    if n <= BLOCK {
        for c in 0..k {
            for i in (0..n).rev() {
                let mut s = b[(i, c)];
                for j in (i + 1)..n {
                    s -= l[(j, i)] * b[(j, c)];
                }
                b[(i, c)] = s / l[(i, i)];
            }
        }
        return;
    }
    let n1 = n / 2;
    let n2 = n - n1;
    let (mut top, mut bottom) = b.rows_range_pair_mut(0..n1, n1..n);
    solve_lower_t_view(l.view((n1, n1), (n2, n2)), &mut bottom);
    gemm_into(-1.0, l.view((n1, 0), (n2, n1)), true, bottom.as_view(), false, 1.0, top.as_view_mut());
    solve_lower_t_view(l.view((0, 0), (n1, n1)), &mut top);
}

/// Inverse of a dense symmetric positive definite matrix.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(Cholesky::new_jittered(a)?.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn gemm_matches_nalgebra_with_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(7, 5, &mut rng);
        let b = random(7, 4, &mut rng);
        let c = matmul(&a, true, &b, false);
        assert!(max_abs_diff(&c, &(a.transpose() * &b)) < 1e-12);
        let d = matmul(&b, true, &a, false);
        assert!(max_abs_diff(&d, &(b.transpose() * &a)) < 1e-12);
        let e = matmul(&a, false, &a, true);
        assert!(max_abs_diff(&e, &(&a * a.transpose())) < 1e-12);
    }

    #[test]
    fn blocked_cholesky_and_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(300, 250, &mut rng);
        let mut a = gram_t(&x);
        for i in 0..250 {
            a[(i, i)] += 1.0;
        }
        let chol = Cholesky::new(&a).unwrap();
        let l = chol.l();
        assert!(max_abs_diff(&(l * l.transpose()), &a) < 1e-9);
        let b = random(250, 3, &mut rng);
        let x = chol.solve(&b);
        assert!(max_abs_diff(&(&a * &x), &b) < 1e-8);
        let reference = a.clone().cholesky().unwrap();
        assert!((chol.log_det() - 2.0 * reference.l().diagonal().map(|d| d.ln()).sum()).abs() < 1e-8);
        let inv = chol.inverse();
        assert!((chol.inverse_trace() - inv.trace()).abs() < 1e-9);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Cholesky::new(&a).is_none());
        assert!(Cholesky::new_jittered(&a).is_err());
    }

    #[test]
    fn psd_factor_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(2, 4, &mut rng);
        let m = gram_t(&x);
        let f = psd_factor(&m);
        assert!(max_abs_diff(&gram(&f), &m) < 1e-12);
        let s = psd_sqrt(&m);
        assert!(max_abs_diff(&(&s * &s), &m) < 1e-12);
    }
}
