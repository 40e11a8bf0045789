//! Small dense complex linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrixView, DMatrixViewMut, Dyn, SymmetricEigen};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::{cabs, creal, czero, CMatrix, CVector, Real};

/// How an operand enters [`gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// `A`
    N,
    /// `Aᴴ`
    H,
}

/// `C ← α·op(A)·op(B) + β·C`.
///
/// Panics on mismatched shapes.
pub fn gemm<T: Real>(
    alpha: Complex<T>,
    a: DMatrixView<'_, Complex<T>>,
    op_a: Op,
    b: DMatrixView<'_, Complex<T>>,
    op_b: Op,
    beta: Complex<T>,
    mut c: DMatrixViewMut<'_, Complex<T>>,
) {
    // The kernel has no conjugate mode, so `Aᴴ` goes through a conjugated
    // copy read with transposed strides.
    let conj_a = (op_a == Op::H).then(|| a.map(|z| z.conj()));
    let conj_b = (op_b == Op::H).then(|| b.map(|z| z.conj()));
    let operand = |x: &DMatrixView<'_, Complex<T>>, conj: &Option<CMatrix<T>>| match conj {
        None => {
            let (r, cs) = x.strides();
            (x.nrows(), x.ncols(), (x.as_ptr(), r as isize, cs as isize))
        }
        Some(xc) => (xc.ncols(), xc.nrows(), (xc.as_ptr(), xc.nrows() as isize, 1)),
    };
    let (m, k, pa) = operand(&a, &conj_a);
    let (k2, n, pb) = operand(&b, &conj_b);
    assert!(k == k2 && c.nrows() == m && c.ncols() == n, "gemm shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for z in c.iter_mut() {
            *z = if beta == czero() { czero() } else { *z * beta };
        }
        return;
    }
    let (rc, cc) = c.strides();
    // SAFETY: shapes were checked above and `c` is a unique borrow, so it
    // cannot alias the shared operands.
    unsafe { T::gemm_raw(m, k, n, alpha, pa, pb, beta, (c.as_mut_ptr(), rc as isize, cc as isize)) }
}

/// `op(A)·op(B)` as a new matrix.
pub fn matmul<T: Real>(a: &CMatrix<T>, op_a: Op, b: &CMatrix<T>, op_b: Op) -> CMatrix<T> {
    let m = if op_a == Op::N { a.nrows() } else { a.ncols() };
    let n = if op_b == Op::N { b.ncols() } else { b.nrows() };
    let mut c = CMatrix::zeros(m, n);
    gemm(creal(T::one()), a.as_view(), op_a, b.as_view(), op_b, czero(), c.as_view_mut());
    c
}

const SOLVE_BLOCK: usize = 32;

/// `(LLᴴ)⁻¹B` for a Cholesky factor, with the off-diagonal block updates
/// done by [`gemm`].
pub fn cholesky_solve<T: Real>(chol: &Cholesky<Complex<T>, Dyn>, b: &CMatrix<T>) -> CMatrix<T> {
    let l = chol.l_dirty();
    let n = l.nrows();
    assert_eq!(b.nrows(), n, "right-hand side has wrong row count");
    let one = creal(T::one());
    let mut x = b.clone();
    let blocks: Vec<(usize, usize)> = (0..n).step_by(SOLVE_BLOCK).map(|s| (s, (s + SOLVE_BLOCK).min(n))).collect();
    for &(s, e) in &blocks {
        if s > 0 {
            let (done, mut cur) = x.rows_range_pair_mut(0..s, s..e);
            gemm(-one, l.view((s, 0), (e - s, s)), Op::N, done.as_view(), Op::N, one, cur.as_view_mut());
        }
        let ok = l.view((s, s), (e - s, e - s)).solve_lower_triangular_mut(&mut x.rows_mut(s, e - s));
        debug_assert!(ok);
    }
    for &(s, e) in blocks.iter().rev() {
        if e < n {
            let (mut cur, done) = x.rows_range_pair_mut(s..e, e..n);
            gemm(-one, l.view((e, s), (n - e, e - s)), Op::H, done.as_view(), Op::N, one, cur.as_view_mut());
        }
        let ok = l.view((s, s), (e - s, e - s)).ad_solve_lower_triangular_mut(&mut x.rows_mut(s, e - s));
        debug_assert!(ok);
    }
    x
}

/// `(LLᴴ)⁻¹`.
pub fn cholesky_inverse<T: Real>(chol: &Cholesky<Complex<T>, Dyn>) -> CMatrix<T> {
    let n = chol.l_dirty().nrows();
    hermitianize(&cholesky_solve(chol, &CMatrix::identity(n, n)))
}

/// `(A + Aᴴ) / 2`, removing round-off asymmetry.
pub fn hermitianize<T: Real>(a: &CMatrix<T>) -> CMatrix<T> {
    let half = T::lit(0.5);
    (a + a.adjoint()).map(|z| z.scale(half))
}

/// Maximum entrywise modulus of `A - Aᴴ`.
pub fn hermitian_defect<T: Real>(a: &CMatrix<T>) -> T {
    let mut worst = T::zero();
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let d = cabs(a[(i, j)] - a[(j, i)].conj());
            worst = worst.max(d);
        }
    }
    worst
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues<T: Real>(a: &CMatrix<T>) -> Vec<T> {
    let eig = SymmetricEigen::new(hermitianize(a));
    let mut ev: Vec<T> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

pub fn min_eigenvalue<T: Real>(a: &CMatrix<T>) -> T {
    hermitian_eigenvalues(a)
        .first()
        .copied()
        .unwrap_or_else(T::zero)
}

/// Principal square root of a Hermitian PSD matrix. Negative eigenvalues
/// (numerical semi-definiteness) are clamped to zero; anything more negative
/// than `1e-10 * max(1, λ_max)` is rejected.
pub fn hermitian_sqrt<T: Real>(a: &CMatrix<T>) -> Result<CMatrix<T>> {
    if !a.is_square() {
        return Err(Error::Decomposition("square root of non-square matrix".into()));
    }
    let eig = SymmetricEigen::new(hermitianize(a));
    let lmax = eig.eigenvalues.iter().fold(T::one(), |m, &v| m.max(v.abs()));
    let tol = T::lit(1e-10) * lmax;
    let mut roots = Vec::with_capacity(eig.eigenvalues.len());
    for &lambda in eig.eigenvalues.iter() {
        if !lambda.is_finite() {
            return Err(Error::Decomposition("non-finite eigenvalue".into()));
        }
        if lambda < -tol {
            return Err(Error::Decomposition(format!(
                "matrix is not positive semi-definite (eigenvalue {})",
                lambda
            )));
        }
        roots.push(lambda.max(T::zero()).sqrt());
    }
    let u = &eig.eigenvectors;
    let mut scaled = u.clone();
    for (j, &s) in roots.iter().enumerate() {
        scaled.column_mut(j).scale_mut(s);
    }
    Ok(hermitianize(&(scaled * u.adjoint())))
}

/// Cholesky factorization of a Hermitian PD matrix.
pub fn cholesky<T: Real>(
    a: CMatrix<T>,
    what: &str,
) -> Result<Cholesky<num_complex::Complex<T>, Dyn>> {
    Cholesky::new(a).ok_or_else(|| {
        Error::Decomposition(format!("{what} is not Hermitian positive definite"))
    })
}

/// `A + s·I` in place.
pub fn add_scaled_identity<T: Real>(a: &mut CMatrix<T>, s: T) {
    let n = a.nrows().min(a.ncols());
    for i in 0..n {
        a[(i, i)] += creal(s);
    }
}

/// `‖h_i‖²` for every column.
pub fn column_norms_sq<T: Real>(h: &CMatrix<T>) -> Vec<T> {
    h.column_iter().map(|c| c.norm_squared()).collect()
}

pub fn all_finite<T: Real>(v: &CVector<T>) -> bool {
    v.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// `A·diag(d)·Aᴴ` for real nonnegative `d`.
pub fn weighted_gram<T: Real>(a: &CMatrix<T>, d: &[T]) -> CMatrix<T> {
    let mut scaled = a.clone();
    for (j, &w) in d.iter().enumerate() {
        scaled.column_mut(j).scale_mut(w);
    }
    hermitianize(&matmul(&scaled, Op::N, a, Op::H))
}
