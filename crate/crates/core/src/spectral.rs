//! Eigendecompositions, Sylvester/Lyapunov solves and the Riccati solver.

use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

pub type C64 = Complex<f64>;

/// Condition estimates above this route solves to the Kronecker fallback.
pub const CONDITION_LIMIT: f64 = 1e8;

/// Largest Kronecker system solved densely.
pub const KRONECKER_LIMIT: usize = 4096;

/// Diagonalization `A = S diag(lambda) S^-1`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: DVector<C64>,
    pub right_vectors: DMatrix<C64>,
    pub inverse_vectors: DMatrix<C64>,
    pub condition_estimate: f64,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Largest real part.
    pub fn abscissa(&self) -> f64 {
        self.eigenvalues.iter().fold(f64::NEG_INFINITY, |m, l| m.max(l.re))
    }

    pub fn max_modulus(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0, |m, l| m.max(l.norm()))
    }

    pub fn is_well_conditioned(&self) -> bool {
        self.condition_estimate <= CONDITION_LIMIT
    }
}

/// Stabilizing solution of the algebraic Riccati equation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub pi: DMatrix<f64>,
    pub residual_norm: f64,
    pub closed_loop: DMatrix<f64>,
    pub iterations: usize,
}

fn to_complex(a: &DMatrix<f64>) -> DMatrix<C64> {
    a.map(|x| C64::new(x, 0.0))
}

fn norm1(m: &DMatrix<C64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn check_square(what: &str, a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidArgument(format!(
            "{what} must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Eigenvectors of an upper triangular matrix by back substitution.
fn triangular_eigenvectors(t: &DMatrix<C64>) -> DMatrix<C64> {
    let n = t.nrows();
    let scale = t.iter().fold(0.0f64, |m, z| m.max(z.norm())).max(f64::MIN_POSITIVE);
    let floor = f64::EPSILON * scale;
    let mut x = DMatrix::<C64>::zeros(n, n);
    for j in 0..n {
        let lambda = t[(j, j)];
        x[(j, j)] = C64::new(1.0, 0.0);
        for i in (0..j).rev() {
            let mut acc = C64::new(0.0, 0.0);
            for l in i + 1..=j {
                acc += t[(i, l)] * x[(l, j)];
            }
            let mut d = t[(i, i)] - lambda;
            if d.norm() < floor {
                d = C64::new(floor, 0.0);
            }
            x[(i, j)] = -acc / d;
        }
        let norm = x.column(j).norm();
        x.column_mut(j).unscale_mut(norm);
    }
    x
}

/// Makes eigenpairs of a real matrix come in exact conjugate pairs.
fn pair_conjugates(values: &mut DVector<C64>, vectors: &mut DMatrix<C64>, tol: f64) {
    let n = values.len();
    let mut used = vec![false; n];
    for i in 0..n {
        if used[i] || values[i].im <= tol {
            continue;
        }
        let target = values[i].conj();
        let partner = (0..n)
            .filter(|&j| j != i && !used[j] && values[j].im < -tol)
            .min_by(|&a, &b| {
                (values[a] - target)
                    .norm()
                    .total_cmp(&(values[b] - target).norm())
            });
        if let Some(j) = partner {
            used[i] = true;
            used[j] = true;
            values[j] = target;
            let conj_col = vectors.column(i).map(|z| z.conj());
            vectors.set_column(j, &conj_col);
        }
    }
}

/// Diagonalizes a real square matrix through a complex Schur form.
pub fn eig(a: &DMatrix<f64>) -> Result<Spectrum> {
    check_square("matrix", a)?;
    let n = a.nrows();
    let ac = to_complex(a);
    let schur = Schur::try_new(ac.clone(), f64::EPSILON, 10_000 * n.max(1)).ok_or_else(|| {
        Error::numerical("Schur iteration did not converge", f64::NAN)
    })?;
    let (q, t) = schur.unpack();
    let mut values = t.diagonal();
    let mut vectors = &q * triangular_eigenvectors(&t);
    let a_norm = a.norm();
    pair_conjugates(&mut values, &mut vectors, 1e-12 * a_norm.max(1.0));

    let residual = (&ac * &vectors - &vectors * DMatrix::from_diagonal(&values)).norm();
    if residual > 1e-10 * a_norm.max(f64::MIN_POSITIVE) && residual > 0.0 {
        return Err(Error::numerical("eigendecomposition reconstruction residual too large", residual));
    }
    let inverse = vectors
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::numerical("eigenvector matrix is singular", residual))?;
    let condition_estimate = (norm1(&vectors) * norm1(&inverse)).max(1.0);
    if !condition_estimate.is_finite() {
        return Err(Error::numerical("eigenvector matrix is singular", residual));
    }
    Ok(Spectrum {
        eigenvalues: values,
        right_vectors: vectors,
        inverse_vectors: inverse,
        condition_estimate,
    })
}

/// Largest real part of the eigenvalues of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> Result<f64> {
    check_square("matrix", a)?;
    let eigs = Schur::try_new(a.clone(), f64::EPSILON, 10_000 * a.nrows().max(1))
        .map(|s| s.complex_eigenvalues())
        .ok_or_else(|| Error::numerical("eigenvalue iteration did not converge", f64::NAN))?;
    Ok(eigs.iter().fold(f64::NEG_INFINITY, |m, l| m.max(l.re)))
}

fn sylvester_guard(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    1e-12 * (a.norm() + b.norm())
}

/// Solves `A^T X + X B = C` by diagonalizing `A` and `B`.
pub fn solve_sylvester_diag(
    a: &DMatrix<f64>,
    spec_a: &Spectrum,
    b: &DMatrix<f64>,
    spec_b: &Spectrum,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    ensure_dim("Sylvester rhs rows", c.nrows(), spec_a.dim())?;
    ensure_dim("Sylvester rhs cols", c.ncols(), spec_b.dim())?;
    let guard = sylvester_guard(a, b);
    let (sa, sb) = (&spec_a.right_vectors, &spec_b.right_vectors);
    let ct = sa.transpose() * to_complex(c) * sb;
    let mut xt = ct;
    for i in 0..xt.nrows() {
        for j in 0..xt.ncols() {
            let d = spec_a.eigenvalues[i] + spec_b.eigenvalues[j];
            if d.norm() <= guard {
                return Err(Error::SingularEquation(format!(
                    "eigenvalue sum {d} is within {guard:e} of zero"
                )));
            }
            xt[(i, j)] /= d;
        }
    }
    let x = spec_a.inverse_vectors.transpose() * xt * &spec_b.inverse_vectors;
    Ok(x.map(|z| z.re))
}

/// Solves `A^T X + X B = C` through the dense Kronecker system
/// `(I (x) A^T + B^T (x) I) vec(X) = vec(C)`.
pub fn solve_sylvester_kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square("A", a)?;
    check_square("B", b)?;
    let (na, nb) = (a.nrows(), b.nrows());
    ensure_dim("Sylvester rhs rows", c.nrows(), na)?;
    ensure_dim("Sylvester rhs cols", c.ncols(), nb)?;
    let size = na * nb;
    if size > KRONECKER_LIMIT {
        return Err(Error::SizeGuard(format!(
            "Kronecker Sylvester system of size {size} exceeds {KRONECKER_LIMIT}"
        )));
    }
    // column-major vec: X[(i, j)] sits at i + j * na
    let mut k = DMatrix::<f64>::zeros(size, size);
    for j in 0..nb {
        for i in 0..na {
            let row = i + j * na;
            for l in 0..na {
                k[(row, l + j * na)] += a[(l, i)];
            }
            for l in 0..nb {
                k[(row, i + l * na)] += b[(l, j)];
            }
        }
    }
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularEquation("Kronecker Sylvester system is singular".into()))?;
    Ok(DMatrix::from_column_slice(na, nb, sol.as_slice()))
}

/// Sylvester solve that prefers diagonalization and falls back to the
/// Kronecker system for ill-conditioned or defective spectra.
pub fn solve_sylvester(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let spectra = eig(a).and_then(|sa| Ok((sa, eig(b)?)));
    match spectra {
        Ok((sa, sb)) if sa.is_well_conditioned() && sb.is_well_conditioned() => {
            solve_sylvester_diag(a, &sa, b, &sb, c)
        }
        _ => solve_sylvester_kronecker(a, b, c),
    }
}

/// `A - (1/alpha) B (B^T Pi)`.
pub fn closed_loop_matrix(a: &DMatrix<f64>, b: &DVector<f64>, pi: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    ensure_dim("A columns", a.ncols(), n)?;
    ensure_dim("B", b.len(), n)?;
    ensure_dim("Pi rows", pi.nrows(), n)?;
    ensure_dim("Pi columns", pi.ncols(), n)?;
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let k = pi.transpose() * b / alpha;
    Ok(a - b * k.transpose())
}

/// `||A^T Pi + Pi A + Q - (1/alpha) Pi B B^T Pi||_F`.
pub fn riccati_residual(a: &DMatrix<f64>, b: &DVector<f64>, q: &DMatrix<f64>, alpha: f64, pi: &DMatrix<f64>) -> f64 {
    let pb = pi * b;
    (a.transpose() * pi + pi * a + q - &pb * pb.transpose() / alpha).norm()
}

/// Newton-Kleinman iteration for `A^T Pi + Pi A + Q - (1/alpha) Pi B B^T Pi = 0`.
///
/// `k0` is an initial feedback row with `A - B k0^T` stable; `None` means zero.
pub fn solve_riccati(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    q: &DMatrix<f64>,
    alpha: f64,
    k0: Option<&DVector<f64>>,
) -> Result<RiccatiSolution> {
    check_square("A", a)?;
    check_square("Q", q)?;
    let n = a.nrows();
    ensure_dim("B", b.len(), n)?;
    ensure_dim("Q", q.nrows(), n)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let mut k = match k0 {
        Some(k0) => {
            ensure_dim("K0", k0.len(), n)?;
            k0.clone()
        }
        None => DVector::zeros(n),
    };
    let initial = a - b * k.transpose();
    let abscissa = spectral_abscissa(&initial)?;
    if abscissa >= 0.0 {
        return Err(Error::Precondition(format!(
            "initial feedback is not stabilizing (spectral abscissa {abscissa:e})"
        )));
    }

    let q_norm = q.norm();
    let mut pi = DMatrix::<f64>::zeros(n, n);
    let mut last_change = f64::INFINITY;
    let mut iterations = 0;
    for j in 1..=100 {
        iterations = j;
        let aj = a - b * k.transpose();
        let rhs = -(q + &k * k.transpose() * alpha);
        let next = solve_sylvester(&aj, &aj, &rhs)?;
        let next = (&next + next.transpose()) * 0.5;
        let change = (&next - &pi).norm();
        if j > 2 && change > last_change {
            log::warn!("Newton-Kleinman step {j}: change {change:e} grew from {last_change:e}");
        }
        pi = next;
        k = pi.transpose() * b / alpha;
        if change <= 1e-12 * pi.norm() {
            break;
        }
        // stalled at rounding level: further steps only shuffle noise
        if j > 5 && change >= last_change && change <= 1e-9 * pi.norm().max(1.0) {
            break;
        }
        last_change = change;
    }

    let residual_norm = riccati_residual(a, b, q, alpha, &pi);
    if !(residual_norm <= 1e-9 * q_norm.max(1.0)) {
        return Err(Error::numerical("Newton-Kleinman iteration stalled", residual_norm));
    }
    let min_eig = SymmetricEigen::new(pi.clone()).eigenvalues.min();
    if min_eig < -1e-10 * pi.norm() {
        return Err(Error::numerical("Riccati solution is not positive semidefinite", min_eig));
    }
    let closed_loop = closed_loop_matrix(a, b, &pi, alpha)?;
    let cl_abscissa = spectral_abscissa(&closed_loop)?;
    if cl_abscissa >= 0.0 {
        return Err(Error::numerical("Riccati solution is not stabilizing", cl_abscissa));
    }
    Ok(RiccatiSolution {
        pi,
        residual_norm,
        closed_loop,
        iterations,
    })
}
