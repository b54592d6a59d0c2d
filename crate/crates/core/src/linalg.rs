//! Numerical kernels shared by the physics modules.

use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::spinops::{DenseHamiltonian, State, C64, ZERO};

/// Ascending eigenvalues and eigenvectors of a real symmetric matrix.
pub fn eigh_real(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = Mat::<f64>::from_fn(n, n, |i, j| m[(i, j)])
        .self_adjoint_eigen(Side::Lower)
        .expect("finite symmetric matrix");
    let s = eig.S().column_vector();
    let values: Vec<f64> = (0..n).map(|i| s[i]).collect();
    let order = ascending_order(&values);
    let u = eig.U();
    (
        order.iter().map(|&i| values[i]).collect(),
        DMatrix::from_fn(n, n, |r, c| u[(r, order[c])]),
    )
}

fn eigh_complex(m: &DMatrix<C64>) -> (Vec<f64>, DMatrix<C64>) {
    let n = m.nrows();
    let eig = Mat::<C64>::from_fn(n, n, |i, j| m[(i, j)])
        .self_adjoint_eigen(Side::Lower)
        .expect("finite Hermitian matrix");
    let s = eig.S().column_vector();
    let values: Vec<f64> = (0..n).map(|i| s[i].re).collect();
    let order = ascending_order(&values);
    let u = eig.U();
    (
        order.iter().map(|&i| values[i]).collect(),
        DMatrix::from_fn(n, n, |r, c| u[(r, order[c])]),
    )
}

/// Ascending eigenvalues and matching eigenvector columns.
pub fn dense_eigh(h: DenseHamiltonian) -> (Vec<f64>, DMatrix<C64>) {
    match h {
        DenseHamiltonian::Real(m) => {
            let (values, vectors) = eigh_real(&m);
            (values, vectors.map(|x| C64::new(x, 0.0)))
        }
        DenseHamiltonian::Complex(m) => eigh_complex(&m),
    }
}

fn ascending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    order
}

#[derive(Clone, Debug)]
pub struct LanczosOptions {
    pub krylov_dim: usize,
    pub max_restarts: usize,
    /// Residual target relative to the spectral-norm estimate.
    pub tol: f64,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            krylov_dim: 120,
            max_restarts: 60,
            tol: 1e-11,
            seed: 0x5eed_1a2c,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LanczosResult {
    pub values: Vec<f64>,
    pub vectors: Vec<State>,
    pub matvecs: usize,
    pub norm_estimate: f64,
}

fn orthogonalize(v: &mut State, basis: &[State]) {
    for _ in 0..2 {
        for q in basis {
            let overlap = q.dotc(v);
            v.axpy(-overlap, q, C64::new(1.0, 0.0));
        }
    }
}

fn random_state(dim: usize, rng: &mut ChaCha8Rng) -> State {
    State::from_fn(dim, |_, _| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
}

/// Lowest `k` eigenpairs of a Hermitian operator given as a matvec.
///
/// Explicitly restarted Lanczos with full reorthogonalization; each converged
/// vector is locked and deflated from later runs, so degenerate eigenvalues
/// are returned with their multiplicity.
pub fn lanczos_lowest<F>(apply: F, dim: usize, k: usize, opts: &LanczosOptions) -> Result<LanczosResult>
where
    F: Fn(&[C64], &mut [C64]),
{
    if k == 0 || k > dim {
        return Err(Error::InvalidInput(format!("cannot request {k} eigenpairs of a {dim}-dimensional operator")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut locked: Vec<State> = Vec::with_capacity(k);
    let mut matvecs = 0usize;
    let mut norm_estimate = 0.0f64;
    let mut w = State::zeros(dim);

    for _ in 0..k {
        let mut start = random_state(dim, &mut rng);
        let mut converged = false;
        let mut last_residual = f64::INFINITY;
        for _ in 0..opts.max_restarts {
            orthogonalize(&mut start, &locked);
            let start_norm = start.norm();
            if start_norm < 1e-300 {
                start = random_state(dim, &mut rng);
                continue;
            }
            let m = opts.krylov_dim.min(dim - locked.len()).max(1);
            let mut basis: Vec<State> = vec![start.unscale(start_norm)];
            let mut alpha = Vec::with_capacity(m);
            let mut beta: Vec<f64> = Vec::with_capacity(m);
            for j in 0..m {
                apply(basis[j].as_slice(), w.as_mut_slice());
                matvecs += 1;
                let a = basis[j].dotc(&w).re;
                alpha.push(a);
                let mut next = w.clone();
                orthogonalize(&mut next, &locked);
                orthogonalize(&mut next, &basis);
                let b = next.norm();
                let scale = alpha.iter().fold(norm_estimate, |acc, x| acc.max(x.abs()));
                if j + 1 == m || b <= 1e-13 * scale.max(1e-300) {
                    break;
                }
                beta.push(b);
                basis.push(next.unscale(b));
            }
            let size = alpha.len();
            let mut t = DMatrix::<f64>::zeros(size, size);
            for i in 0..size {
                t[(i, i)] = alpha[i];
                if i + 1 < size {
                    t[(i, i + 1)] = beta[i];
                    t[(i + 1, i)] = beta[i];
                }
            }
            let (eigenvalues, eigenvectors) = eigh_real(&t);
            let (imin, theta) = eigenvalues
                .iter()
                .copied()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty tridiagonal");
            norm_estimate = eigenvalues
                .iter()
                .fold(norm_estimate, |acc, x| acc.max(x.abs()));
            let mut ritz = State::zeros(dim);
            for (i, q) in basis.iter().take(size).enumerate() {
                ritz.axpy(C64::new(eigenvectors[(i, imin)], 0.0), q, C64::new(1.0, 0.0));
            }
            orthogonalize(&mut ritz, &locked);
            let rn = ritz.norm();
            ritz.unscale_mut(rn);
            apply(ritz.as_slice(), w.as_mut_slice());
            matvecs += 1;
            let residual = (&w - &ritz * C64::new(theta, 0.0)).norm();
            last_residual = residual;
            if residual <= opts.tol * norm_estimate.max(1e-300) {
                locked.push(ritz);
                converged = true;
                break;
            }
            start = ritz;
        }
        if !converged {
            return Err(Error::NoConvergence {
                solver: "lanczos",
                iterations: matvecs,
                residual: last_residual,
            });
        }
    }

    // Rayleigh-Ritz on the locked space to clean up near-degenerate mixing.
    let mut proj = DMatrix::<C64>::zeros(k, k);
    let images: Vec<State> = locked
        .iter()
        .map(|v| {
            apply(v.as_slice(), w.as_mut_slice());
            w.clone()
        })
        .collect();
    matvecs += k;
    for i in 0..k {
        for j in 0..k {
            proj[(i, j)] = locked[i].dotc(&images[j]);
        }
    }
    let proj = (&proj + proj.adjoint()) * C64::new(0.5, 0.0);
    let (values, coeffs) = dense_eigh(DenseHamiltonian::Complex(proj));
    let vectors = (0..k)
        .map(|c| {
            let mut v = State::zeros(dim);
            for (i, q) in locked.iter().enumerate() {
                v.axpy(coeffs[(i, c)], q, C64::new(1.0, 0.0));
            }
            let n = v.norm();
            v.unscale(n)
        })
        .collect();
    Ok(LanczosResult {
        values,
        vectors,
        matvecs,
        norm_estimate,
    })
}

/// Solves `(A - shift) y = b` on the orthogonal complement of `deflate` by
/// conjugate gradients; `A - shift` must be positive definite there.
pub fn cg_deflated<F>(
    apply: F,
    shift: f64,
    rhs: &State,
    deflate: &[State],
    tol: f64,
    max_iter: usize,
) -> Result<State>
where
    F: Fn(&[C64], &mut [C64]),
{
    let dim = rhs.len();
    let mut b = rhs.clone();
    orthogonalize(&mut b, deflate);
    let b_norm = b.norm();
    let mut x = State::zeros(dim);
    if b_norm == 0.0 {
        return Ok(x);
    }
    let op = |v: &State, out: &mut State| {
        apply(v.as_slice(), out.as_mut_slice());
        out.axpy(C64::new(-shift, 0.0), v, C64::new(1.0, 0.0));
        orthogonalize(out, deflate);
    };
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = State::zeros(dim);
    let mut rr = r.norm_squared();
    for it in 0..max_iter {
        if rr.sqrt() <= tol * b_norm {
            return Ok(x);
        }
        op(&p, &mut ap);
        let pap = p.dotc(&ap).re;
        if pap <= 0.0 {
            return Err(Error::NoConvergence {
                solver: "conjugate gradient (indefinite operator)",
                iterations: it,
                residual: rr.sqrt() / b_norm,
            });
        }
        let step = rr / pap;
        x.axpy(C64::new(step, 0.0), &p, C64::new(1.0, 0.0));
        r.axpy(C64::new(-step, 0.0), &ap, C64::new(1.0, 0.0));
        let rr_next = r.norm_squared();
        p = &r + &p * C64::new(rr_next / rr, 0.0);
        rr = rr_next;
    }
    // Recompute the true residual before giving up.
    let mut ax = State::zeros(dim);
    op(&x, &mut ax);
    let res = (&b - &ax).norm() / b_norm;
    if res <= tol {
        Ok(x)
    } else {
        Err(Error::NoConvergence {
            solver: "conjugate gradient",
            iterations: max_iter,
            residual: res,
        })
    }
}

/// Composite Simpson rule on uniform samples with spacing `h`; an odd number of
/// intervals closes with the 3/8 rule.
pub fn simpson(y: &[f64], h: f64) -> f64 {
    let n = y.len().saturating_sub(1);
    match n {
        0 => 0.0,
        1 => 0.5 * h * (y[0] + y[1]),
        2 => h / 3.0 * (y[0] + 4.0 * y[1] + y[2]),
        _ if n % 2 == 0 => {
            let inner: f64 = y[1..n]
                .iter()
                .enumerate()
                .map(|(i, v)| if i % 2 == 0 { 4.0 * v } else { 2.0 * v })
                .sum();
            h / 3.0 * (y[0] + inner + y[n])
        }
        _ => {
            let head = simpson(&y[..=n - 3], h);
            let t = &y[n - 3..];
            head + 3.0 * h / 8.0 * (t[0] + 3.0 * t[1] + 3.0 * t[2] + t[3])
        }
    }
}

/// Simpson integral plus a grid-halving error estimate.
pub fn simpson_with_error(y: &[f64], h: f64) -> (f64, f64) {
    let full = simpson(y, h);
    let coarse: Vec<f64> = y.iter().step_by(2).copied().collect();
    let intervals = y.len().saturating_sub(1);
    let estimate = if intervals % 2 == 0 && coarse.len() >= 3 {
        (full - simpson(&coarse, 2.0 * h)).abs()
    } else {
        // Halving would drop the last sample; compare with the trapezoid rule.
        let trap = h * (y.iter().sum::<f64>() - 0.5 * (y[0] + y[y.len() - 1]));
        (full - trap).abs()
    };
    let floor = 1e-14 * y.iter().map(|v| v.abs()).sum::<f64>() * h;
    (full, estimate.max(floor))
}

/// `exp(-i A dt) x` by a truncated Taylor series with sub-stepping, given an
/// upper bound on `||A||`.
pub fn expm_apply<F>(apply: F, x: &State, dt: f64, norm_bound: f64) -> State
where
    F: Fn(&[C64], &mut [C64]),
{
    let substeps = ((norm_bound * dt.abs()) / 0.5).ceil().max(1.0) as usize;
    let h = dt / substeps as f64;
    let mut v = x.clone();
    let mut term = State::zeros(x.len());
    let mut next = State::zeros(x.len());
    for _ in 0..substeps {
        term.copy_from(&v);
        for k in 1..=60 {
            apply(term.as_slice(), next.as_mut_slice());
            let factor = C64::new(0.0, -h / k as f64);
            for (t, n) in term.iter_mut().zip(next.iter()) {
                *t = n * factor;
            }
            v += &term;
            if term.norm() <= 1e-17 * v.norm() {
                break;
            }
        }
    }
    v
}

/// `exp(-i H t)` for a dense Hermitian matrix via its eigendecomposition.
pub fn expm_hermitian(h: DenseHamiltonian, t: f64) -> DMatrix<C64> {
    let (values, vectors) = dense_eigh(h);
    let phases = DVector::from_iterator(
        values.len(),
        values.iter().map(|&e| C64::from_polar(1.0, -e * t)),
    );
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |r, c| vectors[(r, c)] * phases[c]);
    scaled * vectors.adjoint()
}

pub fn zeros(dim: usize) -> Vec<C64> {
    vec![ZERO; dim]
}

#[cfg(test)]
mod eigh_tests {
    use super::*;

    fn residual(m: &DMatrix<C64>, values: &[f64], vectors: &DMatrix<C64>) -> f64 {
        (0..values.len())
            .map(|k| {
                let v = vectors.column(k);
                (m * v - v * C64::new(values[k], 0.0)).norm()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn degenerate_complex_spectrum() {
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = DMatrix::from_fn(n, n, |_, _| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        let (vals, vecs) = dense_eigh(DenseHamiltonian::Complex((&a + a.adjoint()) * C64::new(0.5, 0.0)));
        let mut v2 = vals.clone();
        v2[5] = v2[4];
        let d = DMatrix::from_diagonal(&DVector::from_iterator(n, v2.iter().map(|&x| C64::new(x, 0.0))));
        let m = &vecs * d * vecs.adjoint();
        let (ev, evec) = dense_eigh(DenseHamiltonian::Complex(m.clone()));
        for k in 0..n {
            assert!((ev[k] - v2[k]).abs() < 1e-10);
        }
        assert!(residual(&m, &ev, &evec) < 1e-10);
        let gram = evec.adjoint() * &evec;
        assert!((gram - DMatrix::<C64>::identity(n, n)).norm() < 1e-10);
    }

    #[test]
    fn block_diagonal_real_matrix() {
        // Chain in a z field: block diagonal by particle number.
        use crate::spinops::{build_total, ChainSpec, FieldPoint};
        let spec = ChainSpec::new(4, vec![17.458643111540646, 112.19043611322205, 116.13329037844558]).unwrap();
        let op = build_total(&spec, &FieldPoint::along_z(64.45595064158746)).unwrap();
        let m = op.to_dense_real().unwrap();
        let (ev, evec) = dense_eigh(DenseHamiltonian::Real(m.clone()));
        let mc = m.map(|x| C64::new(x, 0.0));
        assert!(residual(&mc, &ev, &evec) < 1e-12 * op.norm_bound());
        assert!(ev.windows(2).all(|w| w[0] <= w[1]));
    }
}
