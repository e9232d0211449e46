//! Reference implementations used as independent oracles. Nothing here calls
//! the eigen-based code paths under test.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use conceptor_steer::conceptor::CorrelationMatrix;
use conceptor_steer::store::{ActivationBundle, BundleManifest, Placement, Pole, TokenScope};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random orthogonal matrix via Gram–Schmidt on a Gaussian matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = gaussian(rng, d, d);
    let mut q = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut v = g.column(j).into_owned();
        for i in 0..j {
            let qi = q.column(i).into_owned();
            v -= &qi * qi.dot(&v);
        }
        // second pass for stability
        for i in 0..j {
            let qi = q.column(i).into_owned();
            v -= &qi * qi.dot(&v);
        }
        q.set_column(j, &(v.normalize()));
    }
    q
}

/// Activation matrix with per-column scales drawn from [0.1, 3], rounded to
/// f32 so bundles and the oracle see identical data.
pub fn random_activations(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
    let mix = random_orthogonal(rng, d);
    let raw = gaussian(rng, n, d);
    let x = DMatrix::from_fn(n, d, |r, c| raw[(r, c)] * scales[c]) * mix;
    x.map(|v| v as f32 as f64)
}

pub fn bundle_from(x: &DMatrix<f64>, labels: Vec<Pole>) -> ActivationBundle {
    let m = BundleManifest::new(
        "oracle",
        "test",
        0,
        Placement::ResidualPreBlock,
        TokenScope::LastToken,
        x.ncols(),
        labels,
    )
    .unwrap();
    let rows: Vec<Vec<f32>> = x.row_iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    ActivationBundle::from_rows(m, &rows).unwrap()
}

/// `XᵀX / N` accumulated row by row.
pub fn correlation_oracle(x: &DMatrix<f64>) -> DMatrix<f64> {
    let d = x.ncols();
    let mut r = DMatrix::zeros(d, d);
    for row in x.row_iter() {
        for i in 0..d {
            for j in 0..d {
                r[(i, j)] += row[i] * row[j];
            }
        }
    }
    r / x.nrows() as f64
}

pub fn corr(x: &DMatrix<f64>) -> CorrelationMatrix {
    CorrelationMatrix::from_matrix(correlation_oracle(x), x.nrows()).unwrap()
}

/// `R (R + α⁻² I)⁻¹` by LU solve.
pub fn dense_conceptor(r: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let d = r.nrows();
    let shifted = r + DMatrix::identity(d, d) * alpha.powi(-2);
    // C = R S⁻¹  ⇔  S C ᵀ = Rᵀ (S, R symmetric)
    let ct = shifted.lu().solve(&r.transpose()).expect("shifted R is invertible");
    ct.transpose()
}

/// `tr((I−C) R (I−C)ᵀ) + α⁻² ‖C‖²_F`.
pub fn objective(c: &DMatrix<f64>, r: &DMatrix<f64>, alpha: f64) -> f64 {
    let d = r.nrows();
    let e = DMatrix::identity(d, d) - c;
    (&e * r * e.transpose()).trace() + alpha.powi(-2) * c.norm_squared()
}

/// Gradient of [`objective`] in `C`: `2(C − I)R + 2α⁻²C`.
pub fn gradient(c: &DMatrix<f64>, r: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let d = r.nrows();
    (c - DMatrix::identity(d, d)) * r * 2.0 + c * (2.0 * alpha.powi(-2))
}

/// Accelerated gradient descent (constant-momentum Nesterov) from `C = 0`.
/// The objective is `μ`-strongly convex with `μ = 2α⁻²` and `L`-smooth with
/// `L ≤ 2(‖R‖_F + α⁻²)`. Stops once the gradient norm is below `1e-12`.
pub fn gd_oracle(r: &DMatrix<f64>, alpha: f64) -> (DMatrix<f64>, usize) {
    let d = r.nrows();
    let mu = 2.0 * alpha.powi(-2);
    let lipschitz = 2.0 * (r.norm() + alpha.powi(-2));
    let kappa = lipschitz / mu;
    let momentum = (kappa.sqrt() - 1.0) / (kappa.sqrt() + 1.0);
    let mut c = DMatrix::zeros(d, d);
    let mut y = c.clone();
    for it in 0..1_000_000 {
        let g = gradient(&y, r, alpha);
        let next = &y - g / lipschitz;
        y = &next + (&next - &c) * momentum;
        c = next;
        if gradient(&c, r, alpha).norm() < 1e-12 {
            return (c, it + 1);
        }
    }
    panic!("gradient oracle did not converge");
}

/// Central finite-difference gradient of [`objective`].
pub fn fd_gradient(c: &DMatrix<f64>, r: &DMatrix<f64>, alpha: f64, h: f64) -> DMatrix<f64> {
    let d = r.nrows();
    DMatrix::from_fn(d, d, |i, j| {
        let mut plus = c.clone();
        plus[(i, j)] += h;
        let mut minus = c.clone();
        minus[(i, j)] -= h;
        (objective(&plus, r, alpha) - objective(&minus, r, alpha)) / (2.0 * h)
    })
}

pub fn scalar_not(a: f64) -> f64 {
    1.0 - a
}

pub fn scalar_and(a: f64, b: f64) -> f64 {
    1.0 / (1.0 / a + 1.0 / b - 1.0)
}

pub fn scalar_or(a: f64, b: f64) -> f64 {
    scalar_not(scalar_and(scalar_not(a), scalar_not(b)))
}

/// `Q diag(values) Qᵀ`.
pub fn eigen_form(q: &DMatrix<f64>, values: &[f64]) -> DMatrix<f64> {
    q * DMatrix::from_diagonal(&DVector::from_row_slice(values)) * q.transpose()
}

/// `vᵀ P v / vᵀ v` with the projector `P = V Vᵀ` formed explicitly.
pub fn projector_capture(v: &DVector<f64>, basis: &DMatrix<f64>) -> f64 {
    let p = basis * basis.transpose();
    v.dot(&(&p * v)) / v.dot(v)
}

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue, from
/// nalgebra's dense symmetric solver.
pub fn dense_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let e = nalgebra::SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let vals = order.iter().map(|&i| e.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| e.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Largest principal angle between the column spans of two orthonormal
/// matrices of equal width.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = (a.transpose() * b).singular_values();
    let smallest = s.iter().copied().fold(f64::INFINITY, f64::min);
    smallest.clamp(-1.0, 1.0).acos()
}
