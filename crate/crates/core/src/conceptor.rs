//! Conceptor estimation from pooled activations.
//!
//! A conceptor is the minimiser of
//! `(1/N) Σ ‖xᵢ − C xᵢ‖² + α⁻² ‖C‖²_F`, which is `R (R + α⁻² I)⁻¹` for the
//! uncentered correlation matrix `R = XᵀX / N`. It is computed here from the
//! eigendecomposition `R = U diag(σ) Uᵀ` by gating every principal direction
//! with `γⱼ = σⱼ / (σⱼ + α⁻²)`. No general inverse is ever formed, and the
//! stored spectrum makes re-gating at a new aperture `O(d)`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{apply_eigen_form, reconstruct, sym_eigen_desc, symmetrized};
use crate::store::ActivationBundle;

/// Aperture used when none is given.
pub const DEFAULT_APERTURE: f64 = 10.0;

/// Spectrum entries below this fraction of the largest one are treated as 0.
pub const SPECTRUM_CLAMP: f64 = 1e-12;

/// Tolerance on negative eigenvalues relative to the largest one.
const PSD_TOLERANCE: f64 = 1e-10;

/// Uncentered sample correlation `R = XᵀX / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    r: DMatrix<f64>,
    n_samples: usize,
}

impl CorrelationMatrix {
    /// Wraps an externally supplied `R`, symmetrizing it. Positive
    /// semidefiniteness is verified when a conceptor is fitted.
    pub fn from_matrix(r: DMatrix<f64>, n_samples: usize) -> Result<Self> {
        if !r.is_square() {
            return Err(Error::dims("correlation matrix columns", r.nrows(), r.ncols()));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("correlation matrix has non-finite entries".into()));
        }
        Ok(Self {
            r: symmetrized(&r),
            n_samples,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn trace(&self) -> f64 {
        self.r.trace()
    }

    /// Descending spectrum of `R` after clamping round-off.
    pub fn spectrum(&self) -> Result<Vec<f64>> {
        Ok(clamped_eigen(&self.r)?.0)
    }
}

/// `R = XᵀX / N`, symmetrized. No centering.
pub fn correlation_matrix(bundle: &ActivationBundle) -> CorrelationMatrix {
    let x = bundle.to_matrix();
    let n = bundle.rows();
    let r = x.tr_mul(&x) / n as f64;
    CorrelationMatrix {
        r: symmetrized(&r),
        n_samples: n,
    }
}

/// Where a conceptor came from; carried into exported files.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConceptorMeta {
    pub concept: String,
    pub layer: u32,
    /// Boolean expression this conceptor stands for, when it was exported
    /// by a composition that reduced to a single operand.
    pub expression: Option<String>,
}

/// Soft gating coefficient `σ / (σ + α⁻²)`.
#[inline]
pub fn gate(sigma: f64, aperture: f64) -> f64 {
    sigma / (sigma + aperture.powi(-2))
}

fn check_aperture(aperture: f64) -> Result<()> {
    if aperture.is_finite() && aperture > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("aperture must be a positive finite number, got {aperture}")))
    }
}

fn clamped_eigen(r: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (mut values, vectors) = sym_eigen_desc(r)?;
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    if let Some(&smallest) = values.last() {
        if smallest < -PSD_TOLERANCE * top {
            return Err(Error::InvalidArgument(format!(
                "correlation matrix is not positive semidefinite (eigenvalue {smallest:e}, largest {top:e})"
            )));
        }
    }
    for v in &mut values {
        if *v < SPECTRUM_CLAMP * top {
            *v = 0.0;
        }
    }
    Ok((values, vectors))
}

/// Conceptor in the eigenbasis of its correlation matrix.
#[derive(Debug, Clone)]
pub struct Conceptor {
    basis: DMatrix<f64>,
    spectrum: Vec<f64>,
    aperture: f64,
    gates: Vec<f64>,
    meta: ConceptorMeta,
    matrix: OnceLock<DMatrix<f64>>,
}

impl PartialEq for Conceptor {
    fn eq(&self, other: &Self) -> bool {
        self.basis == other.basis
            && self.spectrum == other.spectrum
            && self.aperture == other.aperture
            && self.meta == other.meta
    }
}

/// Fits `C = R (R + α⁻² I)⁻¹` through per-eigenvalue gating.
pub fn fit_conceptor(r: &CorrelationMatrix, aperture: f64) -> Result<Conceptor> {
    check_aperture(aperture)?;
    let (spectrum, basis) = clamped_eigen(&r.r)?;
    Conceptor::from_parts(basis, spectrum, aperture, ConceptorMeta::default())
}

/// Correlation + fit in one step, tagging the result with the bundle's
/// concept and layer.
pub fn fit_bundle(bundle: &ActivationBundle, aperture: f64) -> Result<Conceptor> {
    let c = fit_conceptor(&correlation_matrix(bundle), aperture)?;
    Ok(c.with_meta(ConceptorMeta {
        concept: bundle.manifest().concept.clone(),
        layer: bundle.manifest().layer,
        expression: None,
    }))
}

impl Conceptor {
    /// Assembles a conceptor from a stored eigenbasis (columns) and the
    /// descending spectrum of `R`.
    pub fn from_parts(
        basis: DMatrix<f64>,
        spectrum: Vec<f64>,
        aperture: f64,
        meta: ConceptorMeta,
    ) -> Result<Self> {
        check_aperture(aperture)?;
        let d = spectrum.len();
        if basis.nrows() != d || basis.ncols() != d {
            return Err(Error::dims("conceptor basis", d, basis.nrows().max(basis.ncols())));
        }
        if spectrum.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidArgument("spectrum must be finite and non-negative".into()));
        }
        if spectrum.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument("spectrum must be sorted in descending order".into()));
        }
        let gates = spectrum.iter().map(|&s| gate(s, aperture)).collect();
        Ok(Self {
            basis,
            spectrum,
            aperture,
            gates,
            meta,
            matrix: OnceLock::new(),
        })
    }

    pub fn with_meta(mut self, meta: ConceptorMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn meta(&self) -> &ConceptorMeta {
        &self.meta
    }

    pub fn aperture(&self) -> f64 {
        self.aperture
    }

    /// Spectrum `σⱼ` of `R`, descending.
    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn gates(&self) -> &[f64] {
        &self.gates
    }

    pub fn dim(&self) -> usize {
        self.spectrum.len()
    }

    /// Same eigenbasis and spectrum, gates recomputed at `aperture`.
    pub fn regate(&self, aperture: f64) -> Result<Conceptor> {
        Conceptor::from_parts(self.basis.clone(), self.spectrum.clone(), aperture, self.meta.clone())
    }

    /// Mean gating coefficient, `tr(C) / d`.
    pub fn quota(&self) -> f64 {
        self.trace_dim() / self.dim() as f64
    }

    /// `tr(C)`: effective number of directions the conceptor keeps.
    pub fn trace_dim(&self) -> f64 {
        self.gates.iter().sum()
    }

    /// `(σⱼ, γⱼ)` pairs, descending in `σ`.
    pub fn gating_coefficients(&self) -> Vec<(f64, f64)> {
        self.spectrum.iter().copied().zip(self.gates.iter().copied()).collect()
    }

    /// Dense `U diag(γ) Uᵀ`, computed once.
    pub fn matrix(&self) -> &DMatrix<f64> {
        self.matrix.get_or_init(|| reconstruct(&self.basis, &self.gates))
    }

    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        apply_eigen_form(&self.basis, &self.gates, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{BundleManifest, Placement, Pole, TokenScope};
    use approx::assert_abs_diff_eq;

    fn bundle(rows: &[&[f32]]) -> ActivationBundle {
        let d = rows[0].len();
        let m = BundleManifest::new(
            "m",
            "c",
            0,
            Placement::ResidualPreBlock,
            TokenScope::LastToken,
            d,
            vec![Pole::Positive; rows.len()],
        )
        .unwrap();
        let owned: Vec<Vec<f32>> = rows.iter().map(|r| r.to_vec()).collect();
        ActivationBundle::from_rows(m, &owned).unwrap()
    }

    fn diag_r(values: &[f64]) -> CorrelationMatrix {
        CorrelationMatrix::from_matrix(DMatrix::from_diagonal(&DVector::from_row_slice(values)), 1)
            .unwrap()
    }

    #[test]
    fn zero_rows_give_zero_correlation() {
        let zero = [0.0f32; 3];
        let r = correlation_matrix(&bundle(&[&zero, &zero, &zero, &zero, &zero]));
        assert_eq!(r.matrix(), &DMatrix::zeros(3, 3));
    }

    #[test]
    fn single_basis_row_gives_rank_one() {
        let r = correlation_matrix(&bundle(&[&[1.0, 0.0, 0.0]]));
        let expected = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 0.0, 0.0]));
        assert_eq!(r.matrix(), &expected);
    }

    #[test]
    fn correlation_matches_explicit_accumulation() {
        let rows: [&[f32]; 3] = [&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]];
        let r = correlation_matrix(&bundle(&rows));
        let mut oracle = [[0.0f64; 2]; 2];
        for row in rows {
            for i in 0..2 {
                for j in 0..2 {
                    oracle[i][j] += row[i] as f64 * row[j] as f64 / 3.0;
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(r.matrix()[(i, j)], oracle[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_r_gives_zero_conceptor() {
        let c = fit_conceptor(&diag_r(&[0.0; 4]), 3.0).unwrap();
        assert_eq!(c.quota(), 0.0);
        assert_eq!(c.matrix(), &DMatrix::zeros(4, 4));
    }

    #[test]
    fn identity_r_at_unit_aperture_halves() {
        let c = fit_conceptor(&diag_r(&[1.0; 4]), 1.0).unwrap();
        assert_abs_diff_eq!(c.matrix(), &(DMatrix::identity(4, 4) * 0.5), epsilon = 1e-15);
        assert!(c.gating_coefficients().iter().all(|&(s, g)| s == 1.0 && g == 0.5));
        assert_eq!(c.quota(), 0.5);
    }

    #[test]
    fn gate_arithmetic() {
        assert_abs_diff_eq!(gate(1.0, 10.0), 1.0 / 1.01, epsilon = 1e-15);
        let c = fit_conceptor(&diag_r(&[4.0, 1.0, 0.0]), 1.0).unwrap();
        let gates: Vec<f64> = c.gating_coefficients().iter().map(|p| p.1).collect();
        assert_abs_diff_eq!(gates.as_slice(), [0.8, 0.5, 0.0].as_slice(), epsilon = 1e-15);
    }

    #[test]
    fn spectrum_is_sorted_even_for_unsorted_diagonal() {
        let c = fit_conceptor(&diag_r(&[0.0, 4.0, 1.0]), 1.0).unwrap();
        assert_eq!(c.spectrum(), &[4.0, 1.0, 0.0]);
        assert!(c.gates().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn non_positive_aperture_is_rejected() {
        let r = diag_r(&[1.0, 1.0]);
        assert!(matches!(fit_conceptor(&r, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(fit_conceptor(&r, -1.0), Err(Error::InvalidArgument(_))));
        let c = fit_conceptor(&r, 1.0).unwrap();
        assert!(c.regate(0.0).is_err());
        assert!(c.regate(f64::NAN).is_err());
    }

    #[test]
    fn indefinite_r_is_rejected() {
        assert!(fit_conceptor(&diag_r(&[1.0, -0.5]), 1.0).is_err());
    }

    #[test]
    fn tiny_negative_round_off_is_clamped() {
        let c = fit_conceptor(&diag_r(&[1.0, -1e-14]), 1.0).unwrap();
        assert_eq!(c.spectrum()[1], 0.0);
    }

    #[test]
    fn regate_identity_and_large_aperture_limit() {
        let r = diag_r(&[5.0, 0.5, 2e-3, 0.0]);
        let c = fit_conceptor(&r, 2.0).unwrap();
        assert_eq!(c.regate(c.aperture()).unwrap().gates(), c.gates());
        let wide = c.regate(1e6).unwrap();
        for &(s, g) in &wide.gating_coefficients() {
            let indicator = if s > 1e-3 { 1.0 } else { 0.0 };
            assert!(g >= 0.999 * indicator);
        }
    }

    #[test]
    fn trace_of_strong_rank_three() {
        let mut spectrum = vec![0.0; 16];
        spectrum[..3].copy_from_slice(&[1e3, 5e2, 2e2]);
        let c = fit_conceptor(&diag_r(&spectrum), 10.0).unwrap();
        let expected: f64 = spectrum.iter().map(|&s| gate(s, 10.0)).sum();
        assert_abs_diff_eq!(c.trace_dim(), expected, epsilon = 1e-12);
        assert!((2.97..=3.0).contains(&c.trace_dim()));
        assert_abs_diff_eq!(c.trace_dim(), 16.0 * c.quota(), epsilon = 1e-12);
    }

    #[test]
    fn huge_spectrum_approaches_identity_trace() {
        let c = fit_conceptor(&diag_r(&[1e12; 5]), 10.0).unwrap();
        assert_abs_diff_eq!(c.trace_dim(), 5.0, epsilon = 1e-9);
    }

    #[test]
    fn apply_matches_dense_matrix() {
        let r = CorrelationMatrix::from_matrix(
            DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 0.5]),
            4,
        )
        .unwrap();
        let c = fit_conceptor(&r, 1.5).unwrap();
        let z = DVector::from_vec(vec![1.0, -1.0, 3.0]);
        assert_abs_diff_eq!(c.apply(&z), c.matrix() * &z, epsilon = 1e-13);
    }
}
