//! Subspace diagnostics: top-k bases, DiffMean vectors, capture fraction,
//! cross-concept overlap and explained-variance ratio.

use std::fmt;

use nalgebra::{DMatrix, DVector, SVD};

use crate::conceptor::CorrelationMatrix;
use crate::error::{Error, Result};
use crate::linalg::fix_column_signs;
use crate::store::{text_enum, ActivationBundle, Pole};

/// Subspace size used when none is given.
pub const DEFAULT_K: usize = 10;

const SVD_MAX_ITER: usize = 10_000;
const MIN_NORM: f64 = 1e-12;

/// `d × k` matrix with orthonormal columns: the top-k right singular
/// vectors of an activation matrix, in descending singular-value order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    vectors: DMatrix<f64>,
    singular_values: Vec<f64>,
    source: String,
}

impl SubspaceBasis {
    /// Wraps a matrix whose columns are already orthonormal.
    pub fn from_orthonormal(vectors: DMatrix<f64>, source: impl Into<String>) -> Result<Self> {
        let k = vectors.ncols();
        if k == 0 || k > vectors.nrows() {
            return Err(Error::InvalidArgument(format!(
                "basis must have 1..={} columns, got {k}",
                vectors.nrows()
            )));
        }
        let gram = vectors.tr_mul(&vectors);
        if (gram - DMatrix::identity(k, k)).norm() > 1e-8 {
            return Err(Error::InvalidArgument("basis columns are not orthonormal".into()));
        }
        Ok(Self {
            vectors,
            singular_values: Vec::new(),
            source: source.into(),
        })
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn k(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Orthogonal projector `V Vᵀ`.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.vectors * self.vectors.transpose()
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.vectors * self.vectors.tr_mul(v)
    }
}

/// Top-k right singular vectors of the bundle's activation matrix, with the
/// largest-magnitude entry of each column made positive.
pub fn top_k_subspace(bundle: &ActivationBundle, k: usize) -> Result<SubspaceBasis> {
    let (n, d) = (bundle.rows(), bundle.dim());
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidArgument(format!(
            "k must be in 1..={} (min(N, d)), got {k}",
            n.min(d)
        )));
    }
    let svd = SVD::try_new(bundle.to_matrix(), false, true, f64::EPSILON, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD returned no right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    order.truncate(k);
    let mut vectors = DMatrix::from_fn(d, k, |r, c| v_t[(order[c], r)]);
    fix_column_signs(&mut vectors);
    Ok(SubspaceBasis {
        vectors,
        singular_values: order.iter().map(|&i| svd.singular_values[i]).collect(),
        source: format!(
            "{}/layer{}/{}rows",
            bundle.manifest().concept,
            bundle.manifest().layer,
            n
        ),
    })
}

text_enum! {
    /// Which mean difference a DiffMean vector is.
    DiffMeanVariant {
        BipolarVsNull => "bipolar_vs_null",
        UnipolarPosMinusNeg => "unipolar_pos_minus_neg",
        UnipolarNegMinusPos => "unipolar_neg_minus_pos",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffMeanVector {
    pub v: DVector<f64>,
    pub variant: DiffMeanVariant,
}

impl DiffMeanVector {
    pub fn new(v: DVector<f64>, variant: DiffMeanVariant) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("DiffMean vector has non-finite entries".into()));
        }
        Ok(Self { v, variant })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

impl fmt::Display for DiffMeanVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (|v| = {:.6})", self.variant, self.v.norm())
    }
}

fn mean_of(bundle: &ActivationBundle, keep: impl Fn(Pole) -> bool) -> Option<DVector<f64>> {
    let mut sum = DVector::zeros(bundle.dim());
    let mut count = 0usize;
    for (row, &pole) in bundle.iter_rows().zip(bundle.labels()) {
        if keep(pole) {
            for (s, &x) in sum.iter_mut().zip(row) {
                *s += x as f64;
            }
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

fn require_mean(bundle: &ActivationBundle, what: &str, keep: impl Fn(Pole) -> bool) -> Result<DVector<f64>> {
    mean_of(bundle, keep).ok_or_else(|| Error::EmptySelection(format!("bundle has no {what} rows")))
}

/// Mean of all pole rows: the Addition baseline's concept centroid.
pub fn concept_centroid(bundle: &ActivationBundle) -> Result<DVector<f64>> {
    require_mean(bundle, "positive or negative", |p| p != Pole::Neutral)
}

/// Mean difference for the requested variant: `v̄₊ − v̄₋`, `v̄₋ − v̄₊`, or
/// `v̄_all − v̄_null` where `v̄_all` pools both poles and `v̄_null` averages the
/// neutral rows.
pub fn diffmean(bundle: &ActivationBundle, variant: DiffMeanVariant) -> Result<DiffMeanVector> {
    let v = match variant {
        DiffMeanVariant::BipolarVsNull => {
            concept_centroid(bundle)? - require_mean(bundle, "neutral", |p| p == Pole::Neutral)?
        }
        DiffMeanVariant::UnipolarPosMinusNeg | DiffMeanVariant::UnipolarNegMinusPos => {
            let pos = require_mean(bundle, "positive", |p| p == Pole::Positive)?;
            let neg = require_mean(bundle, "negative", |p| p == Pole::Negative)?;
            if variant == DiffMeanVariant::UnipolarPosMinusNeg {
                pos - neg
            } else {
                neg - pos
            }
        }
    };
    DiffMeanVector::new(v, variant)
}

/// `‖V Vᵀ v‖² / ‖v‖²`.
pub fn capture_fraction(v: &DVector<f64>, basis: &SubspaceBasis) -> Result<f64> {
    if v.len() != basis.dim() {
        return Err(Error::dims("capture fraction vector", basis.dim(), v.len()));
    }
    let norm2 = v.norm_squared();
    if norm2.sqrt() < MIN_NORM {
        return Err(Error::Degenerate(
            "capture fraction of a vanishing vector is undefined".into(),
        ));
    }
    // ‖V Vᵀ v‖ = ‖Vᵀ v‖ for orthonormal V.
    let captured = basis.vectors.tr_mul(v).norm_squared();
    Ok((captured / norm2).clamp(0.0, 1.0))
}

/// Mean squared cosine of the principal angles, `(1/k) ‖V_aᵀ V_b‖²_F`.
pub fn subspace_overlap(a: &SubspaceBasis, b: &SubspaceBasis) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dims("subspace overlap ambient dimension", a.dim(), b.dim()));
    }
    if a.k() != b.k() {
        return Err(Error::dims("subspace overlap k", a.k(), b.k()));
    }
    let cross = a.vectors.tr_mul(&b.vectors);
    Ok((cross.norm_squared() / a.k() as f64).clamp(0.0, 1.0))
}

/// Cumulative explained-variance ratio of the top `k` eigenvalues of `R`.
pub fn evr(r: &CorrelationMatrix, k: usize) -> Result<f64> {
    let spectrum = r.spectrum()?;
    evr_from_spectrum(&spectrum, k)
}

/// EVR from an already-sorted descending spectrum.
pub fn evr_from_spectrum(spectrum: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > spectrum.len() {
        return Err(Error::InvalidArgument(format!(
            "k must be in 1..={}, got {k}",
            spectrum.len()
        )));
    }
    let total: f64 = spectrum.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("EVR of a zero-trace correlation matrix".into()));
    }
    let head: f64 = spectrum[..k].iter().sum();
    Ok((head / total).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{BundleManifest, Placement, TokenScope};
    use approx::assert_abs_diff_eq;

    fn bundle(rows: &[Vec<f32>], labels: Vec<Pole>) -> ActivationBundle {
        let m = BundleManifest::new(
            "m",
            "c",
            0,
            Placement::ResidualPreBlock,
            TokenScope::LastToken,
            rows[0].len(),
            labels,
        )
        .unwrap();
        ActivationBundle::from_rows(m, rows).unwrap()
    }

    fn basis(cols: &[&[f64]]) -> SubspaceBasis {
        let d = cols[0].len();
        let m = DMatrix::from_fn(d, cols.len(), |r, c| cols[c][r]);
        SubspaceBasis::from_orthonormal(m, "test").unwrap()
    }

    #[test]
    fn multiples_of_e2_give_positive_e2() {
        let rows = vec![vec![0.0, -2.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, -1.0, 0.0]];
        let b = top_k_subspace(&bundle(&rows, vec![Pole::Positive; 3]), 1).unwrap();
        assert_abs_diff_eq!(b.vectors()[(1, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.vectors()[(0, 0)].abs() + b.vectors()[(2, 0)].abs(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn full_rank_projector_reproduces_rows() {
        let rows = vec![
            vec![1.0, 2.0, 0.0, 0.0],
            vec![0.5, -1.0, 0.0, 0.0],
            vec![3.0, 1.0, 0.0, 0.0],
        ];
        let b = bundle(&rows, vec![Pole::Positive; 3]);
        let basis = top_k_subspace(&b, 2).unwrap();
        for r in b.iter_rows() {
            let v = DVector::from_iterator(4, r.iter().map(|&x| x as f64));
            assert_abs_diff_eq!(basis.project(&v), v, epsilon = 1e-8);
        }
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]];
        let b = bundle(&rows, vec![Pole::Positive; 2]);
        assert!(top_k_subspace(&b, 0).is_err());
        assert!(top_k_subspace(&b, 3).is_err());
        assert!(top_k_subspace(&b, 2).is_ok());
    }

    #[test]
    fn diffmean_variants() {
        let mu = [1.0f32, -2.0, 0.5];
        let neg: Vec<f32> = mu.iter().map(|x| -x).collect();
        let rows = vec![mu.to_vec(), mu.to_vec(), neg.clone(), neg];
        let b = bundle(&rows, vec![Pole::Positive, Pole::Positive, Pole::Negative, Pole::Negative]);
        let v = diffmean(&b, DiffMeanVariant::UnipolarPosMinusNeg).unwrap();
        assert_eq!(v.v.as_slice(), &[2.0, -4.0, 1.0]);
        let w = diffmean(&b, DiffMeanVariant::UnipolarNegMinusPos).unwrap();
        assert_eq!(w.v, -v.v);
        assert!(matches!(
            diffmean(&b, DiffMeanVariant::BipolarVsNull),
            Err(Error::EmptySelection(_))
        ));
    }

    #[test]
    fn diffmean_hand_computed_three_rows() {
        let rows = vec![vec![1.0, 4.0], vec![3.0, 0.0], vec![-1.0, 1.0]];
        let b = bundle(&rows, vec![Pole::Positive, Pole::Negative, Pole::Neutral]);
        // v̄_all = ((1+3)/2, (4+0)/2) = (2, 2); v̄_null = (−1, 1).
        let v = diffmean(&b, DiffMeanVariant::BipolarVsNull).unwrap();
        assert_eq!(v.v.as_slice(), &[3.0, 1.0]);
        let c = concept_centroid(&b).unwrap();
        assert_eq!(c.as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn equal_pole_means_give_zero_diffmean() {
        let rows = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let b = bundle(&rows, vec![Pole::Positive, Pole::Negative]);
        let v = diffmean(&b, DiffMeanVariant::UnipolarPosMinusNeg).unwrap();
        assert_eq!(v.v.norm(), 0.0);
    }

    #[test]
    fn capture_fraction_cases() {
        let e1 = basis(&[&[1.0, 0.0]]);
        assert_eq!(capture_fraction(&DVector::from_vec(vec![3.0, 0.0]), &e1).unwrap(), 1.0);
        assert_eq!(capture_fraction(&DVector::from_vec(vec![0.0, 2.0]), &e1).unwrap(), 0.0);
        assert_abs_diff_eq!(
            capture_fraction(&DVector::from_vec(vec![1.0, 1.0]), &e1).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        assert!(matches!(
            capture_fraction(&DVector::zeros(2), &e1),
            Err(Error::Degenerate(_))
        ));
        assert!(capture_fraction(&DVector::zeros(3), &e1).is_err());
    }

    #[test]
    fn overlap_cases() {
        let a = basis(&[&[1.0, 0.0, 0.0]]);
        let b = basis(&[&[0.6, 0.8, 0.0]]);
        let c = basis(&[&[0.0, 0.0, 1.0]]);
        assert_abs_diff_eq!(subspace_overlap(&a, &a).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(subspace_overlap(&a, &c).unwrap(), 0.0);
        assert_abs_diff_eq!(subspace_overlap(&a, &b).unwrap(), 0.36, epsilon = 1e-15);
        let two = basis(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert!(matches!(subspace_overlap(&a, &two), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn evr_cases() {
        let r = CorrelationMatrix::from_matrix(
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 0.0])),
            1,
        )
        .unwrap();
        assert_abs_diff_eq!(evr(&r, 1).unwrap(), 0.75, epsilon = 1e-15);
        assert_eq!(evr(&r, 3).unwrap(), 1.0);
        assert!(evr(&r, 4).is_err());
        let zero = CorrelationMatrix::from_matrix(DMatrix::zeros(2, 2), 1).unwrap();
        assert!(matches!(evr(&zero, 1), Err(Error::Degenerate(_))));
    }
}
