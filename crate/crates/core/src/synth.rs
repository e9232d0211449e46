//! Seeded synthetic activation generators for desk-scale experiments.
//!
//! Every generator draws from a single `ChaCha8Rng` seeded with the caller's
//! seed, so equal arguments give byte-identical bundles on every platform.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::store::{ActivationBundle, BundleManifest, Placement, Pole, Split, TokenScope};

pub const SYNTH_MODEL_ID: &str = "synthetic";

/// Std of the within-pole variation, relative to the pole gap.
const WITHIN_POLE_STD: f64 = 0.6;
/// Std of the isotropic noise, relative to the pole gap.
const NOISE_STD: f64 = 0.1;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `rows × cols` matrix with orthonormal columns (`cols ≤ rows`).
fn orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    gaussian(rng, rows, cols).qr().q().columns(0, cols).into_owned()
}

/// `n × r` coefficients with zero column means and sample covariance exactly
/// `I` (orthogonal to the all-ones vector, squared column norm `n`). Falls back
/// to plain centering when `n ≤ r`.
fn whitened(rng: &mut ChaCha8Rng, n: usize, r: usize) -> DMatrix<f64> {
    let mut g = gaussian(rng, n, r);
    if n <= r {
        center_columns(&mut g);
        return g;
    }
    let mut aug = DMatrix::from_element(n, r + 1, 1.0);
    aug.columns_mut(1, r).copy_from(&g);
    g = aug.qr().q().columns(1, r).into_owned();
    g * (n as f64).sqrt()
}

fn center_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f32>> {
    m.row_iter().map(|r| r.iter().map(|&x| x as f32).collect()).collect()
}

fn manifest(concept: &str, layer: u32, d: usize, labels: Vec<Pole>) -> Result<BundleManifest> {
    BundleManifest::new(
        SYNTH_MODEL_ID,
        concept,
        layer,
        Placement::ResidualPreBlock,
        TokenScope::LastToken,
        d,
        labels,
    )
}

/// Bipolar concept bundle: `n_per_pole` positive rows then `n_per_pole`
/// negative rows.
///
/// Pole means are `±(pole_gap/2)·u` for a random unit vector `u`. Each pole
/// varies within its own `within_pole_rank`-dimensional subspace orthogonal to
/// `u` (std `0.6·gap`), plus isotropic noise orthogonal to `u` (std `0.1·gap`).
/// Both are centered per pole, so the pole means are exact. The two pole
/// subspaces are mutually orthogonal when `2·rank + 1 ≤ d`. With `pole_gap = 0`
/// the unit scale is used for the variation.
pub fn synth_bipolar(
    d: usize,
    n_per_pole: usize,
    pole_gap: f64,
    within_pole_rank: usize,
    seed: u64,
) -> Result<ActivationBundle> {
    if within_pole_rank >= d {
        return Err(Error::InvalidArgument(format!(
            "within-pole rank must be below d = {d}, got {within_pole_rank}"
        )));
    }
    if n_per_pole == 0 {
        return Err(Error::InvalidArgument("n_per_pole must be positive".into()));
    }
    if !(pole_gap.is_finite() && pole_gap >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "pole gap must be finite and non-negative, got {pole_gap}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if pole_gap > 0.0 { pole_gap } else { 1.0 };

    let frame = orthonormal(&mut rng, d, d);
    let u = frame.column(0).into_owned();
    let complement = frame.columns(1, d - 1).into_owned();
    let rank = within_pole_rank;
    let subspaces: [DMatrix<f64>; 2] = if 2 * rank < d {
        [
            complement.columns(0, rank).into_owned(),
            complement.columns(rank, rank).into_owned(),
        ]
    } else {
        [
            &complement * orthonormal(&mut rng, d - 1, rank),
            &complement * orthonormal(&mut rng, d - 1, rank),
        ]
    };

    let n = n_per_pole;
    let mut x = DMatrix::zeros(2 * n, d);
    for (p, (sign, sub)) in [(1.0, &subspaces[0]), (-1.0, &subspaces[1])].into_iter().enumerate() {
        let mut block = DMatrix::zeros(n, d);
        if rank > 0 {
            block += whitened(&mut rng, n, rank) * sub.transpose() * (WITHIN_POLE_STD * scale);
        }
        let mut noise = gaussian(&mut rng, n, d - 1) * (NOISE_STD * scale);
        center_columns(&mut noise);
        block += noise * complement.transpose();
        let mean = u.transpose() * (sign * pole_gap / 2.0);
        for mut row in block.row_iter_mut() {
            row += &mean;
        }
        x.rows_mut(p * n, n).copy_from(&block);
    }

    let labels = [vec![Pole::Positive; n], vec![Pole::Negative; n]].concat();
    ActivationBundle::from_rows(manifest("synth_bipolar", 0, d, labels)?, &to_rows(&x))
}

/// Two bundles whose top-`k` subspaces share exactly `shared` directions.
///
/// Each bundle spans its `k` directions with whitened coefficients and strictly
/// decreasing stds (`10` down to `10·(1 − 0.04·(k−1))`), plus isotropic noise of
/// std `0.01`. The unshared directions of the two bundles are orthogonal.
pub fn synth_concept_pair(
    d: usize,
    k: usize,
    shared: usize,
    n: usize,
    seed: u64,
) -> Result<(ActivationBundle, ActivationBundle)> {
    if k == 0 || shared > k || 2 * k - shared > d {
        return Err(Error::InvalidArgument(format!(
            "need 1 ≤ k, shared ≤ k and 2k − shared ≤ d (k = {k}, shared = {shared}, d = {d})"
        )));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("need at least k = {k} rows, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = orthonormal(&mut rng, d, d);
    let columns_a: Vec<usize> = (0..k).collect();
    let columns_b: Vec<usize> = (0..shared).chain(k..2 * k - shared).collect();
    let stds = DVector::from_fn(k, |j, _| 10.0 * (1.0 - 0.04 * j as f64));

    let mut make = |name: &str, cols: &[usize]| -> Result<ActivationBundle> {
        let basis = DMatrix::from_fn(d, k, |r, c| frame[(r, cols[c])]);
        let mut coeffs = gaussian(&mut rng, n, k).qr().q().columns(0, k).into_owned();
        coeffs *= (n as f64).sqrt();
        for (mut col, s) in coeffs.column_iter_mut().zip(stds.iter()) {
            col *= *s;
        }
        let x = coeffs * basis.transpose() + gaussian(&mut rng, n, d) * 0.01;
        let labels: Vec<Pole> = (0..n)
            .map(|i| if i < n / 2 { Pole::Positive } else { Pole::Negative })
            .collect();
        ActivationBundle::from_rows(manifest(name, 0, d, labels)?, &to_rows(&x))
    };
    let a = make("synth_a", &columns_a)?;
    let b = make("synth_b", &columns_b)?;
    Ok((a, b))
}

/// One pseudo-layer of [`synth_layer_suite`].
#[derive(Debug, Clone)]
pub struct SuiteLayer {
    /// Bipolar concept activations for the conceptor and EVR.
    pub concept: ActivationBundle,
    /// Labeled probe data, positive = class 1.
    pub probe_train: ActivationBundle,
    pub probe_test: ActivationBundle,
}

/// Layer count used by the CLI suite.
pub const SUITE_LAYERS: usize = 12;

/// Separability profile of the suite: rises linearly to the middle layers and
/// falls again, always in `(0, 1]`.
pub fn suite_profile(layer: usize, layers: usize) -> f64 {
    let mid = (layers as f64 - 1.0) / 2.0;
    1.0 - (layer as f64 - mid).abs() / (mid + 1.0)
}

/// Multi-layer suite where concept rank and probe margin both follow
/// [`suite_profile`].
///
/// At profile `ρ` the concept bundle has `1 + round(ρ·(d/2 − 1))` unit-variance
/// directions over a `1e-3` noise floor, and the probe classes sit at
/// `±(0.25 + 2.5ρ)/2` along a random unit direction with unit isotropic noise.
pub fn synth_layer_suite(
    d: usize,
    n_per_class: usize,
    layers: usize,
    seed: u64,
) -> Result<Vec<SuiteLayer>> {
    if d < 4 || n_per_class < 2 || layers < 2 {
        return Err(Error::InvalidArgument(format!(
            "suite needs d ≥ 4, n_per_class ≥ 2 and layers ≥ 2 (got {d}, {n_per_class}, {layers})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * n_per_class;
    let labels = [vec![Pole::Positive; n_per_class], vec![Pole::Negative; n_per_class]].concat();
    let mut out = Vec::with_capacity(layers);
    for layer in 0..layers {
        let rho = suite_profile(layer, layers);
        let rank = 1 + (rho * (d as f64 / 2.0 - 1.0)).round() as usize;
        let basis = orthonormal(&mut rng, d, rank);
        let x = whitened(&mut rng, n, rank) * basis.transpose() + gaussian(&mut rng, n, d) * 1e-3;
        let layer_u32 = layer as u32;
        let concept = ActivationBundle::from_rows(
            manifest("synth_suite", layer_u32, d, labels.clone())?,
            &to_rows(&x),
        )?;

        let w = orthonormal(&mut rng, d, 1);
        let margin = 0.25 + 2.5 * rho;
        let mut probe = |split: Split| -> Result<ActivationBundle> {
            let mut x = gaussian(&mut rng, n, d);
            for (i, mut row) in x.row_iter_mut().enumerate() {
                let sign = if i < n_per_class { 0.5 } else { -0.5 };
                row += w.transpose() * (sign * margin);
            }
            let m = manifest("synth_suite_probe", layer_u32, d, labels.clone())?.with_split(split);
            ActivationBundle::from_rows(m, &to_rows(&x))
        };
        let probe_train = probe(Split::Train)?;
        let probe_test = probe(Split::Test)?;
        out.push(SuiteLayer {
            concept,
            probe_train,
            probe_test,
        });
    }
    Ok(out)
}
