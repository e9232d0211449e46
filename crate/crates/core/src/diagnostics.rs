//! Linear probes, AUC, Pearson correlation and the per-layer spectral sweep.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::conceptor::{correlation_matrix, fit_conceptor, Conceptor};
use crate::error::{Error, Result};
use crate::geometry::evr_from_spectrum;
use crate::store::{ActivationBundle, Pole, Split};

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const PROBE_MAX_ITER: usize = 500;
pub const PROBE_TOLERANCE: f64 = 1e-8;

/// L2-regularized logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// Weights in standardized feature space.
    pub weights: DVector<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub feature_mean: DVector<f64>,
    pub feature_scale: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ProbeModel {
    /// Logit for one raw (unstandardized) feature vector.
    pub fn decision(&self, x: &DVector<f64>) -> f64 {
        let standardized = (x - &self.feature_mean).component_div(&self.feature_scale);
        self.weights.dot(&standardized) + self.bias
    }

    /// Logits for every row of `x`.
    pub fn scores(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.weights.len() {
            return Err(Error::dims("probe features", self.weights.len(), x.ncols()));
        }
        Ok(x.row_iter().map(|r| self.decision(&r.transpose())).collect())
    }
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss plus `(λ/2)‖w‖²`; the bias is not penalized.
pub fn probe_loss(x: &DMatrix<f64>, y: &[bool], w: &DVector<f64>, b: f64, lambda: f64) -> f64 {
    let s = (x * w).add_scalar(b);
    let data: f64 = s
        .iter()
        .zip(y)
        .map(|(&si, &yi)| softplus(si) - if yi { si } else { 0.0 })
        .sum();
    data / y.len() as f64 + 0.5 * lambda * w.norm_squared()
}

fn check_labels(labels: &[bool]) -> Result<()> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Degenerate("both classes must be present".into()));
    }
    Ok(())
}

/// Newton's method with backtracking from `w = 0, b = 0` on train-standardized
/// features. Stops when the gradient ∞-norm drops below `1e-8` or after 500
/// iterations.
pub fn fit_probe(x: &DMatrix<f64>, labels: &[bool], lambda: f64) -> Result<ProbeModel> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if x.nrows() != labels.len() {
        return Err(Error::dims("probe labels", x.nrows(), labels.len()));
    }
    check_labels(labels)?;
    let (n, d) = (x.nrows(), x.ncols());
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let scale = DVector::from_fn(d, |j, _| {
        let sd = x.column(j).variance().sqrt();
        if sd > 0.0 {
            sd
        } else {
            1.0
        }
    });
    let mut z = x.clone();
    for (j, mut col) in z.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
        col /= scale[j];
    }
    // Augmented design [z | 1]; the last parameter is the bias.
    let mut a = DMatrix::from_element(n, d + 1, 1.0);
    a.columns_mut(0, d).copy_from(&z);
    let y = DVector::from_iterator(n, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
    let mut penalty = DVector::from_element(d + 1, lambda);
    penalty[d] = 0.0;
    let loss = |theta: &DVector<f64>| {
        let w = theta.rows(0, d).into_owned();
        probe_loss(&z, labels, &w, theta[d], lambda)
    };

    let mut theta = DVector::zeros(d + 1);
    let mut current = loss(&theta);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < PROBE_MAX_ITER {
        let s = &a * &theta;
        let p = s.map(sigmoid);
        let grad = a.tr_mul(&(&p - &y)) / n as f64 + penalty.component_mul(&theta);
        if grad.amax() < PROBE_TOLERANCE {
            converged = true;
            break;
        }
        let weights = p.map(|pi| pi * (1.0 - pi) / n as f64);
        let mut weighted = a.clone();
        for (mut row, &wt) in weighted.row_iter_mut().zip(weights.iter()) {
            row *= wt;
        }
        let mut hessian = a.tr_mul(&weighted);
        for j in 0..=d {
            hessian[(j, j)] += penalty[j];
        }
        let step = match hessian.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                // Saturated bias curvature: fall back to a damped system.
                for j in 0..=d {
                    hessian[(j, j)] += 1e-10;
                }
                hessian
                    .lu()
                    .solve(&grad)
                    .ok_or_else(|| Error::Numeric("probe Hessian is singular".into()))?
            }
        };
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut next = &theta - &step * t;
        let mut next_loss = loss(&next);
        while next_loss > current - 1e-4 * t * slope && t > 1e-12 {
            t *= 0.5;
            next = &theta - &step * t;
            next_loss = loss(&next);
        }
        iterations += 1;
        if next_loss > current {
            // No descent left at machine precision.
            break;
        }
        theta = next;
        current = next_loss;
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("probe weights diverged".into()));
    }
    Ok(ProbeModel {
        weights: theta.rows(0, d).into_owned(),
        bias: theta[d],
        lambda,
        feature_mean: mean,
        feature_scale: scale,
        iterations,
        converged,
    })
}

/// Binary labels from pole labels: positive is class 1, negative class 0.
pub fn binary_labels(bundle: &ActivationBundle) -> Result<Vec<bool>> {
    bundle
        .labels()
        .iter()
        .map(|p| match p {
            Pole::Positive => Ok(true),
            Pole::Negative => Ok(false),
            Pole::Neutral => Err(Error::InvalidArgument(
                "probe bundles may only contain positive and negative rows".into(),
            )),
        })
        .collect()
}

pub fn fit_probe_bundle(train: &ActivationBundle, lambda: f64) -> Result<ProbeModel> {
    fit_probe(&train.to_matrix(), &binary_labels(train)?, lambda)
}

/// Mann–Whitney AUC; tied scores contribute one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dims("AUC labels", scores.len(), labels.len()));
    }
    check_labels(labels)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("AUC scores must be finite".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based average rank of the tie block i..=j
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Sample Pearson correlation.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dims("pearson inputs", xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::Degenerate("correlation needs at least 2 points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation of a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// One layer of sweep input.
#[derive(Debug, Clone)]
pub struct LayerInput {
    pub concept: ActivationBundle,
    /// Held-out probe data as `(train, test)`.
    pub probe: Option<(ActivationBundle, ActivationBundle)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub layer: u32,
    pub quota: f64,
    pub evr: f64,
    pub trace: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub alpha: f64,
    pub k: usize,
    pub records: Vec<LayerRecord>,
    /// Absent without probe data, or when a series is constant.
    pub r_quota_auc: Option<f64>,
    pub r_evr_auc: Option<f64>,
    /// Mean conceptor trace over all swept layers.
    pub mean_trace: f64,
}

fn probe_auc(train: &ActivationBundle, test: &ActivationBundle, lambda: f64) -> Result<f64> {
    if train.manifest().split == Some(Split::Test) || test.manifest().split == Some(Split::Train) {
        return Err(Error::InvalidArgument("probe train/test bundles have swapped split flags".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::dims("probe test width", train.dim(), test.dim()));
    }
    let model = fit_probe_bundle(train, lambda)?;
    auc(&model.scores(&test.to_matrix())?, &binary_labels(test)?)
}

fn correlation(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    match pearson_r(xs, ys) {
        Ok(r) => Ok(Some(r)),
        Err(Error::Degenerate(_)) if xs.len() >= 2 => Ok(None),
        Err(e) => Err(e),
    }
}

/// Sweeps several apertures. Each layer is eigendecomposed once and re-gated
/// for every aperture; probes are fitted once per layer.
pub fn layer_sweep_multi(
    layers: &[LayerInput],
    alphas: &[f64],
    k: usize,
    lambda: f64,
) -> Result<Vec<LayerReport>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("layer sweep needs at least one layer".into()));
    }
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("layer sweep needs at least one alpha".into()));
    }
    let mut order: Vec<&LayerInput> = layers.iter().collect();
    order.sort_by_key(|l| l.concept.manifest().layer);
    if order.windows(2).any(|w| w[0].concept.manifest().layer == w[1].concept.manifest().layer) {
        return Err(Error::InvalidArgument("duplicate layer in sweep input".into()));
    }
    let with_probe = order.iter().filter(|l| l.probe.is_some()).count();
    if with_probe != 0 && with_probe != order.len() {
        return Err(Error::InvalidArgument("probe data must be given for every layer or none".into()));
    }
    if with_probe > 0 && order.len() < 2 {
        return Err(Error::InvalidArgument("correlations need at least 2 layers".into()));
    }

    struct Fitted {
        layer: u32,
        conceptor: Conceptor,
        evr: f64,
        auc: Option<f64>,
    }
    let mut fitted = Vec::with_capacity(order.len());
    for input in &order {
        let r = correlation_matrix(&input.concept);
        let conceptor = fit_conceptor(&r, alphas[0])?;
        let evr = evr_from_spectrum(conceptor.spectrum(), k)?;
        let auc = match &input.probe {
            Some((train, test)) => Some(probe_auc(train, test, lambda)?),
            None => None,
        };
        fitted.push(Fitted {
            layer: input.concept.manifest().layer,
            conceptor,
            evr,
            auc,
        });
    }

    let mut reports = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut records = Vec::with_capacity(fitted.len());
        for f in &fitted {
            let c = f.conceptor.regate(alpha)?;
            records.push(LayerRecord {
                layer: f.layer,
                quota: c.quota(),
                evr: f.evr,
                trace: c.trace_dim(),
                auc: f.auc,
            });
        }
        let (r_quota_auc, r_evr_auc) = if with_probe > 0 {
            let aucs: Vec<f64> = records.iter().filter_map(|r| r.auc).collect();
            let quotas: Vec<f64> = records.iter().map(|r| r.quota).collect();
            let evrs: Vec<f64> = records.iter().map(|r| r.evr).collect();
            (correlation(&quotas, &aucs)?, correlation(&evrs, &aucs)?)
        } else {
            (None, None)
        };
        let mean_trace = records.iter().map(|r| r.trace).sum::<f64>() / records.len() as f64;
        reports.push(LayerReport {
            alpha,
            k,
            records,
            r_quota_auc,
            r_evr_auc,
            mean_trace,
        });
    }
    Ok(reports)
}

pub fn layer_sweep(layers: &[LayerInput], alpha: f64, k: usize, lambda: f64) -> Result<LayerReport> {
    Ok(layer_sweep_multi(layers, &[alpha], k, lambda)?.remove(0))
}

fn csv_row(out: &mut String, alpha: Option<f64>, r: &LayerRecord) {
    if let Some(a) = alpha {
        out.push_str(&format!("{a},"));
    }
    let auc = r.auc.map(|a| a.to_string()).unwrap_or_default();
    out.push_str(&format!("{},{},{},{},{}\n", r.layer, r.quota, r.evr, r.trace, auc));
}

/// `layer,quota,evr,trace,auc` for one report; long format with a leading
/// `alpha` column for several.
pub fn reports_to_csv(reports: &[LayerReport]) -> String {
    let mut out = String::new();
    if let [single] = reports {
        out.push_str("layer,quota,evr,trace,auc\n");
        for r in &single.records {
            csv_row(&mut out, None, r);
        }
    } else {
        out.push_str("alpha,layer,quota,evr,trace,auc\n");
        for report in reports {
            for r in &report.records {
                csv_row(&mut out, Some(report.alpha), r);
            }
        }
    }
    out
}

#[derive(Serialize)]
struct SummaryEntry {
    alpha: f64,
    k: usize,
    layers: usize,
    r_quota_auc: Option<f64>,
    r_evr_auc: Option<f64>,
    mean_trace: f64,
}

/// JSON summary with per-aperture correlations and mean traces.
pub fn reports_summary_json(reports: &[LayerReport]) -> String {
    let entries: Vec<SummaryEntry> = reports
        .iter()
        .map(|r| SummaryEntry {
            alpha: r.alpha,
            k: r.k,
            layers: r.records.len(),
            r_quota_auc: r.r_quota_auc,
            r_evr_auc: r.r_evr_auc,
            mean_trace: r.mean_trace,
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&serde_json::json!({ "summaries": entries }))
        .expect("summary is always serializable");
    s.push('\n');
    s
}
