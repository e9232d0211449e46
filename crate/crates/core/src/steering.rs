//! Steering operators and serializable steering plans.
//!
//! Plan file layout:
//!
//! ```text
//! operator: conceptor            conceptor | addition | diffmean
//! combination: interpolate       replace | interpolate | none (additive)
//! beta: 0.6
//! layer: 6
//! placement: residual_pre_block
//! token_scope: last_token        last_token | all_tokens
//! injection: once                once | autoregressive
//! <payload keys>
//! <blank line>
//! <payload>
//! ```
//!
//! A conceptor payload carries the conceptor-file keys (its own `layer`
//! renamed to `conceptor_layer`) and the same binary layout. An additive
//! payload carries `d` (plus `variant` for DiffMean) and `d` float32 LE values.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::boolean::{AnyConceptor, ConceptorLike};
use crate::conceptor_file::{push_conceptor_fields, read_conceptor_fields};
use crate::error::{Error, Result};
use crate::geometry::{DiffMeanVariant, DiffMeanVector};
use crate::manifest::{f32s_to_le, le_to_f32s, read_file, write_atomic, Manifest};
use crate::store::{text_enum, ActivationBundle, Placement};

const WHAT: &str = "plan file";

/// Conceptor apertures searched by default.
pub const CONCEPTOR_ALPHA_GRID: [f64; 9] = [0.001, 0.0125, 0.05, 0.1, 0.2, 0.5, 2.0, 5.0, 10.0];
pub const INTERPOLATE_BETA_GRID: [f64; 3] = [0.4, 0.6, 0.8];
pub const REPLACE_BETA_GRID: [f64; 4] = [1.0, 2.0, 5.0, 10.0];
pub const ADDITIVE_BETA_GRID: [f64; 4] = [0.5, 1.0, 2.0, 5.0];

text_enum! {
    Operator {
        Conceptor => "conceptor",
        Addition => "addition",
        DiffMean => "diffmean",
    }
}

text_enum! {
    Combination {
        Replace => "replace",
        Interpolate => "interpolate",
    }
}

text_enum! {
    /// Which token positions a plan rewrites.
    PlanScope {
        LastToken => "last_token",
        AllTokens => "all_tokens",
    }
}

text_enum! {
    /// When the live hook fires: prompt pass only, or every decode step.
    Injection {
        Once => "once",
        Autoregressive => "autoregressive",
    }
}

fn check_dim(what: &str, expected: usize, z: &DVector<f64>) -> Result<()> {
    if z.len() != expected {
        return Err(Error::dims(what, expected, z.len()));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be finite, got {beta}")));
    }
    Ok(())
}

/// `β·C·z`.
pub fn steer_replace<C: ConceptorLike + ?Sized>(
    z: &DVector<f64>,
    c: &C,
    beta: f64,
) -> Result<DVector<f64>> {
    check_beta(beta)?;
    check_dim("replace steering", c.dim(), z)?;
    Ok(c.apply(z) * beta)
}

/// `(1−β)·z + β·C·z`, `β ∈ [0, 1]`.
pub fn steer_interpolate<C: ConceptorLike + ?Sized>(
    z: &DVector<f64>,
    c: &C,
    beta: f64,
) -> Result<DVector<f64>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!(
            "interpolation beta must lie in [0, 1], got {beta}"
        )));
    }
    check_dim("interpolate steering", c.dim(), z)?;
    Ok(z * (1.0 - beta) + c.apply(z) * beta)
}

/// `z + β·v̄` with `v̄` the concept centroid.
pub fn steer_addition(z: &DVector<f64>, centroid: &DVector<f64>, beta: f64) -> Result<DVector<f64>> {
    check_beta(beta)?;
    check_dim("addition steering", centroid.len(), z)?;
    Ok(z + centroid * beta)
}

/// `z + β·v`.
pub fn steer_diffmean(z: &DVector<f64>, v: &DiffMeanVector, beta: f64) -> Result<DVector<f64>> {
    check_beta(beta)?;
    check_dim("DiffMean steering", v.dim(), z)?;
    Ok(z + &v.v * beta)
}

/// What a plan adds or projects with.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanPayload {
    Conceptor(AnyConceptor),
    Addition(DVector<f64>),
    DiffMean(DiffMeanVector),
}

impl PlanPayload {
    pub fn operator(&self) -> Operator {
        match self {
            PlanPayload::Conceptor(_) => Operator::Conceptor,
            PlanPayload::Addition(_) => Operator::Addition,
            PlanPayload::DiffMean(_) => Operator::DiffMean,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PlanPayload::Conceptor(c) => c.dim(),
            PlanPayload::Addition(v) => v.len(),
            PlanPayload::DiffMean(v) => v.dim(),
        }
    }
}

/// A validated single-layer intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPlan {
    payload: PlanPayload,
    combination: Option<Combination>,
    beta: f64,
    pub layer: u32,
    pub placement: Placement,
    pub token_scope: PlanScope,
    pub injection: Injection,
}

impl SteeringPlan {
    /// Conceptor plans need a combination; additive plans must pass `None`.
    pub fn new(
        payload: PlanPayload,
        combination: Option<Combination>,
        beta: f64,
        layer: u32,
        placement: Placement,
        token_scope: PlanScope,
        injection: Injection,
    ) -> Result<Self> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "beta must be finite and non-negative, got {beta}"
            )));
        }
        match (&payload, combination) {
            (PlanPayload::Conceptor(_), None) => {
                return Err(Error::InvalidArgument(
                    "conceptor plans need a combination (replace or interpolate)".into(),
                ))
            }
            (PlanPayload::Conceptor(_), Some(Combination::Interpolate)) if beta > 1.0 => {
                return Err(Error::InvalidArgument(format!(
                    "interpolation beta must lie in [0, 1], got {beta}"
                )))
            }
            (PlanPayload::Addition(_) | PlanPayload::DiffMean(_), Some(c)) => {
                return Err(Error::InvalidArgument(format!(
                    "additive operators are always additive; combination `{c}` is not allowed"
                )))
            }
            _ => {}
        }
        if let PlanPayload::Addition(v) = &payload {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument("addition vector has non-finite entries".into()));
            }
        }
        Ok(Self {
            payload,
            combination,
            beta,
            layer,
            placement,
            token_scope,
            injection,
        })
    }

    pub fn payload(&self) -> &PlanPayload {
        &self.payload
    }

    pub fn operator(&self) -> Operator {
        self.payload.operator()
    }

    pub fn combination(&self) -> Option<Combination> {
        self.combination
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn dim(&self) -> usize {
        self.payload.dim()
    }

    /// Applies the operator to a single state.
    pub fn steer(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        match (&self.payload, self.combination) {
            (PlanPayload::Conceptor(c), Some(Combination::Replace)) => steer_replace(z, c, self.beta),
            (PlanPayload::Conceptor(c), _) => steer_interpolate(z, c, self.beta),
            (PlanPayload::Addition(v), _) => steer_addition(z, v, self.beta),
            (PlanPayload::DiffMean(v), _) => steer_diffmean(z, v, self.beta),
        }
    }

    /// Indices of the rows of a `T`-row token matrix this plan rewrites.
    pub fn rows_touched(&self, t: usize) -> std::ops::Range<usize> {
        match self.token_scope {
            PlanScope::LastToken => t.saturating_sub(1)..t,
            PlanScope::AllTokens => 0..t,
        }
    }
}

/// Applies `plan` to a `T × d` matrix of token states. Rows outside the plan's
/// scope are copied unchanged.
pub fn apply_plan(z: &DMatrix<f64>, plan: &SteeringPlan) -> Result<DMatrix<f64>> {
    if z.nrows() == 0 {
        return Err(Error::EmptySelection("token matrix has no rows".into()));
    }
    if z.ncols() != plan.dim() {
        return Err(Error::dims("token state width", plan.dim(), z.ncols()));
    }
    let mut out = z.clone();
    for t in plan.rows_touched(z.nrows()) {
        let row = z.row(t).transpose();
        out.row_mut(t).copy_from(&plan.steer(&row)?.transpose());
    }
    Ok(out)
}

/// [`apply_plan`] on row-major `f32` storage. Untouched rows keep their bits.
pub fn apply_plan_f32(data: &[f32], t: usize, plan: &SteeringPlan) -> Result<Vec<f32>> {
    let d = plan.dim();
    if t == 0 {
        return Err(Error::EmptySelection("token matrix has no rows".into()));
    }
    if data.len() != t * d {
        return Err(Error::dims("token buffer length", t * d, data.len()));
    }
    let mut out = data.to_vec();
    for r in plan.rows_touched(t) {
        let z = DVector::from_iterator(d, data[r * d..(r + 1) * d].iter().map(|&x| x as f64));
        let steered = plan.steer(&z)?;
        for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(steered.iter()) {
            *o = *v as f32;
            if !o.is_finite() {
                return Err(Error::Numeric(format!("steered state overflows float32 at row {r}")));
            }
        }
    }
    Ok(out)
}

/// Treats the bundle's rows as consecutive token states and steers them.
pub fn steer_bundle(bundle: &ActivationBundle, plan: &SteeringPlan) -> Result<ActivationBundle> {
    if bundle.dim() != plan.dim() {
        return Err(Error::dims("bundle width vs plan", plan.dim(), bundle.dim()));
    }
    let data = apply_plan_f32(bundle.data(), bundle.rows(), plan)?;
    bundle.with_data(data)
}

const PLAN_KEYS: &[&str] = &[
    "operator",
    "combination",
    "beta",
    "layer",
    "placement",
    "token_scope",
    "injection",
];
const CONCEPTOR_KEYS: &[&str] = &["concept", "conceptor_layer", "alpha", "d", "spectrum", "expression"];
const VECTOR_KEYS: &[&str] = &["d", "variant"];

pub fn encode_plan(plan: &SteeringPlan) -> Result<Vec<u8>> {
    let mut header = Manifest::new();
    header.push("operator", plan.operator())?;
    header.push(
        "combination",
        plan.combination.map_or("none", Combination::as_str),
    )?;
    header.push("beta", plan.beta)?;
    header.push("layer", plan.layer)?;
    header.push("placement", plan.placement)?;
    header.push("token_scope", plan.token_scope)?;
    header.push("injection", plan.injection)?;
    let mut payload = Vec::new();
    match &plan.payload {
        PlanPayload::Conceptor(c) => {
            let mut fields = Manifest::new();
            push_conceptor_fields(c, &mut fields, &mut payload)?;
            for (k, v) in fields.entries() {
                header.push(if k == "layer" { "conceptor_layer" } else { k }, v)?;
            }
        }
        PlanPayload::Addition(v) => {
            header.push("d", v.len())?;
            f32s_to_le(v.iter().map(|&x| x as f32), &mut payload);
        }
        PlanPayload::DiffMean(v) => {
            header.push("d", v.dim())?;
            header.push("variant", v.variant)?;
            f32s_to_le(v.v.iter().map(|&x| x as f32), &mut payload);
        }
    }
    Ok(header.encode(&payload))
}

fn parse_key<T: std::str::FromStr<Err = Error>>(header: &Manifest, key: &str) -> Result<T> {
    header
        .require(WHAT, key)?
        .parse()
        .map_err(|e: Error| Error::format(WHAT, e.to_string()))
}

pub fn decode_plan(bytes: &[u8]) -> Result<SteeringPlan> {
    let (header, payload) = Manifest::decode(WHAT, bytes)?;
    let operator: Operator = parse_key(&header, "operator")?;
    let extra = match operator {
        Operator::Conceptor => CONCEPTOR_KEYS,
        Operator::Addition | Operator::DiffMean => VECTOR_KEYS,
    };
    let allowed: Vec<&str> = PLAN_KEYS.iter().chain(extra).copied().collect();
    header.check_keys(WHAT, &allowed)?;

    let combination = match header.require(WHAT, "combination")? {
        "none" => None,
        text => Some(
            text.parse::<Combination>()
                .map_err(|e| Error::format(WHAT, e.to_string()))?,
        ),
    };
    let beta: f64 = header.parse_required(WHAT, "beta")?;
    let layer: u32 = header.parse_required(WHAT, "layer")?;
    let placement: Placement = parse_key(&header, "placement")?;
    let token_scope: PlanScope = parse_key(&header, "token_scope")?;
    let injection: Injection = parse_key(&header, "injection")?;

    let body = match operator {
        Operator::Conceptor => {
            let mut fields = Manifest::new();
            for (k, v) in header.entries() {
                if CONCEPTOR_KEYS.contains(&k) {
                    fields.push(if k == "conceptor_layer" { "layer" } else { k }, v)?;
                }
            }
            PlanPayload::Conceptor(read_conceptor_fields(WHAT, &fields, payload)?)
        }
        Operator::Addition | Operator::DiffMean => {
            let d: usize = header.parse_required(WHAT, "d")?;
            if d == 0 {
                return Err(Error::format(WHAT, "`d` must be positive"));
            }
            let values = le_to_f32s(WHAT, payload, d)?;
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: 0, col: i });
            }
            let v = DVector::from_iterator(d, values.iter().map(|&x| x as f64));
            if operator == Operator::Addition {
                if header.get("variant").is_some() {
                    return Err(Error::format(WHAT, "addition plans take no `variant` key"));
                }
                PlanPayload::Addition(v)
            } else {
                let variant: DiffMeanVariant = parse_key(&header, "variant")?;
                PlanPayload::DiffMean(DiffMeanVector::new(v, variant)?)
            }
        }
    };
    SteeringPlan::new(body, combination, beta, layer, placement, token_scope, injection)
        .map_err(|e| Error::format(WHAT, e.to_string()))
}

pub fn save_plan(plan: &SteeringPlan, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_plan(plan)?)
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<SteeringPlan> {
    decode_plan(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boolean::MatrixConceptor;
    use crate::conceptor::{fit_conceptor, ConceptorMeta, CorrelationMatrix};

    fn diag(values: &[f64]) -> MatrixConceptor {
        let m = DMatrix::from_diagonal(&DVector::from_row_slice(values));
        MatrixConceptor::from_matrix(&m, crate::boolean::Expr::leaf("diag"), 0).unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn plan(payload: PlanPayload, comb: Option<Combination>, beta: f64, scope: PlanScope) -> SteeringPlan {
        SteeringPlan::new(
            payload,
            comb,
            beta,
            3,
            Placement::ResidualPreBlock,
            scope,
            Injection::Once,
        )
        .unwrap()
    }

    #[test]
    fn replace_examples() {
        let id = MatrixConceptor::identity(2);
        let z = v(&[3.0, 4.0]);
        assert_eq!(steer_replace(&z, &id, 1.0).unwrap(), z);
        assert_eq!(steer_replace(&z, &id, 0.0).unwrap(), v(&[0.0, 0.0]));
        assert_eq!(steer_replace(&z, &diag(&[1.0, 0.0]), 2.0).unwrap(), v(&[6.0, 0.0]));
        assert!(steer_replace(&v(&[1.0]), &id, 1.0).is_err());
    }

    #[test]
    fn interpolate_examples() {
        let c = diag(&[0.3, 0.9]);
        let z = v(&[1.0, -2.0]);
        assert_eq!(steer_interpolate(&z, &c, 0.0).unwrap(), z);
        assert_eq!(
            steer_interpolate(&z, &c, 1.0).unwrap(),
            steer_replace(&z, &c, 1.0).unwrap()
        );
        let shrunk = steer_interpolate(&v(&[5.0, 5.0]), &MatrixConceptor::zero(2), 0.6).unwrap();
        assert!((shrunk - v(&[2.0, 2.0])).norm() < 1e-15);
        assert!(steer_interpolate(&z, &c, 1.5).is_err());
        assert!(steer_interpolate(&z, &c, -0.1).is_err());
    }

    #[test]
    fn additive_examples() {
        let z = v(&[1.0, 1.0]);
        assert_eq!(steer_addition(&z, &v(&[2.0, -1.0]), 0.0).unwrap(), z);
        assert_eq!(steer_addition(&z, &v(&[0.0, 0.0]), 3.0).unwrap(), z);
        assert_eq!(steer_addition(&z, &v(&[2.0, -1.0]), 2.0).unwrap(), v(&[5.0, -1.0]));
        let dm = DiffMeanVector::new(v(&[1.0, 2.0]), DiffMeanVariant::UnipolarPosMinusNeg).unwrap();
        assert_eq!(steer_diffmean(&v(&[0.0, 0.0]), &dm, 0.5).unwrap(), v(&[0.5, 1.0]));
        assert!(steer_diffmean(&v(&[0.0]), &dm, 0.5).is_err());
    }

    #[test]
    fn construction_invariants() {
        let add = || PlanPayload::Addition(v(&[1.0, 0.0]));
        let cpt = || PlanPayload::Conceptor(MatrixConceptor::identity(2).into());
        let mk = |p, c, b| {
            SteeringPlan::new(p, c, b, 0, Placement::AttentionOutput, PlanScope::AllTokens, Injection::Once)
        };
        assert!(mk(add(), Some(Combination::Replace), 1.0).is_err());
        assert!(mk(cpt(), Some(Combination::Interpolate), -1.0).is_err());
        assert!(mk(cpt(), Some(Combination::Interpolate), 1.2).is_err());
        assert!(mk(cpt(), None, 1.0).is_err());
        assert!(mk(cpt(), Some(Combination::Replace), 10.0).is_ok());
        assert!(mk(add(), None, 5.0).is_ok());
    }

    #[test]
    fn last_token_scope_leaves_earlier_rows() {
        let p = plan(
            PlanPayload::Conceptor(diag(&[0.5, 0.25]).into()),
            Some(Combination::Replace),
            2.0,
            PlanScope::LastToken,
        );
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = apply_plan(&z, &p).unwrap();
        assert_eq!(out.rows(0, 2), z.rows(0, 2));
        assert_eq!(out.row(2).iter().copied().collect::<Vec<_>>(), vec![5.0, 3.0]);
        let all = plan(
            PlanPayload::Conceptor(diag(&[0.5, 0.25]).into()),
            Some(Combination::Replace),
            2.0,
            PlanScope::AllTokens,
        );
        let out = apply_plan(&z, &all).unwrap();
        assert_eq!(out, DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 3.0, 2.0, 5.0, 3.0]));
        assert!(apply_plan(&DMatrix::zeros(0, 2), &all).is_err());
        assert!(apply_plan(&DMatrix::zeros(2, 3), &all).is_err());
    }

    #[test]
    fn plan_files_round_trip() {
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let c = fit_conceptor(&CorrelationMatrix::from_matrix(r, 3).unwrap(), 2.0)
            .unwrap()
            .with_meta(ConceptorMeta {
                concept: "sentiment".into(),
                layer: 9,
                expression: None,
            });
        let plans = [
            plan(PlanPayload::Conceptor(c.into()), Some(Combination::Interpolate), 0.6, PlanScope::LastToken),
            plan(PlanPayload::Conceptor(diag(&[0.5, 0.1]).into()), Some(Combination::Replace), 5.0, PlanScope::AllTokens),
            plan(PlanPayload::Addition(v(&[0.25, -1.5])), None, 2.0, PlanScope::AllTokens),
            plan(
                PlanPayload::DiffMean(DiffMeanVector::new(v(&[1.0, 2.0]), DiffMeanVariant::BipolarVsNull).unwrap()),
                None,
                0.5,
                PlanScope::LastToken,
            ),
        ];
        for p in &plans {
            let bytes = encode_plan(p).unwrap();
            let back = decode_plan(&bytes).unwrap();
            assert_eq!(encode_plan(&back).unwrap(), bytes);
            assert_eq!(back.beta(), p.beta());
            assert_eq!(back.operator(), p.operator());
        }
        let text = String::from_utf8_lossy(&encode_plan(&plans[0]).unwrap()[..200]).into_owned();
        assert!(text.starts_with(
            "operator: conceptor\ncombination: interpolate\nbeta: 0.6\nlayer: 3\nplacement: residual_pre_block\ntoken_scope: last_token\ninjection: once\nconcept: sentiment\nconceptor_layer: 9\n"
        ));
    }

    #[test]
    fn malformed_plans_are_rejected() {
        let p = plan(PlanPayload::Addition(v(&[0.25, -1.5])), None, 2.0, PlanScope::AllTokens);
        let bytes = encode_plan(&p).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let split = text.find("\n\n").unwrap() + 2;
        for (from, to) in [
            ("combination: none", "combination: replace"),
            ("beta: 2", "beta: -1"),
            ("operator: addition", "operator: steer"),
            ("token_scope: all_tokens", "token_scope: last"),
            ("injection: once", "injection: twice"),
            ("d: 2", "d: 3"),
            ("d: 2", "d: 2\nvariant: bipolar_vs_null"),
            ("d: 2", "d: 2\nalpha: 10"),
            ("layer: 3\n", ""),
        ] {
            let mangled = text[..split].replacen(from, to, 1);
            let mut b = mangled.into_bytes();
            b.extend_from_slice(&bytes[split..]);
            assert!(decode_plan(&b).is_err(), "accepted {from} -> {to}");
        }
        assert!(decode_plan(&bytes[..bytes.len() - 1]).is_err());
    }
}
