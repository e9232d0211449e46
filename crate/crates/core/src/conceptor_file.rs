//! Conceptor export format.
//!
//! ```text
//! concept: sentiment
//! layer: 6
//! alpha: 10
//! d: 2304
//! <blank line>
//! U   (d×d float32 LE, row-major, eigenvectors in columns)
//! σ   (d float32 LE, spectrum of R, descending)
//! ```
//!
//! Composed conceptors have no `R`; they are written with `alpha: none`,
//! `spectrum: gates` and an `expression` key, and the trailing vector holds
//! the conceptor's own eigenvalues instead of `σ`.

use std::path::Path;

use nalgebra::DMatrix;

use crate::boolean::{AnyConceptor, ConceptorLike, Expr, MatrixConceptor};
use crate::conceptor::{Conceptor, ConceptorMeta};
use crate::error::{Error, Result};
use crate::manifest::{f32s_to_le, le_to_f32s, read_file, write_atomic, Manifest};

const WHAT: &str = "conceptor file";
const KEYS: &[&str] = &["concept", "layer", "alpha", "d", "spectrum", "expression"];

pub(crate) fn push_conceptor_fields(
    c: &AnyConceptor,
    header: &mut Manifest,
    payload: &mut Vec<u8>,
) -> Result<()> {
    let d = c.dim();
    let basis = c.basis();
    match c {
        AnyConceptor::Fitted(f) => {
            header.push("concept", &f.meta().concept)?;
            header.push("layer", f.meta().layer)?;
            header.push("alpha", f.aperture())?;
            header.push("d", d)?;
            if let Some(expr) = &f.meta().expression {
                header.push("expression", expr)?;
            }
        }
        AnyConceptor::Composed(m) => {
            let expr = m.expression().to_string();
            header.push("concept", &expr)?;
            header.push("layer", m.layer())?;
            header.push("alpha", "none")?;
            header.push("d", d)?;
            header.push("spectrum", "gates")?;
            header.push("expression", &expr)?;
        }
    }
    f32s_to_le(
        (0..d).flat_map(|r| (0..d).map(move |col| basis[(r, col)] as f32)),
        payload,
    );
    let tail: &[f64] = match c {
        AnyConceptor::Fitted(f) => f.spectrum(),
        AnyConceptor::Composed(m) => m.gates(),
    };
    f32s_to_le(tail.iter().map(|&v| v as f32), payload);
    Ok(())
}

pub(crate) fn read_conceptor_fields(
    what: &'static str,
    header: &Manifest,
    payload: &[u8],
) -> Result<AnyConceptor> {
    let d: usize = header.parse_required(what, "d")?;
    if d == 0 {
        return Err(Error::format(what, "`d` must be positive"));
    }
    let layer: u32 = header.parse_required(what, "layer")?;
    let concept = header.require(what, "concept")?.to_owned();
    let values = le_to_f32s(what, payload, d * d + d)?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(if i < d * d {
            Error::NonFinite { row: i / d, col: i % d }
        } else {
            Error::NonFinite { row: d, col: i - d * d }
        });
    }
    let basis = DMatrix::from_row_iterator(d, d, values[..d * d].iter().map(|&v| v as f64));
    let tail: Vec<f64> = values[d * d..].iter().map(|&v| v as f64).collect();
    let expression = header.get("expression").map(str::to_owned);
    match header.get("spectrum").unwrap_or("correlation") {
        "correlation" => {
            let alpha: f64 = header.parse_required(what, "alpha")?;
            let meta = ConceptorMeta {
                concept,
                layer,
                expression,
            };
            let c = Conceptor::from_parts(basis, tail, alpha, meta)
                .map_err(|e| Error::format(what, e.to_string()))?;
            Ok(AnyConceptor::Fitted(c))
        }
        "gates" => {
            let expr = match expression {
                Some(text) => Expr::parse(&text)?,
                None => Expr::leaf(concept),
            };
            if tail.iter().any(|&g| !(0.0..=1.0).contains(&g)) {
                return Err(Error::format(what, "composed eigenvalues must lie in [0, 1]"));
            }
            Ok(AnyConceptor::Composed(MatrixConceptor::from_eigen(basis, tail, expr, layer)?))
        }
        other => Err(Error::format(what, format!("unknown spectrum kind `{other}`"))),
    }
}

pub fn encode_conceptor(c: &AnyConceptor) -> Result<Vec<u8>> {
    let mut header = Manifest::new();
    let mut payload = Vec::new();
    push_conceptor_fields(c, &mut header, &mut payload)?;
    Ok(header.encode(&payload))
}

pub fn decode_conceptor(bytes: &[u8]) -> Result<AnyConceptor> {
    let (header, payload) = Manifest::decode(WHAT, bytes)?;
    header.check_keys(WHAT, KEYS)?;
    read_conceptor_fields(WHAT, &header, payload)
}

pub fn save_conceptor(c: &AnyConceptor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_conceptor(c)?)
}

pub fn load_conceptor(path: impl AsRef<Path>) -> Result<AnyConceptor> {
    decode_conceptor(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boolean::{and_not, not_conceptor};
    use crate::conceptor::{fit_conceptor, CorrelationMatrix};

    fn fitted(name: &str) -> AnyConceptor {
        let r = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 0.5]);
        let c = fit_conceptor(&CorrelationMatrix::from_matrix(r, 4).unwrap(), 0.0125).unwrap();
        AnyConceptor::Fitted(c.with_meta(ConceptorMeta {
            concept: name.into(),
            layer: 7,
            expression: None,
        }))
    }

    #[test]
    fn fitted_round_trip_is_byte_exact() {
        let bytes = encode_conceptor(&fitted("sentiment")).unwrap();
        let back = decode_conceptor(&bytes).unwrap();
        assert_eq!(encode_conceptor(&back).unwrap(), bytes);
        match back {
            AnyConceptor::Fitted(c) => {
                assert_eq!(c.aperture(), 0.0125);
                assert_eq!(c.meta().layer, 7);
            }
            _ => panic!("expected fitted"),
        }
        let text = String::from_utf8_lossy(&bytes[..60]);
        assert!(text.starts_with("concept: sentiment\nlayer: 7\nalpha: 0.0125\nd: 3\n\n"));
    }

    #[test]
    fn composed_round_trip_keeps_expression() {
        let a = fitted("abortion");
        let b = fitted("lgbtq");
        let composed = AnyConceptor::Composed(and_not(&a, &b).unwrap());
        let bytes = encode_conceptor(&composed).unwrap();
        let back = decode_conceptor(&bytes).unwrap();
        assert_eq!(back.expression().to_string(), "AND(abortion,NOT(lgbtq))");
        assert_eq!(encode_conceptor(&back).unwrap(), bytes);
        let direct = AnyConceptor::Composed(not_conceptor(&a));
        assert!(matches!(
            decode_conceptor(&encode_conceptor(&direct).unwrap()).unwrap(),
            AnyConceptor::Composed(_)
        ));
    }

    #[test]
    fn malformed_files_are_rejected() {
        let bytes = encode_conceptor(&fitted("x")).unwrap();
        assert!(decode_conceptor(&bytes[..bytes.len() - 4]).is_err());
        let text = String::from_utf8_lossy(&bytes).into_owned();
        for (from, to) in [
            ("alpha: 0.0125", "alpha: 0"),
            ("alpha: 0.0125", "alpha: -2"),
            ("d: 3", "d: 4"),
            ("layer: 7\n", ""),
            ("concept: x", "concept: x\nspectrum: weird"),
            ("concept: x", "concept: x\nbogus: 1"),
        ] {
            let mangled = text.replacen(from, to, 1);
            let header_len = mangled.find("\n\n").unwrap() + 2;
            let mut b = mangled.as_bytes()[..header_len].to_vec();
            b.extend_from_slice(&bytes[text.find("\n\n").unwrap() + 2..]);
            assert!(decode_conceptor(&b).is_err(), "accepted {from} -> {to}");
        }
    }

    #[test]
    fn unsorted_spectrum_is_rejected() {
        let bytes = encode_conceptor(&fitted("x")).unwrap();
        let mut b = bytes.clone();
        let n = b.len();
        // swap first and last spectrum entries
        let first = b[n - 12..n - 8].to_vec();
        let last = b[n - 4..].to_vec();
        b[n - 12..n - 8].copy_from_slice(&last);
        b[n - 4..].copy_from_slice(&first);
        assert!(decode_conceptor(&b).is_err());
    }
}
