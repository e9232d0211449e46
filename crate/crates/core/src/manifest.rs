//! Text-manifest + little-endian `f32` payload container shared by the
//! bundle, conceptor and plan file formats.
//!
//! A file is a block of UTF-8 `key: value` lines, a single empty line, then
//! raw payload bytes. Keys are unique; their order on disk is fixed by the
//! writer so that encoding is deterministic.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub(crate) struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let value = value.to_string();
        if value.contains('\n') || value.contains('\r') {
            return Err(Error::InvalidArgument(format!(
                "manifest value for `{key}` contains a line break"
            )));
        }
        self.entries.push((key.to_owned(), value));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, what: &'static str, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(what, format!("missing manifest key `{key}`")))
    }

    pub fn parse_required<T: std::str::FromStr>(&self, what: &'static str, key: &str) -> Result<T> {
        let raw = self.require(what, key)?;
        raw.parse()
            .map_err(|_| Error::format(what, format!("invalid value `{raw}` for key `{key}`")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, what: &'static str, allowed: &[&str]) -> Result<()> {
        for (k, _) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::format(what, format!("unknown manifest key `{k}`")));
            }
        }
        Ok(())
    }

    pub fn encode(&self, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(payload.len() + 256);
        for (k, v) in &self.entries {
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(b": ");
            out.extend_from_slice(v.as_bytes());
            out.push(b'\n');
        }
        out.push(b'\n');
        out.extend_from_slice(payload);
        out
    }

    /// Splits `bytes` into the manifest and the payload that follows the
    /// terminating blank line.
    pub fn decode<'a>(what: &'static str, bytes: &'a [u8]) -> Result<(Manifest, &'a [u8])> {
        let mut entries: Vec<(String, String)> = Vec::new();
        let mut pos = 0usize;
        loop {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format(what, "header is not terminated by a blank line"))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| Error::format(what, format!("header line at byte {pos} is not UTF-8")))?;
            pos += nl + 1;
            if line.is_empty() {
                break;
            }
            let (key, value) = line
                .split_once(": ")
                .ok_or_else(|| Error::format(what, format!("header line `{line}` is not `key: value`")))?;
            if key.is_empty() {
                return Err(Error::format(what, format!("empty key in header line `{line}`")));
            }
            if entries.iter().any(|(k, _)| k == key) {
                return Err(Error::format(what, format!("duplicate manifest key `{key}`")));
            }
            entries.push((key.to_owned(), value.to_owned()));
        }
        Ok((Manifest { entries }, &bytes[pos..]))
    }
}

pub(crate) fn f32s_to_le(values: impl IntoIterator<Item = f32>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn le_to_f32s(what: &'static str, bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::format(what, "payload length is not a multiple of 4 bytes"));
    }
    if bytes.len() != expected * 4 {
        return Err(Error::dims(
            format!("{what} payload (float32 values)"),
            expected,
            bytes.len() / 4,
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_splits_header_and_payload() {
        let mut m = Manifest::new();
        m.push("a", 1).unwrap();
        m.push("b", "x: y").unwrap();
        let bytes = m.encode(&[1, 2, 3]);
        let (back, payload) = Manifest::decode("test", &bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get("b"), Some("x: y"));
        assert_eq!(payload, &[1, 2, 3]);
    }

    #[test]
    fn missing_terminator_is_rejected() {
        assert!(Manifest::decode("test", b"a: 1\nb: 2").is_err());
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = Manifest::decode("test", b"a: 1\na: 2\n\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn line_breaks_in_values_are_rejected() {
        let mut m = Manifest::new();
        assert!(m.push("a", "x\ny").is_err());
    }

    #[test]
    fn payload_length_must_match() {
        assert!(le_to_f32s("t", &[0u8; 8], 2).is_ok());
        assert!(matches!(
            le_to_f32s("t", &[0u8; 8], 3),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(le_to_f32s("t", &[0u8; 7], 2), Err(Error::Format { .. })));
    }
}
