//! Activation bundles: an `N × d` matrix of hidden states plus the manifest
//! describing where they came from.
//!
//! Rows are kept exactly as extracted (no centering, no scaling) and stored
//! as `f32`; every downstream quantity is computed in `f64` from them.

use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::manifest::{f32s_to_le, le_to_f32s, read_file, write_atomic, Manifest};

const WHAT: &str = "bundle file";

macro_rules! text_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = $crate::error::Error;

            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err($crate::error::Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($name), " `{}`"),
                        other
                    ))),
                }
            }
        }
    };
}
pub(crate) use text_enum;

text_enum! {
    /// Where in the block the hidden state was read.
    Placement {
        ResidualPreBlock => "residual_pre_block",
        AttentionOutput => "attention_output",
    }
}

text_enum! {
    /// How token states were reduced to one row per text.
    TokenScope {
        LastToken => "last_token",
        MeanPooled => "mean_pooled",
    }
}

text_enum! {
    Pole {
        Positive => "positive",
        Negative => "negative",
        Neutral => "neutral",
    }
}

text_enum! {
    /// Publisher split of a probe dataset. Optional in the manifest.
    Split {
        Train => "train",
        Test => "test",
    }
}

text_enum! {
    PoleSelection {
        Bipolar => "bipolar",
        PositiveOnly => "positive_only",
        NegativeOnly => "negative_only",
        NeutralOnly => "neutral_only",
    }
}

impl PoleSelection {
    pub fn admits(self, pole: Pole) -> bool {
        match self {
            PoleSelection::Bipolar => matches!(pole, Pole::Positive | Pole::Negative),
            PoleSelection::PositiveOnly => pole == Pole::Positive,
            PoleSelection::NegativeOnly => pole == Pole::Negative,
            PoleSelection::NeutralOnly => pole == Pole::Neutral,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleManifest {
    pub model_id: String,
    pub concept: String,
    pub layer: u32,
    pub placement: Placement,
    pub token_scope: TokenScope,
    pub split: Option<Split>,
    hidden_dim: usize,
    pole_labels: Vec<Pole>,
}

impl BundleManifest {
    pub fn new(
        model_id: impl Into<String>,
        concept: impl Into<String>,
        layer: u32,
        placement: Placement,
        token_scope: TokenScope,
        hidden_dim: usize,
        pole_labels: Vec<Pole>,
    ) -> Result<Self> {
        if hidden_dim == 0 {
            return Err(Error::InvalidArgument("hidden dimension must be positive".into()));
        }
        if pole_labels.is_empty() {
            return Err(Error::InvalidArgument("a bundle needs at least one row".into()));
        }
        Ok(Self {
            model_id: model_id.into(),
            concept: concept.into(),
            layer,
            placement,
            token_scope,
            split: None,
            hidden_dim,
            pole_labels,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn rows(&self) -> usize {
        self.pole_labels.len()
    }

    pub fn pole_labels(&self) -> &[Pole] {
        &self.pole_labels
    }

    pub fn count(&self, pole: Pole) -> usize {
        self.pole_labels.iter().filter(|&&p| p == pole).count()
    }
}

/// Immutable `N × d` activation matrix with its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBundle {
    manifest: BundleManifest,
    data: Vec<f32>,
}

impl ActivationBundle {
    /// Builds a bundle from row-major `data`, checking every invariant.
    pub fn new(manifest: BundleManifest, data: Vec<f32>) -> Result<Self> {
        let (n, d) = (manifest.rows(), manifest.hidden_dim());
        if data.len() != n * d {
            return Err(Error::dims("bundle payload (float32 values)", n * d, data.len()));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: idx / d,
                col: idx % d,
            });
        }
        Ok(Self { manifest, data })
    }

    pub fn from_rows(manifest: BundleManifest, rows: &[Vec<f32>]) -> Result<Self> {
        let d = manifest.hidden_dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::dims(format!("bundle row {i}"), d, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(manifest, data)
    }

    pub fn manifest(&self) -> &BundleManifest {
        &self.manifest
    }

    pub fn rows(&self) -> usize {
        self.manifest.rows()
    }

    pub fn dim(&self) -> usize {
        self.manifest.hidden_dim()
    }

    pub fn labels(&self) -> &[Pole] {
        self.manifest.pole_labels()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim())
    }

    /// The activation matrix widened to `f64`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rows(), self.dim(), self.data.iter().map(|&v| v as f64))
    }

    /// Same manifest, new payload (e.g. after steering). Labels are kept.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.manifest.clone(), data)
    }

    pub fn with_layer(mut self, layer: u32) -> Self {
        self.manifest.layer = layer;
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.manifest.split = Some(split);
        self
    }

    pub fn with_concept(mut self, concept: impl Into<String>) -> Self {
        self.manifest.concept = concept.into();
        self
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let m = &self.manifest;
        let mut header = Manifest::new();
        header.push("model_id", &m.model_id)?;
        header.push("concept", &m.concept)?;
        header.push("layer", m.layer)?;
        header.push("placement", m.placement)?;
        header.push("token_scope", m.token_scope)?;
        header.push("d", m.hidden_dim)?;
        header.push("n", m.rows())?;
        let labels: Vec<&str> = m.pole_labels.iter().map(|p| p.as_str()).collect();
        header.push("pole_labels", labels.join(","))?;
        if let Some(split) = m.split {
            header.push("split", split)?;
        }
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        f32s_to_le(self.data.iter().copied(), &mut payload);
        Ok(header.encode(&payload))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = Manifest::decode(WHAT, bytes)?;
        header.check_keys(
            WHAT,
            &[
                "model_id",
                "concept",
                "layer",
                "placement",
                "token_scope",
                "d",
                "n",
                "pole_labels",
                "split",
            ],
        )?;
        let model_id = header.require(WHAT, "model_id")?.to_owned();
        let concept = header.require(WHAT, "concept")?.to_owned();
        let layer: u32 = header.parse_required(WHAT, "layer")?;
        let placement = parse_field::<Placement>(&header, "placement")?;
        let token_scope = parse_field::<TokenScope>(&header, "token_scope")?;
        let d: usize = header.parse_required(WHAT, "d")?;
        let n: usize = header.parse_required(WHAT, "n")?;
        if d == 0 || n == 0 {
            return Err(Error::format(WHAT, "`d` and `n` must be positive"));
        }
        let labels = header
            .require(WHAT, "pole_labels")?
            .split(',')
            .map(|t| t.parse::<Pole>().map_err(|e| Error::format(WHAT, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != n {
            return Err(Error::dims("pole_labels count vs `n`", n, labels.len()));
        }
        let split = header.get("split").map(|s| s.parse::<Split>()).transpose()
            .map_err(|e| Error::format(WHAT, e.to_string()))?;
        let data = le_to_f32s(WHAT, payload, n * d)?;
        let mut manifest = BundleManifest::new(model_id, concept, layer, placement, token_scope, d, labels)?;
        manifest.split = split;
        Self::new(manifest, data)
    }
}

fn parse_field<T: FromStr<Err = Error>>(header: &Manifest, key: &str) -> Result<T> {
    header
        .require(WHAT, key)?
        .parse()
        .map_err(|e: Error| Error::format(WHAT, e.to_string()))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ActivationBundle> {
    ActivationBundle::decode(&read_file(path.as_ref())?)
}

pub fn save_bundle(bundle: &ActivationBundle, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &bundle.encode()?)
}

/// Keeps the rows whose pole matches `selection`, in their original order.
pub fn pool_poles(bundle: &ActivationBundle, selection: PoleSelection) -> Result<ActivationBundle> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (row, &pole) in bundle.iter_rows().zip(bundle.labels()) {
        if selection.admits(pole) {
            labels.push(pole);
            data.extend_from_slice(row);
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptySelection(format!(
            "no rows match `{selection}` in bundle `{}`",
            bundle.manifest().concept
        )));
    }
    let m = bundle.manifest();
    let mut manifest = BundleManifest::new(
        m.model_id.clone(),
        m.concept.clone(),
        m.layer,
        m.placement,
        m.token_scope,
        m.hidden_dim(),
        labels,
    )?;
    manifest.split = m.split;
    ActivationBundle::new(manifest, data)
}
