//! Closed-form NOT / AND / OR / AND-NOT on conceptor matrices.
//!
//! Operands are only ever touched through their matrices, never through the
//! activations they were fitted on. Before an inversion every eigenvalue is
//! floored at [`INVERSION_FLOOR`]; results are symmetrized and their
//! eigenvalues clipped to `[0, 1]`.

use std::fmt;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::conceptor::Conceptor;
use crate::error::{Error, Result};
use crate::linalg::{apply_eigen_form, reconstruct, sym_eigen_desc};

/// Eigenvalue floor applied before inverting a conceptor.
pub const INVERSION_FLOOR: f64 = 1e-10;

/// Provenance of a (possibly composed) conceptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Leaf(String),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn leaf(name: impl Into<String>) -> Self {
        Expr::Leaf(name.into())
    }

    /// Removes double negations, which are exact identities.
    pub fn simplify(&self) -> Expr {
        match self {
            Expr::Leaf(_) => self.clone(),
            Expr::Not(inner) => match inner.simplify() {
                Expr::Not(x) => *x,
                other => Expr::Not(Box::new(other)),
            },
            Expr::And(a, b) => Expr::And(Box::new(a.simplify()), Box::new(b.simplify())),
            Expr::Or(a, b) => Expr::Or(Box::new(a.simplify()), Box::new(b.simplify())),
        }
    }

    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Leaf(name) => out.push(name),
            Expr::Not(x) => x.collect_leaves(out),
            Expr::And(a, b) | Expr::Or(a, b) => {
                a.collect_leaves(out);
                b.collect_leaves(out);
            }
        }
    }

    /// Evaluates the expression, resolving each leaf name through `resolve`.
    pub fn evaluate<F>(&self, resolve: &mut F) -> Result<AnyConceptor>
    where
        F: FnMut(&str) -> Result<AnyConceptor>,
    {
        Ok(match self {
            Expr::Leaf(name) => resolve(name)?,
            Expr::Not(x) => AnyConceptor::Composed(not_conceptor(&x.evaluate(resolve)?)),
            Expr::And(a, b) => {
                let a = a.evaluate(resolve)?;
                let b = b.evaluate(resolve)?;
                AnyConceptor::Composed(and_conceptor(&a, &b)?)
            }
            Expr::Or(a, b) => {
                let a = a.evaluate(resolve)?;
                let b = b.evaluate(resolve)?;
                AnyConceptor::Composed(or_conceptor(&a, &b)?)
            }
        })
    }

    /// Parses `NOT(x)`, `AND(x,y)`, `OR(x,y)` with arbitrary nesting. Leaf
    /// names are any run of characters other than `(`, `)`, `,` and
    /// whitespace.
    pub fn parse(input: &str) -> Result<Expr> {
        let mut p = Parser { input, pos: 0 };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos < input.len() {
            return Err(p.unexpected());
        }
        Ok(e)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Leaf(name) => f.write_str(name),
            Expr::Not(x) => write!(f, "NOT({x})"),
            Expr::And(a, b) => write!(f, "AND({a},{b})"),
            Expr::Or(a, b) => write!(f, "OR({a},{b})"),
        }
    }
}

struct Parser<'a> {
    input: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        let rest = &self.input[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&self) -> Option<char> {
        self.input[self.pos..].chars().next()
    }

    fn unexpected(&self) -> Error {
        let token = match self.peek() {
            None => "end of input".to_owned(),
            Some(c) if is_delim(c) => format!("`{c}`"),
            Some(_) => format!("`{}`", self.word_at(self.pos)),
        };
        Error::Parse {
            offset: self.pos,
            token,
        }
    }

    fn word_at(&self, start: usize) -> &str {
        let rest = &self.input[start..];
        let end = rest.find(|c: char| is_delim(c) || c.is_whitespace()).unwrap_or(rest.len());
        &rest[..end]
    }

    fn expect(&mut self, c: char) -> Result<()> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            Err(self.unexpected())
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        self.skip_ws();
        let start = self.pos;
        let word = self.word_at(start).to_owned();
        if word.is_empty() {
            return Err(self.unexpected());
        }
        self.pos += word.len();
        let save = self.pos;
        self.skip_ws();
        let is_call = self.peek() == Some('(');
        match (word.as_str(), is_call) {
            ("NOT", true) => {
                self.expect('(')?;
                let x = self.expr()?;
                self.expect(')')?;
                Ok(Expr::Not(Box::new(x)))
            }
            ("AND" | "OR", true) => {
                self.expect('(')?;
                let a = self.expr()?;
                self.expect(',')?;
                let b = self.expr()?;
                self.expect(')')?;
                Ok(if word == "AND" {
                    Expr::And(Box::new(a), Box::new(b))
                } else {
                    Expr::Or(Box::new(a), Box::new(b))
                })
            }
            (_, true) => Err(Error::Parse {
                offset: start,
                token: format!("`{word}` (unknown operator)"),
            }),
            (_, false) => {
                self.pos = save;
                Ok(Expr::Leaf(word))
            }
        }
    }
}

fn is_delim(c: char) -> bool {
    matches!(c, '(' | ')' | ',')
}

/// Anything that can act as a conceptor operand.
pub trait ConceptorLike {
    fn dim(&self) -> usize;
    /// Orthonormal eigenvectors (columns) of the conceptor matrix.
    fn basis(&self) -> &DMatrix<f64>;
    /// Eigenvalues aligned with [`ConceptorLike::basis`].
    fn gates(&self) -> &[f64];
    fn matrix(&self) -> &DMatrix<f64>;
    fn expression(&self) -> Expr;
    fn layer(&self) -> u32;

    fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        apply_eigen_form(self.basis(), self.gates(), z)
    }
}

impl ConceptorLike for Conceptor {
    fn dim(&self) -> usize {
        Conceptor::dim(self)
    }
    fn basis(&self) -> &DMatrix<f64> {
        Conceptor::basis(self)
    }
    fn gates(&self) -> &[f64] {
        Conceptor::gates(self)
    }
    fn matrix(&self) -> &DMatrix<f64> {
        Conceptor::matrix(self)
    }
    fn expression(&self) -> Expr {
        let meta = self.meta();
        if let Some(expr) = meta.expression.as_deref().and_then(|t| Expr::parse(t).ok()) {
            return expr;
        }
        Expr::leaf(if meta.concept.is_empty() { "C" } else { meta.concept.as_str() })
    }
    fn layer(&self) -> u32 {
        self.meta().layer
    }
}

/// Result of a Boolean composition: a symmetric matrix with spectrum in
/// `[0, 1]`, kept in eigen-form, plus the expression that produced it.
#[derive(Debug, Clone)]
pub struct MatrixConceptor {
    basis: DMatrix<f64>,
    gates: Vec<f64>,
    expr: Expr,
    layer: u32,
    matrix: OnceLock<DMatrix<f64>>,
}

impl PartialEq for MatrixConceptor {
    fn eq(&self, other: &Self) -> bool {
        self.basis == other.basis
            && self.gates == other.gates
            && self.expr == other.expr
            && self.layer == other.layer
    }
}

impl MatrixConceptor {
    /// Builds from an eigenbasis and eigenvalues; eigenvalues are clipped to
    /// `[0, 1]`.
    pub fn from_eigen(basis: DMatrix<f64>, gates: Vec<f64>, expr: Expr, layer: u32) -> Result<Self> {
        let d = gates.len();
        if basis.nrows() != d || basis.ncols() != d {
            return Err(Error::dims("conceptor basis", d, basis.nrows().max(basis.ncols())));
        }
        if gates.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("conceptor eigenvalues are not finite".into()));
        }
        let gates = gates.into_iter().map(|g| g.clamp(0.0, 1.0)).collect();
        Ok(Self {
            basis,
            gates,
            expr,
            layer,
            matrix: OnceLock::new(),
        })
    }

    /// Eigendecomposes a symmetric matrix and clips its spectrum to `[0, 1]`.
    pub fn from_matrix(m: &DMatrix<f64>, expr: Expr, layer: u32) -> Result<Self> {
        let (values, vectors) = sym_eigen_desc(m)?;
        Self::from_eigen(vectors, values, expr, layer)
    }

    pub fn identity(d: usize) -> Self {
        Self::from_eigen(DMatrix::identity(d, d), vec![1.0; d], Expr::leaf("I"), 0)
            .expect("identity is a valid conceptor")
    }

    pub fn zero(d: usize) -> Self {
        Self::from_eigen(DMatrix::identity(d, d), vec![0.0; d], Expr::leaf("0"), 0)
            .expect("zero is a valid conceptor")
    }

    pub fn trace(&self) -> f64 {
        self.gates.iter().sum()
    }
}

impl ConceptorLike for MatrixConceptor {
    fn dim(&self) -> usize {
        self.gates.len()
    }
    fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }
    fn gates(&self) -> &[f64] {
        &self.gates
    }
    fn matrix(&self) -> &DMatrix<f64> {
        self.matrix.get_or_init(|| reconstruct(&self.basis, &self.gates))
    }
    fn expression(&self) -> Expr {
        self.expr.clone()
    }
    fn layer(&self) -> u32 {
        self.layer
    }
}

/// A conceptor as read from disk: either fitted (with its `R` spectrum and
/// aperture) or composed.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyConceptor {
    Fitted(Conceptor),
    Composed(MatrixConceptor),
}

impl From<Conceptor> for AnyConceptor {
    fn from(c: Conceptor) -> Self {
        AnyConceptor::Fitted(c)
    }
}

impl From<MatrixConceptor> for AnyConceptor {
    fn from(c: MatrixConceptor) -> Self {
        AnyConceptor::Composed(c)
    }
}

impl AnyConceptor {
    fn inner(&self) -> &dyn ConceptorLike {
        match self {
            AnyConceptor::Fitted(c) => c,
            AnyConceptor::Composed(c) => c,
        }
    }

    pub fn trace(&self) -> f64 {
        self.gates().iter().sum()
    }
}

impl ConceptorLike for AnyConceptor {
    fn dim(&self) -> usize {
        self.inner().dim()
    }
    fn basis(&self) -> &DMatrix<f64> {
        self.inner().basis()
    }
    fn gates(&self) -> &[f64] {
        self.inner().gates()
    }
    fn matrix(&self) -> &DMatrix<f64> {
        self.inner().matrix()
    }
    fn expression(&self) -> Expr {
        self.inner().expression()
    }
    fn layer(&self) -> u32 {
        self.inner().layer()
    }
}

/// `I − C`, computed in the operand's eigenbasis.
pub fn not_conceptor<C: ConceptorLike + ?Sized>(c: &C) -> MatrixConceptor {
    let gates = c.gates().iter().map(|g| 1.0 - g).collect();
    MatrixConceptor::from_eigen(
        c.basis().clone(),
        gates,
        Expr::Not(Box::new(c.expression())),
        c.layer(),
    )
    .expect("complement of a valid conceptor is valid")
}

/// `(C_a⁻¹ + C_b⁻¹ − I)⁻¹` with operand eigenvalues clamped to `[ε, 1]`.
///
/// Evaluated as `C_b (C_a + C_b − C_a C_b)⁻¹ C_a`, the same matrix for
/// invertible operands. Inverting the floored operands directly would put
/// eigenvalues near `1/ε` into the sum and cost about six digits whenever an
/// operand is rank-deficient.
pub fn and_conceptor<A, B>(a: &A, b: &B) -> Result<MatrixConceptor>
where
    A: ConceptorLike + ?Sized,
    B: ConceptorLike + ?Sized,
{
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::dims("AND operands", d, b.dim()));
    }
    let fa = floored(a);
    let fb = floored(b);
    let middle = &fa + &fb - &fa * &fb;
    let right = middle
        .lu()
        .solve(&fa)
        .ok_or_else(|| Error::Numeric("AND: C_a + C_b − C_a·C_b is singular".into()))?;
    let (gates, basis) = sym_eigen_desc(&(&fb * right))?;
    MatrixConceptor::from_eigen(
        basis,
        gates,
        Expr::And(Box::new(a.expression()), Box::new(b.expression())),
        a.layer(),
    )
}

/// `¬(¬C_a ∧ ¬C_b)`.
pub fn or_conceptor<A, B>(a: &A, b: &B) -> Result<MatrixConceptor>
where
    A: ConceptorLike + ?Sized,
    B: ConceptorLike + ?Sized,
{
    let inner = and_conceptor(&not_conceptor(a), &not_conceptor(b))?;
    let mut out = not_conceptor(&inner);
    out.expr = Expr::Or(Box::new(a.expression()), Box::new(b.expression()));
    Ok(out)
}

/// `C_a ∧ ¬C_b`: keep concept `a` while suppressing concept `b`.
pub fn and_not<A, B>(a: &A, b: &B) -> Result<MatrixConceptor>
where
    A: ConceptorLike + ?Sized,
    B: ConceptorLike + ?Sized,
{
    and_conceptor(a, &not_conceptor(b))
}

fn floored<C: ConceptorLike + ?Sized>(c: &C) -> DMatrix<f64> {
    let gates: Vec<f64> = c.gates().iter().map(|g| g.clamp(INVERSION_FLOOR, 1.0)).collect();
    reconstruct(c.basis(), &gates)
}
