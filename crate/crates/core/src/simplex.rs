//! Simplex and logit-space primitives.
//!
//! Everything that feeds a loss goes through log-space helpers
//! ([`log_softmax`], [`logsumexp`]); probabilities are materialised only at
//! API boundaries.

use crate::error::{domain, Error, Result};
use crate::State;

/// Tolerance on `sum(probs) == 1` accepted by [`SimplexPoint::new`].
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;

/// A point on the probability simplex of dimension `K - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint {
    probs: Vec<f64>,
}

impl SimplexPoint {
    /// Validates and renormalises `probs`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return domain(format!("simplex point needs K >= 2, got {}", probs.len()));
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("simplex entry".into()));
        }
        if probs.iter().any(|&p| p < 0.0) {
            return domain("simplex entries must be non-negative");
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return domain(format!("simplex entries sum to {sum}, expected 1"));
        }
        Ok(Self {
            probs: probs.into_iter().map(|p| p / sum).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

/// Unconstrained logit lift of a simplex point; defined up to `+ c * 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    logits: Vec<f64>,
}

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.iter().any(|z| z.is_nan()) {
            return Err(Error::NonFinite("NaN logit".into()));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("infinite logit".into()));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

/// A token sequence with an optional clean context prefix.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub tokens: Vec<usize>,
    pub context: Option<Vec<usize>>,
}

impl TokenSeq {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self {
            tokens,
            context: None,
        }
    }

    pub fn with_context(tokens: Vec<usize>, context: Vec<usize>) -> Self {
        Self {
            tokens,
            context: Some(context),
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        let ctx = self.context.iter().flatten();
        if let Some(&bad) = self.tokens.iter().chain(ctx).find(|&&k| k >= vocab) {
            return domain(format!("token {bad} out of range for vocabulary {vocab}"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = logsumexp(z);
    z.iter().map(|&v| v - lse).collect()
}

/// Max-subtracted softmax on a raw slice, written into `out`.
pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    out
}

pub fn softmax(z: &LogitVector) -> Result<SimplexPoint> {
    SimplexPoint::new(softmax_slice(z.logits()))
}

/// Row-wise softmax of an `L x K` logit matrix.
pub fn softmax_rows(z: &State) -> State {
    let mut out = z.clone();
    for (mut row, zr) in out.rows_mut().into_iter().zip(z.rows()) {
        let zr = zr.to_vec();
        softmax_into(&zr, row.as_slice_mut().expect("row-major"));
    }
    out
}

/// `KL(p || q)` with `0 log 0 := 0`.
pub fn kl_div(p: &SimplexPoint, q: &SimplexPoint) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("KL of {} vs {}", p.len(), q.len())));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::Overflow("q vanishes where p is positive".into()));
            }
            acc += pi * (pi.ln() - qi.ln());
        }
    }
    Ok(acc.max(0.0))
}

/// `KL(p || softmax(z))` evaluated through log-softmax.
pub fn kl_from_logits(p: &[f64], z: &[f64]) -> f64 {
    let logq = log_softmax(z);
    p.iter()
        .zip(&logq)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &lq)| pi * (pi.ln() - lq))
        .sum::<f64>()
        .max(0.0)
}

/// `-log pred_k` at the hot index of a one-hot target.
pub fn cross_entropy(target_onehot: &SimplexPoint, pred: &SimplexPoint) -> Result<f64> {
    if target_onehot.len() != pred.len() {
        return Err(Error::Shape("cross entropy dimension".into()));
    }
    let hot = one_hot_index(target_onehot)?;
    let p = pred.probs()[hot];
    if p <= 0.0 {
        return Err(Error::Overflow("prediction is zero at the target".into()));
    }
    Ok(-p.ln())
}

/// Cross-entropy of token `k` under `softmax(z)`.
pub fn cross_entropy_logits(k: usize, z: &[f64]) -> f64 {
    logsumexp(z) - z[k]
}

fn one_hot_index(p: &SimplexPoint) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in p.probs().iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return domain("cross-entropy target must be one-hot");
        }
    }
    hot.ok_or_else(|| Error::Domain("cross-entropy target must be one-hot".into()))
}

pub fn one_hot(k: usize, vocab: usize) -> Result<SimplexPoint> {
    if k >= vocab {
        return domain(format!("index {k} out of range for K={vocab}"));
    }
    let mut probs = vec![0.0; vocab];
    probs[k] = 1.0;
    SimplexPoint::new(probs)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn decode_argmax(p: &SimplexPoint) -> usize {
    argmax(p.probs())
}

/// Argmax of every row of an `L x K` matrix.
pub fn decode_rows(x: &State) -> Vec<usize> {
    x.rows().into_iter().map(|r| argmax(&r.to_vec())).collect()
}

/// One-hot matrix of a token sequence.
pub fn one_hot_rows(tokens: &[usize], vocab: usize) -> State {
    let mut m = State::zeros((tokens.len(), vocab));
    for (l, &k) in tokens.iter().enumerate() {
        m[[l, k]] = 1.0;
    }
    m
}
