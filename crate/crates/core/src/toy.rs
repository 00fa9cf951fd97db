//! Exactly enumerable data distributions over token sequences.
//!
//! Sequences are indexed lexicographically with the first position most
//! significant: `idx = sum_l s_l K^(L-1-l)`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{domain, Error, Result};

/// Largest supported number of sequences `K^L`.
pub const MAX_SEQUENCES: usize = 1 << 20;

const PROB_SUM_TOL: f64 = 1e-12;

/// A categorical distribution over all `K^L` sequences, stored explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDistribution {
    len: usize,
    vocab: usize,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    cdf: Vec<f64>,
    tokens: Vec<u32>,
}

fn count(len: usize, vocab: usize) -> Result<usize> {
    if len == 0 || vocab < 2 {
        return domain("need L >= 1 and K >= 2");
    }
    let mut n: usize = 1;
    for _ in 0..len {
        n = n
            .checked_mul(vocab)
            .filter(|&n| n <= MAX_SEQUENCES)
            .ok_or_else(|| Error::Domain(format!("K^L = {vocab}^{len} exceeds {MAX_SEQUENCES}")))?;
    }
    Ok(n)
}

impl ToyDistribution {
    pub fn new(len: usize, vocab: usize, probs: Vec<f64>) -> Result<Self> {
        let n = count(len, vocab)?;
        if probs.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} probabilities, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return domain("probabilities must be finite and non-negative");
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return domain(format!("probabilities sum to {total}, not 1"));
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let mut tokens = vec![0u32; n * len];
        for idx in 0..n {
            let mut rem = idx;
            for l in (0..len).rev() {
                tokens[idx * len + l] = (rem % vocab) as u32;
                rem /= vocab;
            }
        }
        Ok(Self {
            len,
            vocab,
            probs,
            log_probs,
            cdf,
            tokens,
        })
    }

    /// Normalizes non-negative weights before construction.
    pub fn from_weights(len: usize, vocab: usize, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return domain("weights must have a positive finite sum");
        }
        Self::new(len, vocab, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(len: usize, vocab: usize) -> Result<Self> {
        let n = count(len, vocab)?;
        Self::new(len, vocab, vec![1.0 / n as f64; n])
    }

    /// Product of per-position marginals.
    pub fn product(marginals: &[Vec<f64>]) -> Result<Self> {
        let len = marginals.len();
        let vocab = marginals.first().map_or(0, |m| m.len());
        if marginals.iter().any(|m| m.len() != vocab) {
            return Err(Error::Shape(
                "marginals must share one vocabulary size".into(),
            ));
        }
        for m in marginals {
            if (m.iter().sum::<f64>() - 1.0).abs() > PROB_SUM_TOL || m.iter().any(|p| *p < 0.0) {
                return domain("each marginal must be a probability vector");
            }
        }
        let n = count(len, vocab)?;
        let mut probs = vec![1.0; n];
        for (idx, p) in probs.iter_mut().enumerate() {
            let mut rem = idx;
            for l in (0..len).rev() {
                *p *= marginals[l][rem % vocab];
                rem /= vocab;
            }
        }
        Self::from_weights(len, vocab, probs)
    }

    /// A Dirichlet(1) draw over all sequences.
    pub fn random<R: Rng + ?Sized>(len: usize, vocab: usize, rng: &mut R) -> Result<Self> {
        let n = count(len, vocab)?;
        let w = (0..n).map(|_| Exp1.sample(rng)).collect();
        Self::from_weights(len, vocab, w)
    }

    /// A product of independent Dirichlet(1) marginals.
    pub fn random_product<R: Rng + ?Sized>(len: usize, vocab: usize, rng: &mut R) -> Result<Self> {
        let marginals: Vec<Vec<f64>> = (0..len)
            .map(|_| {
                let w: Vec<f64> = (0..vocab).map(|_| Exp1.sample(rng)).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|v| v / s).collect()
            })
            .collect();
        Self::product(&marginals)
    }

    /// Parses the text format: a header line `L K` followed by one line per
    /// sequence, `tok_1 ... tok_L prob`. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty distribution file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Format(format!("bad header `{header}`")))
            })
            .collect::<Result<_>>()?;
        let [len, vocab] = dims[..] else {
            return Err(Error::Format(format!(
                "header must be `L K`, got `{header}`"
            )));
        };
        let n = count(len, vocab)?;
        let mut probs = vec![f64::NAN; n];
        for line in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != len + 1 {
                return Err(Error::Format(format!(
                    "expected {} fields in `{line}`",
                    len + 1
                )));
            }
            let mut idx = 0;
            for f in &fields[..len] {
                let tok: usize = f
                    .parse()
                    .map_err(|_| Error::Format(format!("bad token `{f}`")))?;
                if tok >= vocab {
                    return Err(Error::Format(format!(
                        "token {tok} out of range in `{line}`"
                    )));
                }
                idx = idx * vocab + tok;
            }
            let p: f64 = fields[len]
                .parse()
                .map_err(|_| Error::Format(format!("bad probability in `{line}`")))?;
            if !probs[idx].is_nan() {
                return Err(Error::Format(format!("duplicate sequence in `{line}`")));
            }
            probs[idx] = p;
        }
        if probs.iter().any(|p| p.is_nan()) {
            return Err(Error::Format(format!(
                "expected all {n} sequences to be listed"
            )));
        }
        Self::new(len, vocab, probs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Text form accepted by [`ToyDistribution::parse`]; probabilities round-trip exactly.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len, self.vocab);
        for idx in 0..self.num_sequences() {
            for t in self.tokens_of(idx) {
                write!(out, "{t} ").unwrap();
            }
            writeln!(out, "{:?}", self.probs[idx]).unwrap();
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn num_sequences(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn tokens_of(&self, idx: usize) -> &[u32] {
        &self.tokens[idx * self.len..(idx + 1) * self.len]
    }

    pub fn decode(&self, idx: usize) -> Vec<usize> {
        self.tokens_of(idx).iter().map(|&t| t as usize).collect()
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<usize> {
        if tokens.len() != self.len {
            return Err(Error::Shape(format!("expected {} tokens", self.len)));
        }
        let mut idx = 0;
        for &t in tokens {
            if t >= self.vocab {
                return domain(format!("token {t} out of range"));
            }
            idx = idx * self.vocab + t;
        }
        Ok(idx)
    }

    pub fn prob(&self, tokens: &[usize]) -> Result<f64> {
        Ok(self.probs[self.encode(tokens)?])
    }

    /// Per-position marginal distributions, `L` rows of length `K`.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.vocab]; self.len];
        for (idx, &p) in self.probs.iter().enumerate() {
            for (l, &t) in self.tokens_of(idx).iter().enumerate() {
                m[l][t as usize] += p;
            }
        }
        m
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random::<f64>() * self.cdf[self.cdf.len() - 1];
        self.cdf
            .partition_point(|&c| c <= u)
            .min(self.probs.len() - 1)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        self.decode(self.sample_index(rng))
    }
}

/// A first-order Markov chain over tokens, used as a conditional toy task:
/// given the last context token, the next block of `L` tokens has an exactly
/// enumerable distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    vocab: usize,
    init: Vec<f64>,
    trans: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn new(init: Vec<f64>, trans: Vec<Vec<f64>>) -> Result<Self> {
        let vocab = init.len();
        if vocab < 2 || trans.len() != vocab || trans.iter().any(|r| r.len() != vocab) {
            return Err(Error::Shape(
                "transition matrix must be K x K with K >= 2".into(),
            ));
        }
        for row in std::iter::once(&init).chain(trans.iter()) {
            if row.iter().any(|p| *p < 0.0 || !p.is_finite())
                || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return domain("rows must be probability vectors");
            }
        }
        Ok(Self { vocab, init, trans })
    }

    /// A chain with sharp, token-specific transitions: each row puts most of
    /// its mass on a few successors drawn at random.
    pub fn random<R: Rng + ?Sized>(vocab: usize, sharpness: f64, rng: &mut R) -> Result<Self> {
        let row = |rng: &mut R| {
            let w: Vec<f64> = (0..vocab)
                .map(|_| {
                    let e: f64 = Exp1.sample(rng);
                    e.powf(sharpness)
                })
                .collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let trans = (0..vocab).map(|_| row(rng)).collect();
        Self::new(vec![1.0 / vocab as f64; vocab], trans)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn init(&self) -> &[f64] {
        &self.init
    }

    pub fn transition(&self, from: usize) -> &[f64] {
        &self.trans[from]
    }

    /// Stationary distribution by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let mut pi = self.init.clone();
        for _ in 0..10_000 {
            let mut next = vec![0.0; self.vocab];
            for (a, &pa) in pi.iter().enumerate() {
                for (b, &tab) in self.trans[a].iter().enumerate() {
                    next[b] += pa * tab;
                }
            }
            let diff: f64 = next.iter().zip(&pi).map(|(x, y)| (x - y).abs()).sum();
            pi = next;
            if diff < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Law of the next `len` tokens given the last context token; with no
    /// context the first token follows the initial distribution.
    pub fn block_distribution(&self, last: Option<usize>, len: usize) -> Result<ToyDistribution> {
        if let Some(c) = last {
            if c >= self.vocab {
                return domain(format!("context token {c} out of range"));
            }
        }
        let n = count(len, self.vocab)?;
        let mut probs = vec![0.0; n];
        for (idx, p) in probs.iter_mut().enumerate() {
            let mut toks = vec![0; len];
            let mut rem = idx;
            for l in (0..len).rev() {
                toks[l] = rem % self.vocab;
                rem /= self.vocab;
            }
            let mut acc = match last {
                Some(c) => self.trans[c][toks[0]],
                None => self.init[toks[0]],
            };
            for w in toks.windows(2) {
                acc *= self.trans[w[0]][w[1]];
            }
            *p = acc;
        }
        ToyDistribution::from_weights(len, self.vocab, probs)
    }

    /// Mixture of the conditional block laws over a distribution of last tokens.
    pub fn marginal_block(&self, context_law: &[f64], len: usize) -> Result<ToyDistribution> {
        let mut probs = vec![0.0; count(len, self.vocab)?];
        for (c, &w) in context_law.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let d = self.block_distribution(Some(c), len)?;
            for (p, q) in probs.iter_mut().zip(d.probs()) {
                *p += w * q;
            }
        }
        ToyDistribution::from_weights(len, self.vocab, probs)
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        let mut cur = sample_categorical(&self.init, rng);
        for _ in 0..n {
            out.push(cur);
            cur = sample_categorical(&self.trans[cur], rng);
        }
        out
    }
}

pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let total: f64 = p.iter().sum();
    let mut u: f64 = rng.random::<f64>() * total;
    for (k, &pk) in p.iter().enumerate() {
        if u < pk {
            return k;
        }
        u -= pk;
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_decode_round_trip() {
        let d = ToyDistribution::uniform(3, 4).unwrap();
        for idx in 0..d.num_sequences() {
            assert_eq!(d.encode(&d.decode(idx)).unwrap(), idx);
        }
        assert_eq!(d.decode(1), vec![0, 0, 1]);
        assert_eq!(d.decode(16), vec![1, 0, 0]);
    }

    #[test]
    fn validation() {
        assert!(ToyDistribution::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(ToyDistribution::new(1, 2, vec![0.5]).is_err());
        assert!(ToyDistribution::new(1, 2, vec![1.5, -0.5]).is_err());
        assert!(ToyDistribution::uniform(21, 2).is_err());
        assert!(ToyDistribution::uniform(20, 2).is_ok());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = ToyDistribution::random(2, 3, &mut rng).unwrap();
        let back = ToyDistribution::parse(&d.to_text()).unwrap();
        assert_eq!(d, back);
        assert!(ToyDistribution::parse("1 2\n0 0.5\n").is_err());
        assert!(ToyDistribution::parse("1 2\n0 0.5\n0 0.5\n").is_err());
        assert!(ToyDistribution::parse("# toy\n1 2\n0 0.25\n\n1 0.75\n").is_ok());
    }

    #[test]
    fn product_marginals_recovered() {
        let m = vec![vec![0.2, 0.8], vec![0.5, 0.3, 0.2][..2].to_vec()];
        assert!(ToyDistribution::product(&m).is_err());
        let m = vec![vec![0.2, 0.8], vec![0.6, 0.4]];
        let d = ToyDistribution::product(&m).unwrap();
        let got = d.marginals();
        for (a, b) in got.iter().flatten().zip(m.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((d.prob(&[1, 0]).unwrap() - 0.48).abs() < 1e-15);
    }

    #[test]
    fn sampling_matches_probabilities() {
        let d = ToyDistribution::new(1, 3, vec![0.2, 0.0, 0.8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        for _ in 0..20_000 {
            counts[d.sample_index(&mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!((counts[0] as f64 / 20_000.0 - 0.2).abs() < 0.015);
    }

    #[test]
    fn markov_block_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mc = MarkovChain::random(4, 2.0, &mut rng).unwrap();
        let d = mc.block_distribution(Some(2), 3).unwrap();
        let direct = mc.transition(2)[1] * mc.transition(1)[3] * mc.transition(3)[0];
        assert!((d.prob(&[1, 3, 0]).unwrap() - direct).abs() < 1e-15);
        let pi = mc.stationary();
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mix = mc.marginal_block(&pi, 2).unwrap();
        // a stationary chain has stationary one-step marginals
        let m = mix.marginals();
        for k in 0..4 {
            assert!((m[0][k] - pi[k]).abs() < 1e-9);
        }
    }
}
