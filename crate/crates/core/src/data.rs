//! Training data sources: enumerable toys, a Markov block task with
//! context, and character-level text corpora.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::simplex::TokenSeq;
use crate::toy::{MarkovChain, ToyDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Toy,
    Markov,
    Corpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Toy table or corpus text. A toy without a file is drawn at random.
    pub path: Option<PathBuf>,
    pub seq_len: usize,
    pub vocab: usize,
    pub seed: u64,
    /// Random toys: independent positions instead of a full joint table.
    pub product: bool,
    /// Markov: concentration of the transition rows (higher is sharper).
    pub sharpness: f64,
    /// Markov: contexts are 1..=max_context tokens long.
    pub max_context: usize,
    /// Markov: probability of dropping the context during training.
    pub p_uncond: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Toy,
            path: None,
            seq_len: 2,
            vocab: 4,
            seed: 0,
            product: false,
            sharpness: 4.0,
            max_context: 4,
            p_uncond: 0.2,
        }
    }
}

/// A Markov chain started from its stationary law, cut into blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovBlocks {
    pub chain: MarkovChain,
    pub block_len: usize,
    pub max_context: usize,
    pub p_uncond: f64,
}

impl MarkovBlocks {
    pub fn new(
        chain: MarkovChain,
        block_len: usize,
        max_context: usize,
        p_uncond: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_uncond) {
            return domain("p_uncond must lie in [0, 1]");
        }
        let trans = (0..chain.vocab())
            .map(|k| chain.transition(k).to_vec())
            .collect();
        let chain = MarkovChain::new(chain.stationary(), trans)?;
        Ok(Self {
            chain,
            block_len,
            max_context,
            p_uncond,
        })
    }

    /// Exact law of the next block given a context, or the unconditional
    /// block law when there is none.
    pub fn truth(&self, ctx: Option<&[usize]>) -> Result<ToyDistribution> {
        match ctx.and_then(|c| c.last()) {
            Some(&last) => self.chain.block_distribution(Some(last), self.block_len),
            None => self.chain.block_distribution(None, self.block_len),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSeq {
        if self.max_context == 0 {
            return TokenSeq::new(self.chain.sample_sequence(self.block_len, rng));
        }
        let c = rng.random_range(1..=self.max_context);
        let mut seq = self.chain.sample_sequence(c + self.block_len, rng);
        let target = seq.split_off(c);
        if rng.random::<f64>() < self.p_uncond {
            TokenSeq::new(target)
        } else {
            TokenSeq::with_context(target, seq)
        }
    }
}

/// Character-level corpus cropped into fixed-length windows.
#[derive(Debug, Clone, PartialEq)]
pub struct CharCorpus {
    alphabet: Vec<char>,
    tokens: Vec<usize>,
    seq_len: usize,
}

impl CharCorpus {
    pub fn from_text(text: &str, seq_len: usize) -> Result<Self> {
        let alphabet: Vec<char> = text.chars().collect::<BTreeSet<_>>().into_iter().collect();
        if alphabet.len() < 2 {
            return domain("corpus needs at least two distinct characters");
        }
        let tokens: Vec<usize> = text
            .chars()
            .map(|c| alphabet.binary_search(&c).expect("alphabet covers text"))
            .collect();
        if tokens.len() < seq_len.max(2) {
            return domain("corpus is shorter than one sequence");
        }
        Ok(Self {
            alphabet,
            tokens,
            seq_len,
        })
    }

    pub fn vocab(&self) -> usize {
        self.alphabet.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.alphabet[t]).collect()
    }

    pub fn encode(&self, s: &str) -> Result<Vec<usize>> {
        s.chars()
            .map(|c| {
                self.alphabet
                    .binary_search(&c)
                    .or_else(|_| domain(format!("character {c:?} not in the corpus alphabet")))
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSeq {
        let start = rng.random_range(0..=self.tokens.len() - self.seq_len);
        TokenSeq::new(self.tokens[start..start + self.seq_len].to_vec())
    }

    /// Joint frequency of adjacent pairs in the corpus.
    pub fn bigram(&self) -> Vec<Vec<f64>> {
        bigram_counts(std::iter::once(self.tokens.as_slice()), self.vocab())
    }
}

fn bigram_counts<'a>(seqs: impl Iterator<Item = &'a [usize]>, vocab: usize) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; vocab]; vocab];
    let mut n = 0.0;
    for s in seqs {
        for w in s.windows(2) {
            c[w[0]][w[1]] += 1.0;
            n += 1.0;
        }
    }
    if n > 0.0 {
        c.iter_mut().flatten().for_each(|v| *v /= n);
    }
    c
}

/// TV between the pooled adjacent-pair frequencies of `samples` and `truth`.
pub fn bigram_tv(samples: &[TokenSeq], truth: &[Vec<f64>]) -> Result<f64> {
    let vocab = truth.len();
    if samples.iter().all(|s| s.tokens.len() < 2) {
        return domain("samples contain no adjacent pairs");
    }
    let emp = bigram_counts(samples.iter().map(|s| s.tokens.as_slice()), vocab);
    Ok(0.5
        * emp
            .iter()
            .flatten()
            .zip(truth.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Toy(ToyDistribution),
    Markov(MarkovBlocks),
    Corpus(CharCorpus),
}

impl Dataset {
    pub fn from_config(cfg: &DataConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        match cfg.source {
            DataSource::Toy => match &cfg.path {
                Some(p) => Ok(Self::Toy(ToyDistribution::load(p)?)),
                None if cfg.product => Ok(Self::Toy(ToyDistribution::random_product(
                    cfg.seq_len,
                    cfg.vocab,
                    &mut rng,
                )?)),
                None => Ok(Self::Toy(ToyDistribution::random(
                    cfg.seq_len,
                    cfg.vocab,
                    &mut rng,
                )?)),
            },
            DataSource::Markov => {
                let chain = MarkovChain::random(cfg.vocab, cfg.sharpness, &mut rng)?;
                Ok(Self::Markov(MarkovBlocks::new(
                    chain,
                    cfg.seq_len,
                    cfg.max_context,
                    cfg.p_uncond,
                )?))
            }
            DataSource::Corpus => {
                let Some(p) = &cfg.path else {
                    return domain("a corpus data source needs a path");
                };
                Ok(Self::Corpus(CharCorpus::from_text(
                    &std::fs::read_to_string(p)?,
                    cfg.seq_len,
                )?))
            }
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            Self::Toy(d) => d.seq_len(),
            Self::Markov(m) => m.block_len,
            Self::Corpus(c) => c.seq_len(),
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            Self::Toy(d) => d.vocab(),
            Self::Markov(m) => m.chain.vocab(),
            Self::Corpus(c) => c.vocab(),
        }
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self, Self::Markov(m) if m.max_context > 0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSeq {
        match self {
            Self::Toy(d) => TokenSeq::new(d.sample(rng)),
            Self::Markov(m) => m.sample(rng),
            Self::Corpus(c) => c.sample(rng),
        }
    }

    /// The enumerable unconditional law, when there is one.
    pub fn truth(&self) -> Option<ToyDistribution> {
        match self {
            Self::Toy(d) => Some(d.clone()),
            Self::Markov(m) => m.truth(None).ok(),
            Self::Corpus(_) => None,
        }
    }
}
