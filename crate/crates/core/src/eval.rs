//! Sample-quality metrics and identity verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{bigram_tv, Dataset};
use crate::error::{domain, Error, Result};
use crate::losses::{flow_map_from_psi, psd_teacher};
use crate::model::Denoiser;
use crate::oracle::{posterior_matrix, InterpolantSample, NoiseConfig};
use crate::sampler::{block_generate, generate_many, sample_rng, SamplerConfig};
use crate::simplex::TokenSeq;
use crate::toy::ToyDistribution;
use crate::State;

/// `1/2 sum |p_hat - p|` over every sequence of the toy.
pub fn tv_distance(samples: &[TokenSeq], truth: &ToyDistribution) -> Result<f64> {
    if samples.is_empty() {
        return domain("no samples");
    }
    let mut counts = vec![0.0; truth.num_sequences()];
    for s in samples {
        counts[truth.encode(&s.tokens)?] += 1.0;
    }
    let n = samples.len() as f64;
    Ok(0.5
        * counts
            .iter()
            .zip(truth.probs())
            .map(|(c, p)| (c / n - p).abs())
            .sum::<f64>())
}

/// Shannon entropy (nats) of the pooled token frequencies.
pub fn unigram_entropy(samples: &[TokenSeq]) -> Result<f64> {
    let mut counts = std::collections::BTreeMap::new();
    let mut n = 0.0;
    for s in samples {
        for &t in &s.tokens {
            *counts.entry(t).or_insert(0.0) += 1.0;
            n += 1.0;
        }
    }
    if n == 0.0 {
        return domain("no tokens");
    }
    Ok(counts
        .values()
        .map(|&c: &f64| {
            let p = c / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

pub fn default_probe_grid() -> Vec<f64> {
    (1..10).map(|i| i as f64 / 10.0).collect()
}

/// Mean per-position TV between `psi_{t,t}` and the exact posterior over
/// interpolant draws on a time grid.
pub fn probe_tv<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    truth: &ToyDistribution,
    noise: &NoiseConfig,
    t_grid: &[f64],
    n_probe: usize,
    rng: &mut R,
) -> Result<f64> {
    let sched = model.schedule();
    let mut total = 0.0;
    let mut count = 0.0;
    for &t in t_grid {
        for _ in 0..n_probe {
            let target = TokenSeq::new(truth.sample(rng));
            let x0 = noise.sample(truth.seq_len(), truth.vocab(), rng);
            let smp = InterpolantSample::new(x0, target, t, sched)?;
            let exact = posterior_matrix(truth, sched, noise, &smp.x, t)?;
            let got = model.probs(&smp.x, t, t, None)?;
            for (a, b) in exact.rows().into_iter().zip(got.rows()) {
                total += 0.5
                    * a.iter()
                        .zip(b.iter())
                        .map(|(u, v)| (u - v).abs())
                        .sum::<f64>();
                count += 1.0;
            }
        }
    }
    Ok(total / count)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Residual {
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

impl Residual {
    fn push(&mut self, v: f64) {
        self.max = self.max.max(v);
        self.mean += (v - self.mean) / (self.count + 1) as f64;
        self.count += 1;
    }

    fn merge(&mut self, o: &Residual) {
        let n = self.count + o.count;
        if n > 0 {
            self.mean = (self.mean * self.count as f64 + o.mean * o.count as f64) / n as f64;
        }
        self.max = self.max.max(o.max);
        self.count = n;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub diagonal: f64,
    pub semigroup: f64,
    pub lagrangian: f64,
    pub eulerian: f64,
}

impl Tolerances {
    pub fn uniform(tol: f64) -> Self {
        Self {
            diagonal: tol,
            semigroup: tol,
            lagrangian: tol,
            eulerian: tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub diagonal: Residual,
    pub semigroup: Residual,
    pub lagrangian: Residual,
    pub eulerian: Residual,
    pub grid_n: usize,
    pub t_max: f64,
    pub n_probe: usize,
    pub tol: Tolerances,
    pub pass: bool,
}

impl IdentityReport {
    fn finish(mut self) -> Self {
        self.pass = self.diagonal.max <= self.tol.diagonal
            && self.semigroup.max <= self.tol.semigroup
            && self.lagrangian.max <= self.tol.lagrangian
            && self.eulerian.max <= self.tol.eulerian;
        self
    }

    pub fn with_tolerances(self, tol: Tolerances) -> Self {
        Self { tol, ..self }.finish()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }
}

fn inf_norm(a: &State, b: &State) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max)
}

fn scaled_center(psi: &State, d: &State) -> State {
    let mut out = psi.clone();
    for ((mut o, p), dr) in out.rows_mut().into_iter().zip(psi.rows()).zip(d.rows()) {
        let mean: f64 = p.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
        for ((ov, pv), dv) in o.iter_mut().zip(p.iter()).zip(dr.iter()) {
            *ov = pv * (dv - mean);
        }
    }
    out
}

/// Step of the central difference in `t` used by the Lagrangian check.
pub const IDENTITY_FD_STEP: f64 = 1e-3;

/// `d/dt psi_{s,t}(x)` by differencing the denoiser's probabilities, so the
/// check does not lean on the denoiser's own derivative.
fn dpsi_dt<D: Denoiser + ?Sized>(
    model: &D,
    x: &State,
    s: f64,
    t: f64,
    psi_st: &State,
) -> Result<State> {
    let h = IDENTITY_FD_STEP;
    if t - h > s && t + h <= 1.0 {
        return Ok((model.probs(x, s, t + h, None)? - model.probs(x, s, t - h, None)?) / (2.0 * h));
    }
    if t + 2.0 * h <= 1.0 {
        let (a, b) = (
            model.probs(x, s, t + h, None)?,
            model.probs(x, s, t + 2.0 * h, None)?,
        );
        return Ok((-3.0 * psi_st + &(4.0 * &a) - &b) / (2.0 * h));
    }
    let (a, b) = (
        model.probs(x, s, t - h, None)?,
        model.probs(x, s, t - 2.0 * h, None)?,
    );
    Ok((3.0 * psi_st - &(4.0 * &a) + &b) / (2.0 * h))
}

/// Residuals of one probe state over every ordered grid pair and triple.
fn probe_residuals<D: Denoiser + ?Sized>(
    model: &D,
    truth: &ToyDistribution,
    noise: &NoiseConfig,
    x: &State,
    grid: &[f64],
) -> Result<[Residual; 4]> {
    let sched = model.schedule();
    let mut r = [Residual::default(); 4];
    let n = grid.len();
    let diag: Vec<State> = grid
        .iter()
        .map(|&t| model.probs(x, t, t, None))
        .collect::<Result<_>>()?;
    for (i, &t) in grid.iter().enumerate() {
        r[0].push(inf_norm(
            &diag[i],
            &posterior_matrix(truth, sched, noise, x, t)?,
        ));
    }
    for i in 0..n {
        for j in i + 1..n {
            let (s, t) = (grid[i], grid[j]);
            let c = sched.coeffs(s, t)?;
            let psi_st = model.probs(x, s, t, None)?;
            let x_st = flow_map_from_psi(model, x, &psi_st, s, t);
            let psi_tt = model.probs(&x_st, t, t, None)?;
            let dpsi = dpsi_dt(model, x, s, t, &psi_st)?;
            let lag = &psi_st + &(c.c_lag * &dpsi);
            r[2].push(inf_norm(&lag, &psi_tt));

            let drift = sched.ell(s) * x + &(sched.lam(s) * &diag[i]);
            let ds = model.total_derivative_s(x, s, t, &drift, None)?;
            let eul = &psi_st - &(scaled_center(&psi_st, &ds) / c.kappa);
            r[3].push(inf_norm(&eul, &diag[i]));

            for &u in &grid[i + 1..j] {
                let teacher = psd_teacher(model, x, s, u, t, None)?;
                r[1].push(inf_norm(&teacher.probs, &psi_st));
            }
        }
    }
    Ok(r)
}

/// Check the diagonal, semigroup, Lagrangian and Eulerian identities of
/// `model` on `grid_n` equally spaced times in `[0, t_max]` at `n_probe`
/// Gaussian states.
#[allow(clippy::too_many_arguments)]
pub fn verify_identities<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    truth: &ToyDistribution,
    noise: &NoiseConfig,
    grid_n: usize,
    t_max: f64,
    n_probe: usize,
    tol: Tolerances,
    rng: &mut R,
) -> Result<IdentityReport> {
    if grid_n < 3 || n_probe == 0 {
        return domain("need at least 3 grid points and one probe");
    }
    if !(t_max > 0.0 && t_max < 1.0) {
        return domain("t_max must lie in (0, 1)");
    }
    if truth.seq_len() != model.seq_len() || truth.vocab() != model.vocab() {
        return Err(Error::Shape("truth does not match the model shape".into()));
    }
    let grid: Vec<f64> = (0..grid_n)
        .map(|i| t_max * i as f64 / (grid_n - 1) as f64)
        .collect();
    let states: Vec<State> = (0..n_probe)
        .map(|_| noise.sample(truth.seq_len(), truth.vocab(), rng))
        .collect();
    let parts = states
        .par_iter()
        .map(|x| probe_residuals(model, truth, noise, x, &grid))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = [Residual::default(); 4];
    for p in &parts {
        for (a, b) in acc.iter_mut().zip(p) {
            a.merge(b);
        }
    }
    Ok(IdentityReport {
        diagonal: acc[0],
        semigroup: acc[1],
        lagrangian: acc[2],
        eulerian: acc[3],
        grid_n,
        t_max,
        n_probe,
        tol,
        pass: false,
    }
    .finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfeRow {
    pub nfe: usize,
    pub tv_distance: Option<f64>,
    pub unigram_entropy: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub checkpoint: String,
    pub rows: Vec<NfeRow>,
}

impl EvalReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Unconditional samples at each NFE, scored against `truth` when given.
pub fn evaluate<D: Denoiser + ?Sized>(
    model: &D,
    truth: Option<&ToyDistribution>,
    nfes: &[usize],
    base: &SamplerConfig,
    noise: &NoiseConfig,
    n: usize,
    checkpoint: &str,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(nfes.len());
    for &nfe in nfes {
        let cfg = SamplerConfig {
            nfe,
            ..base.clone()
        };
        let samples: Vec<TokenSeq> = generate_many(model, &cfg, noise, n, None)?
            .into_iter()
            .map(|(s, _)| s)
            .collect();
        rows.push(NfeRow {
            nfe,
            tv_distance: truth.map(|t| tv_distance(&samples, t)).transpose()?,
            unigram_entropy: unigram_entropy(&samples)?,
            sample_count: n,
        });
    }
    Ok(EvalReport {
        seed: base.seed,
        checkpoint: checkpoint.to_string(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfgRow {
    pub omega: f64,
    /// Mean TV to the exact block law (Markov), or bigram TV (corpus).
    pub metric: Option<f64>,
    /// Unigram entropy of each prompt's samples, averaged over prompts.
    pub entropy: f64,
}

/// Block generation per prompt for each guidance strength.
pub fn cfg_sweep<D: Denoiser + ?Sized>(
    model: &D,
    data: &Dataset,
    prompts: &[TokenSeq],
    omegas: &[f64],
    base: &SamplerConfig,
    noise: &NoiseConfig,
    n_per_prompt: usize,
) -> Result<Vec<CfgRow>> {
    if prompts.is_empty() || n_per_prompt == 0 {
        return domain("need at least one prompt and one sample");
    }
    omegas
        .par_iter()
        .map(|&omega| {
            let cfg = SamplerConfig {
                guidance_omega: omega,
                ..base.clone()
            };
            let mut pooled = Vec::new();
            let mut entropies = Vec::with_capacity(prompts.len());
            let mut tv_sum = 0.0;
            let mut with_prompt = Vec::new();
            for (p, prompt) in prompts.iter().enumerate() {
                let mut blocks = Vec::with_capacity(n_per_prompt);
                for i in 0..n_per_prompt {
                    let mut rng = sample_rng(cfg.seed, (p * n_per_prompt + i) as u64);
                    let seq = block_generate(model, prompt, &cfg, noise, &mut rng)?;
                    let mut full = prompt.tokens.clone();
                    full.extend_from_slice(&seq.tokens);
                    with_prompt.push(TokenSeq::new(full));
                    blocks.push(seq);
                }
                if let Dataset::Markov(m) = data {
                    let first: Vec<TokenSeq> = blocks
                        .iter()
                        .map(|b| TokenSeq::new(b.tokens[..m.block_len].to_vec()))
                        .collect();
                    let ctx = (!prompt.tokens.is_empty()).then_some(prompt.tokens.as_slice());
                    tv_sum += tv_distance(&first, &m.truth(ctx)?)?;
                }
                entropies.push(unigram_entropy(&blocks)?);
                pooled.extend(blocks);
            }
            let metric = match data {
                Dataset::Markov(_) => Some(tv_sum / prompts.len() as f64),
                Dataset::Corpus(c) => Some(bigram_tv(&with_prompt, &c.bigram())?),
                Dataset::Toy(t) => Some(tv_distance(&pooled, t)?),
            };
            Ok(CfgRow {
                omega,
                metric,
                entropy: entropies.iter().sum::<f64>() / entropies.len() as f64,
            })
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// One-sample t statistic of paired differences.
pub fn paired_t(diffs: &[f64]) -> f64 {
    let (m, sd) = mean_sd(diffs);
    if sd == 0.0 {
        return if m > 0.0 {
            f64::INFINITY
        } else if m < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
    }
    m / (sd / (diffs.len() as f64).sqrt())
}

/// Deterministic RNG for evaluation helpers.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
