//! Few-step generation through the learned flow map, classifier-free
//! guidance and block generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::Denoiser;
use crate::oracle::NoiseConfig;
use crate::schedule::Schedule;
use crate::simplex::{decode_rows, TokenSeq};
use crate::State;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeGrid {
    #[default]
    UniformBeta,
    UniformT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub nfe: usize,
    /// Guidance strength; 1 is plain conditional sampling, 0 unconditional.
    pub guidance_omega: f64,
    pub block_len: usize,
    pub n_blocks: usize,
    pub seed: u64,
    pub time_grid: TimeGrid,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            nfe: 1,
            guidance_omega: 1.0,
            block_len: 1,
            n_blocks: 1,
            seed: 0,
            time_grid: TimeGrid::UniformBeta,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return domain("nfe must be at least 1");
        }
        if !(self.guidance_omega >= 0.0) || !self.guidance_omega.is_finite() {
            return domain("guidance omega must be finite and non-negative");
        }
        if self.block_len == 0 || self.n_blocks == 0 {
            return domain("block_len and n_blocks must be positive");
        }
        Ok(())
    }
}

/// i.i.d. Gaussian source draw.
pub fn sample_noise<R: Rng + ?Sized>(
    rng: &mut R,
    len: usize,
    vocab: usize,
    noise: &NoiseConfig,
) -> State {
    noise.sample(len, vocab, rng)
}

/// `0 = t_0 < ... < t_nfe = 1`, equally spaced in `beta` or in `t`.
pub fn time_grid(sched: &Schedule, nfe: usize, grid: TimeGrid) -> Vec<f64> {
    let mut ts: Vec<f64> = (0..=nfe)
        .map(|i| {
            let u = i as f64 / nfe as f64;
            match grid {
                TimeGrid::UniformT => u,
                TimeGrid::UniformBeta => sched.inverse_beta(u),
            }
        })
        .collect();
    ts[0] = 0.0;
    ts[nfe] = 1.0;
    ts
}

/// `psi^omega = psi_uncond + omega (psi_cond - psi_uncond)`, left unclamped.
pub fn cfg_combine(psi_cond: &State, psi_uncond: &State, omega: f64) -> State {
    psi_uncond + &(omega * &(psi_cond - psi_uncond))
}

/// Guided mean denoiser. Without a context, or at `omega = 1`, this is a
/// single model call.
pub fn guided_psi<D: Denoiser + ?Sized>(
    model: &D,
    x: &State,
    s: f64,
    t: f64,
    ctx: Option<&[usize]>,
    omega: f64,
) -> Result<State> {
    let has_ctx = ctx.is_some_and(|c| !c.is_empty());
    if !has_ctx || omega == 1.0 {
        return model.probs(x, s, t, ctx);
    }
    let uncond = model.probs(x, s, t, None)?;
    if omega == 0.0 {
        return Ok(uncond);
    }
    let cond = model.probs(x, s, t, ctx)?;
    Ok(cfg_combine(&cond, &uncond, omega))
}

/// `X_{s,t}(x) = Gamma x + Xi psi`; at `t = 1` exactly `psi`.
pub fn flow_map_step<D: Denoiser + ?Sized>(
    model: &D,
    x: &State,
    s: f64,
    t: f64,
    ctx: Option<&[usize]>,
    omega: f64,
) -> Result<State> {
    if !(s < t) || t > 1.0 {
        return domain(format!("flow_map_step needs s < t <= 1, got s={s}, t={t}"));
    }
    let psi = guided_psi(model, x, s, t, ctx, omega)?;
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model output".into()));
    }
    if t >= 1.0 {
        return Ok(psi);
    }
    let (g, xi) = model.schedule().gamma_xi(s, t);
    Ok(g * x + &(xi * &psi))
}

/// Terminal state of the sampler before decoding.
pub fn generate_state<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    cfg: &SamplerConfig,
    noise: &NoiseConfig,
    rng: &mut R,
    ctx: Option<&[usize]>,
) -> Result<State> {
    cfg.validate()?;
    let ts = time_grid(model.schedule(), cfg.nfe, cfg.time_grid);
    let mut x = sample_noise(rng, model.seq_len(), model.vocab(), noise);
    for w in ts.windows(2) {
        x = flow_map_step(model, &x, w[0], w[1], ctx, cfg.guidance_omega)?;
    }
    Ok(x)
}

pub fn generate<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    cfg: &SamplerConfig,
    noise: &NoiseConfig,
    rng: &mut R,
    ctx: Option<&[usize]>,
) -> Result<TokenSeq> {
    let x = generate_state(model, cfg, noise, rng, ctx)?;
    let mut seq = TokenSeq::new(decode_rows(&x));
    seq.context = ctx.filter(|c| !c.is_empty()).map(<[usize]>::to_vec);
    Ok(seq)
}

/// RNG for sample `index` under `seed`: independent of how samples are
/// scheduled across threads.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `n` independent samples (and their terminal states), in index order.
pub fn generate_many<D: Denoiser + ?Sized>(
    model: &D,
    cfg: &SamplerConfig,
    noise: &NoiseConfig,
    n: usize,
    ctx: Option<&[usize]>,
) -> Result<Vec<(TokenSeq, State)>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(cfg.seed, i as u64);
            let x = generate_state(model, cfg, noise, &mut rng, ctx)?;
            Ok((TokenSeq::new(decode_rows(&x)), x))
        })
        .collect()
}

/// Generate `n_blocks` blocks of `block_len` tokens, each conditioned on the
/// prompt plus everything generated so far, truncated on the left to the
/// model's context limit.
pub fn block_generate<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    prompt: &TokenSeq,
    cfg: &SamplerConfig,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<TokenSeq> {
    cfg.validate()?;
    if cfg.block_len != model.seq_len() {
        return domain(format!(
            "block_len {} differs from the model block length {}",
            cfg.block_len,
            model.seq_len()
        ));
    }
    let mut context = prompt.tokens.clone();
    let mut out = Vec::with_capacity(cfg.block_len * cfg.n_blocks);
    for _ in 0..cfg.n_blocks {
        let keep = model
            .max_context()
            .map_or(context.len(), |m| m.min(context.len()));
        let recent = &context[context.len() - keep..];
        let ctx = (!recent.is_empty()).then_some(recent);
        let block = generate(model, cfg, noise, rng, ctx)?;
        context.extend_from_slice(&block.tokens);
        out.extend(block.tokens);
    }
    let mut seq = TokenSeq::new(out);
    if !prompt.tokens.is_empty() {
        seq.context = Some(prompt.tokens.clone());
    }
    Ok(seq)
}

/// A diagonal-only denoiser used as a flow map: every query `(s, t)` is
/// answered with `psi_{s,s}`.
pub struct DiagonalOnly<'a, D: Denoiser + ?Sized>(pub &'a D);

impl<D: Denoiser + ?Sized> Denoiser for DiagonalOnly<'_, D> {
    fn seq_len(&self) -> usize {
        self.0.seq_len()
    }

    fn vocab(&self) -> usize {
        self.0.vocab()
    }

    fn schedule(&self) -> &Schedule {
        self.0.schedule()
    }

    fn max_context(&self) -> Option<usize> {
        self.0.max_context()
    }

    fn logits(&self, x: &State, s: f64, _t: f64, ctx: Option<&[usize]>) -> Result<State> {
        self.0.logits(x, s, s, ctx)
    }

    fn dz_dt(&self, _x: &State, _s: f64, _t: f64, _ctx: Option<&[usize]>) -> Result<State> {
        Ok(State::zeros((self.seq_len(), self.vocab())))
    }

    fn total_derivative_s(
        &self,
        x: &State,
        s: f64,
        _t: f64,
        v: &State,
        ctx: Option<&[usize]>,
    ) -> Result<State> {
        Ok(self.0.total_derivative_s(x, s, s, v, ctx)? + self.0.dz_dt(x, s, s, ctx)?)
    }
}

/// Distance from each terminal row to the nearest simplex vertex (L2).
pub fn vertex_distance(x: &State) -> f64 {
    x.rows()
        .into_iter()
        .map(|r| {
            let k = crate::simplex::argmax(r.as_slice().expect("contiguous row"));
            r.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let e = if j == k { v - 1.0 } else { v };
                    e * e
                })
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, DenoiserModel};
    use crate::oracle::OracleDenoiser;
    use crate::toy::ToyDistribution;
    use ndarray::array;

    fn model() -> DenoiserModel {
        DenoiserModel::init(Arch::new(16, 2, 3, 4), Schedule::linear(), 9).unwrap()
    }

    #[test]
    fn noise_is_seeded_and_scaled() {
        let n = NoiseConfig::new(0.5).unwrap();
        let a = sample_noise(&mut ChaCha8Rng::seed_from_u64(1), 2, 3, &n);
        let b = sample_noise(&mut ChaCha8Rng::seed_from_u64(1), 2, 3, &n);
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let big = sample_noise(&mut rng, 1000, 100, &n);
        let mean = big.mean().unwrap();
        let sd = (big.mapv(|v| (v - mean).powi(2)).mean().unwrap()).sqrt();
        assert!(mean.abs() < 3.0 * 0.5 / (1e5f64).sqrt());
        assert!((sd - 0.5).abs() < 0.01);
    }

    #[test]
    fn one_step_to_one_is_psi() {
        let m = model();
        let x = array![
            [0.1, 0.2, -0.3, 0.0],
            [1.0, 0.0, 0.0, 0.5],
            [0.0, 0.0, 0.0, 0.0]
        ];
        let y = flow_map_step(&m, &x, 0.0, 1.0, None, 1.0).unwrap();
        assert_eq!(y, m.probs(&x, 0.0, 1.0, None).unwrap());
        let t = 0.6;
        let y = flow_map_step(&m, &x, t - 1e-9, t, None, 1.0).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(flow_map_step(&m, &x, 0.5, 0.5, None, 1.0).is_err());
    }

    #[test]
    fn nfe_one_decodes_argmax_of_psi() {
        let m = model();
        let cfg = SamplerConfig {
            seed: 4,
            ..Default::default()
        };
        let noise = NoiseConfig::default();
        let seq = generate(&m, &cfg, &noise, &mut ChaCha8Rng::seed_from_u64(4), None).unwrap();
        let x0 = sample_noise(&mut ChaCha8Rng::seed_from_u64(4), 3, 4, &noise);
        assert_eq!(
            seq.tokens,
            decode_rows(&m.probs(&x0, 0.0, 1.0, None).unwrap())
        );
        let again = generate(&m, &cfg, &noise, &mut ChaCha8Rng::seed_from_u64(4), None).unwrap();
        assert_eq!(seq, again);
    }

    #[test]
    fn time_grids() {
        let lin = Schedule::linear();
        assert_eq!(
            time_grid(&lin, 4, TimeGrid::UniformBeta),
            vec![0.0, 0.25, 0.5, 0.75, 1.0]
        );
        assert_eq!(time_grid(&lin, 2, TimeGrid::UniformT), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn cfg_combine_examples() {
        let c = array![[0.8, 0.2]];
        let u = array![[0.5, 0.5]];
        assert_eq!(cfg_combine(&c, &u, 0.0), u);
        assert_eq!(cfg_combine(&c, &u, 1.0), c);
        let g = cfg_combine(&c, &u, 2.0);
        assert!((g[[0, 0]] - 1.1).abs() < 1e-15 && (g[[0, 1]] + 0.1).abs() < 1e-15);
        assert_eq!(decode_rows(&g), vec![0]);
    }

    #[test]
    fn generate_many_ignores_thread_count() {
        let m = model();
        let cfg = SamplerConfig {
            nfe: 2,
            seed: 11,
            ..Default::default()
        };
        let noise = NoiseConfig::default();
        let a = generate_many(&m, &cfg, &noise, 17, None).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let b = pool.install(|| generate_many(&m, &cfg, &noise, 17, None).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn block_generation_reduces_to_generate() {
        let arch = Arch::new(8, 1, 2, 3).conditional(16);
        let m = DenoiserModel::init(arch, Schedule::linear(), 2).unwrap();
        let noise = NoiseConfig::default();
        let cfg = SamplerConfig {
            nfe: 2,
            block_len: 2,
            ..Default::default()
        };
        let prompt = TokenSeq::new(vec![1, 2]);
        let a =
            block_generate(&m, &prompt, &cfg, &noise, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate(
            &m,
            &cfg,
            &noise,
            &mut ChaCha8Rng::seed_from_u64(3),
            Some(&[1, 2]),
        )
        .unwrap();
        assert_eq!(a.tokens, b.tokens);

        let empty = TokenSeq::new(vec![]);
        let a =
            block_generate(&m, &empty, &cfg, &noise, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate(&m, &cfg, &noise, &mut ChaCha8Rng::seed_from_u64(3), None).unwrap();
        assert_eq!(a.tokens, b.tokens);

        // Past the limit only the most recent 16 tokens condition the next block.
        let long = SamplerConfig {
            n_blocks: 10,
            ..cfg
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = block_generate(&m, &prompt, &long, &noise, &mut rng).unwrap();
        assert_eq!(out.tokens.len(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = SamplerConfig { n_blocks: 9, ..cfg };
        let first = block_generate(&m, &prompt, &head, &noise, &mut rng).unwrap();
        let mut all = prompt.tokens.clone();
        all.extend(&first.tokens);
        let last = generate(&m, &cfg, &noise, &mut rng, Some(&all[all.len() - 16..])).unwrap();
        assert_eq!(out.tokens[18..], last.tokens[..]);
    }

    #[test]
    fn oracle_sampler_recovers_the_data_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dist = ToyDistribution::random(1, 5, &mut rng).unwrap();
        let oracle = OracleDenoiser::new(dist.clone(), Schedule::linear(), NoiseConfig::default())
            .with_steps(32);
        let cfg = SamplerConfig {
            nfe: 32,
            seed: 1,
            ..Default::default()
        };
        let out = generate_many(&oracle, &cfg, &NoiseConfig::default(), 2000, None).unwrap();
        let mut counts = [0.0; 5];
        for (s, _) in &out {
            counts[s.tokens[0]] += 1.0;
        }
        let tv: f64 = counts
            .iter()
            .zip(dist.probs())
            .map(|(c, p)| (c / 2000.0 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.05, "tv {tv}");
    }
}
