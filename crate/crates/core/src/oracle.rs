//! Exact ground truth for enumerable toys with Gaussian source noise.
//!
//! The instantaneous denoiser `E[I_1 | I_t = x]` is a Bayes posterior over all
//! `K^L` sequences. Flow trajectories are integrated in the clock
//! `sigma = -log alpha_t`, where the probability-flow ODE becomes
//!
//! ```text
//! dx/dsigma = E[I_1 | I_t = x] - x,    beta = 1 - exp(-sigma)
//! ```
//!
//! for every schedule with `alpha = 1 - beta`. Uniform RK4 steps in `sigma`
//! stay well conditioned all the way to the terminal clamp, and the mean
//! denoiser's time average becomes `(alpha_t / Xi_{s,t}) * int e^sigma
//! E[I_1 | x_sigma] dsigma`, integrated by Simpson on the same grid.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::Denoiser;
use crate::schedule::{PositionSchedule, Schedule};
use crate::simplex::{argmax, one_hot_rows, SimplexPoint, TokenSeq};
use crate::toy::ToyDistribution;
use crate::State;

/// Terminal clamp on oracle time arguments.
pub const TERMINAL_EPS: f64 = 1e-3;

/// Default RK4 sub-steps for oracle trajectories.
pub const DEFAULT_STEPS: usize = 2000;

/// Default finite-difference step for oracle time derivatives.
pub const FD_STEP: f64 = 1e-3;

/// Isotropic Gaussian source `p_0 = N(0, std^2 I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { std: 1.0 }
    }
}

impl NoiseConfig {
    pub fn new(std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            return domain("noise std must be positive and finite");
        }
        Ok(Self { std })
    }

    pub fn sample<R: Rng + ?Sized>(&self, len: usize, vocab: usize, rng: &mut R) -> State {
        let normal = Normal::new(0.0, self.std).expect("validated std");
        Array2::from_shape_simple_fn((len, vocab), || normal.sample(rng))
    }
}

/// A draw `I_t = alpha_t I_0 + beta_t onehot(I_1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolantSample {
    pub x: State,
    pub x0: State,
    pub target: TokenSeq,
    pub t: f64,
}

impl InterpolantSample {
    pub fn new(x0: State, target: TokenSeq, t: f64, sched: &Schedule) -> Result<Self> {
        let (a, b) = sched.alpha_beta(t)?;
        let betas = vec![(a, b); x0.nrows()];
        Self::from_coefficients(x0, target, t, &betas)
    }

    pub fn with_position_schedule(
        x0: State,
        target: TokenSeq,
        t: f64,
        sched: &PositionSchedule,
    ) -> Result<Self> {
        let coeffs = sched.coefficients(t)?;
        Self::from_coefficients(x0, target, t, &coeffs)
    }

    fn from_coefficients(x0: State, target: TokenSeq, t: f64, ab: &[(f64, f64)]) -> Result<Self> {
        let (len, vocab) = x0.dim();
        if target.tokens.len() != len || ab.len() != len {
            return Err(Error::Shape(
                "target length must match the noise rows".into(),
            ));
        }
        target.validate(vocab)?;
        let hot = one_hot_rows(&target.tokens, vocab);
        let mut x = x0.clone();
        for (l, mut row) in x.rows_mut().into_iter().enumerate() {
            let (a, b) = ab[l];
            for (k, v) in row.iter_mut().enumerate() {
                *v = a * *v + b * hot[[l, k]];
            }
        }
        Ok(Self { x, x0, target, t })
    }
}

fn check_state(dist: &ToyDistribution, x: &State) -> Result<()> {
    if x.dim() != (dist.seq_len(), dist.vocab()) {
        return Err(Error::Shape(format!(
            "state is {:?}, distribution is {}x{}",
            x.dim(),
            dist.seq_len(),
            dist.vocab()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("oracle state".into()));
    }
    Ok(())
}

/// Posterior marginals `P(I_1^l = k | I_t = x)` for per-position `beta_l`.
///
/// Positions with `beta_l >= 1` carry no noise and are pinned to the
/// nearest vertex; when every position is pinned the result is one-hot.
pub fn posterior_from_betas(
    dist: &ToyDistribution,
    betas: &[f64],
    noise: &NoiseConfig,
    x: &State,
) -> Result<State> {
    check_state(dist, x)?;
    let (len, vocab) = x.dim();
    if betas.len() != len {
        return Err(Error::Shape("one beta per position expected".into()));
    }
    let var = noise.std * noise.std;
    let mut coef = vec![0.0; len];
    let mut pinned: Vec<Option<u32>> = vec![None; len];
    for l in 0..len {
        let b = betas[l];
        let a = 1.0 - b;
        if a <= 0.0 {
            pinned[l] = Some(argmax(x.row(l).as_slice().unwrap()) as u32);
        } else {
            coef[l] = b / (a * a * var);
        }
    }
    if pinned.iter().all(Option::is_some) {
        let toks: Vec<usize> = pinned.iter().map(|p| p.unwrap() as usize).collect();
        return Ok(one_hot_rows(&toks, vocab));
    }

    let xs = x.as_slice().expect("standard layout");
    let n = dist.num_sequences();
    let log_p = dist.log_probs();
    let mut lw = vec![f64::NEG_INFINITY; n];
    let mut max = f64::NEG_INFINITY;
    'seq: for idx in 0..n {
        if log_p[idx] == f64::NEG_INFINITY {
            continue;
        }
        let toks = dist.tokens_of(idx);
        let mut acc = log_p[idx];
        for l in 0..len {
            let tok = toks[l];
            match pinned[l] {
                Some(p) if p != tok => continue 'seq,
                Some(_) => {}
                None => acc += coef[l] * xs[l * vocab + tok as usize],
            }
        }
        lw[idx] = acc;
        max = max.max(acc);
    }
    if max == f64::NEG_INFINITY {
        return domain("posterior has no support consistent with the pinned positions");
    }
    let mut out = Array2::<f64>::zeros((len, vocab));
    let os = out.as_slice_mut().unwrap();
    let mut total = 0.0;
    for idx in 0..n {
        if lw[idx] == f64::NEG_INFINITY {
            continue;
        }
        let w = (lw[idx] - max).exp();
        total += w;
        for (l, &tok) in dist.tokens_of(idx).iter().enumerate() {
            os[l * vocab + tok as usize] += w;
        }
    }
    out.mapv_inplace(|v| v / total);
    Ok(out)
}

/// `E[I_1 | I_t = x]` as an `L x K` matrix.
pub fn posterior_matrix(
    dist: &ToyDistribution,
    sched: &Schedule,
    noise: &NoiseConfig,
    x: &State,
    t: f64,
) -> Result<State> {
    sched.alpha_beta(t)?;
    let betas = vec![sched.beta(t); dist.seq_len()];
    posterior_from_betas(dist, &betas, noise, x)
}

/// Per-position posterior marginals of the exact joint Bayes posterior.
pub fn posterior_denoiser(
    dist: &ToyDistribution,
    sched: &Schedule,
    noise: &NoiseConfig,
    x: &State,
    t: f64,
) -> Result<Vec<SimplexPoint>> {
    rows_to_points(&posterior_matrix(dist, sched, noise, x, t)?)
}

fn rows_to_points(m: &State) -> Result<Vec<SimplexPoint>> {
    m.rows()
        .into_iter()
        .map(|r| SimplexPoint::new(r.to_vec()))
        .collect()
}

/// `b_t(x) = ell_t x + lambda_t E[I_1 | I_t = x]`.
pub fn exact_drift(
    dist: &ToyDistribution,
    sched: &Schedule,
    noise: &NoiseConfig,
    x: &State,
    t: f64,
) -> Result<State> {
    if sched.beta(t) >= 1.0 {
        return domain("drift is singular at t = 1");
    }
    let psi = posterior_matrix(dist, sched, noise, x, t)?;
    Ok(sched.ell(t) * x + sched.lam(t) * &psi)
}

fn check_interval(sched: &Schedule, s: f64, t: f64) -> Result<()> {
    sched.alpha_beta(s)?;
    sched.alpha_beta(t)?;
    if s > t {
        return domain(format!("need s <= t, got s={s}, t={t}"));
    }
    if t > 1.0 - TERMINAL_EPS + 1e-12 {
        return domain(format!(
            "oracle times are clamped to t <= 1 - {TERMINAL_EPS}, got {t}"
        ));
    }
    Ok(())
}

/// RK4 in the sigma clock for `dx/dsigma = f(x, beta) - x`. Returns the
/// terminal state and `f` evaluated at each of the `n + 1` grid nodes.
fn integrate_sigma<F>(
    f: F,
    x: &State,
    sigma_s: f64,
    sigma_t: f64,
    n_steps: usize,
    keep_nodes: bool,
) -> Result<(State, Vec<State>)>
where
    F: Fn(&State, f64) -> Result<State>,
{
    let h = (sigma_t - sigma_s) / n_steps as f64;
    let beta_at = |sigma: f64| -(-sigma).exp_m1();
    let rhs = |x: &State, sigma: f64| -> Result<(State, State)> {
        let psi = f(x, beta_at(sigma))?;
        let v = &psi - x;
        Ok((v, psi))
    };
    let mut x = x.clone();
    let mut nodes = Vec::with_capacity(if keep_nodes { n_steps + 1 } else { 0 });
    for i in 0..n_steps {
        let sg = sigma_s + i as f64 * h;
        let (k1, psi) = rhs(&x, sg)?;
        if keep_nodes {
            nodes.push(psi);
        }
        let (k2, _) = rhs(&(&x + &(0.5 * h * &k1)), sg + 0.5 * h)?;
        let (k3, _) = rhs(&(&x + &(0.5 * h * &k2)), sg + 0.5 * h)?;
        let (k4, _) = rhs(&(&x + &(h * &k3)), sg + h)?;
        x = &x + &((h / 6.0) * &(&k1 + &(2.0 * &k2) + &(2.0 * &k3) + &k4));
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration(format!(
                "trajectory blew up at sub-step {i} of {n_steps}"
            )));
        }
    }
    if keep_nodes {
        nodes.push(f(&x, beta_at(sigma_t))?);
    }
    Ok((x, nodes))
}

/// Exact flow map `X_{s,t}(x_s)` by RK4 with `n_steps` uniform steps in sigma.
pub fn integrate_flow(
    dist: &ToyDistribution,
    sched: &Schedule,
    noise: &NoiseConfig,
    x_s: &State,
    s: f64,
    t: f64,
    n_steps: usize,
) -> Result<State> {
    check_interval(sched, s, t)?;
    check_state(dist, x_s)?;
    if s == t || n_steps == 0 {
        return Ok(x_s.clone());
    }
    let len = dist.seq_len();
    let f = |x: &State, b: f64| posterior_from_betas(dist, &vec![b; len], noise, x);
    Ok(integrate_sigma(f, x_s, sched.sigma(s), sched.sigma(t), n_steps, false)?.0)
}

/// Flow under a classifier-free-guided denoiser
/// `psi_u + omega (psi_c - psi_u)` of two posteriors.
#[allow(clippy::too_many_arguments)]
pub fn integrate_guided_flow(
    cond: &ToyDistribution,
    uncond: &ToyDistribution,
    omega: f64,
    sched: &Schedule,
    noise: &NoiseConfig,
    x_s: &State,
    s: f64,
    t: f64,
    n_steps: usize,
) -> Result<State> {
    check_interval(sched, s, t)?;
    check_state(cond, x_s)?;
    check_state(uncond, x_s)?;
    if s == t || n_steps == 0 {
        return Ok(x_s.clone());
    }
    let len = cond.seq_len();
    let f = |x: &State, b: f64| -> Result<State> {
        let betas = vec![b; len];
        let pc = posterior_from_betas(cond, &betas, noise, x)?;
        let pu = posterior_from_betas(uncond, &betas, noise, x)?;
        Ok(&pu + &(omega * &(&pc - &pu)))
    };
    Ok(integrate_sigma(f, x_s, sched.sigma(s), sched.sigma(t), n_steps, false)?.0)
}

/// Terminal state and mean denoiser `psi_{s,t}(x_s)` from one trajectory.
pub fn flow_and_mean(
    dist: &ToyDistribution,
    sched: &Schedule,
    noise: &NoiseConfig,
    x_s: &State,
    s: f64,
    t: f64,
    n_steps: usize,
) -> Result<(State, State)> {
    check_interval(sched, s, t)?;
    check_state(dist, x_s)?;
    if s >= t {
        return domain("mean denoiser needs s < t");
    }
    mean_in_sigma(dist, noise, x_s, sched.sigma(s), sched.sigma(t), n_steps)
}

/// [`flow_and_mean`] with both endpoints given on the sigma clock, where
/// the dynamics do not depend on the schedule.
fn mean_in_sigma(
    dist: &ToyDistribution,
    noise: &NoiseConfig,
    x_s: &State,
    sigma_s: f64,
    sigma_t: f64,
    n_steps: usize,
) -> Result<(State, State)> {
    let n = (n_steps.max(2) + 1) & !1;
    let len = dist.seq_len();
    let f = |x: &State, b: f64| posterior_from_betas(dist, &vec![b; len], noise, x);
    let (x_t, nodes) = integrate_sigma(f, x_s, sigma_s, sigma_t, n, true)?;

    let xi = -(sigma_s - sigma_t).exp_m1();
    let alpha_t = (-sigma_t).exp();
    let h = (sigma_t - sigma_s) / n as f64;
    let mut psi = Array2::<f64>::zeros(x_s.dim());
    let mut norm = 0.0;
    for (i, node) in nodes.iter().enumerate() {
        let simpson = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let w = simpson * h / 3.0 * alpha_t / xi * (sigma_s + i as f64 * h).exp();
        norm += w;
        psi.scaled_add(w, node);
    }
    if (norm - 1.0).abs() > 1e-4 {
        return Err(Error::Integration(format!(
            "time-average weights integrate to {norm}, expected 1"
        )));
    }
    psi.mapv_inplace(|v| v / norm);
    Ok((x_t, psi))
}

/// The exact mean denoiser `psi_{s,t}(x_s)`, renormalized onto the simplex.
pub fn exact_mean_denoiser(
    dist: &ToyDistribution,
    sched: &Schedule,
    noise: &NoiseConfig,
    x_s: &State,
    s: f64,
    t: f64,
    n_steps: usize,
) -> Result<Vec<SimplexPoint>> {
    rows_to_points(&flow_and_mean(dist, sched, noise, x_s, s, t, n_steps)?.1)
}

/// The exact mean denoiser behind the [`Denoiser`] interface. Times are
/// clamped to `[0, 1 - eps]`. Derivatives fall back to finite differences
/// near the diagonal.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    dist: ToyDistribution,
    sched: Schedule,
    noise: NoiseConfig,
    n_steps: usize,
    fd_step: f64,
}

impl OracleDenoiser {
    pub fn new(dist: ToyDistribution, sched: Schedule, noise: NoiseConfig) -> Self {
        Self {
            dist,
            sched,
            noise,
            n_steps: DEFAULT_STEPS,
            fd_step: FD_STEP,
        }
    }

    pub fn with_steps(mut self, n_steps: usize) -> Self {
        self.n_steps = n_steps;
        self
    }

    pub fn with_fd_step(mut self, h: f64) -> Self {
        self.fd_step = h;
        self
    }

    pub fn dist(&self) -> &ToyDistribution {
        &self.dist
    }

    pub fn noise(&self) -> &NoiseConfig {
        &self.noise
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// `psi_{s,t}(x)`; the diagonal is the posterior itself.
    pub fn psi(&self, x: &State, s: f64, t: f64) -> Result<State> {
        let t = t.min(1.0 - TERMINAL_EPS);
        let s = s.min(t);
        if t - s < 1e-12 {
            return posterior_matrix(&self.dist, &self.sched, &self.noise, x, t);
        }
        Ok(flow_and_mean(&self.dist, &self.sched, &self.noise, x, s, t, self.n_steps)?.1)
    }

    /// `X_{s,t}(x)` from the integrator.
    pub fn flow(&self, x: &State, s: f64, t: f64) -> Result<State> {
        integrate_flow(&self.dist, &self.sched, &self.noise, x, s, t, self.n_steps)
    }
}

/// Exact conditional denoiser for contexts summarized by their last token:
/// one oracle per last token plus an unconditional one.
#[derive(Debug, Clone)]
pub struct ContextOracle {
    by_last: Vec<OracleDenoiser>,
    uncond: OracleDenoiser,
}

impl ContextOracle {
    pub fn new(by_last: Vec<OracleDenoiser>, uncond: OracleDenoiser) -> Result<Self> {
        let shape = (uncond.seq_len(), uncond.vocab());
        if by_last.len() != shape.1 || by_last.iter().any(|o| (o.seq_len(), o.vocab()) != shape) {
            return Err(Error::Shape(
                "need one oracle per token, all of the same shape".into(),
            ));
        }
        Ok(Self { by_last, uncond })
    }

    fn pick(&self, ctx: Option<&[usize]>) -> Result<&OracleDenoiser> {
        match ctx.and_then(|c| c.last()) {
            None => Ok(&self.uncond),
            Some(&k) => self
                .by_last
                .get(k)
                .ok_or_else(|| Error::Domain(format!("context token {k} out of range"))),
        }
    }
}

impl Denoiser for ContextOracle {
    fn seq_len(&self) -> usize {
        self.uncond.seq_len()
    }

    fn vocab(&self) -> usize {
        self.uncond.vocab()
    }

    fn schedule(&self) -> &Schedule {
        self.uncond.schedule()
    }

    fn logits(&self, x: &State, s: f64, t: f64, ctx: Option<&[usize]>) -> Result<State> {
        self.pick(ctx)?.logits(x, s, t, None)
    }

    fn probs(&self, x: &State, s: f64, t: f64, ctx: Option<&[usize]>) -> Result<State> {
        self.pick(ctx)?.probs(x, s, t, None)
    }

    fn dz_dt(&self, x: &State, s: f64, t: f64, ctx: Option<&[usize]>) -> Result<State> {
        self.pick(ctx)?.dz_dt(x, s, t, None)
    }

    fn total_derivative_s(
        &self,
        x: &State,
        s: f64,
        t: f64,
        v: &State,
        ctx: Option<&[usize]>,
    ) -> Result<State> {
        self.pick(ctx)?.total_derivative_s(x, s, t, v, None)
    }
}

fn log_rows(p: &State) -> State {
    p.mapv(|v| v.max(1e-300).ln())
}

/// Derivative at `u = 0` of `g(u)` for `at + u` restricted to `[lo, hi]`:
/// central differences when both sides fit, otherwise a one-sided
/// second-order stencil.
fn fd_derivative<G>(g: G, at: f64, lo: f64, hi: f64, h: f64) -> Result<State>
where
    G: Fn(f64) -> Result<State>,
{
    let room_lo = at - lo;
    let room_hi = hi - at;
    if room_lo >= h && room_hi >= h {
        return Ok((g(h)? - g(-h)?) / (2.0 * h));
    }
    if room_hi >= 2.0 * h || room_hi >= room_lo {
        let h = h.min(room_hi / 2.0);
        if h <= 0.0 {
            return domain("no room for a finite-difference stencil");
        }
        return Ok((-3.0 * g(0.0)? + 4.0 * g(h)? - g(2.0 * h)?) / (2.0 * h));
    }
    let h = h.min(room_lo / 2.0);
    Ok((3.0 * g(0.0)? - 4.0 * g(-h)? + g(-2.0 * h)?) / (2.0 * h))
}

impl Denoiser for OracleDenoiser {
    fn seq_len(&self) -> usize {
        self.dist.seq_len()
    }

    fn vocab(&self) -> usize {
        self.dist.vocab()
    }

    fn schedule(&self) -> &Schedule {
        &self.sched
    }

    fn logits(&self, x: &State, s: f64, t: f64, _ctx: Option<&[usize]>) -> Result<State> {
        Ok(log_rows(&self.psi(x, s, t)?))
    }

    fn probs(&self, x: &State, s: f64, t: f64, _ctx: Option<&[usize]>) -> Result<State> {
        self.psi(x, s, t)
    }

    /// Away from the diagonal this is exact for the integrated flow:
    /// `d/dt psi_{s,t} = lambda_t (psi_{t,t}(X_{s,t}) - psi_{s,t}) / Xi_{s,t}`.
    fn dz_dt(&self, x: &State, s: f64, t: f64, ctx: Option<&[usize]>) -> Result<State> {
        let t = t.min(1.0 - TERMINAL_EPS);
        let s = s.min(t);
        if t - s >= self.fd_step {
            let (x_t, psi) =
                flow_and_mean(&self.dist, &self.sched, &self.noise, x, s, t, self.n_steps)?;
            let end = posterior_matrix(&self.dist, &self.sched, &self.noise, &x_t, t)?;
            let (_, xi) = self.sched.gamma_xi(s, t);
            let rate = self.sched.lam(t) / xi;
            let (lp, le) = (log_rows(&psi), log_rows(&end));
            return Ok(Zip::from(&le)
                .and(&lp)
                .map_collect(|&a, &b| rate * (a - b).exp_m1()));
        }
        fd_derivative(
            |u| self.logits(x, s, t + u, ctx),
            t,
            s,
            1.0 - TERMINAL_EPS,
            self.fd_step,
        )
    }

    /// Differenced on the sigma clock, where `psi` is smooth even when the
    /// schedule is only piecewise smooth.
    fn total_derivative_s(
        &self,
        x: &State,
        s: f64,
        t: f64,
        v: &State,
        _ctx: Option<&[usize]>,
    ) -> Result<State> {
        let t = t.min(1.0 - TERMINAL_EPS);
        let s = s.min(t);
        let (sigma_s, sigma_t) = (self.sched.sigma(s), self.sched.sigma(t));
        let rate = self.sched.beta_dot(s) / (1.0 - self.sched.beta(s));
        if !(rate > 0.0) {
            return domain("schedule is flat at s; sigma clock is degenerate");
        }
        let len = self.dist.seq_len();
        let g = |u: f64| -> Result<State> {
            let xu = x + &(u * v);
            let sg = (sigma_s + u * rate).clamp(0.0, sigma_t);
            if sigma_t - sg < 1e-12 {
                let b = -(-sigma_t).exp_m1();
                return Ok(log_rows(&posterior_from_betas(
                    &self.dist,
                    &vec![b; len],
                    &self.noise,
                    &xu,
                )?));
            }
            Ok(log_rows(
                &mean_in_sigma(&self.dist, &self.noise, &xu, sg, sigma_t, self.n_steps)?.1,
            ))
        };
        fd_derivative(
            g,
            s,
            s - sigma_s / rate,
            s + (sigma_t - sigma_s) / rate,
            self.fd_step,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy5() -> ToyDistribution {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        ToyDistribution::random(1, 5, &mut rng).unwrap()
    }

    #[test]
    fn symmetric_state_gives_uniform_posterior() {
        let d = ToyDistribution::uniform(1, 3).unwrap();
        let x = array![[0.3, 0.3, 0.3]];
        let p =
            posterior_matrix(&d, &Schedule::linear(), &NoiseConfig::default(), &x, 0.4).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_outcome_bayes_by_hand() {
        let d = ToyDistribution::uniform(1, 2).unwrap();
        let x = array![[0.5, 0.0]];
        let p =
            posterior_matrix(&d, &Schedule::linear(), &NoiseConfig::default(), &x, 0.5).unwrap();
        // log-odds = beta / (alpha^2 sigma^2) * (x_0 - x_1) = 0.5 / 0.25 * 0.5 = 1
        assert!((p[[0, 0]] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
        assert!((p[[0, 0]] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn vanishing_noise_concentrates_on_vertex() {
        let d = toy5();
        let mut x = Array2::zeros((1, 5));
        x[[0, 3]] = 1.0;
        x[[0, 1]] = 0.05;
        let betas = [1.0 - 1e-4];
        let p = posterior_from_betas(&d, &betas, &NoiseConfig::default(), &x).unwrap();
        assert!((p[[0, 3]] - 1.0).abs() < 1e-6);
        let p =
            posterior_matrix(&d, &Schedule::linear(), &NoiseConfig::default(), &x, 1.0).unwrap();
        assert_eq!(p[[0, 3]], 1.0);
    }

    #[test]
    fn joint_posterior_differs_from_factorized_shortcut() {
        // perfectly correlated pair: positions must agree
        let d = ToyDistribution::new(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let x = array![[0.4, 0.0], [0.0, 0.1]];
        let p =
            posterior_matrix(&d, &Schedule::linear(), &NoiseConfig::default(), &x, 0.5).unwrap();
        assert!((p[[0, 0]] - p[[1, 0]]).abs() < 1e-15);
    }

    #[test]
    fn drift_at_zero_is_posterior_minus_state() {
        let d = toy5();
        let x = array![[0.1, -0.3, 0.2, 0.0, 0.5]];
        let sched = Schedule::linear();
        let noise = NoiseConfig::default();
        let b = exact_drift(&d, &sched, &noise, &x, 0.0).unwrap();
        let p = posterior_matrix(&d, &sched, &noise, &x, 0.0).unwrap();
        for ((bv, pv), xv) in b.iter().zip(p.iter()).zip(x.iter()) {
            assert!((bv - (pv - xv)).abs() < 1e-14);
        }
        assert!(exact_drift(&d, &sched, &noise, &x, 1.0).is_err());
    }

    #[test]
    fn flow_is_identity_on_empty_interval() {
        let d = toy5();
        let x = array![[0.1, -0.3, 0.2, 0.0, 0.5]];
        let y = integrate_flow(
            &d,
            &Schedule::linear(),
            &NoiseConfig::default(),
            &x,
            0.3,
            0.3,
            100,
        )
        .unwrap();
        assert_eq!(x, y);
        assert!(integrate_flow(
            &d,
            &Schedule::linear(),
            &NoiseConfig::default(),
            &x,
            0.3,
            1.0,
            10
        )
        .is_err());
    }

    #[test]
    fn flow_derivative_matches_drift() {
        let d = toy5();
        let sched = Schedule::linear();
        let noise = NoiseConfig::default();
        let x = array![[0.1, -0.3, 0.2, 0.0, 0.5]];
        let (s, h) = (0.4, 1e-4);
        // central difference along the trajectory through x_mid at time s
        let x_mid = integrate_flow(&d, &sched, &noise, &x, s - h, s, 50).unwrap();
        let x_end = integrate_flow(&d, &sched, &noise, &x_mid, s, s + h, 50).unwrap();
        let fd = (&x_end - &x) / (2.0 * h);
        let b = exact_drift(&d, &sched, &noise, &x_mid, s).unwrap();
        for (a, e) in fd.iter().zip(b.iter()) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn flow_composition() {
        let d = toy5();
        let sched = Schedule::linear();
        let noise = NoiseConfig::default();
        let x = array![[0.3, -0.5, 0.8, 0.1, -0.2]];
        let mid = integrate_flow(&d, &sched, &noise, &x, 0.1, 0.5, 2000).unwrap();
        let a = integrate_flow(&d, &sched, &noise, &mid, 0.5, 0.9, 2000).unwrap();
        let b = integrate_flow(&d, &sched, &noise, &x, 0.1, 0.9, 2000).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_denoiser_tends_to_posterior_on_diagonal() {
        let d = toy5();
        let sched = Schedule::linear();
        let noise = NoiseConfig::default();
        let x = array![[0.3, -0.5, 0.8, 0.1, -0.2]];
        let post = posterior_matrix(&d, &sched, &noise, &x, 0.5).unwrap();
        // psi_{s,t} - psi_{s,s} = O(t - s): first-order convergence to the posterior
        let err = |gap: f64| {
            let (_, psi) = flow_and_mean(&d, &sched, &noise, &x, 0.5, 0.5 + gap, 2000).unwrap();
            psi.iter()
                .zip(post.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let (e3, e4) = (err(1e-3), err(1e-4));
        assert!(e3 < 1e-3);
        assert!(e4 < 1e-4);
        assert!((e3 / e4 - 10.0).abs() < 0.2);
    }

    #[test]
    fn mean_denoiser_reconstructs_flow_map() {
        let d = toy5();
        let noise = NoiseConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for sched in [Schedule::linear(), {
            let mut r = ChaCha8Rng::seed_from_u64(1);
            Schedule::blended_argmax(0.9, 5, 1.0, 20_000, 256, &mut r).unwrap()
        }] {
            for _ in 0..10 {
                let x = noise.sample(1, 5, &mut rng);
                let s: f64 = rng.random_range(0.0..0.8);
                let t: f64 = rng.random_range(s + 0.01..0.999);
                let (xt, psi) = flow_and_mean(&d, &sched, &noise, &x, s, t, 2000).unwrap();
                let (g, xi) = sched.gamma_xi(s, t);
                let recon = g * &x + xi * &psi;
                for (a, b) in recon.iter().zip(xt.iter()) {
                    assert!((a - b).abs() < 1e-4, "s={s} t={t}: {a} vs {b}");
                }
                assert!((psi.sum() - 1.0).abs() < 1e-12);
                assert!(psi.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn interpolant_sample_is_exact() {
        let x0 = array![[0.5, -1.0], [2.0, 0.25]];
        let s = InterpolantSample::new(
            x0.clone(),
            TokenSeq::new(vec![1, 0]),
            0.25,
            &Schedule::linear(),
        )
        .unwrap();
        assert_eq!(s.x, array![[0.375, -0.5], [1.75, 0.1875]]);
        assert!(
            InterpolantSample::new(x0, TokenSeq::new(vec![2, 0]), 0.25, &Schedule::linear())
                .is_err()
        );
    }

    #[test]
    fn oracle_time_derivative_matches_direct_differences() {
        let o =
            OracleDenoiser::new(toy5(), Schedule::linear(), NoiseConfig::default()).with_steps(400);
        let x = array![[0.3, -0.5, 0.8, 0.1, -0.2]];
        let d = o.dz_dt(&x, 0.2, 0.6, None).unwrap();
        let h = 1e-4;
        let fd = (o.logits(&x, 0.2, 0.6 + h, None).unwrap()
            - o.logits(&x, 0.2, 0.6 - h, None).unwrap())
            / (2.0 * h);
        for (a, b) in d.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
        // one-sided stencil close to the diagonal
        let d = o.dz_dt(&x, 0.6, 0.6, None).unwrap();
        assert!(d.iter().all(|v| v.is_finite()));
    }
}
