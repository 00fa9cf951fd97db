//! Interpolant schedules `I_t = alpha_t I_0 + beta_t I_1` and the scalar
//! coefficients that appear in the flow-map identities.
//!
//! Every constructed schedule satisfies `alpha_t = 1 - beta_t`, so all
//! derived scalars are written in terms of `beta_t` and its derivative:
//!
//! ```text
//! ell_t   = -beta'_t / (1 - beta_t)          (d/dt log alpha_t)
//! lambda_t =  beta'_t / (1 - beta_t)
//! Gamma_{s,t} = (1 - beta_t) / (1 - beta_s)
//! Xi_{s,t}    = (beta_t - beta_s) / (1 - beta_s)
//! C_{s,t}     = Xi_{s,t} (1 - beta_t) / beta'_t          (= Xi / lambda_t)
//! kappa_{s,t} = (1 - beta_t) beta'_s / ((1 - beta_s)(beta_t - beta_s))
//! ```
//!
//! Tabulated schedules store `beta` on a uniform grid over `[0, 1]` and
//! interpolate with a monotone cubic Hermite spline, so `beta'` is the exact
//! derivative of the interpolant.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Tolerance on the endpoint constraints `beta_0 = 0`, `beta_1 = 1`.
pub const ENDPOINT_TOL: f64 = 1e-12;

/// Default number of grid points for tabulated schedules.
pub const DEFAULT_GRID_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    BlendedArgmax,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq)]
struct BetaTable {
    betas: Vec<f64>,
    slopes: Vec<f64>,
}

impl BetaTable {
    fn new(betas: Vec<f64>) -> Self {
        let n = betas.len();
        let h = 1.0 / (n - 1) as f64;
        let secants: Vec<f64> = betas.windows(2).map(|w| (w[1] - w[0]) / h).collect();
        let mut slopes = vec![0.0; n];
        slopes[0] = secants[0];
        slopes[n - 1] = secants[n - 2];
        for i in 1..n - 1 {
            let (a, b) = (secants[i - 1], secants[i]);
            slopes[i] = if a * b <= 0.0 {
                0.0
            } else {
                2.0 * a * b / (a + b)
            };
        }
        Self { betas, slopes }
    }

    fn n(&self) -> usize {
        self.betas.len()
    }

    /// Cell index and local coordinate; `None` when `t` sits exactly on a node.
    fn locate(&self, t: f64) -> (usize, f64, Option<usize>) {
        let last = (self.n() - 1) as f64;
        let u = t * last;
        let r = u.round();
        if r as usize as f64 / last == t {
            return (0, 0.0, Some(r as usize));
        }
        let i = (u.floor() as usize).min(self.n() - 2);
        (i, u - i as f64, None)
    }

    fn value(&self, t: f64) -> f64 {
        let (i, tau, node) = self.locate(t);
        if let Some(j) = node {
            return self.betas[j];
        }
        let h = 1.0 / (self.n() - 1) as f64;
        let t2 = tau * tau;
        let t3 = t2 * tau;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + tau;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.betas[i]
            + h10 * h * self.slopes[i]
            + h01 * self.betas[i + 1]
            + h11 * h * self.slopes[i + 1]
    }

    fn derivative(&self, t: f64) -> f64 {
        let (i, tau, node) = self.locate(t);
        if let Some(j) = node {
            return self.slopes[j];
        }
        let h = 1.0 / (self.n() - 1) as f64;
        let t2 = tau * tau;
        let d00 = 6.0 * t2 - 6.0 * tau;
        let d10 = 3.0 * t2 - 4.0 * tau + 1.0;
        let d01 = -6.0 * t2 + 6.0 * tau;
        let d11 = 3.0 * t2 - 2.0 * tau;
        (d00 * self.betas[i] + d01 * self.betas[i + 1]) / h
            + d10 * self.slopes[i]
            + d11 * self.slopes[i + 1]
    }
}

/// An interpolant schedule with `alpha_t = 1 - beta_t`. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ScheduleSpec", try_from = "ScheduleSpec")]
pub struct Schedule {
    kind: ScheduleKind,
    lambda_blend: f64,
    table: Option<BetaTable>,
}

/// Serialized form: `{kind, lambda_blend, grid}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub lambda_blend: f64,
    #[serde(default)]
    pub grid: Vec<f64>,
}

impl From<Schedule> for ScheduleSpec {
    fn from(s: Schedule) -> Self {
        ScheduleSpec {
            kind: s.kind,
            lambda_blend: s.lambda_blend,
            grid: s.table.map(|t| t.betas).unwrap_or_default(),
        }
    }
}

impl TryFrom<ScheduleSpec> for Schedule {
    type Error = Error;

    fn try_from(spec: ScheduleSpec) -> Result<Self> {
        match spec.kind {
            ScheduleKind::Linear => Ok(Schedule::linear()),
            kind => {
                let mut s = Schedule::tabulated(spec.grid)?;
                s.kind = kind;
                s.lambda_blend = spec.lambda_blend;
                Ok(s)
            }
        }
    }
}

/// Schedule-dependent scalars for an ordered pair `s < t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientSet {
    pub gamma: f64,
    pub xi: f64,
    pub ell_s: f64,
    pub ell_t: f64,
    pub lam_s: f64,
    pub lam_t: f64,
    pub c_lag: f64,
    pub kappa: f64,
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return domain(format!("time {t} outside [0, 1]"));
    }
    Ok(())
}

impl Schedule {
    /// `alpha_t = 1 - t`, `beta_t = t`.
    pub fn linear() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            lambda_blend: 0.0,
            table: None,
        }
    }

    /// A schedule from `beta` values on the uniform grid `i / (n - 1)`.
    pub fn tabulated(betas: Vec<f64>) -> Result<Self> {
        let n = betas.len();
        if n < 3 {
            return domain("tabulated schedule needs at least 3 grid points");
        }
        if betas.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("beta table".into()));
        }
        if betas[0].abs() > ENDPOINT_TOL || (betas[n - 1] - 1.0).abs() > ENDPOINT_TOL {
            return domain("beta table must start at 0 and end at 1");
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return domain("beta table must be non-decreasing");
        }
        let mut betas = betas;
        betas[0] = 0.0;
        betas[n - 1] = 1.0;
        Ok(Self {
            kind: ScheduleKind::Tabulated,
            lambda_blend: 0.0,
            table: Some(BetaTable::new(betas)),
        })
    }

    /// The blended argmax schedule `lambda * beta_argmax(t) + (1 - lambda) * t`.
    ///
    /// `beta_argmax` is calibrated by Monte Carlo so that the probability that
    /// `argmax(I_t)` already equals `argmax(I_1)` rises linearly from `1/K`
    /// (at `t = 0`) to `1` (at `t = 1`). The match probability is estimated on
    /// a uniform beta grid with common random numbers, made monotone by
    /// isotonic regression, and inverted by piecewise-linear interpolation.
    pub fn blended_argmax<R: Rng + ?Sized>(
        lambda_blend: f64,
        vocab: usize,
        noise_std: f64,
        mc_samples: usize,
        grid_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_blend) {
            return domain("lambda_blend must lie in [0, 1]");
        }
        if vocab < 2 {
            return domain("vocabulary size must be at least 2");
        }
        if mc_samples < 1000 {
            return domain("argmax calibration needs at least 1000 Monte Carlo samples");
        }
        if grid_size < 3 {
            return domain("grid_size must be at least 3");
        }
        if !(noise_std > 0.0) {
            return domain("noise std must be positive");
        }
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Domain(e.to_string()))?;

        // argmax((1-b) z + b e_0) == 0  <=>  max_k (z_k - z_0) < b / (1 - b)
        let mut margins: Vec<f64> = (0..mc_samples)
            .map(|_| {
                let z0: f64 = normal.sample(rng);
                (1..vocab)
                    .map(|_| normal.sample(rng) - z0)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        margins.sort_by(f64::total_cmp);

        let last = (grid_size - 1) as f64;
        let beta_grid: Vec<f64> = (0..grid_size).map(|j| j as f64 / last).collect();
        let raw: Vec<f64> = beta_grid
            .iter()
            .map(|&b| {
                if b >= 1.0 {
                    return 1.0;
                }
                let rho = b / (1.0 - b);
                margins.partition_point(|&m| m < rho) as f64 / mc_samples as f64
            })
            .collect();
        let matched = isotonic_increasing(&raw);

        let f0 = matched[0];
        let mut beta = Vec::with_capacity(grid_size);
        for i in 0..grid_size {
            let t = i as f64 / last;
            let target = f0 + t * (1.0 - f0);
            beta.push(invert_piecewise_linear(&beta_grid, &matched, target));
        }
        beta[0] = 0.0;
        beta[grid_size - 1] = 1.0;
        let max_decrease = beta.windows(2).map(|w| w[0] - w[1]).fold(0.0f64, f64::max);
        if max_decrease > 0.0 {
            return Err(Error::Construction(format!(
                "calibrated argmax schedule decreases by {max_decrease}; increase mc_samples"
            )));
        }

        let mut blended: Vec<f64> = beta
            .iter()
            .enumerate()
            .map(|(i, &b)| lambda_blend * b + (1.0 - lambda_blend) * (i as f64 / last))
            .collect();
        blended[0] = 0.0;
        blended[grid_size - 1] = 1.0;

        let mut s = Self::tabulated(blended)?;
        s.kind = ScheduleKind::BlendedArgmax;
        s.lambda_blend = lambda_blend;
        Ok(s)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn lambda_blend(&self) -> f64 {
        self.lambda_blend
    }

    /// Tabulated beta values, if any.
    pub fn grid(&self) -> Option<&[f64]> {
        self.table.as_ref().map(|t| t.betas.as_slice())
    }

    /// `beta_t` for `t` clamped into `[0, 1]`.
    pub fn beta(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        match &self.table {
            None => t,
            Some(tab) => tab.value(t),
        }
    }

    /// `d beta / dt` for `t` clamped into `[0, 1]`.
    pub fn beta_dot(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        match &self.table {
            None => 1.0,
            Some(tab) => tab.derivative(t),
        }
    }

    pub fn alpha_beta(&self, t: f64) -> Result<(f64, f64)> {
        check_time(t)?;
        let b = self.beta(t);
        Ok((1.0 - b, b))
    }

    /// `ell_t = d/dt log alpha_t`; `-inf` at `t = 1`.
    pub fn ell(&self, t: f64) -> f64 {
        let b = self.beta(t);
        if b >= 1.0 {
            return f64::NEG_INFINITY;
        }
        -self.beta_dot(t) / (1.0 - b)
    }

    /// `lambda_t = beta'_t - beta_t ell_t`; `+inf` at `t = 1`.
    pub fn lam(&self, t: f64) -> f64 {
        let b = self.beta(t);
        if b >= 1.0 {
            return f64::INFINITY;
        }
        self.beta_dot(t) / (1.0 - b)
    }

    /// `Gamma_{s,t}` and `Xi_{s,t}` for `s <= t` (no ordering check).
    pub fn gamma_xi(&self, s: f64, t: f64) -> (f64, f64) {
        let (bs, bt) = (self.beta(s), self.beta(t));
        if bs >= 1.0 {
            return (1.0, 0.0);
        }
        ((1.0 - bt) / (1.0 - bs), (bt - bs) / (1.0 - bs))
    }

    pub fn coeffs(&self, s: f64, t: f64) -> Result<CoefficientSet> {
        check_time(s)?;
        check_time(t)?;
        if s >= t {
            return domain(format!("coefficients need s < t, got s={s}, t={t}"));
        }
        let (bs, bt) = (self.beta(s), self.beta(t));
        let (ds, dt) = (self.beta_dot(s), self.beta_dot(t));
        let (gamma, xi) = self.gamma_xi(s, t);
        Ok(CoefficientSet {
            gamma,
            xi,
            ell_s: self.ell(s),
            ell_t: self.ell(t),
            lam_s: self.lam(s),
            lam_t: self.lam(t),
            c_lag: xi * (1.0 - bt) / dt,
            kappa: (1.0 - bt) * ds / ((1.0 - bs) * (bt - bs)),
        })
    }

    /// Weight `omega_{s,u,t} = Gamma_{u,t} Xi_{s,u} / Xi_{s,t}` of `psi_{s,u}` in
    /// the semigroup identity.
    pub fn semigroup_weight(&self, s: f64, u: f64, t: f64) -> Result<f64> {
        check_time(s)?;
        check_time(t)?;
        if !(s < u && u < t) {
            return domain(format!(
                "semigroup weight needs s < u < t, got ({s}, {u}, {t})"
            ));
        }
        let (bs, bu, bt) = (self.beta(s), self.beta(u), self.beta(t));
        if bt <= bs {
            return domain("degenerate interval: beta_s == beta_t");
        }
        Ok((1.0 - bt) * (bu - bs) / ((1.0 - bu) * (bt - bs)))
    }

    /// Density `w_{s,t}(u) = (alpha_t / Xi_{s,t}) (lambda_u / alpha_u)` of the
    /// time average defining the mean denoiser.
    pub fn time_average_weight(&self, s: f64, t: f64, u: f64) -> Result<f64> {
        check_time(s)?;
        check_time(t)?;
        if !(s <= u && u <= t) {
            return domain(format!("need s <= u <= t, got ({s}, {u}, {t})"));
        }
        let (bs, bt, bu) = (self.beta(s), self.beta(t), self.beta(u));
        if bt >= 1.0 {
            return domain("time-average weight has a pole at t = 1");
        }
        if bt <= bs {
            return domain("degenerate interval: beta_s == beta_t");
        }
        let du = self.beta_dot(u);
        Ok((1.0 - bt) * (1.0 - bs) / (bt - bs) * du / ((1.0 - bu) * (1.0 - bu)))
    }

    /// The clock `sigma_t = -log alpha_t`, in which the probability-flow ODE
    /// reads `dx/dsigma = E[I_1 | I_t = x] - x` for every schedule of this family.
    pub fn sigma(&self, t: f64) -> f64 {
        -(1.0 - self.beta(t)).ln()
    }

    /// Smallest `t` with `beta_t >= b` (bisection on the monotone interpolant).
    pub fn inverse_beta(&self, b: f64) -> f64 {
        let b = b.clamp(0.0, 1.0);
        if self.table.is_none() {
            return b;
        }
        if b <= 0.0 {
            return 0.0;
        }
        if b >= 1.0 {
            return 1.0;
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.beta(mid) < b {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        hi
    }
}

/// Pool-adjacent-violators fit of a non-decreasing sequence (unit weights).
pub fn isotonic_increasing(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().unwrap() = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, n)| std::iter::repeat_n(m, n))
        .collect()
}

/// Smallest `x` with `f(x) = y` for a non-decreasing piecewise-linear `f`.
fn invert_piecewise_linear(xs: &[f64], fs: &[f64], y: f64) -> f64 {
    if y <= fs[0] {
        return xs[0];
    }
    let j = fs.partition_point(|&f| f < y);
    if j >= fs.len() {
        return xs[xs.len() - 1];
    }
    let (f0, f1) = (fs[j - 1], fs[j]);
    if f1 <= f0 {
        return xs[j];
    }
    xs[j - 1] + (y - f0) / (f1 - f0) * (xs[j] - xs[j - 1])
}

/// Composite Simpson rule with `n` (even) sub-intervals.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 1 { n + 1 } else { n.max(2) };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let c = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += c * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Per-position schedules `beta^(l)(t) = beta(warp_l(t))` with earlier
/// positions revealed sooner.
///
/// `warp_l(t) = clip((t - delta (l-1)/(L-1)) / (1 - delta), 0, 1)` with
/// `delta = stagger / (1 + stagger)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionSchedule {
    base: Schedule,
    len: usize,
    delta: f64,
}

pub fn position_schedule(base: Schedule, len: usize, stagger: f64) -> Result<PositionSchedule> {
    if !(stagger >= 0.0) || !stagger.is_finite() {
        return domain("stagger must be finite and non-negative");
    }
    if len == 0 {
        return domain("sequence length must be positive");
    }
    Ok(PositionSchedule {
        base,
        len,
        delta: stagger / (1.0 + stagger),
    })
}

impl PositionSchedule {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn base(&self) -> &Schedule {
        &self.base
    }

    fn offset(&self, pos: usize) -> f64 {
        if self.len == 1 {
            0.0
        } else {
            self.delta * pos as f64 / (self.len - 1) as f64
        }
    }

    fn warp(&self, pos: usize, t: f64) -> f64 {
        ((t - self.offset(pos)) / (1.0 - self.delta)).clamp(0.0, 1.0)
    }

    /// `beta^(pos)(t)` for a zero-based position.
    pub fn beta(&self, pos: usize, t: f64) -> f64 {
        if t >= 1.0 {
            return 1.0;
        }
        self.base.beta(self.warp(pos, t))
    }

    pub fn beta_dot(&self, pos: usize, t: f64) -> f64 {
        let raw = (t - self.offset(pos)) / (1.0 - self.delta);
        if raw <= 0.0 || raw >= 1.0 {
            return 0.0;
        }
        self.base.beta_dot(raw) / (1.0 - self.delta)
    }

    pub fn alpha_beta(&self, pos: usize, t: f64) -> Result<(f64, f64)> {
        check_time(t)?;
        if pos >= self.len {
            return domain(format!("position {pos} out of range"));
        }
        let b = self.beta(pos, t);
        Ok((1.0 - b, b))
    }

    /// `(alpha, beta)` for every position at time `t`.
    pub fn coefficients(&self, t: f64) -> Result<Vec<(f64, f64)>> {
        (0..self.len).map(|p| self.alpha_beta(p, t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blended(lambda: f64) -> Schedule {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        Schedule::blended_argmax(lambda, 8, 1.0, 20_000, 256, &mut rng).unwrap()
    }

    #[test]
    fn linear_endpoints_and_midpoints() {
        let s = Schedule::linear();
        assert_eq!(s.alpha_beta(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(s.alpha_beta(1.0).unwrap(), (0.0, 1.0));
        assert_eq!(s.alpha_beta(0.25).unwrap(), (0.75, 0.25));
        assert_eq!(s.alpha_beta(0.5).unwrap(), (0.5, 0.5));
        assert!(s.alpha_beta(1.5).is_err());
        assert!(s.alpha_beta(-0.1).is_err());
    }

    #[test]
    fn linear_coefficients_closed_forms() {
        let s = Schedule::linear();
        let c = s.coeffs(0.0, 0.5).unwrap();
        assert!((c.gamma - 0.5).abs() < 1e-15);
        assert!((c.xi - 0.5).abs() < 1e-15);
        assert!((c.kappa - 1.0).abs() < 1e-15);
        let c = s.coeffs(0.0, 1.0).unwrap();
        assert_eq!(c.gamma, 0.0);
        assert_eq!(c.xi, 1.0);
        assert_eq!(c.c_lag, 0.0);
        assert!(c.lam_t.is_infinite());
        assert!(s.coeffs(0.5, 0.5).is_err());
        assert!(s.coeffs(0.6, 0.5).is_err());

        // symbol-for-symbol agreement with the linear closed forms
        for &(a, b) in &[(0.1, 0.3), (0.2, 0.9), (0.0, 0.7), (0.45, 0.55)] {
            let c = s.coeffs(a, b).unwrap();
            assert!((c.gamma - (1.0 - b) / (1.0 - a)).abs() < 1e-15);
            assert!((c.xi - (b - a) / (1.0 - a)).abs() < 1e-15);
            assert!((c.kappa - (1.0 - b) / ((1.0 - a) * (b - a))).abs() < 1e-12);
            assert!((c.c_lag - (b - a) * (1.0 - b) / (1.0 - a)).abs() < 1e-15);
            assert!((c.lam_t - 1.0 / (1.0 - b)).abs() < 1e-12);
            assert!((c.ell_s + 1.0 / (1.0 - a)).abs() < 1e-12);
        }
    }

    #[test]
    fn lagrangian_coefficient_vanishes_on_diagonal() {
        for s in [Schedule::linear(), blended(0.9)] {
            let c = s.coeffs(0.4, 0.4 + 1e-9).unwrap();
            assert!(c.c_lag.abs() < 1e-8);
        }
    }

    #[test]
    fn semigroup_weight_examples() {
        let s = Schedule::linear();
        assert_eq!(s.semigroup_weight(0.0, 0.5, 1.0).unwrap(), 0.0);
        let w = s.semigroup_weight(0.0, 0.25, 0.5).unwrap();
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(w + (1.0 - w), 1.0);
        assert!(s.semigroup_weight(0.2, 0.2, 0.5).is_err());
    }

    #[test]
    fn time_average_weight_examples() {
        let s = Schedule::linear();
        assert!((s.time_average_weight(0.0, 0.5, 0.0).unwrap() - 1.0).abs() < 1e-15);
        let integral = simpson(
            |u| s.time_average_weight(0.2, 0.8, u).unwrap(),
            0.2,
            0.8,
            1000,
        );
        assert!((integral - 1.0).abs() < 1e-8);
        for i in 1..100 {
            let u = 0.2 + 0.6 * i as f64 / 100.0;
            assert!(s.time_average_weight(0.2, 0.8, u).unwrap() > 0.0);
        }
        assert!(s.time_average_weight(0.2, 1.0, 0.5).is_err());
    }

    #[test]
    fn time_average_weight_normalises_on_random_intervals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Schedule::linear();
        let tab = blended(0.9);
        for _ in 0..100 {
            let a: f64 = rng.random_range(0.0..0.95);
            let b: f64 = rng.random_range(a + 1e-3..0.99);
            let integral = simpson(|u| lin.time_average_weight(a, b, u).unwrap(), a, b, 1000);
            assert!((integral - 1.0).abs() < 1e-6, "{a} {b} {integral}");

            // the spline's kinks spoil Simpson in t; in the sigma clock the
            // integrand (alpha_t / Xi) e^sigma is smooth
            let (ga, gb) = (tab.sigma(a), tab.sigma(b));
            let (_, xi) = tab.gamma_xi(a, b);
            let alpha_t = 1.0 - tab.beta(b);
            let integral = simpson(|g| alpha_t / xi * g.exp(), ga, gb, 1000);
            assert!((integral - 1.0).abs() < 1e-6, "{a} {b} {integral}");
        }
    }

    #[test]
    fn composition_laws_on_grid() {
        for (sched, tol) in [(Schedule::linear(), 1e-10), (blended(0.9), 1e-6)] {
            let g: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
            for &s in &g {
                for &u in g.iter().filter(|&&u| u >= s) {
                    for &t in g.iter().filter(|&&t| t >= u) {
                        let (gsu, xsu) = sched.gamma_xi(s, u);
                        let (gut, xut) = sched.gamma_xi(u, t);
                        let (gst, xst) = sched.gamma_xi(s, t);
                        if sched.beta(s) >= 1.0 {
                            continue;
                        }
                        assert!((gsu * gut - gst).abs() < tol);
                        assert!((xst - (gut * xsu + xut)).abs() < tol);
                        assert!(xst >= -tol);
                    }
                }
            }
        }
    }

    #[test]
    fn blended_lambda_zero_is_linear_on_grid() {
        let s = blended(0.0);
        let grid = s.grid().unwrap();
        let last = (grid.len() - 1) as f64;
        for (i, &b) in grid.iter().enumerate() {
            let t = i as f64 / last;
            assert_eq!(b.to_bits(), t.to_bits());
            assert_eq!(s.beta(t).to_bits(), Schedule::linear().beta(t).to_bits());
        }
        let (a, b) = s.alpha_beta(0.3).unwrap();
        assert!((a - 0.7).abs() < 1e-14 && (b - 0.3).abs() < 1e-14);
    }

    #[test]
    fn blended_endpoints_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = Schedule::blended_argmax(0.9, 8, 1.0, 50_000, 256, &mut rng).unwrap();
        let grid = s.grid().unwrap();
        let max_decrease = grid.windows(2).map(|w| w[0] - w[1]).fold(0.0f64, f64::max);
        assert_eq!(max_decrease, 0.0);
        assert_eq!(s.alpha_beta(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(s.alpha_beta(1.0).unwrap(), (0.0, 1.0));
        let one = blended(1.0);
        assert_eq!(one.beta(0.0), 0.0);
        assert_eq!(one.beta(1.0), 1.0);
        // beta / alpha non-decreasing on a fine sweep
        let mut prev = 0.0;
        for i in 0..1000 {
            let t = i as f64 / 1000.0;
            let b = s.beta(t);
            let r = b / (1.0 - b);
            assert!(r >= prev - 1e-12);
            prev = r;
        }
    }

    #[test]
    fn calibrated_schedule_linearises_argmax_match() {
        // Independent check of the calibration target with fresh noise.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Schedule::blended_argmax(1.0, 4, 1.0, 50_000, 256, &mut rng).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        for &t in &[0.25, 0.5, 0.75] {
            let b = s.beta(t);
            let n = 40_000;
            let hits = (0..n)
                .filter(|_| {
                    let z: Vec<f64> = (0..4).map(|_| normal.sample(&mut rng)).collect();
                    let x0 = (1.0 - b) * z[0] + b;
                    (1..4).all(|k| (1.0 - b) * z[k] < x0)
                })
                .count();
            let p = hits as f64 / n as f64;
            let target = 0.25 + t * 0.75;
            assert!((p - target).abs() < 0.015, "t={t}: {p} vs {target}");
        }
    }

    #[test]
    fn blended_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(Schedule::blended_argmax(1.5, 8, 1.0, 5000, 64, &mut rng).is_err());
        assert!(Schedule::blended_argmax(0.5, 1, 1.0, 5000, 64, &mut rng).is_err());
        assert!(Schedule::blended_argmax(0.5, 8, 1.0, 500, 64, &mut rng).is_err());
    }

    #[test]
    fn tabulated_derivative_matches_central_differences() {
        let s = blended(0.9);
        for i in 1..200 {
            let t = i as f64 / 200.0 + 1.3e-3;
            if t >= 1.0 - 1e-5 {
                continue;
            }
            let h = 1e-7;
            let fd = (s.beta(t + h) - s.beta(t - h)) / (2.0 * h);
            assert!(
                (fd - s.beta_dot(t)).abs() < 1e-5 * (1.0 + fd.abs()),
                "t={t}"
            );
        }
    }

    #[test]
    fn inverse_beta_round_trips() {
        let s = blended(0.9);
        for i in 0..=20 {
            let b = i as f64 / 20.0;
            let t = s.inverse_beta(b);
            assert!((s.beta(t) - b).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_serde_round_trip_is_exact() {
        let s = blended(0.9);
        let text = toml::to_string(&s).unwrap();
        let back: Schedule = toml::from_str(&text).unwrap();
        assert_eq!(s, back);
        let lin: Schedule = toml::from_str(&toml::to_string(&Schedule::linear()).unwrap()).unwrap();
        assert_eq!(lin, Schedule::linear());
    }

    #[test]
    fn tabulated_validation() {
        assert!(Schedule::tabulated(vec![0.0, 0.6, 0.5, 1.0]).is_err());
        assert!(Schedule::tabulated(vec![0.1, 0.5, 1.0]).is_err());
        assert!(Schedule::tabulated(vec![0.0, 1.0]).is_err());
        assert!(Schedule::tabulated(vec![0.0, 0.3, 1.0]).is_ok());
    }

    #[test]
    fn isotonic_pools_violators() {
        assert_eq!(
            isotonic_increasing(&[1.0, 3.0, 2.0, 4.0]),
            vec![1.0, 2.5, 2.5, 4.0]
        );
        assert_eq!(isotonic_increasing(&[3.0, 2.0, 1.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn position_schedule_properties() {
        let base = Schedule::linear();
        let flat = position_schedule(base.clone(), 4, 0.0).unwrap();
        for i in 0..=50 {
            let t = i as f64 / 50.0;
            for p in 0..4 {
                assert_eq!(flat.beta(p, t), base.beta(t));
            }
        }
        let ps = position_schedule(blended(0.9), 2, 0.5).unwrap();
        for i in 0..=200 {
            let t = i as f64 / 200.0;
            assert!(ps.beta(0, t) >= ps.beta(1, t));
        }
        let ps = position_schedule(base, 6, 2.0).unwrap();
        for p in 0..6 {
            assert_eq!(ps.alpha_beta(p, 1.0).unwrap(), (0.0, 1.0));
            assert_eq!(ps.alpha_beta(p, 0.0).unwrap(), (1.0, 0.0));
        }
        for i in 0..=200 {
            let t = i as f64 / 200.0;
            for p in 1..6 {
                assert!(ps.beta(p - 1, t) >= ps.beta(p, t));
            }
        }
        assert!(position_schedule(Schedule::linear(), 3, -1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn composition_holds_for_random_triples(a in 0.0f64..0.999, b in 0.0f64..0.999, c in 0.0f64..0.999) {
            let mut v = [a, b, c];
            v.sort_by(f64::total_cmp);
            let [s, u, t] = v;
            let sched = Schedule::linear();
            let (gsu, xsu) = sched.gamma_xi(s, u);
            let (gut, xut) = sched.gamma_xi(u, t);
            let (gst, xst) = sched.gamma_xi(s, t);
            prop_assert!((gsu * gut - gst).abs() < 1e-10);
            prop_assert!((xst - (gut * xsu + xut)).abs() < 1e-10);
            if s < u && u < t {
                let w = sched.semigroup_weight(s, u, t).unwrap();
                prop_assert!((0.0..=1.0).contains(&w));
            }
        }

        #[test]
        fn one_step_endpoint_is_exact(s in 0.0f64..0.999) {
            let c = Schedule::linear().coeffs(s, 1.0).unwrap();
            prop_assert_eq!(c.gamma, 0.0);
            prop_assert_eq!(c.xi, 1.0);
        }
    }
}
