//! Training objectives: the diagonal cross-entropy and the semigroup (PSD),
//! Lagrangian (LSD) and Eulerian (ESD) self-distillation teachers.
//!
//! Teachers are evaluated on a frozen model snapshot and never receive
//! gradients. The logit-space teachers are written in a cancelled form that
//! never divides by a vanishing coefficient:
//!
//! ```text
//! LSD: Softmax(z_{t,t}(X_{s,t}(x)) - log[(1-b_s) b'_t 1 + (b_t-b_s)(1-b_t) delta])
//!      delta = d_t z_{s,t} - <psi_{s,t}, d_t z_{s,t}> 1
//! ESD: Softmax(z_{s,s}(x) - log[(1-b_t) b'_s 1 - (1-b_s)(b_t-b_s) delta])
//!      delta = D_s z_{s,t} - <psi_{s,t}, D_s z_{s,t}> 1,  D_s = d_s + J_x . b_s
//! ```
//!
//! Log arguments are clamped below at [`LOG_CLAMP`]; a position whose whole
//! argument is clamped makes the teacher invalid.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{Denoiser, DenoiserModel, GradBundle};
use crate::oracle::InterpolantSample;
use crate::simplex::{log_softmax, one_hot_rows, softmax_rows, SimplexPoint};
use crate::State;

/// Lower clamp on teacher log arguments.
pub const LOG_CLAMP: f64 = 1e-12;

/// Samples per work unit when a batch fans out over threads. Chunks are
/// summed in a fixed order so results do not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Diag,
    Psd,
    Lsd,
    Esd,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag" => Ok(Self::Diag),
            "psd" => Ok(Self::Psd),
            "lsd" => Ok(Self::Lsd),
            "esd" => Ok(Self::Esd),
            _ => domain(format!("unknown loss kind `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnableWeight {
    #[default]
    None,
    OfS,
    OfSt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    /// `KL(teacher || student)`.
    #[default]
    Forward,
    /// `KL(student || teacher)`.
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub adaptive_c: f64,
    pub adaptive_r: f64,
    pub diag_adaptive_c: f64,
    pub diag_adaptive_r: f64,
    pub learnable_weight: LearnableWeight,
    /// `None` picks the per-loss default: on for PSD, off otherwise.
    pub surgery: Option<bool>,
    pub divergence: Divergence,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Diag,
            adaptive_c: 0.01,
            adaptive_r: 0.5,
            diag_adaptive_c: 0.01,
            diag_adaptive_r: 0.5,
            learnable_weight: LearnableWeight::None,
            surgery: None,
            divergence: Divergence::Forward,
        }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.adaptive_c > 0.0) || !(self.diag_adaptive_c > 0.0) {
            return domain("adaptive_c must be positive");
        }
        if !(self.adaptive_r >= 0.0) || !(self.diag_adaptive_r >= 0.0) {
            return domain("adaptive_r must be non-negative");
        }
        Ok(())
    }

    pub fn surgery_enabled(&self) -> bool {
        self.surgery.unwrap_or(self.kind == LossKind::Psd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TeacherDiagnostics {
    /// `||psi_student - teacher||_2` over the whole sequence.
    pub delta_norm: f64,
    pub clamped: bool,
}

/// A detached teacher distribution, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub probs: State,
    pub diagnostics: TeacherDiagnostics,
}

impl TeacherOutput {
    pub fn points(&self) -> Result<Vec<SimplexPoint>> {
        self.probs
            .rows()
            .into_iter()
            .map(|r| SimplexPoint::new(r.to_vec()))
            .collect()
    }

    fn new(probs: State, student: &State, clamped: bool) -> Self {
        let delta_norm = (&probs - student).mapv(|v| v * v).sum().sqrt();
        Self {
            probs,
            diagnostics: TeacherDiagnostics {
                delta_norm,
                clamped,
            },
        }
    }
}

fn center_rows(d: &State, psi: &State) -> State {
    let mut out = d.clone();
    for (mut row, p) in out.rows_mut().into_iter().zip(psi.rows()) {
        let mean: f64 = row.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
        row.mapv_inplace(|v| v - mean);
    }
    out
}

/// `Softmax(base - log(arg))` row-wise with clamping.
fn stabilized_softmax(base: &State, arg: &State) -> Result<(State, bool)> {
    let mut clamped = false;
    let mut z = base.clone();
    for (l, (mut zr, ar)) in z.rows_mut().into_iter().zip(arg.rows()).enumerate() {
        let mut all = true;
        for (zv, &a) in zr.iter_mut().zip(ar.iter()) {
            let a = if a.is_nan() { LOG_CLAMP } else { a };
            if a < LOG_CLAMP {
                clamped = true;
                *zv -= LOG_CLAMP.ln();
            } else {
                all = false;
                *zv -= a.ln();
            }
        }
        if all {
            return Err(Error::TeacherInvalid(format!(
                "every log argument at position {l} fell below {LOG_CLAMP}"
            )));
        }
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::TeacherInvalid("non-finite teacher logits".into()));
    }
    Ok((softmax_rows(&z), clamped))
}

/// `Gamma_{s,t} x + Xi_{s,t} psi`.
pub fn flow_map_from_psi<D: Denoiser + ?Sized>(
    model: &D,
    x: &State,
    psi: &State,
    s: f64,
    t: f64,
) -> State {
    let (g, xi) = model.schedule().gamma_xi(s, t);
    g * x + &(xi * psi)
}

/// Semigroup teacher `omega psi_{s,u}(x) + (1 - omega) psi_{u,t}(X_{s,u}(x))`.
pub fn psd_teacher<D: Denoiser + ?Sized>(
    model: &D,
    x: &State,
    s: f64,
    u: f64,
    t: f64,
    ctx: Option<&[usize]>,
) -> Result<TeacherOutput> {
    let sched = model.schedule();
    let omega = sched.semigroup_weight(s, u, t)?;
    let psi_su = model.probs(x, s, u, ctx)?;
    let x_su = flow_map_from_psi(model, x, &psi_su, s, u);
    let psi_ut = model.probs(&x_su, u, t, ctx)?;
    let teacher = omega * &psi_su + &((1.0 - omega) * &psi_ut);
    let student = model.probs(x, s, t, ctx)?;
    Ok(TeacherOutput::new(teacher, &student, false))
}

/// Stabilized Lagrangian teacher.
pub fn lsd_teacher<D: Denoiser + ?Sized>(
    model: &D,
    x: &State,
    s: f64,
    t: f64,
    ctx: Option<&[usize]>,
) -> Result<TeacherOutput> {
    if s >= t {
        return domain(format!("LSD teacher needs s < t, got s={s}, t={t}"));
    }
    let sched = model.schedule();
    let (z_st, dz) = model.logits_and_dz_dt(x, s, t, ctx)?;
    let psi_st = softmax_rows(&z_st);
    let x_st = flow_map_from_psi(model, x, &psi_st, s, t);
    let z_tt = model.logits(&x_st, t, t, ctx)?;
    let delta = center_rows(&dz, &psi_st);
    let (bs, bt) = (sched.beta(s), sched.beta(t));
    let scale = (1.0 - bs) * sched.beta_dot(t);
    let poly = (bt - bs) * (1.0 - bt);
    let arg = delta.mapv(|d| scale + poly * d);
    let (probs, clamped) = stabilized_softmax(&z_tt, &arg)?;
    Ok(TeacherOutput::new(probs, &psi_st, clamped))
}

/// Model drift `b_s(x) = ell_s x + lambda_s psi_{s,s}(x)`.
pub fn model_drift<D: Denoiser + ?Sized>(
    model: &D,
    x: &State,
    s: f64,
    ctx: Option<&[usize]>,
) -> Result<State> {
    let sched = model.schedule();
    if sched.beta(s) >= 1.0 {
        return domain("drift is singular at s = 1");
    }
    let psi = model.probs(x, s, s, ctx)?;
    Ok(sched.ell(s) * x + &(sched.lam(s) * &psi))
}

/// Stabilized Eulerian teacher; the drift is built from the model diagonal.
pub fn esd_teacher<D: Denoiser + ?Sized>(
    model: &D,
    x: &State,
    s: f64,
    t: f64,
    ctx: Option<&[usize]>,
) -> Result<TeacherOutput> {
    let drift = model_drift(model, x, s, ctx)?;
    esd_teacher_with_drift(model, x, s, t, &drift, ctx)
}

pub fn esd_teacher_with_drift<D: Denoiser + ?Sized>(
    model: &D,
    x: &State,
    s: f64,
    t: f64,
    drift: &State,
    ctx: Option<&[usize]>,
) -> Result<TeacherOutput> {
    if s >= t {
        return domain(format!("ESD teacher needs s < t, got s={s}, t={t}"));
    }
    let sched = model.schedule();
    let z_ss = model.logits(x, s, s, ctx)?;
    let (z_st, dz) = model.logits_and_total_derivative_s(x, s, t, drift, ctx)?;
    let psi_st = softmax_rows(&z_st);
    let delta = center_rows(&dz, &psi_st);
    let (bs, bt) = (sched.beta(s), sched.beta(t));
    let scale = (1.0 - bt) * sched.beta_dot(s);
    let poly = (1.0 - bs) * (bt - bs);
    let arg = delta.mapv(|d| scale - poly * d);
    let (probs, clamped) = stabilized_softmax(&z_ss, &arg)?;
    Ok(TeacherOutput::new(probs, &psi_st, clamped))
}

/// Eulerian teacher in the direct form `Softmax(z_{s,s} - log(1 - delta / kappa))`.
pub fn esd_teacher_naive<D: Denoiser + ?Sized>(
    model: &D,
    x: &State,
    s: f64,
    t: f64,
    ctx: Option<&[usize]>,
) -> Result<TeacherOutput> {
    let kappa = model.schedule().coeffs(s, t)?.kappa;
    let drift = model_drift(model, x, s, ctx)?;
    let z_ss = model.logits(x, s, s, ctx)?;
    let (z_st, dz) = model.logits_and_total_derivative_s(x, s, t, &drift, ctx)?;
    let psi_st = softmax_rows(&z_st);
    let delta = center_rows(&dz, &psi_st);
    let arg = delta.mapv(|d| 1.0 - d / kappa);
    let (probs, clamped) = stabilized_softmax(&z_ss, &arg)?;
    Ok(TeacherOutput::new(probs, &psi_st, clamped))
}

/// The teacher for `kind` at times `(s, u, t)`; `u` is used by PSD only.
pub fn teacher<D: Denoiser + ?Sized>(
    model: &D,
    kind: LossKind,
    x: &State,
    s: f64,
    u: f64,
    t: f64,
    ctx: Option<&[usize]>,
) -> Result<TeacherOutput> {
    match kind {
        LossKind::Psd => psd_teacher(model, x, s, u, t, ctx),
        LossKind::Lsd => lsd_teacher(model, x, s, t, ctx),
        LossKind::Esd => esd_teacher(model, x, s, t, ctx),
        LossKind::Diag => domain("the diagonal loss has no teacher"),
    }
}

/// Detached per-position weights `(||q - p||^2 + c)^(-r)`.
pub fn adaptive_weights(teacher: &State, student: &State, c: f64, r: f64) -> Vec<f64> {
    teacher
        .rows()
        .into_iter()
        .zip(student.rows())
        .map(|(p, q)| {
            if r == 0.0 {
                return 1.0;
            }
            let d2: f64 = p.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2 + c).powf(-r)
        })
        .collect()
}

/// Weighted divergence summed over positions, with its cotangent on the
/// student logits. Weights are treated as constants.
pub fn weighted_divergence(
    teacher: &State,
    student_logits: &State,
    weights: &[f64],
    divergence: Divergence,
) -> (f64, State) {
    let mut loss = 0.0;
    let mut cot = Array2::zeros(student_logits.dim());
    for (l, ((p, z), mut g)) in teacher
        .rows()
        .into_iter()
        .zip(student_logits.rows())
        .zip(cot.rows_mut())
        .enumerate()
    {
        let w = weights[l];
        let log_q = log_softmax(z.as_slice().expect("contiguous logits"));
        match divergence {
            Divergence::Forward => {
                let mut kl = 0.0;
                for (k, &pk) in p.iter().enumerate() {
                    if pk > 0.0 {
                        kl += pk * (pk.ln() - log_q[k]);
                    }
                    g[k] = w * (log_q[k].exp() - pk);
                }
                loss += w * kl.max(0.0);
            }
            Divergence::Reverse => {
                let log_p: Vec<f64> = p.iter().map(|v| v.max(1e-300).ln()).collect();
                let kl: f64 = log_q
                    .iter()
                    .zip(&log_p)
                    .map(|(lq, lp)| lq.exp() * (lq - lp))
                    .sum();
                for k in 0..log_q.len() {
                    let q = log_q[k].exp();
                    g[k] = w * q * (log_q[k] - log_p[k] - kl);
                }
                loss += w * kl.max(0.0);
            }
        }
    }
    (loss, cot)
}

/// Scalar loss, cotangent on the student logits, and the weights used.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedKl {
    pub loss: f64,
    pub cotangent: State,
    pub weights: Vec<f64>,
}

/// `sum_l w_l KL(p_l || softmax(z_l))` with `w_l = (||q_l - p_l||^2 + c)^(-r)`
/// detached. The cotangent is exactly `w_l (q_l - p_l)`.
pub fn weighted_kl(teacher: &State, student_logits: &State, c: f64, r: f64) -> WeightedKl {
    let q = softmax_rows(student_logits);
    let weights = adaptive_weights(teacher, &q, c, r);
    let (loss, cotangent) =
        weighted_divergence(teacher, student_logits, &weights, Divergence::Forward);
    WeightedKl {
        loss,
        cotangent,
        weights,
    }
}

/// Log-weight network `a(s)` or `a(s, t)`: one tanh hidden layer of width
/// [`WeightNet::HIDDEN`], zero-initialized output so the weight `e^a` starts at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNet {
    mode: LearnableWeight,
    params: Vec<f64>,
}

impl WeightNet {
    pub const HIDDEN: usize = 16;

    pub fn init(mode: LearnableWeight, seed: u64) -> Result<Self> {
        let n_in = Self::inputs(mode)?;
        let h = Self::HIDDEN;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (n_in as f64).sqrt();
        let mut params: Vec<f64> = (0..h * n_in + h)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        params.extend(std::iter::repeat_n(0.0, h + 1));
        Ok(Self { mode, params })
    }

    pub fn from_params(mode: LearnableWeight, params: Vec<f64>) -> Result<Self> {
        let n_in = Self::inputs(mode)?;
        let h = Self::HIDDEN;
        if params.len() != h * n_in + 2 * h + 1 {
            return Err(Error::Shape("weight-net parameter count mismatch".into()));
        }
        Ok(Self { mode, params })
    }

    fn inputs(mode: LearnableWeight) -> Result<usize> {
        match mode {
            LearnableWeight::OfS => Ok(1),
            LearnableWeight::OfSt => Ok(2),
            LearnableWeight::None => domain("no learnable weight configured"),
        }
    }

    pub fn mode(&self) -> LearnableWeight {
        self.mode
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn input(&self, s: f64, t: f64) -> Vec<f64> {
        match self.mode {
            LearnableWeight::OfSt => vec![s, t],
            _ => vec![s],
        }
    }

    /// Log-weight and its gradient in the parameters.
    pub fn log_weight_grad(&self, s: f64, t: f64) -> (f64, Vec<f64>) {
        let inp = self.input(s, t);
        let (n_in, h) = (inp.len(), Self::HIDDEN);
        let (w1, rest) = self.params.split_at(h * n_in);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);
        let hidden: Vec<f64> = (0..h)
            .map(|j| (b1[j] + (0..n_in).map(|i| w1[j * n_in + i] * inp[i]).sum::<f64>()).tanh())
            .collect();
        let a = b2[0] + hidden.iter().zip(w2).map(|(u, v)| u * v).sum::<f64>();
        let mut g = vec![0.0; self.params.len()];
        for j in 0..h {
            let gh = w2[j] * (1.0 - hidden[j] * hidden[j]);
            for i in 0..n_in {
                g[j * n_in + i] = gh * inp[i];
            }
            g[h * n_in + j] = gh;
            g[h * n_in + h + j] = hidden[j];
        }
        g[h * n_in + 2 * h] = 1.0;
        (a, g)
    }

    pub fn log_weight(&self, s: f64, t: f64) -> f64 {
        self.log_weight_grad(s, t).0
    }

    /// Positive weight `e^a`.
    pub fn weight(&self, s: f64, t: f64) -> f64 {
        self.log_weight(s, t).exp()
    }

    /// Objective `e^a L - a` for a detached base loss `L`, and its gradient
    /// in the weight-net parameters.
    pub fn objective_grad(&self, s: f64, t: f64, base_loss: f64) -> (f64, Vec<f64>) {
        let (a, mut g) = self.log_weight_grad(s, t);
        let ea = a.exp();
        let scale = ea * base_loss - 1.0;
        g.iter_mut().for_each(|v| *v *= scale);
        (ea * base_loss - a, g)
    }
}

/// Combine a diagonal and a consistency gradient, giving the diagonal
/// priority: a conflicting consistency component along `g_diag` is removed.
pub fn gradient_surgery(g_diag: &[f64], g_cons: &[f64]) -> Result<Vec<f64>> {
    if g_diag.len() != g_cons.len() {
        return Err(Error::Shape("gradients must have equal length".into()));
    }
    let nd: f64 = g_diag.iter().map(|v| v * v).sum();
    if nd == 0.0 {
        return Ok(g_cons.to_vec());
    }
    let dot: f64 = g_diag.iter().zip(g_cons).map(|(a, b)| a * b).sum();
    let proj = if dot < 0.0 { dot / nd } else { 0.0 };
    Ok(g_diag
        .iter()
        .zip(g_cons)
        .map(|(d, c)| d + c - proj * d)
        .collect())
}

fn sum_chunks(parts: Vec<(f64, Vec<f64>)>, n: usize) -> GradBundle {
    let mut out = GradBundle::zeros(n);
    for (loss, g) in parts {
        out.loss += loss;
        for (a, b) in out.param_grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    out
}

/// Adaptive-weighted cross-entropy of `psi_{t,t}(I_t)` against the clean
/// tokens, averaged over batch and positions. `r = 0` gives plain CE.
pub fn diagonal_loss(
    model: &DenoiserModel,
    batch: &[InterpolantSample],
    c: f64,
    r: f64,
) -> Result<GradBundle> {
    diagonal_loss_impl(model, batch, |teacher, q| {
        adaptive_weights(teacher, q, c, r)
    })
}

/// Diagonal loss with caller-supplied per-sample, per-position weights.
pub fn diagonal_loss_fixed(
    model: &DenoiserModel,
    batch: &[InterpolantSample],
    weights: &[Vec<f64>],
) -> Result<GradBundle> {
    if weights.len() != batch.len() {
        return Err(Error::Shape("one weight vector per sample".into()));
    }
    let norm = 1.0 / (batch.len() * model.arch().seq_len) as f64;
    let mut out = GradBundle::zeros(model.num_params());
    for (smp, w) in batch.iter().zip(weights) {
        out.add_scaled(&diagonal_sample(model, smp, |_, _| w.clone(), norm)?, 1.0);
    }
    Ok(out)
}

/// Detached weights the diagonal loss would use for each sample.
pub fn diagonal_weights(
    model: &DenoiserModel,
    batch: &[InterpolantSample],
    c: f64,
    r: f64,
) -> Result<Vec<Vec<f64>>> {
    batch
        .iter()
        .map(|smp| {
            let q = model.probs(&smp.x, smp.t, smp.t, smp.target.context.as_deref())?;
            let p = one_hot_rows(&smp.target.tokens, model.arch().vocab);
            Ok(adaptive_weights(&p, &q, c, r))
        })
        .collect()
}

fn diagonal_sample<F: Fn(&State, &State) -> Vec<f64>>(
    model: &DenoiserModel,
    smp: &InterpolantSample,
    weigh: F,
    norm: f64,
) -> Result<GradBundle> {
    let ctx = smp.target.context.as_deref();
    let tape = model.forward_tape(&smp.x, smp.t, smp.t, ctx)?;
    let p = one_hot_rows(&smp.target.tokens, model.arch().vocab);
    let w = weigh(&p, &softmax_rows(tape.logits()));
    let (loss, mut cot) = weighted_divergence(&p, tape.logits(), &w, Divergence::Forward);
    cot.mapv_inplace(|v| v * norm);
    let mut grad = vec![0.0; model.num_params()];
    model.backward_into(&tape, &cot, &mut grad, false)?;
    Ok(GradBundle {
        loss: loss * norm,
        param_grad: grad,
    })
}

fn diagonal_loss_impl<F: Fn(&State, &State) -> Vec<f64> + Sync>(
    model: &DenoiserModel,
    batch: &[InterpolantSample],
    weigh: F,
) -> Result<GradBundle> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    let n = model.num_params();
    let norm = 1.0 / (batch.len() * model.arch().seq_len) as f64;
    let parts = batch
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<(f64, Vec<f64>)> {
            let mut acc = GradBundle::zeros(n);
            for smp in chunk {
                acc.add_scaled(&diagonal_sample(model, smp, &weigh, norm)?, 1.0);
            }
            Ok((acc.loss, acc.param_grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = sum_chunks(parts, n);
    if !out.loss.is_finite() {
        return Err(Error::NonFinite("diagonal loss".into()));
    }
    Ok(out)
}

/// One off-diagonal training point: a state `x = I_s` and times `s <= u <= t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencySample {
    pub x: State,
    pub s: f64,
    pub u: f64,
    pub t: f64,
    pub ctx: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyOutput {
    /// Model gradient of the (learnably) weighted consistency objective.
    pub grad: GradBundle,
    /// Gradient for the weight net, when one is used.
    pub weight_grad: Option<Vec<f64>>,
    pub invalid: usize,
    pub clamped: usize,
    pub mean_delta_norm: f64,
}

/// Loss of the student `psi_{s,t}(x)` against a fixed teacher and fixed
/// weights, with its parameter gradient.
pub fn student_loss(
    model: &DenoiserModel,
    smp: &ConsistencySample,
    teacher: &State,
    weights: &[f64],
    divergence: Divergence,
) -> Result<GradBundle> {
    let tape = model.forward_tape(&smp.x, smp.s, smp.t, smp.ctx.as_deref())?;
    let (loss, cot) = weighted_divergence(teacher, tape.logits(), weights, divergence);
    let mut grad = vec![0.0; model.num_params()];
    model.backward_into(&tape, &cot, &mut grad, false)?;
    Ok(GradBundle {
        loss,
        param_grad: grad,
    })
}

/// Batch consistency objective. Invalid teachers are skipped and counted.
pub fn consistency_loss(
    model: &DenoiserModel,
    cfg: &LossConfig,
    batch: &[ConsistencySample],
    weight_net: Option<&WeightNet>,
) -> Result<ConsistencyOutput> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    let n = model.num_params();
    let n_w = weight_net.map_or(0, |w| w.params().len());
    let norm = 1.0 / (batch.len() * model.arch().seq_len) as f64;
    type Part = (f64, Vec<f64>, Vec<f64>, usize, usize, f64);
    let parts = batch
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<Part> {
            let mut grad = vec![0.0; n];
            let mut wgrad = vec![0.0; n_w];
            let (mut loss, mut invalid, mut clamped, mut dsum) = (0.0, 0, 0, 0.0);
            for smp in chunk {
                let ctx = smp.ctx.as_deref();
                let teach = match teacher(model, cfg.kind, &smp.x, smp.s, smp.u, smp.t, ctx) {
                    Ok(t) => t,
                    Err(Error::TeacherInvalid(_)) => {
                        invalid += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                clamped += teach.diagnostics.clamped as usize;
                dsum += teach.diagnostics.delta_norm;
                let tape = model.forward_tape(&smp.x, smp.s, smp.t, ctx)?;
                let q = softmax_rows(tape.logits());
                let weights = adaptive_weights(&teach.probs, &q, cfg.adaptive_c, cfg.adaptive_r);
                let (base, mut cot) =
                    weighted_divergence(&teach.probs, tape.logits(), &weights, cfg.divergence);
                let mut scale = norm;
                match weight_net {
                    Some(net) => {
                        let (obj, g) = net.objective_grad(smp.s, smp.t, base);
                        scale *= net.weight(smp.s, smp.t);
                        loss += obj * norm;
                        for (a, b) in wgrad.iter_mut().zip(&g) {
                            *a += b * norm;
                        }
                    }
                    None => loss += base * norm,
                }
                cot.mapv_inplace(|v| v * scale);
                model.backward_into(&tape, &cot, &mut grad, false)?;
            }
            Ok((loss, grad, wgrad, invalid, clamped, dsum))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = GradBundle::zeros(n);
    let mut wgrad = vec![0.0; n_w];
    let (mut invalid, mut clamped, mut dsum) = (0, 0, 0.0);
    for (loss, g, wg, inv, cl, ds) in parts {
        out.loss += loss;
        for (a, b) in out.param_grad.iter_mut().zip(&g) {
            *a += b;
        }
        for (a, b) in wgrad.iter_mut().zip(&wg) {
            *a += b;
        }
        invalid += inv;
        clamped += cl;
        dsum += ds;
    }
    let valid = batch.len() - invalid;
    Ok(ConsistencyOutput {
        grad: out,
        weight_grad: weight_net.map(|_| wgrad),
        invalid,
        clamped,
        mean_delta_norm: if valid > 0 { dsum / valid as f64 } else { 0.0 },
    })
}

/// Row sums of a probability matrix; used by tests and diagnostics.
pub fn row_sums(p: &State) -> Vec<f64> {
    p.sum_axis(Axis(1)).to_vec()
}
