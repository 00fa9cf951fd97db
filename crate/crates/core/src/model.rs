//! A small MLP mean denoiser `psi_{s,t}(x) = Softmax(z_{s,t}(x))`.
//!
//! Each position is processed by the same tanh MLP. Its input is
//!
//! ```text
//! x^l (K) | mean_l x^l (K) | beta(s), beta(t) (2) | onehot(l) (L) | context (2K + 1, conditional only)
//! ```
//!
//! where the context block is the one-hot of the last context token, the
//! token histogram of the whole context (normalized), and a has-context flag.
//! With input width `D0`, hidden width `H`, `n` hidden layers and vocabulary
//! `K`, the parameter count is
//!
//! ```text
//! D0*H + H + (n - 1)(H^2 + H) + H*K + K
//! ```
//!
//! Forward-mode derivatives (time and input directions) use dual numbers;
//! parameter gradients use a hand-written reverse pass.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::schedule::Schedule;
use crate::simplex::softmax_rows;
use crate::State;

/// Anything that produces mean-denoiser logits plus the derivatives the
/// logit-space teachers need.
pub trait Denoiser: Sync {
    fn seq_len(&self) -> usize;
    fn vocab(&self) -> usize;
    fn schedule(&self) -> &Schedule;

    /// Longest context accepted, if bounded.
    fn max_context(&self) -> Option<usize> {
        None
    }

    /// `z_{s,t}(x)`, one row of logits per position.
    fn logits(&self, x: &State, s: f64, t: f64, ctx: Option<&[usize]>) -> Result<State>;

    /// `d/dt z_{s,t}(x)`.
    fn dz_dt(&self, x: &State, s: f64, t: f64, ctx: Option<&[usize]>) -> Result<State>;

    /// `d/ds z_{s,t}(x) + J_x z_{s,t}(x) v`.
    fn total_derivative_s(
        &self,
        x: &State,
        s: f64,
        t: f64,
        v: &State,
        ctx: Option<&[usize]>,
    ) -> Result<State>;

    /// `psi_{s,t}(x)`.
    fn probs(&self, x: &State, s: f64, t: f64, ctx: Option<&[usize]>) -> Result<State> {
        Ok(softmax_rows(&self.logits(x, s, t, ctx)?))
    }

    fn logits_and_dz_dt(
        &self,
        x: &State,
        s: f64,
        t: f64,
        ctx: Option<&[usize]>,
    ) -> Result<(State, State)> {
        Ok((self.logits(x, s, t, ctx)?, self.dz_dt(x, s, t, ctx)?))
    }

    fn logits_and_total_derivative_s(
        &self,
        x: &State,
        s: f64,
        t: f64,
        v: &State,
        ctx: Option<&[usize]>,
    ) -> Result<(State, State)> {
        Ok((
            self.logits(x, s, t, ctx)?,
            self.total_derivative_s(x, s, t, v, ctx)?,
        ))
    }
}

/// Scalar types the network can be evaluated over.
pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> + AddAssign
{
    fn cst(v: f64) -> Self;
    fn tanh(self) -> Self;
    fn scale(self, c: f64) -> Self;
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
}

/// A value with one forward-mode tangent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Self { v, d }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.v, -self.d)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Self) {
        self.v += o.v;
        self.d += o.d;
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Self::new(v, 0.0)
    }
    fn tanh(self) -> Self {
        let y = self.v.tanh();
        Self::new(y, self.d * (1.0 - y * y))
    }
    fn scale(self, c: f64) -> Self {
        Self::new(self.v * c, self.d * c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub hidden_width: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    pub vocab: usize,
    #[serde(default)]
    pub conditional: bool,
    /// Longest accepted context; 0 means unbounded.
    #[serde(default)]
    pub max_context: usize,
}

impl Arch {
    pub fn new(hidden_width: usize, n_layers: usize, seq_len: usize, vocab: usize) -> Self {
        Self {
            hidden_width,
            n_layers,
            seq_len,
            vocab,
            conditional: false,
            max_context: 0,
        }
    }

    pub fn conditional(mut self, max_context: usize) -> Self {
        self.conditional = true;
        self.max_context = max_context;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.n_layers == 0 || self.seq_len == 0 {
            return domain("hidden_width, n_layers and seq_len must be positive");
        }
        if self.vocab < 2 {
            return domain("vocab must be at least 2");
        }
        Ok(())
    }

    fn context_dim(&self) -> usize {
        if self.conditional {
            2 * self.vocab + 1
        } else {
            0
        }
    }

    pub fn input_dim(&self) -> usize {
        2 * self.vocab + 2 + self.seq_len + self.context_dim()
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let h = self.hidden_width;
        let mut dims = vec![(self.input_dim(), h)];
        dims.extend(std::iter::repeat_n((h, h), self.n_layers - 1));
        dims.push((h, self.vocab));
        dims
    }

    pub fn param_count(&self) -> usize {
        let (d0, h, k, n) = (
            self.input_dim(),
            self.hidden_width,
            self.vocab,
            self.n_layers,
        );
        d0 * h + h + (n - 1) * (h * h + h) + h * k + k
    }
}

/// Parameter gradient of a scalar objective.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub loss: f64,
    pub param_grad: Vec<f64>,
}

impl GradBundle {
    pub fn zeros(n: usize) -> Self {
        Self {
            loss: 0.0,
            param_grad: vec![0.0; n],
        }
    }

    pub fn add_scaled(&mut self, other: &GradBundle, c: f64) {
        self.loss += c * other.loss;
        for (a, b) in self.param_grad.iter_mut().zip(&other.param_grad) {
            *a += c * b;
        }
    }
}

/// Gradients with respect to the network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrad {
    pub x: State,
    pub s: f64,
    pub t: f64,
}

/// Activations saved by [`DenoiserModel::forward_tape`].
#[derive(Debug, Clone)]
pub struct Tape {
    s: f64,
    t: f64,
    /// Per position: layer inputs followed by each hidden activation.
    acts: Vec<Vec<f64>>,
    logits: State,
}

impl Tape {
    pub fn logits(&self) -> &State {
        &self.logits
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: Arch,
    schedule: Schedule,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

fn layer_offsets(arch: &Arch) -> Vec<usize> {
    let mut offsets = Vec::new();
    let mut at = 0;
    for (i, o) in arch.layers() {
        offsets.push(at);
        at += i * o + o;
    }
    offsets.push(at);
    offsets
}

impl DenoiserModel {
    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(arch: Arch, schedule: Schedule, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.param_count());
        for (fan_in, fan_out) in arch.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Self::from_params(arch, schedule, params)
    }

    pub fn from_params(arch: Arch, schedule: Schedule, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        let offsets = layer_offsets(&arch);
        Ok(Self {
            arch,
            schedule,
            params,
            offsets,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Range of the weight matrix (row-major, `fan_out x fan_in`) and bias of layer `i`.
    pub fn layer_range(&self, i: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (fan_in, fan_out) = self.arch.layers()[i];
        let w0 = self.offsets[i];
        let b0 = w0 + fan_in * fan_out;
        (w0..b0, b0..b0 + fan_out)
    }

    fn check_inputs(&self, x: &State, s: f64, t: f64) -> Result<()> {
        if x.dim() != (self.arch.seq_len, self.arch.vocab) {
            return Err(Error::Shape(format!(
                "model expects {}x{} input, got {:?}",
                self.arch.seq_len,
                self.arch.vocab,
                x.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }
        if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) || s > t + 1e-12 {
            return domain(format!("model needs 0 <= s <= t <= 1, got s={s}, t={t}"));
        }
        Ok(())
    }

    /// Context features: one-hot of the last token, normalized histogram, flag.
    fn context_features(&self, ctx: Option<&[usize]>) -> Result<Vec<f64>> {
        let k = self.arch.vocab;
        if !self.arch.conditional {
            return Ok(Vec::new());
        }
        let mut f = vec![0.0; 2 * k + 1];
        if let Some(c) = ctx.filter(|c| !c.is_empty()) {
            if self.arch.max_context > 0 && c.len() > self.arch.max_context {
                return domain(format!(
                    "context of {} tokens exceeds the model's maximum {}",
                    c.len(),
                    self.arch.max_context
                ));
            }
            if let Some(&bad) = c.iter().find(|&&tok| tok >= k) {
                return domain(format!("context token {bad} out of range"));
            }
            f[c[c.len() - 1]] = 1.0;
            let w = 1.0 / c.len() as f64;
            for &tok in c {
                f[k + tok] += w;
            }
            f[2 * k] = 1.0;
        }
        Ok(f)
    }

    /// Per-position input rows, built from `x`, `beta(s)`, `beta(t)`.
    fn features<T: Real>(&self, x: &[T], bs: T, bt: T, ctx: &[f64]) -> Vec<Vec<T>> {
        let (len, k) = (self.arch.seq_len, self.arch.vocab);
        let inv = 1.0 / len as f64;
        let mut mean = vec![T::cst(0.0); k];
        for l in 0..len {
            for j in 0..k {
                mean[j] += x[l * k + j];
            }
        }
        for m in mean.iter_mut() {
            *m = m.scale(inv);
        }
        (0..len)
            .map(|l| {
                let mut f = Vec::with_capacity(self.arch.input_dim());
                f.extend_from_slice(&x[l * k..(l + 1) * k]);
                f.extend_from_slice(&mean);
                f.push(bs);
                f.push(bt);
                f.extend((0..len).map(|p| T::cst(if p == l { 1.0 } else { 0.0 })));
                f.extend(ctx.iter().map(|&c| T::cst(c)));
                f
            })
            .collect()
    }

    fn mlp<T: Real>(&self, input: &[T]) -> Vec<T> {
        let layers = self.arch.layers();
        let last = layers.len() - 1;
        let mut h = input.to_vec();
        for (i, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let (wr, br) = self.layer_range(i);
            let w = &self.params[wr];
            let b = &self.params[br];
            let mut out = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = T::cst(b[o]);
                for (hv, &wv) in h.iter().zip(row) {
                    acc += hv.scale(wv);
                }
                out.push(if i == last { acc } else { acc.tanh() });
            }
            h = out;
        }
        h
    }

    fn eval_generic<T: Real>(&self, x: &[T], bs: T, bt: T, ctx: &[f64]) -> Vec<T> {
        self.features(x, bs, bt, ctx)
            .iter()
            .flat_map(|f| self.mlp(f))
            .collect()
    }

    /// `z_{s,t}(x)`.
    pub fn forward(&self, x: &State, s: f64, t: f64, ctx: Option<&[usize]>) -> Result<State> {
        self.check_inputs(x, s, t)?;
        let ctxf = self.context_features(ctx)?;
        let xs: Vec<f64> = x.iter().copied().collect();
        let out = self.eval_generic(&xs, self.schedule.beta(s), self.schedule.beta(t), &ctxf);
        self.finish(out)
    }

    /// Diagonal query `z_{t,t}(x)`.
    pub fn forward_diag(&self, x: &State, t: f64, ctx: Option<&[usize]>) -> Result<State> {
        self.forward(x, t, t, ctx)
    }

    fn finish(&self, out: Vec<f64>) -> Result<State> {
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model logits".into()));
        }
        Ok(Array2::from_shape_vec((self.arch.seq_len, self.arch.vocab), out).expect("shape"))
    }

    /// Forward pass along the tangent `(x_dot, s_dot, t_dot)`; returns
    /// logits and their directional derivative.
    pub fn jvp(
        &self,
        x: &State,
        s: f64,
        t: f64,
        x_dot: Option<&State>,
        s_dot: f64,
        t_dot: f64,
        ctx: Option<&[usize]>,
    ) -> Result<(State, State)> {
        self.check_inputs(x, s, t)?;
        let ctxf = self.context_features(ctx)?;
        let xs: Vec<Dual> = match x_dot {
            Some(v) => {
                if v.dim() != x.dim() {
                    return Err(Error::Shape("tangent must match the state".into()));
                }
                x.iter()
                    .zip(v.iter())
                    .map(|(&a, &d)| Dual::new(a, d))
                    .collect()
            }
            None => x.iter().map(|&a| Dual::cst(a)).collect(),
        };
        let bs = Dual::new(self.schedule.beta(s), self.schedule.beta_dot(s) * s_dot);
        let bt = Dual::new(self.schedule.beta(t), self.schedule.beta_dot(t) * t_dot);
        let out = self.eval_generic(&xs, bs, bt, &ctxf);
        let (v, d): (Vec<f64>, Vec<f64>) = out.into_iter().map(|z| (z.v, z.d)).unzip();
        let shape = (self.arch.seq_len, self.arch.vocab);
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model tangent".into()));
        }
        Ok((
            self.finish(v)?,
            Array2::from_shape_vec(shape, d).expect("shape"),
        ))
    }

    /// Forward pass that records activations for [`DenoiserModel::backward`].
    pub fn forward_tape(&self, x: &State, s: f64, t: f64, ctx: Option<&[usize]>) -> Result<Tape> {
        self.check_inputs(x, s, t)?;
        let ctxf = self.context_features(ctx)?;
        let xs: Vec<f64> = x.iter().copied().collect();
        let feats = self.features(&xs, self.schedule.beta(s), self.schedule.beta(t), &ctxf);
        let layers = self.arch.layers();
        let last = layers.len() - 1;
        let mut acts = Vec::with_capacity(feats.len());
        let mut logits = Vec::with_capacity(feats.len() * self.arch.vocab);
        for f in feats {
            let mut buf = f;
            let mut start = 0;
            for (i, &(fan_in, fan_out)) in layers.iter().enumerate() {
                let (wr, br) = self.layer_range(i);
                let w = &self.params[wr];
                let b = &self.params[br];
                let end = start + fan_in;
                for o in 0..fan_out {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let acc = b[o] + dot(&buf[start..end], row);
                    if i == last {
                        logits.push(acc);
                    } else {
                        buf.push(acc.tanh());
                    }
                }
                start = end;
            }
            acts.push(buf);
        }
        Ok(Tape {
            s,
            t,
            acts,
            logits: self.finish(logits)?,
        })
    }

    /// Parameter gradient of `<upstream, z>`, accumulated into `grad`.
    /// Returns input gradients when `want_inputs` is set.
    pub fn backward_into(
        &self,
        tape: &Tape,
        upstream: &State,
        grad: &mut [f64],
        want_inputs: bool,
    ) -> Result<Option<InputGrad>> {
        let (len, k) = (self.arch.seq_len, self.arch.vocab);
        if upstream.dim() != (len, k) {
            return Err(Error::Shape("upstream must match the logits".into()));
        }
        if grad.len() != self.params.len() {
            return Err(Error::Shape(
                "gradient buffer must match the parameters".into(),
            ));
        }
        if upstream.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("upstream cotangent".into()));
        }
        let layers = self.arch.layers();
        let d0 = self.arch.input_dim();
        let mut dfeat = vec![vec![0.0; d0]; len];
        for l in 0..len {
            let act = &tape.acts[l];
            // start offset of each layer's input inside `act`
            let mut starts = Vec::with_capacity(layers.len());
            let mut at = 0;
            for &(fan_in, _) in &layers {
                starts.push(at);
                at += fan_in;
            }
            let mut g: Vec<f64> = upstream.row(l).to_vec();
            for i in (0..layers.len()).rev() {
                let (fan_in, fan_out) = layers[i];
                let (wr, br) = self.layer_range(i);
                let input = &act[starts[i]..starts[i] + fan_in];
                {
                    let gw = &mut grad[wr.clone()];
                    for o in 0..fan_out {
                        let go = g[o];
                        if go != 0.0 {
                            let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                            for (r, &v) in row.iter_mut().zip(input) {
                                *r += go * v;
                            }
                        }
                    }
                }
                for (gb, &go) in grad[br].iter_mut().zip(&g) {
                    *gb += go;
                }
                if i == 0 && !want_inputs {
                    break;
                }
                let w = &self.params[wr];
                let mut gin = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let go = g[o];
                    if go != 0.0 {
                        for (gi, &wv) in gin.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                            *gi += go * wv;
                        }
                    }
                }
                if i > 0 {
                    // input of layer i is tanh output of layer i-1
                    for (gi, &a) in gin.iter_mut().zip(input) {
                        *gi *= 1.0 - a * a;
                    }
                    g = gin;
                } else {
                    dfeat[l] = gin;
                }
            }
        }
        if !want_inputs {
            return Ok(None);
        }
        let inv = 1.0 / len as f64;
        let mut dx = Array2::<f64>::zeros((len, k));
        let (mut dbs, mut dbt) = (0.0, 0.0);
        for l in 0..len {
            for j in 0..k {
                dx[[l, j]] += dfeat[l][j];
                let gm = dfeat[l][k + j] * inv;
                for p in 0..len {
                    dx[[p, j]] += gm;
                }
            }
            dbs += dfeat[l][2 * k];
            dbt += dfeat[l][2 * k + 1];
        }
        Ok(Some(InputGrad {
            x: dx,
            s: dbs * self.schedule.beta_dot(tape.s),
            t: dbt * self.schedule.beta_dot(tape.t),
        }))
    }

    /// Parameter gradient of `<upstream, z_{s,t}(x)>`.
    pub fn backward(
        &self,
        upstream: &State,
        x: &State,
        s: f64,
        t: f64,
        ctx: Option<&[usize]>,
    ) -> Result<GradBundle> {
        let tape = self.forward_tape(x, s, t, ctx)?;
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(&tape, upstream, &mut grad, false)?;
        let loss = (upstream * tape.logits()).sum();
        Ok(GradBundle {
            loss,
            param_grad: grad,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize without reassociation
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for j in 0..4 {
            acc[j] += a[4 * c + j] * b[4 * c + j];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Denoiser for DenoiserModel {
    fn seq_len(&self) -> usize {
        self.arch.seq_len
    }

    fn vocab(&self) -> usize {
        self.arch.vocab
    }

    fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn max_context(&self) -> Option<usize> {
        (self.arch.max_context > 0).then_some(self.arch.max_context)
    }

    fn logits(&self, x: &State, s: f64, t: f64, ctx: Option<&[usize]>) -> Result<State> {
        self.forward(x, s, t, ctx)
    }

    fn dz_dt(&self, x: &State, s: f64, t: f64, ctx: Option<&[usize]>) -> Result<State> {
        Ok(self.jvp(x, s, t, None, 0.0, 1.0, ctx)?.1)
    }

    fn total_derivative_s(
        &self,
        x: &State,
        s: f64,
        t: f64,
        v: &State,
        ctx: Option<&[usize]>,
    ) -> Result<State> {
        Ok(self.jvp(x, s, t, Some(v), 1.0, 0.0, ctx)?.1)
    }

    fn logits_and_dz_dt(
        &self,
        x: &State,
        s: f64,
        t: f64,
        ctx: Option<&[usize]>,
    ) -> Result<(State, State)> {
        self.jvp(x, s, t, None, 0.0, 1.0, ctx)
    }

    fn logits_and_total_derivative_s(
        &self,
        x: &State,
        s: f64,
        t: f64,
        v: &State,
        ctx: Option<&[usize]>,
    ) -> Result<(State, State)> {
        self.jvp(x, s, t, Some(v), 1.0, 0.0, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::cross_entropy_logits;
    use rand_distr::{Distribution, StandardNormal};

    fn model(seed: u64) -> DenoiserModel {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let sched = Schedule::blended_argmax(0.9, 4, 1.0, 5000, 64, &mut rng).unwrap();
        DenoiserModel::init(Arch::new(16, 2, 3, 4), sched, seed).unwrap()
    }

    fn rand_state(rng: &mut ChaCha8Rng, l: usize, k: usize) -> State {
        Array2::from_shape_simple_fn((l, k), || StandardNormal.sample(rng))
    }

    #[test]
    fn param_count_formula() {
        let arch = Arch::new(64, 2, 1, 8);
        // D0 = 8 + 8 + 2 + 1 = 19
        assert_eq!(arch.param_count(), 19 * 64 + 64 + 64 * 64 + 64 + 64 * 8 + 8);
        assert_eq!(arch.param_count(), 5960);
        let m = DenoiserModel::init(arch, Schedule::linear(), 0).unwrap();
        assert_eq!(m.num_params(), 5960);
        assert!(DenoiserModel::init(Arch::new(0, 2, 1, 8), Schedule::linear(), 0).is_err());
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = model(3);
        let b = model(3);
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), model(4).params());
        let z = a.forward(&Array2::zeros((3, 4)), 0.2, 0.7, None).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
        let zd = a.forward_diag(&Array2::zeros((3, 4)), 0.3, None).unwrap();
        assert_eq!(
            zd,
            a.forward(&Array2::zeros((3, 4)), 0.3, 0.3, None).unwrap()
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = model(0);
        assert!(m.forward(&Array2::zeros((2, 4)), 0.1, 0.2, None).is_err());
        assert!(m.forward(&Array2::zeros((3, 4)), 0.5, 0.2, None).is_err());
        let mut x = Array2::zeros((3, 4));
        x[[0, 0]] = f64::NAN;
        assert!(m.forward(&x, 0.1, 0.2, None).is_err());
    }

    #[test]
    fn dz_dt_matches_central_differences() {
        let lin = DenoiserModel::init(Arch::new(16, 2, 3, 4), Schedule::linear(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // the tabulated spline has jumps in beta'' at its nodes, which limits
        // central differences to O(h); a smaller step keeps them accurate
        for (m, h) in [(lin, 1e-3), (model(1), 1e-6)] {
            for _ in 0..10 {
                let x = rand_state(&mut rng, 3, 4);
                let s: f64 = rng.random_range(0.0..0.5);
                let t: f64 = rng.random_range(s + 0.01..0.99);
                let d = m.dz_dt(&x, s, t, None).unwrap();
                let fd = (m.forward(&x, s, t + h, None).unwrap()
                    - m.forward(&x, s, t - h, None).unwrap())
                    / (2.0 * h);
                for (a, b) in d.iter().zip(fd.iter()) {
                    assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn zeroed_time_weights_give_zero_time_derivative() {
        let mut m = model(2);
        let (wr, _) = m.layer_range(0);
        let d0 = m.arch().input_dim();
        let k = m.arch().vocab;
        let w = &mut m.params_mut()[wr];
        for row in w.chunks_mut(d0) {
            row[2 * k] = 0.0;
            row[2 * k + 1] = 0.0;
        }
        let x = Array2::from_elem((3, 4), 0.3);
        assert!(m
            .dz_dt(&x, 0.2, 0.6, None)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
        let zero = Array2::zeros((3, 4));
        assert!(m
            .total_derivative_s(&x, 0.2, 0.6, &zero, None)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn scaling_output_layer_scales_time_derivative() {
        let m = model(7);
        let mut m2 = m.clone();
        let last = m.arch().layers().len() - 1;
        let (wr, br) = m.layer_range(last);
        for v in &mut m2.params_mut()[wr] {
            *v *= 2.0;
        }
        for v in &mut m2.params_mut()[br] {
            *v *= 2.0;
        }
        let x = Array2::from_elem((3, 4), -0.2);
        let a = m.dz_dt(&x, 0.1, 0.5, None).unwrap();
        let b = m2.dz_dt(&x, 0.1, 0.5, None).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((2.0 * u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn total_derivative_matches_curve_differences_and_is_additive() {
        let m = model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_state(&mut rng, 3, 4);
        let v1 = rand_state(&mut rng, 3, 4);
        let v2 = rand_state(&mut rng, 3, 4);
        let (s, t) = (0.3, 0.8);
        let d = m.total_derivative_s(&x, s, t, &v1, None).unwrap();
        let h = 1e-4;
        let fd = (m.forward(&(&x + &(h * &v1)), s + h, t, None).unwrap()
            - m.forward(&(&x - &(h * &v1)), s - h, t, None).unwrap())
            / (2.0 * h);
        for (a, b) in d.iter().zip(fd.iter()) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
        }
        let zero = Array2::zeros((3, 4));
        let ds = m.total_derivative_s(&x, s, t, &zero, None).unwrap();
        let d2 = m.total_derivative_s(&x, s, t, &v2, None).unwrap();
        let d12 = m.total_derivative_s(&x, s, t, &(&v1 + &v2), None).unwrap();
        let expect = &d + &d2 - &ds;
        for (a, b) in d12.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_gradient_matches_finite_differences() {
        let m = model(11);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_state(&mut rng, 3, 4);
        let targets = [1usize, 3, 0];
        let (s, t) = (0.25, 0.6);
        let loss = |m: &DenoiserModel| -> f64 {
            let z = m.forward(&x, s, t, None).unwrap();
            (0..3)
                .map(|l| cross_entropy_logits(targets[l], z.row(l).as_slice().unwrap()))
                .sum()
        };
        let z = m.forward(&x, s, t, None).unwrap();
        let p = softmax_rows(&z);
        let mut up = p.clone();
        for (l, &k) in targets.iter().enumerate() {
            up[[l, k]] -= 1.0;
        }
        let g = m.backward(&up, &x, s, t, None).unwrap().param_grad;
        let h = 1e-5;
        for _ in 0..20 {
            let i = rng.random_range(0..m.num_params());
            let mut mp = m.clone();
            mp.params_mut()[i] += h;
            let mut mm = m.clone();
            mm.params_mut()[i] -= h;
            let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = model(0);
        let x = Array2::from_elem((3, 4), 0.1);
        let g = m
            .backward(&Array2::zeros((3, 4)), &x, 0.1, 0.4, None)
            .unwrap();
        assert!(g.param_grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_and_reverse_modes_agree() {
        let m = model(12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let x = rand_state(&mut rng, 3, 4);
            let v = rand_state(&mut rng, 3, 4);
            let cot = rand_state(&mut rng, 3, 4);
            let (sd, td): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let (s, t) = (0.2, 0.7);
            let (_, tangent) = m.jvp(&x, s, t, Some(&v), sd, td, None).unwrap();
            let lhs = (&cot * &tangent).sum();
            let tape = m.forward_tape(&x, s, t, None).unwrap();
            let mut grad = vec![0.0; m.num_params()];
            let gi = m
                .backward_into(&tape, &cot, &mut grad, true)
                .unwrap()
                .unwrap();
            let rhs = (&gi.x * &v).sum() + gi.s * sd + gi.t * td;
            assert!(
                (lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()),
                "{lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn tape_logits_match_forward() {
        let m = model(13);
        let x = Array2::from_elem((3, 4), 0.4);
        let a = m.forward(&x, 0.1, 0.3, None).unwrap();
        let b = m.forward_tape(&x, 0.1, 0.3, None).unwrap();
        for (u, v) in a.iter().zip(b.logits().iter()) {
            assert!((u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn conditional_model_uses_context() {
        let arch = Arch::new(8, 1, 2, 3).conditional(4);
        assert_eq!(arch.input_dim(), 3 + 3 + 2 + 2 + 7);
        let m = DenoiserModel::init(arch, Schedule::linear(), 1).unwrap();
        let x = Array2::from_elem((2, 3), 0.2);
        let a = m.forward(&x, 0.1, 0.5, Some(&[0, 1])).unwrap();
        let b = m.forward(&x, 0.1, 0.5, Some(&[2, 2])).unwrap();
        let c = m.forward(&x, 0.1, 0.5, None).unwrap();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(c, m.forward(&x, 0.1, 0.5, Some(&[])).unwrap());
        assert!(m.forward(&x, 0.1, 0.5, Some(&[0, 1, 2, 0, 1])).is_err());
        assert!(m.forward(&x, 0.1, 0.5, Some(&[5])).is_err());
    }
}
