//! Two-stage training: diagonal flow matching, then consistency
//! distillation from the diagonal checkpoint.

use std::collections::VecDeque;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, RngState};
use crate::config::Config;
use crate::data::Dataset;
use crate::error::{domain, Error, Result};
use crate::losses::{
    consistency_loss, diagonal_loss, gradient_surgery, ConsistencySample, LearnableWeight,
    LossKind, WeightNet,
};
use crate::model::{Denoiser, DenoiserModel};
use crate::optim::{Adam, AdamConfig};
use crate::oracle::InterpolantSample;
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Diagonal,
    Distill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffDiagSampling {
    Triple,
    Pair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    /// `None` uses triples for PSD and pairs otherwise.
    pub offdiag_sampling: Option<OffDiagSampling>,
    /// Train diagonal and consistency terms together from initialization.
    pub joint: bool,
    pub log_every: u64,
    /// Probe-TV interval when an exact truth exists; 0 disables.
    pub probe_every: u64,
    pub divergence_factor: f64,
    pub divergence_window: u64,
    pub invalid_window: u64,
    pub max_invalid_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Diagonal,
            batch_size: 64,
            steps: 20_000,
            lr: 3e-4,
            warmup_steps: 2500,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 0,
            offdiag_sampling: None,
            joint: false,
            log_every: 1000,
            probe_every: 0,
            divergence_factor: 10.0,
            divergence_window: 500,
            invalid_window: 100,
            max_invalid_rate: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return domain("train.lr must be positive");
        }
        if self.batch_size == 0 {
            return domain("train.batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return domain("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
            warmup: self.warmup_steps,
        }
    }
}

pub fn sample_times_diag<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random()
}

pub fn sample_times_pair<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let (a, b): (f64, f64) = (rng.random(), rng.random());
    (a.min(b), a.max(b))
}

pub fn sample_times_triple<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64, f64) {
    let mut v: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    v.sort_by(f64::total_cmp);
    (v[0], v[1], v[2])
}

/// Per-step record.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub diag_loss: f64,
    pub cons_loss: f64,
    pub invalid: usize,
    pub clamped: usize,
    /// `<combined, diagonal>` after surgery, when surgery ran.
    pub surgery_dot: Option<f64>,
}

pub struct Trainer {
    cfg: Config,
    dataset: Dataset,
    model: DenoiserModel,
    adam: Adam,
    weight_net: Option<(WeightNet, Adam)>,
    rng: ChaCha8Rng,
    step: u64,
    stage_label: String,
    loss_ema: Option<f64>,
    initial_loss: Option<f64>,
    above: u64,
    invalid_hist: VecDeque<(usize, usize)>,
}

impl Trainer {
    /// Fresh model for the diagonal stage (or joint training).
    pub fn new(cfg: Config, dataset: Dataset) -> Result<Self> {
        cfg.validate()?;
        let sched = cfg.schedule.build(dataset.vocab(), &cfg.noise)?;
        let arch = cfg.model.arch(dataset.seq_len(), dataset.vocab())?;
        let model = DenoiserModel::init(arch, sched, cfg.model.seed)?;
        let label = if cfg.train.stage == Stage::Distill || cfg.train.joint {
            format!("distill-{}", kind_name(cfg.loss.kind))
        } else {
            "diagonal".into()
        };
        Self::assemble(cfg, dataset, model, label)
    }

    /// Start distillation from a trained checkpoint; the optimizer restarts.
    pub fn distill_from(cfg: Config, dataset: Dataset, init: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if cfg.loss.kind == LossKind::Diag {
            return domain("distillation needs loss kind psd, lsd or esd");
        }
        let model = init.model()?;
        if model.arch().seq_len != dataset.seq_len() || model.arch().vocab != dataset.vocab() {
            return Err(Error::Shape(
                "checkpoint does not match the dataset shape".into(),
            ));
        }
        let mut cfg = cfg;
        cfg.train.stage = Stage::Distill;
        let label = format!("distill-{}", kind_name(cfg.loss.kind));
        Self::assemble(cfg, dataset, model, label)
    }

    fn assemble(
        cfg: Config,
        dataset: Dataset,
        model: DenoiserModel,
        stage_label: String,
    ) -> Result<Self> {
        if model.arch().conditional != dataset.is_conditional() {
            warn!("model conditioning does not match the dataset; contexts are ignored or absent");
        }
        let adam = Adam::new(cfg.train.adam(), model.num_params())?;
        let weight_net = match cfg.loss.learnable_weight {
            LearnableWeight::None => None,
            mode => {
                let net = WeightNet::init(mode, cfg.model.seed ^ 0x5eed)?;
                let opt = Adam::new(cfg.train.adam(), net.params().len())?;
                Some((net, opt))
            }
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.train.seed),
            cfg,
            dataset,
            model,
            adam,
            weight_net,
            step: 0,
            stage_label,
            loss_ema: None,
            initial_loss: None,
            above: 0,
            invalid_hist: VecDeque::new(),
        })
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn schedule(&self) -> &Schedule {
        self.model.schedule()
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn weight_net(&self) -> Option<&WeightNet> {
        self.weight_net.as_ref().map(|(n, _)| n)
    }

    fn distilling(&self) -> bool {
        self.cfg.train.stage == Stage::Distill || self.cfg.train.joint
    }

    fn draw(&mut self, t: f64) -> Result<InterpolantSample> {
        let target = self.dataset.sample(&mut self.rng);
        let x0 = self
            .cfg
            .noise
            .sample(self.dataset.seq_len(), self.dataset.vocab(), &mut self.rng);
        InterpolantSample::new(x0, target, t, self.model.schedule())
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<StepStats> {
        let bs = self.cfg.train.batch_size;
        let mut diag_batch = Vec::with_capacity(bs);
        for _ in 0..bs {
            let t = sample_times_diag(&mut self.rng);
            diag_batch.push(self.draw(t)?);
        }
        let diag = diagonal_loss(
            &self.model,
            &diag_batch,
            self.cfg.loss.diag_adaptive_c,
            self.cfg.loss.diag_adaptive_r,
        )?;
        let mut stats = StepStats {
            step: self.step + 1,
            diag_loss: diag.loss,
            loss: diag.loss,
            ..Default::default()
        };
        let mut grad = diag.param_grad;

        if self.distilling() {
            let sampling = self
                .cfg
                .train
                .offdiag_sampling
                .unwrap_or(match self.cfg.loss.kind {
                    LossKind::Psd => OffDiagSampling::Triple,
                    _ => OffDiagSampling::Pair,
                });
            let mut batch = Vec::with_capacity(bs);
            for _ in 0..bs {
                let (s, u, t) = match sampling {
                    OffDiagSampling::Triple => sample_times_triple(&mut self.rng),
                    OffDiagSampling::Pair => {
                        let (s, t) = sample_times_pair(&mut self.rng);
                        (s, 0.5 * (s + t), t)
                    }
                };
                if !(s < u && u < t) {
                    continue;
                }
                let smp = self.draw(s)?;
                batch.push(ConsistencySample {
                    x: smp.x,
                    s,
                    u,
                    t,
                    ctx: smp.target.context,
                });
            }
            if !batch.is_empty() {
                let out = consistency_loss(
                    &self.model,
                    &self.cfg.loss,
                    &batch,
                    self.weight_net.as_ref().map(|(n, _)| n),
                )?;
                stats.cons_loss = out.grad.loss;
                stats.loss += out.grad.loss;
                stats.invalid = out.invalid;
                stats.clamped = out.clamped;
                self.track_invalid(out.invalid, batch.len())?;
                if self.cfg.loss.surgery_enabled() {
                    let combined = gradient_surgery(&grad, &out.grad.param_grad)?;
                    stats.surgery_dot = Some(combined.iter().zip(&grad).map(|(a, b)| a * b).sum());
                    grad = combined;
                } else {
                    for (g, c) in grad.iter_mut().zip(&out.grad.param_grad) {
                        *g += c;
                    }
                }
                if let (Some((net, opt)), Some(wg)) = (self.weight_net.as_mut(), out.weight_grad) {
                    opt.step(net.params_mut(), &wg)?;
                }
            }
        }

        if !stats.loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at step {}",
                stats.step
            )));
        }
        self.adam.step(self.model.params_mut(), &grad)?;
        self.step += 1;
        self.watch_divergence(stats.loss)?;
        Ok(stats)
    }

    fn track_invalid(&mut self, invalid: usize, total: usize) -> Result<()> {
        self.invalid_hist.push_back((invalid, total));
        while self.invalid_hist.len() as u64 > self.cfg.train.invalid_window.max(1) {
            self.invalid_hist.pop_front();
        }
        let (bad, all) = self
            .invalid_hist
            .iter()
            .fold((0, 0), |(a, b), &(i, t)| (a + i, b + t));
        let rate = bad as f64 / all.max(1) as f64;
        if self.invalid_hist.len() as u64 >= self.cfg.train.invalid_window.max(1)
            && rate > self.cfg.train.max_invalid_rate
        {
            return Err(Error::TeacherInvalid(format!(
                "{bad} of {all} teachers invalid over the last {} steps (rate {rate:.3})",
                self.invalid_hist.len()
            )));
        }
        Ok(())
    }

    fn watch_divergence(&mut self, loss: f64) -> Result<()> {
        let ema = match self.loss_ema {
            None => loss,
            Some(e) => 0.99 * e + 0.01 * loss,
        };
        self.loss_ema = Some(ema);
        let init = *self.initial_loss.get_or_insert(loss);
        if ema > self.cfg.train.divergence_factor * init {
            self.above += 1;
            if self.above >= self.cfg.train.divergence_window {
                return Err(Error::Diverged(format!(
                    "loss EMA {ema:.4e} above {}x the initial {init:.4e} for {} steps",
                    self.cfg.train.divergence_factor, self.above
                )));
            }
        } else {
            self.above = 0;
        }
        Ok(())
    }

    pub fn loss_ema(&self) -> Option<f64> {
        self.loss_ema
    }

    /// Run `n` steps, calling `observe` after each.
    pub fn run_with<F: FnMut(&Self, &StepStats)>(&mut self, n: u64, mut observe: F) -> Result<()> {
        for _ in 0..n {
            let st = self.step()?;
            observe(self, &st);
            let every = self.cfg.train.log_every;
            if every > 0 && self.step % every == 0 {
                info!(
                    "step {} loss_ema {:.5} diag {:.5} cons {:.5} invalid {}",
                    self.step,
                    self.loss_ema.unwrap_or(f64::NAN),
                    st.diag_loss,
                    st.cons_loss,
                    st.invalid
                );
            }
            let probe = self.cfg.train.probe_every;
            if probe > 0 && self.step % probe == 0 {
                if let Some(truth) = self.dataset.truth() {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed ^ 0x9e37);
                    let tv = crate::eval::probe_tv(
                        &self.model,
                        &truth,
                        &self.cfg.noise,
                        &crate::eval::default_probe_grid(),
                        64,
                        &mut rng,
                    )?;
                    info!("step {} probe_tv {tv:.4}", self.step);
                }
            }
        }
        Ok(())
    }

    /// Run the configured number of steps.
    pub fn run(&mut self) -> Result<()> {
        let n = self.cfg.train.steps;
        self.run_with(n, |_, _| {})
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CheckpointMeta {
            stage: self.stage_label.clone(),
            step: self.step,
            arch: self.model.arch().clone(),
            schedule: self.model.schedule().clone(),
            rng: Some(RngState::capture(&self.rng)),
            config: self.cfg.clone(),
        });
        let n = self.model.num_params();
        ck.push("params", vec![n], self.model.params().to_vec())?;
        let (m, v) = self.adam.moments();
        ck.push("adam.m", vec![n], m.to_vec())?;
        ck.push("adam.v", vec![n], v.to_vec())?;
        ck.push("adam.step", vec![1], vec![self.adam.steps() as f64])?;
        if let Some((net, _)) = &self.weight_net {
            ck.push(
                "weight_net",
                vec![net.params().len()],
                net.params().to_vec(),
            )?;
        }
        Ok(ck)
    }
}

fn kind_name(k: LossKind) -> &'static str {
    match k {
        LossKind::Diag => "diag",
        LossKind::Psd => "psd",
        LossKind::Lsd => "lsd",
        LossKind::Esd => "esd",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataConfig;

    fn small_config() -> Config {
        let mut c = Config::default();
        c.data = DataConfig {
            seq_len: 1,
            vocab: 3,
            seed: 4,
            ..Default::default()
        };
        c.model.hidden_width = 16;
        c.train.batch_size = 16;
        c.train.warmup_steps = 10;
        c.train.lr = 3e-3;
        c.train.log_every = 0;
        c
    }

    fn trainer(c: &Config) -> Trainer {
        Trainer::new(c.clone(), Dataset::from_config(&c.data).unwrap()).unwrap()
    }

    #[test]
    fn time_samplers_are_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let (s, u, t) = sample_times_triple(&mut rng);
            assert!(s <= u && u <= t);
            let (a, b) = sample_times_pair(&mut rng);
            assert!(a <= b);
            let d = sample_times_diag(&mut rng);
            assert!((0.0..1.0).contains(&d));
        }
    }

    #[test]
    fn zero_steps_keep_the_initialization() {
        let c = small_config();
        let tr = trainer(&c);
        let init = DenoiserModel::init(tr.model().arch().clone(), Schedule::linear(), c.model.seed)
            .unwrap();
        assert_eq!(
            tr.checkpoint().unwrap().model().unwrap().params(),
            init.params()
        );
    }

    #[test]
    fn training_is_reproducible() {
        let c = small_config();
        let mut a = trainer(&c);
        let mut b = trainer(&c);
        let mut la = Vec::new();
        let mut lb = Vec::new();
        a.run_with(30, |_, s| la.push(s.loss)).unwrap();
        b.run_with(30, |_, s| lb.push(s.loss)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(
            a.checkpoint().unwrap().to_bytes().unwrap(),
            b.checkpoint().unwrap().to_bytes().unwrap()
        );
    }

    #[test]
    fn psd_surgery_keeps_the_diagonal_direction() {
        let mut c = small_config();
        let mut diag = trainer(&c);
        diag.run_with(50, |_, _| {}).unwrap();
        let ck = diag.checkpoint().unwrap();
        c.loss.kind = LossKind::Psd;
        let data = Dataset::from_config(&c.data).unwrap();
        let mut d = Trainer::distill_from(c.clone(), data.clone(), &ck).unwrap();
        assert_eq!(d.model().params(), ck.model().unwrap().params());
        d.run_with(20, |_, s| assert!(s.surgery_dot.unwrap() >= -1e-15))
            .unwrap();

        c.loss.kind = LossKind::Diag;
        assert!(Trainer::distill_from(c, data, &ck).is_err());
    }

    #[test]
    fn esd_and_lsd_distillation_run() {
        let mut c = small_config();
        let ck = trainer(&c).checkpoint().unwrap();
        for kind in [LossKind::Esd, LossKind::Lsd] {
            c.loss.kind = kind;
            c.loss.learnable_weight = LearnableWeight::OfSt;
            let mut d =
                Trainer::distill_from(c.clone(), Dataset::from_config(&c.data).unwrap(), &ck)
                    .unwrap();
            d.run_with(5, |_, s| {
                assert!(s.surgery_dot.is_none() && s.cons_loss.is_finite())
            })
            .unwrap();
            assert!(d.checkpoint().unwrap().tensor("weight_net").is_some());
        }
    }

    #[test]
    fn divergence_detector_fires() {
        let mut c = small_config();
        c.train.divergence_factor = 0.5;
        c.train.divergence_window = 3;
        c.train.warmup_steps = 0;
        let mut tr = trainer(&c);
        // EMA stays near the initial loss, so a factor below one trips it
        let r = tr.run_with(10, |_, _| {});
        assert!(matches!(r, Err(Error::Diverged(_))));
    }

    #[test]
    fn invalid_teacher_rate_aborts() {
        let mut c = small_config();
        c.train.invalid_window = 2;
        let mut tr = trainer(&c);
        tr.track_invalid(0, 10).unwrap();
        assert!(matches!(
            tr.track_invalid(5, 10),
            Err(Error::TeacherInvalid(_))
        ));
    }
}
