//! Control-branch training: residual (or plain) noise-prediction loss,
//! AdamW with cosine decay, an EMA shadow copy of the trainable weights,
//! and optional self-enhancement where the noisy input is produced by the
//! EMA model's own sampler jump instead of the analytic forward process.

use crate::denoiser::ControlledDenoiser;
use crate::diffusion::{
    ddim_step, forward_interpolate, forward_noise, nrd_decompose, sampler_step, SamplePair,
};
use crate::error::{Error, Result};
use crate::nn::store::AdamWConfig;
use crate::nn::tape::Tape;
use crate::nn::{apply_grad_buffer, cosine_lr, grad_buffer, merge_grad_buffers, ParamStore};
use crate::schedule::ScheduleTable;
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Diffuse the interpolated state `z_0 + beta_bar * r`; the network
    /// learns the composite noise-plus-residual target.
    Residual,
    /// Plain noise prediction on `z_0` only (deterministic-sampler baseline).
    Ddim,
}

/// Heavier mix constant for the alternative EMA convention where the update
/// is dominated by the online weights rather than the running average.
pub const EMA_MIX_HEAVY: f64 = 0.999;

#[derive(Debug, Clone, Copy)]
pub struct SelfEnhanceConfig {
    pub enabled: bool,
    /// Per-step probability of swapping the analytic noisy input for a
    /// model-generated one.
    pub prob: f64,
    /// The pseudo input starts `1..=u_max` steps deeper into the noise.
    pub u_max: usize,
    /// Per-update weight of the online weights in the EMA blend.
    pub ema_mix: f64,
    /// Draw the branch decision per sample instead of once per batch.
    pub per_sample: bool,
}

impl Default for SelfEnhanceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            prob: 0.2,
            u_max: 50,
            ema_mix: 0.001,
            per_sample: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainCfg {
    pub steps: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr1: f64,
    /// Stream for sample/timestep/noise draws.
    pub seed: u64,
    /// Separate stream for self-enhancement draws, so disabling the feature
    /// leaves the main data path untouched.
    pub se_seed: u64,
    pub mode: TrainMode,
    pub se: SelfEnhanceConfig,
    pub log_every: usize,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr0: 5e-4,
            lr1: 1e-5,
            seed: 42,
            se_seed: 43,
            mode: TrainMode::Residual,
            se: SelfEnhanceConfig::default(),
            log_every: 100,
        }
    }
}

/// One conditioning example: paired latents plus an optional soft mask.
#[derive(Debug, Clone)]
pub struct TrainItem<S: Scalar = f32> {
    pub pair: SamplePair<S>,
    pub mask: Option<Tensor<S>>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub pseudo_branch: bool,
}

/// The composite prediction target implied by a (possibly model-generated)
/// noisy state: the value the network must output for the exact-inversion
/// identity `predict(z_t, target) == z_0` to hold.
pub fn implied_target<S: Scalar>(
    z_t: &Tensor<S>,
    z_0: &Tensor<S>,
    t: usize,
    sched: &ScheduleTable,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    let so = sched.sqrt_one_minus_alpha_bar(t);
    if so == 0.0 {
        return Err(Error::DegenerateSchedule {
            t,
            msg: "no noise at this step; prediction target undefined".into(),
        });
    }
    let sa = S::of_f64(sched.sqrt_alpha_bar(t));
    let inv = S::of_f64(1.0 / so);
    z_t.zip_map(z_0, |zt, z0| (zt - sa * z0) * inv)
}

/// Build the self-enhancement input: diffuse to a deeper step `min(t+u, T)`,
/// let the EMA model take one sampler jump back down to `t`, and re-noise
/// with the model's own noise estimate. Falls back to the plain forward
/// sample when the clamp lands on `t` itself.
#[allow(clippy::too_many_arguments)]
pub fn make_pseudo_input<S: Scalar>(
    den: &ControlledDenoiser<S>,
    ema_ctrl: &ParamStore<S>,
    item: &TrainItem<S>,
    t: usize,
    u: usize,
    eps: &Tensor<S>,
    mode: TrainMode,
    sched: &ScheduleTable,
) -> Result<Tensor<S>> {
    let tu = (t + u).min(sched.t_max());
    let pair = &item.pair;
    let z_tu = match mode {
        TrainMode::Residual => {
            let zp = forward_interpolate(&pair.z_0, &pair.r, tu, sched)?;
            forward_noise(&zp, eps, tu, sched)?
        }
        TrainMode::Ddim => forward_noise(&pair.z_0, eps, tu, sched)?,
    };
    if tu == t {
        return Ok(z_tu);
    }
    let view = den.view_with_ctrl(ema_ctrl);
    let eps_hat = view.predict(&z_tu, tu, &pair.z_s, item.mask.as_ref())?;
    match mode {
        TrainMode::Residual => {
            let nrd = nrd_decompose(&pair.z_s, &z_tu, &eps_hat, tu, sched)?;
            let zp_t = sampler_step(&pair.z_s, &nrd, tu, t, sched)?;
            forward_noise(&zp_t, &nrd.eps_noise, t, sched)
        }
        TrainMode::Ddim => ddim_step(&z_tu, &eps_hat, tu, t, sched),
    }
}

pub struct Trainer<S: Scalar = f32> {
    pub den: ControlledDenoiser<S>,
    /// EMA copy of the control store, used for self-enhancement and sampling.
    pub ema: ParamStore<S>,
    pub sched: ScheduleTable,
    pub cfg: TrainCfg,
    pub step: usize,
    data_rng: ChaCha8Rng,
    se_rng: ChaCha8Rng,
    adamw: AdamWConfig,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(den: ControlledDenoiser<S>, sched: ScheduleTable, cfg: TrainCfg) -> Self {
        let ema = den.ctrl.clone();
        let data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let se_rng = ChaCha8Rng::seed_from_u64(cfg.se_seed);
        Self {
            den,
            ema,
            sched,
            cfg,
            step: 0,
            data_rng,
            se_rng,
            adamw: AdamWConfig::default(),
        }
    }

    /// One optimizer step over a random mini-batch from `data`.
    pub fn train_step(&mut self, data: &[TrainItem<S>]) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let batch = self.cfg.batch.max(1);
        let mut items: Vec<(usize, usize, Tensor<S>)> = Vec::with_capacity(batch);
        for _ in 0..batch {
            let idx = self.data_rng.gen_range(0..data.len());
            let t = self.data_rng.gen_range(1..=self.sched.t_max());
            let eps = Tensor::<S>::randn(&mut self.data_rng, data[idx].pair.z_0.shape());
            items.push((idx, t, eps));
        }
        let mut pseudo_branch = false;
        let mut pseudo_inputs: Vec<Option<Tensor<S>>> = vec![None; batch];
        if self.cfg.se.enabled {
            let take_all = if self.cfg.se.per_sample {
                false
            } else {
                let p: f64 = self.se_rng.gen();
                p < self.cfg.se.prob
            };
            for (slot, (idx, t, _)) in pseudo_inputs.iter_mut().zip(items.iter()) {
                let take = if self.cfg.se.per_sample {
                    let p: f64 = self.se_rng.gen();
                    p < self.cfg.se.prob
                } else {
                    take_all
                };
                if !take {
                    continue;
                }
                pseudo_branch = true;
                let u = self.se_rng.gen_range(1..=self.cfg.se.u_max.max(1));
                let eps_se = Tensor::<S>::randn(&mut self.se_rng, data[*idx].pair.z_0.shape());
                *slot = Some(make_pseudo_input(
                    &self.den,
                    &self.ema,
                    &data[*idx],
                    *t,
                    u,
                    &eps_se,
                    self.cfg.mode,
                    &self.sched,
                )?);
            }
        }
        let view = self.den.view();
        let mode = self.cfg.mode;
        let sched = &self.sched;
        let results: Vec<Result<(f64, Vec<Tensor<S>>)>> = items
            .par_iter()
            .zip(pseudo_inputs.par_iter())
            .map(|((idx, t, eps), pseudo)| {
                let item = &data[*idx];
                let pair = &item.pair;
                let z_t = match pseudo {
                    Some(z) => z.clone(),
                    None => match mode {
                        TrainMode::Residual => {
                            let zp = forward_interpolate(&pair.z_0, &pair.r, *t, sched)?;
                            forward_noise(&zp, eps, *t, sched)?
                        }
                        TrainMode::Ddim => forward_noise(&pair.z_0, eps, *t, sched)?,
                    },
                };
                let target = match (mode, pseudo) {
                    (TrainMode::Ddim, None) => eps.clone(),
                    _ => implied_target(&z_t, &pair.z_0, *t, sched)?,
                };
                let mut tape = Tape::new();
                let pass =
                    view.forward_tape(&mut tape, &z_t, *t, &pair.z_s, item.mask.as_ref())?;
                let loss_id = tape.mse_loss(pass.out, target)?;
                let loss = tape.value(loss_id).item().as_f64();
                let grads = tape.backward(loss_id)?;
                let mut buf = grad_buffer(&self.den.ctrl);
                pass.binds_ctrl.collect(&grads, &mut buf)?;
                Ok((loss, buf))
            })
            .collect();
        let mut total = grad_buffer(&self.den.ctrl);
        let mut loss_sum = 0.0;
        for r in results {
            let (l, buf) = r?;
            loss_sum += l;
            merge_grad_buffers(&mut total, &buf)?;
        }
        let loss = loss_sum / batch as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "training loss non-finite at step {}",
                self.step
            )));
        }
        self.den.ctrl.zero_grads();
        apply_grad_buffer(&mut self.den.ctrl, &total)?;
        self.den.ctrl.scale_grads(S::of_f64(1.0 / batch as f64));
        let lr = cosine_lr(
            self.step as u64,
            self.cfg.steps.max(1) as u64,
            self.cfg.lr0,
            self.cfg.lr1,
        )?;
        self.den.ctrl.adamw_step(lr, &self.adamw);
        self.ema
            .ema_blend_from(&self.den.ctrl, self.cfg.se.ema_mix)?;
        let stats = StepStats {
            step: self.step,
            lr,
            loss,
            pseudo_branch,
        };
        self.step += 1;
        Ok(stats)
    }

    /// Run the configured number of steps, reporting through `log`.
    pub fn train(
        &mut self,
        data: &[TrainItem<S>],
        mut log: impl FnMut(&StepStats),
    ) -> Result<Vec<StepStats>> {
        let mut history = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let stats = self.train_step(data)?;
            if self.cfg.log_every > 0 && stats.step % self.cfg.log_every == 0 {
                log(&stats);
            }
            history.push(stats);
        }
        Ok(history)
    }

    /// Average loss over `data` with fresh draws from `seed`; no updates.
    pub fn eval_loss(&self, data: &[TrainItem<S>], seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let view = self.den.view();
        let mut total = 0.0;
        for item in data {
            let pair = &item.pair;
            let t = rng.gen_range(1..=self.sched.t_max());
            let eps = Tensor::<S>::randn(&mut rng, pair.z_0.shape());
            let z_t = match self.cfg.mode {
                TrainMode::Residual => {
                    let zp = forward_interpolate(&pair.z_0, &pair.r, t, &self.sched)?;
                    forward_noise(&zp, &eps, t, &self.sched)?
                }
                TrainMode::Ddim => forward_noise(&pair.z_0, &eps, t, &self.sched)?,
            };
            let target = match self.cfg.mode {
                TrainMode::Ddim => eps.clone(),
                TrainMode::Residual => implied_target(&z_t, &pair.z_0, t, &self.sched)?,
            };
            let pred = view.predict(&z_t, t, &pair.z_s, item.mask.as_ref())?;
            total += pred.mean_sq_diff(&target);
        }
        Ok(total / data.len() as f64)
    }
}
