//! The denoising network: a small U-shaped base model (frozen after
//! pretraining) plus a trainable control copy of its encoder fused in
//! through zero-initialized 1x1 projections.

use crate::diffusion::{forward_noise, Denoiser};
use crate::error::{Error, Result};
use crate::nn::blocks::{
    add_conv, add_res_block, add_temb_mlp, add_zero_conv, conv_fwd, gn_fwd, res_block_fwd,
    temb_mlp_fwd,
};
use crate::nn::store::AdamWConfig;
use crate::nn::tape::{Tape, VarId};
use crate::nn::{apply_grad_buffer, cosine_lr, grad_buffer, merge_grad_buffers, Bindings, ParamStore};
use crate::schedule::ScheduleTable;
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct DenoiserCfg {
    /// Channels of the diffused tensor (latent channels, or 3 in pixel mode).
    pub latent_ch: usize,
    /// Base width; stages run at ch / 2ch / 2ch.
    pub ch: usize,
    pub emb_dim: usize,
    /// Append a soft shadow mask channel to the control input.
    pub use_mask: bool,
}

impl Default for DenoiserCfg {
    fn default() -> Self {
        Self {
            latent_ch: 4,
            ch: 32,
            emb_dim: 64,
            use_mask: false,
        }
    }
}

impl DenoiserCfg {
    pub fn cond_ch(&self) -> usize {
        self.latent_ch + if self.use_mask { 1 } else { 0 }
    }
}

fn add_encoder_params<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    rng: &mut R,
    in_ch: usize,
    ch: usize,
    emb_dim: usize,
) -> Result<()> {
    add_conv(store, rng, "in", ch, in_ch, 3)?;
    add_temb_mlp(store, rng, "temb", emb_dim)?;
    add_res_block(store, rng, "rd1", ch, ch, Some(emb_dim))?;
    add_conv(store, rng, "down1", 2 * ch, ch, 3)?;
    add_res_block(store, rng, "rd2", 2 * ch, 2 * ch, Some(emb_dim))?;
    add_conv(store, rng, "down2", 2 * ch, 2 * ch, 3)?;
    add_res_block(store, rng, "rm", 2 * ch, 2 * ch, Some(emb_dim))?;
    Ok(())
}

fn add_decoder_params<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    rng: &mut R,
    ch: usize,
    out_ch: usize,
    emb_dim: usize,
) -> Result<()> {
    add_res_block(store, rng, "ru1", 4 * ch, 2 * ch, Some(emb_dim))?;
    add_res_block(store, rng, "ru2", 3 * ch, ch, Some(emb_dim))?;
    crate::nn::blocks::add_group_norm(store, "out.gn", ch)?;
    add_conv(store, rng, "out", out_ch, ch, 3)?;
    Ok(())
}

/// Full U-shaped noise predictor operating on `latent_ch` channels.
pub fn init_base_unet<S: Scalar>(cfg: &DenoiserCfg, seed: u64) -> Result<ParamStore<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    add_encoder_params(&mut store, &mut rng, cfg.latent_ch, cfg.ch, cfg.emb_dim)?;
    add_decoder_params(&mut store, &mut rng, cfg.ch, cfg.latent_ch, cfg.emb_dim)?;
    Ok(store)
}

/// Control store: copy of the base encoder with a widened input conv
/// (extra conditioning columns zero-initialized) plus zero-initialized
/// fusion projections at every stage boundary.
pub fn init_control_from_base<S: Scalar>(
    base: &ParamStore<S>,
    cfg: &DenoiserCfg,
) -> Result<ParamStore<S>> {
    let mut ctrl = ParamStore::new();
    let encoder_names = [
        "in.w", "in.b", "temb.l1.w", "temb.l1.b", "temb.l2.w", "temb.l2.b",
    ];
    for name in encoder_names {
        let v = base.get(name)?.clone();
        if name == "in.w" {
            // widen [ch, latent_ch, 3, 3] -> [ch, latent_ch + cond_ch, 3, 3]
            let s = v.shape();
            let (co, ci, k) = (s[0], s[1], s[2]);
            let ci_new = ci + cfg.cond_ch();
            let mut w = Tensor::zeros(&[co, ci_new, k, k]);
            for oc in 0..co {
                for icn in 0..ci {
                    for i in 0..k * k {
                        w[(oc * ci_new + icn) * k * k + i] = v[(oc * ci + icn) * k * k + i];
                    }
                }
            }
            ctrl.insert(name, w)?;
        } else {
            ctrl.insert(name, v)?;
        }
    }
    for p in base.entries() {
        let name = p.name.as_str();
        if name.starts_with("rd1.")
            || name.starts_with("down1.")
            || name.starts_with("rd2.")
            || name.starts_with("down2.")
            || name.starts_with("rm.")
        {
            ctrl.insert(name, p.value.clone())?;
        }
    }
    add_zero_conv(&mut ctrl, "fuse.e1", cfg.ch, cfg.ch, 1)?;
    add_zero_conv(&mut ctrl, "fuse.e2", 2 * cfg.ch, 2 * cfg.ch, 1)?;
    add_zero_conv(&mut ctrl, "fuse.m", 2 * cfg.ch, 2 * cfg.ch, 1)?;
    Ok(ctrl)
}

/// Frozen base plus trainable control branch.
#[derive(Debug, Clone)]
pub struct ControlledDenoiser<S: Scalar = f32> {
    pub cfg: DenoiserCfg,
    pub base: ParamStore<S>,
    pub ctrl: ParamStore<S>,
}

impl<S: Scalar> ControlledDenoiser<S> {
    pub fn from_base(base: ParamStore<S>, cfg: DenoiserCfg) -> Result<Self> {
        let ctrl = init_control_from_base(&base, &cfg)?;
        Ok(Self { cfg, base, ctrl })
    }

    pub fn view(&self) -> DenoiserView<'_, S> {
        DenoiserView {
            cfg: self.cfg,
            base: &self.base,
            ctrl: Some(&self.ctrl),
        }
    }

    /// Base network alone, as used before the control branch exists.
    pub fn base_view(&self) -> DenoiserView<'_, S> {
        DenoiserView {
            cfg: self.cfg,
            base: &self.base,
            ctrl: None,
        }
    }

    /// View with a substitute control store (the EMA copy).
    pub fn view_with_ctrl<'a>(&'a self, ctrl: &'a ParamStore<S>) -> DenoiserView<'a, S> {
        DenoiserView {
            cfg: self.cfg,
            base: &self.base,
            ctrl: Some(ctrl),
        }
    }
}

impl<S: Scalar> Denoiser<S> for ControlledDenoiser<S> {
    fn predict(
        &self,
        z_t: &Tensor<S>,
        t: usize,
        z_s: &Tensor<S>,
        mask: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>> {
        self.view().predict(z_t, t, z_s, mask)
    }
}

/// Borrowed parameter view that can run the forward pass on a tape.
#[derive(Clone, Copy)]
pub struct DenoiserView<'a, S: Scalar> {
    pub cfg: DenoiserCfg,
    pub base: &'a ParamStore<S>,
    pub ctrl: Option<&'a ParamStore<S>>,
}

/// Handles produced by one taped forward pass.
pub struct ForwardPass {
    pub out: VarId,
    pub z_t: VarId,
    pub binds_base: Bindings,
    pub binds_ctrl: Bindings,
}

fn encoder_fwd<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binds: &mut Bindings,
    x: VarId,
    temb: VarId,
) -> Result<(VarId, VarId, VarId)> {
    let h = conv_fwd(tape, store, binds, "in", x, 1, 1)?;
    let e1 = res_block_fwd(tape, store, binds, "rd1", h, Some(temb))?;
    let d1 = conv_fwd(tape, store, binds, "down1", e1, 2, 1)?;
    let e2 = res_block_fwd(tape, store, binds, "rd2", d1, Some(temb))?;
    let d2 = conv_fwd(tape, store, binds, "down2", e2, 2, 1)?;
    let m = res_block_fwd(tape, store, binds, "rm", d2, Some(temb))?;
    Ok((e1, e2, m))
}

fn decoder_fwd<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binds: &mut Bindings,
    e1: VarId,
    e2: VarId,
    m: VarId,
    temb: VarId,
) -> Result<VarId> {
    let u = tape.upsample2(m)?;
    let cat = tape.concat_c(&[u, e2])?;
    let u1 = res_block_fwd(tape, store, binds, "ru1", cat, Some(temb))?;
    let u = tape.upsample2(u1)?;
    let cat = tape.concat_c(&[u, e1])?;
    let u2 = res_block_fwd(tape, store, binds, "ru2", cat, Some(temb))?;
    let h = gn_fwd(tape, store, binds, "out.gn", u2)?;
    let h = tape.silu(h)?;
    conv_fwd(tape, store, binds, "out", h, 1, 1)
}

impl<S: Scalar> DenoiserView<'_, S> {
    pub fn forward_tape(
        &self,
        tape: &mut Tape<S>,
        z_t: &Tensor<S>,
        t: usize,
        z_s: &Tensor<S>,
        mask: Option<&Tensor<S>>,
    ) -> Result<ForwardPass> {
        if self.cfg.use_mask && mask.is_none() {
            return Err(Error::InvalidArgument(
                "denoiser configured with a mask channel but no mask given".into(),
            ));
        }
        let mut binds_base = Bindings::new();
        let mut binds_ctrl = Bindings::new();
        let z_t_id = tape.leaf(z_t.clone());
        let temb_b = temb_mlp_fwd(tape, self.base, &mut binds_base, "temb", t, self.cfg.emb_dim)?;
        let (mut e1, mut e2, mut m) = encoder_fwd(tape, self.base, &mut binds_base, z_t_id, temb_b)?;
        if let Some(ctrl) = self.ctrl {
            let z_s_id = tape.leaf(z_s.clone());
            let mut parts = vec![z_t_id, z_s_id];
            if self.cfg.use_mask {
                parts.push(tape.leaf(mask.unwrap().clone()));
            }
            let xin = tape.concat_c(&parts)?;
            let temb_c = temb_mlp_fwd(tape, ctrl, &mut binds_ctrl, "temb", t, self.cfg.emb_dim)?;
            let (c1, c2, cm) = encoder_fwd(tape, ctrl, &mut binds_ctrl, xin, temb_c)?;
            let f1 = conv_fwd(tape, ctrl, &mut binds_ctrl, "fuse.e1", c1, 1, 0)?;
            let f2 = conv_fwd(tape, ctrl, &mut binds_ctrl, "fuse.e2", c2, 1, 0)?;
            let fm = conv_fwd(tape, ctrl, &mut binds_ctrl, "fuse.m", cm, 1, 0)?;
            e1 = tape.add(e1, f1)?;
            e2 = tape.add(e2, f2)?;
            m = tape.add(m, fm)?;
        }
        let out = decoder_fwd(tape, self.base, &mut binds_base, e1, e2, m, temb_b)?;
        Ok(ForwardPass {
            out,
            z_t: z_t_id,
            binds_base,
            binds_ctrl,
        })
    }

    pub fn predict(
        &self,
        z_t: &Tensor<S>,
        t: usize,
        z_s: &Tensor<S>,
        mask: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let pass = self.forward_tape(&mut tape, z_t, t, z_s, mask)?;
        Ok(tape.value(pass.out).clone())
    }
}

impl<S: Scalar> Denoiser<S> for DenoiserView<'_, S> {
    fn predict(
        &self,
        z_t: &Tensor<S>,
        t: usize,
        z_s: &Tensor<S>,
        mask: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>> {
        DenoiserView::predict(self, z_t, t, z_s, mask)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainCfg {
    pub steps: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr1: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for PretrainCfg {
    fn default() -> Self {
        Self {
            steps: 800,
            batch: 8,
            lr0: 1e-3,
            lr1: 1e-5,
            seed: 7,
            log_every: 100,
        }
    }
}

/// Train the base U-net as a plain noise predictor on clean latents
/// (the local stand-in for a pretrained backbone). Returns the training
/// losses; the held-out loss contract is checked by the caller.
pub fn pretrain_base<S: Scalar>(
    base: &mut ParamStore<S>,
    cfg: &DenoiserCfg,
    latents: &[Tensor<S>],
    sched: &ScheduleTable,
    opts: &PretrainCfg,
    mut log: impl FnMut(usize, f64, f64),
) -> Result<Vec<f64>> {
    if latents.is_empty() {
        return Err(Error::Data("no latents to pretrain on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let adamw = AdamWConfig::default();
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let items: Vec<(usize, usize, Tensor<S>)> = (0..opts.batch)
            .map(|_| {
                let idx = rng.gen_range(0..latents.len());
                let t = rng.gen_range(1..=sched.t_max());
                let eps = Tensor::<S>::randn(&mut rng, latents[idx].shape());
                (idx, t, eps)
            })
            .collect();
        let view = DenoiserView {
            cfg: *cfg,
            base,
            ctrl: None,
        };
        let results: Vec<Result<(f64, Vec<Tensor<S>>)>> = items
            .par_iter()
            .map(|(idx, t, eps)| {
                let z0 = &latents[*idx];
                let z_t = forward_noise(z0, eps, *t, sched)?;
                let mut tape = Tape::new();
                let pass = view.forward_tape(&mut tape, &z_t, *t, z0, None)?;
                let loss_id = tape.mse_loss(pass.out, eps.clone())?;
                let loss = tape.value(loss_id).item().as_f64();
                let grads = tape.backward(loss_id)?;
                let mut buf = grad_buffer(view.base);
                pass.binds_base.collect(&grads, &mut buf)?;
                Ok((loss, buf))
            })
            .collect();
        let mut total = grad_buffer(base);
        let mut loss_sum = 0.0;
        for r in results {
            let (l, buf) = r?;
            loss_sum += l;
            merge_grad_buffers(&mut total, &buf)?;
        }
        let mean_loss = loss_sum / opts.batch as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "base pretraining loss non-finite at step {step}"
            )));
        }
        losses.push(mean_loss);
        base.zero_grads();
        apply_grad_buffer(base, &total)?;
        base.scale_grads(S::of_f64(1.0 / opts.batch as f64));
        let lr = cosine_lr(step as u64, opts.steps.max(1) as u64, opts.lr0, opts.lr1)?;
        base.adamw_step(lr, &adamw);
        if opts.log_every > 0 && step % opts.log_every == 0 {
            log(step, lr, mean_loss);
        }
    }
    Ok(losses)
}

/// Average noise-prediction loss of the base network on held-out latents.
pub fn base_eval_loss<S: Scalar>(
    base: &ParamStore<S>,
    cfg: &DenoiserCfg,
    latents: &[Tensor<S>],
    sched: &ScheduleTable,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view = DenoiserView {
        cfg: *cfg,
        base,
        ctrl: None,
    };
    let mut total = 0.0;
    for z0 in latents {
        let t = rng.gen_range(1..=sched.t_max());
        let eps = Tensor::<S>::randn(&mut rng, z0.shape());
        let z_t = forward_noise(z0, &eps, t, sched)?;
        let pred = view.predict(&z_t, t, z0, None)?;
        total += pred.mean_sq_diff(&eps);
    }
    Ok(total / latents.len() as f64)
}
