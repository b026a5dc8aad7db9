//! Small convolutional autoencoder (images <-> 4-channel latents at 1/4
//! resolution) and the detail-preserving decoder: a trainable copy of the
//! decoder fed by deformable skip connections from the shadow image's
//! encoder features, emitting a residual on top of the shadow image.

use crate::denoiser::PretrainCfg;
use crate::error::{Error, Result};
use crate::nn::blocks::{
    add_conv, add_group_norm, add_res_block, add_zero_conv, conv_fwd, gn_fwd, res_block_fwd,
};
use crate::nn::store::AdamWConfig;
use crate::nn::tape::{Tape, VarId};
use crate::nn::{
    apply_grad_buffer, cosine_lr, grad_buffer, merge_grad_buffers, Bindings, ParamStore,
};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct AeCfg {
    pub img_ch: usize,
    /// Full-resolution width.
    pub c1: usize,
    /// Half/quarter-resolution width.
    pub c2: usize,
    pub latent_ch: usize,
}

impl Default for AeCfg {
    fn default() -> Self {
        Self {
            img_ch: 3,
            c1: 16,
            c2: 32,
            latent_ch: 4,
        }
    }
}

/// Encoder activations at each scale, reused as skip sources.
pub struct EncFeatures {
    pub f1: VarId,
    pub f2: VarId,
    pub f3: VarId,
    pub latent: VarId,
}

#[derive(Debug, Clone)]
pub struct Autoencoder<S: Scalar = f32> {
    pub cfg: AeCfg,
    /// Both halves in one store, under `enc.` / `dec.` prefixes.
    pub params: ParamStore<S>,
}

impl<S: Scalar> Autoencoder<S> {
    pub fn init(cfg: AeCfg, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        add_conv(&mut p, &mut rng, "enc.in", cfg.c1, cfg.img_ch, 3)?;
        add_res_block(&mut p, &mut rng, "enc.rb1", cfg.c1, cfg.c1, None)?;
        add_conv(&mut p, &mut rng, "enc.d1", cfg.c2, cfg.c1, 3)?;
        add_res_block(&mut p, &mut rng, "enc.rb2", cfg.c2, cfg.c2, None)?;
        add_conv(&mut p, &mut rng, "enc.d2", cfg.c2, cfg.c2, 3)?;
        add_res_block(&mut p, &mut rng, "enc.rb3", cfg.c2, cfg.c2, None)?;
        add_conv(&mut p, &mut rng, "enc.to_lat", cfg.latent_ch, cfg.c2, 3)?;
        add_conv(&mut p, &mut rng, "dec.from_lat", cfg.c2, cfg.latent_ch, 3)?;
        add_res_block(&mut p, &mut rng, "dec.rb3", cfg.c2, cfg.c2, None)?;
        add_res_block(&mut p, &mut rng, "dec.rb2", cfg.c2, cfg.c2, None)?;
        add_res_block(&mut p, &mut rng, "dec.rb1", cfg.c2, cfg.c1, None)?;
        add_group_norm(&mut p, "dec.out.gn", cfg.c1)?;
        add_conv(&mut p, &mut rng, "dec.out", cfg.img_ch, cfg.c1, 3)?;
        Ok(Self { cfg, params: p })
    }

    pub fn encode_tape(
        &self,
        tape: &mut Tape<S>,
        binds: &mut Bindings,
        img: VarId,
    ) -> Result<EncFeatures> {
        let p = &self.params;
        let h = conv_fwd(tape, p, binds, "enc.in", img, 1, 1)?;
        let f1 = res_block_fwd(tape, p, binds, "enc.rb1", h, None)?;
        let h = conv_fwd(tape, p, binds, "enc.d1", f1, 2, 1)?;
        let f2 = res_block_fwd(tape, p, binds, "enc.rb2", h, None)?;
        let h = conv_fwd(tape, p, binds, "enc.d2", f2, 2, 1)?;
        let f3 = res_block_fwd(tape, p, binds, "enc.rb3", h, None)?;
        let latent = conv_fwd(tape, p, binds, "enc.to_lat", f3, 1, 1)?;
        Ok(EncFeatures { f1, f2, f3, latent })
    }

    pub fn decode_tape(
        &self,
        tape: &mut Tape<S>,
        binds: &mut Bindings,
        latent: VarId,
    ) -> Result<VarId> {
        let p = &self.params;
        let h = conv_fwd(tape, p, binds, "dec.from_lat", latent, 1, 1)?;
        let h = res_block_fwd(tape, p, binds, "dec.rb3", h, None)?;
        let h = tape.upsample2(h)?;
        let h = res_block_fwd(tape, p, binds, "dec.rb2", h, None)?;
        let h = tape.upsample2(h)?;
        let h = res_block_fwd(tape, p, binds, "dec.rb1", h, None)?;
        let h = gn_fwd(tape, p, binds, "dec.out.gn", h)?;
        let h = tape.silu(h)?;
        conv_fwd(tape, p, binds, "dec.out", h, 1, 1)
    }

    pub fn encode(&self, img: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.encode_with_features(img)?.0)
    }

    /// Latent plus the per-scale encoder features as plain tensors.
    pub fn encode_with_features(
        &self,
        img: &Tensor<S>,
    ) -> Result<(Tensor<S>, [Tensor<S>; 3])> {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let x = tape.leaf(img.clone());
        let f = self.encode_tape(&mut tape, &mut binds, x)?;
        Ok((
            tape.value(f.latent).clone(),
            [
                tape.value(f.f1).clone(),
                tape.value(f.f2).clone(),
                tape.value(f.f3).clone(),
            ],
        ))
    }

    pub fn decode(&self, latent: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let x = tape.leaf(latent.clone());
        let out = self.decode_tape(&mut tape, &mut binds, x)?;
        Ok(tape.value(out).clone())
    }

    /// Standard deviation of encoder latents over `images`, used to rescale
    /// latents to roughly unit spread before diffusion.
    pub fn latent_std(&self, images: &[Tensor<S>]) -> Result<f64> {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        for img in images {
            let lat = self.encode(img)?;
            for i in 0..lat.len() {
                let v = lat[i].as_f64();
                sum += v;
                sum_sq += v * v;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("no images for latent statistics".into()));
        }
        let mean = sum / n as f64;
        Ok((sum_sq / n as f64 - mean * mean).max(0.0).sqrt())
    }
}

/// Reconstruction pretraining of encoder and decoder jointly.
pub fn pretrain_ae<S: Scalar>(
    ae: &mut Autoencoder<S>,
    images: &[Tensor<S>],
    opts: &PretrainCfg,
    mut log: impl FnMut(usize, f64, f64),
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::Data("no images to pretrain on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let adamw = AdamWConfig::default();
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let idxs: Vec<usize> = (0..opts.batch)
            .map(|_| rng.gen_range(0..images.len()))
            .collect();
        let ae_ref = &*ae;
        let results: Vec<Result<(f64, Vec<Tensor<S>>)>> = idxs
            .par_iter()
            .map(|&idx| {
                let img = &images[idx];
                let mut tape = Tape::new();
                let mut binds = Bindings::new();
                let x = tape.leaf(img.clone());
                let f = ae_ref.encode_tape(&mut tape, &mut binds, x)?;
                let recon = ae_ref.decode_tape(&mut tape, &mut binds, f.latent)?;
                let loss_id = tape.mse_loss(recon, img.clone())?;
                let loss = tape.value(loss_id).item().as_f64();
                let grads = tape.backward(loss_id)?;
                let mut buf = grad_buffer(&ae_ref.params);
                binds.collect(&grads, &mut buf)?;
                Ok((loss, buf))
            })
            .collect();
        let mut total = grad_buffer(&ae.params);
        let mut loss_sum = 0.0;
        for r in results {
            let (l, buf) = r?;
            loss_sum += l;
            merge_grad_buffers(&mut total, &buf)?;
        }
        let mean_loss = loss_sum / opts.batch as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "autoencoder loss non-finite at step {step}"
            )));
        }
        losses.push(mean_loss);
        ae.params.zero_grads();
        apply_grad_buffer(&mut ae.params, &total)?;
        ae.params.scale_grads(S::of_f64(1.0 / opts.batch as f64));
        let lr = cosine_lr(step as u64, opts.steps.max(1) as u64, opts.lr0, opts.lr1)?;
        ae.params.adamw_step(lr, &adamw);
        if opts.log_every > 0 && step % opts.log_every == 0 {
            log(step, lr, mean_loss);
        }
    }
    Ok(losses)
}

const DEFORM_K: usize = 3;
const DEFORM_TAPS: usize = DEFORM_K * DEFORM_K;

fn add_zero_deform<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    rng: &mut R,
    prefix: &str,
    feat_ch: usize,
    ctrl_ch: usize,
) -> Result<()> {
    // offsets (2 per tap) and modulation weights predicted together by a
    // zero-initialized conv over the concatenated features: the whole block
    // contributes nothing until training moves the modulations off zero
    add_zero_conv(
        store,
        &format!("{prefix}.om"),
        3 * DEFORM_TAPS,
        feat_ch + ctrl_ch,
        3,
    )?;
    let std = (2.0 / (feat_ch * DEFORM_TAPS) as f64).sqrt();
    store.insert(
        &format!("{prefix}.w"),
        Tensor::<f64>::randn(rng, &[ctrl_ch, feat_ch, DEFORM_TAPS])
            .scale(std)
            .cast(),
    )
}

fn zero_deform_fwd<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binds: &mut Bindings,
    prefix: &str,
    feat: VarId,
    ctrl: VarId,
) -> Result<VarId> {
    let cat = tape.concat_c(&[feat, ctrl])?;
    let om = conv_fwd(tape, store, binds, &format!("{prefix}.om"), cat, 1, 1)?;
    let offsets = tape.slice_c(om, 0, 2 * DEFORM_TAPS)?;
    let mods = tape.slice_c(om, 2 * DEFORM_TAPS, DEFORM_TAPS)?;
    let w = binds.bind(tape, store, &format!("{prefix}.w"))?;
    tape.deform_conv(feat, offsets, mods, w, DEFORM_K)
}

/// Trainable decoder copy with deformable skip injections and a residual
/// output head. The conditioning latent (8 channels) is the concatenation
/// of the predicted shadow-free latent and the shadow image's latent.
#[derive(Debug, Clone)]
pub struct DetailDecoder<S: Scalar = f32> {
    pub cfg: AeCfg,
    pub ctrl: ParamStore<S>,
}

impl<S: Scalar> DetailDecoder<S> {
    /// Copy the (frozen) decoder weights, widen the input conv with
    /// zero-filled columns for the extra conditioning channels, and add
    /// zero-initialized skip and output-head parameters.
    pub fn from_autoencoder(ae: &Autoencoder<S>, seed: u64) -> Result<Self> {
        let cfg = ae.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctrl = ParamStore::new();
        for p in ae.params.entries() {
            let name = p.name.as_str();
            if let Some(rest) = name.strip_prefix("dec.") {
                if rest == "out.w" || rest == "out.b" {
                    continue; // replaced by the residual head
                }
                if rest == "from_lat.w" {
                    let s = p.value.shape();
                    let (co, ci, k) = (s[0], s[1], s[2]);
                    let ci_new = 2 * ci;
                    let mut w = Tensor::zeros(&[co, ci_new, k, k]);
                    for oc in 0..co {
                        for icn in 0..ci {
                            for i in 0..k * k {
                                w[(oc * ci_new + icn) * k * k + i] =
                                    p.value[(oc * ci + icn) * k * k + i];
                            }
                        }
                    }
                    ctrl.insert(rest, w)?;
                } else {
                    ctrl.insert(rest, p.value.clone())?;
                }
            }
        }
        add_zero_deform(&mut ctrl, &mut rng, "zd3", cfg.c2, cfg.c2)?;
        add_zero_deform(&mut ctrl, &mut rng, "zd2", cfg.c2, cfg.c2)?;
        add_zero_deform(&mut ctrl, &mut rng, "zd1", cfg.c1, cfg.c1)?;
        add_conv(&mut ctrl, &mut rng, "proj.c1", cfg.c1, cfg.c1, 3)?;
        add_zero_conv(&mut ctrl, "proj.out", cfg.img_ch, cfg.c1, 3)?;
        Ok(Self { cfg, ctrl })
    }

    /// Full taped pass. `feats` are the shadow image's encoder activations
    /// (precomputed, no gradient through the frozen encoder); the output is
    /// `shadow + residual`, which equals the shadow image exactly at init.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<S>,
        binds: &mut Bindings,
        latent_sf: &Tensor<S>,
        latent_shadow: &Tensor<S>,
        feats: &[Tensor<S>; 3],
        shadow_img: &Tensor<S>,
    ) -> Result<VarId> {
        let p = &self.ctrl;
        let lsf = tape.leaf(latent_sf.clone());
        let ls = tape.leaf(latent_shadow.clone());
        let f1 = tape.leaf(feats[0].clone());
        let f2 = tape.leaf(feats[1].clone());
        let f3 = tape.leaf(feats[2].clone());
        let x = tape.concat_c(&[lsf, ls])?;
        let h = conv_fwd(tape, p, binds, "from_lat", x, 1, 1)?;
        let h = res_block_fwd(tape, p, binds, "rb3", h, None)?;
        let skip = zero_deform_fwd(tape, p, binds, "zd3", f3, h)?;
        let h = tape.add(h, skip)?;
        let h = tape.upsample2(h)?;
        let h = res_block_fwd(tape, p, binds, "rb2", h, None)?;
        let skip = zero_deform_fwd(tape, p, binds, "zd2", f2, h)?;
        let h = tape.add(h, skip)?;
        let h = tape.upsample2(h)?;
        let h = res_block_fwd(tape, p, binds, "rb1", h, None)?;
        let skip = zero_deform_fwd(tape, p, binds, "zd1", f1, h)?;
        let h = tape.add(h, skip)?;
        let h = gn_fwd(tape, p, binds, "out.gn", h)?;
        let h = tape.silu(h)?;
        let h = conv_fwd(tape, p, binds, "proj.c1", h, 1, 1)?;
        let h = tape.silu(h)?;
        let residual = conv_fwd(tape, p, binds, "proj.out", h, 1, 1)?;
        let shadow = tape.leaf(shadow_img.clone());
        tape.add(shadow, residual)
    }

    /// Run one deformable skip block (`zd3`, `zd2`, or `zd1`) on its own.
    /// Useful for checking the zero-contribution contract at init.
    pub fn deform_skip(
        &self,
        prefix: &str,
        feat: &Tensor<S>,
        ctrl: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let f = tape.leaf(feat.clone());
        let c = tape.leaf(ctrl.clone());
        let out = zero_deform_fwd(&mut tape, &self.ctrl, &mut binds, prefix, f, c)?;
        Ok(tape.value(out).clone())
    }

    /// Decode a predicted shadow-free latent with detail preservation.
    pub fn decode_detail(
        &self,
        ae: &Autoencoder<S>,
        latent_sf: &Tensor<S>,
        shadow_img: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let (latent_shadow, feats) = ae.encode_with_features(shadow_img)?;
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let out = self.forward_tape(
            &mut tape,
            &mut binds,
            latent_sf,
            &latent_shadow,
            &feats,
            shadow_img,
        )?;
        Ok(tape.value(out).clone())
    }
}

/// A detail-decoder training example: shadow image, shadow-free target, and
/// the shadow-free latent to decode (ground-truth encoding during training,
/// diffusion output at inference).
#[derive(Debug, Clone)]
pub struct DetailItem<S: Scalar = f32> {
    pub shadow: Tensor<S>,
    pub target: Tensor<S>,
    pub latent_sf: Tensor<S>,
}

/// Train only the controller; the autoencoder stays frozen throughout.
///
/// Nearest-neighbor upsampling by an integer factor, for building spatially
/// correlated augmentation noise.
fn upsample_nearest<S: Scalar>(t: &Tensor<S>, f: usize) -> Tensor<S> {
    let d = t.shape();
    let (c, h, w) = (d[0], d[1], d[2]);
    let mut out = Tensor::zeros(&[c, h * f, w * f]);
    for ch in 0..c {
        for y in 0..h * f {
            for x in 0..w * f {
                out[ch * h * f * w * f + y * w * f + x] = t[ch * h * w + (y / f) * w + x / f];
            }
        }
    }
    out
}

/// `noise_std` adds Gaussian noise of that standard deviation to the clean
/// shadow-free latent of each drawn sample, and `resid_mix` additionally
/// interpolates the latent a uniform-random fraction (up to `resid_mix`)
/// back toward the shadow latent. Both model the imperfect latents the
/// controller receives from the sampler at inference time: white estimation
/// noise plus under-removed shadow residual. Zero disables either part.
pub fn train_detail_decoder<S: Scalar>(
    dd: &mut DetailDecoder<S>,
    ae: &Autoencoder<S>,
    data: &[DetailItem<S>],
    opts: &PretrainCfg,
    noise_std: f64,
    resid_mix: f64,
    mut log: impl FnMut(usize, f64, f64),
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Data("no detail-decoder training data".into()));
    }
    let frozen = ae.params.checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let adamw = AdamWConfig::default();
    // encoder passes are deterministic; cache them once
    let cached: Vec<(Tensor<S>, [Tensor<S>; 3])> = data
        .par_iter()
        .map(|item| ae.encode_with_features(&item.shadow))
        .collect::<Result<_>>()?;
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch: Vec<(usize, Tensor<S>)> = (0..opts.batch)
            .map(|_| {
                let idx = rng.gen_range(0..data.len());
                let mut lat = data[idx].latent_sf.clone();
                if resid_mix > 0.0 {
                    let a = S::of_f64(rng.gen::<f64>() * resid_mix);
                    let toward = cached[idx]
                        .0
                        .sub(&lat)
                        .expect("latent shapes match");
                    lat = lat
                        .add(&toward.scale(a))
                        .expect("latent shapes match");
                }
                if noise_std > 0.0 {
                    // Mix white and spatially correlated noise across several
                    // correlation scales: the sampler's error has both a white
                    // and a low-frequency structured component, and only
                    // training against the latter teaches the controller to
                    // lean on the skips.
                    let dims = lat.shape().to_vec();
                    let f = [1usize, 2, 4, 8][rng.gen_range(0..4)];
                    let noise = if f > 1 && dims[1] % f == 0 && dims[2] % f == 0 {
                        let coarse =
                            Tensor::<S>::randn(&mut rng, &[dims[0], dims[1] / f, dims[2] / f]);
                        upsample_nearest(&coarse, f)
                    } else {
                        Tensor::<S>::randn(&mut rng, lat.shape())
                    };
                    lat = lat
                        .add(&noise.scale(S::of_f64(noise_std)))
                        .expect("latent and noise shapes match");
                }
                (idx, lat)
            })
            .collect();
        let dd_ref = &*dd;
        let results: Vec<Result<(f64, Vec<Tensor<S>>)>> = batch
            .par_iter()
            .map(|(idx, lat)| {
                let item = &data[*idx];
                let (latent_shadow, feats) = &cached[*idx];
                let mut tape = Tape::new();
                let mut binds = Bindings::new();
                let out = dd_ref.forward_tape(
                    &mut tape,
                    &mut binds,
                    lat,
                    latent_shadow,
                    feats,
                    &item.shadow,
                )?;
                let loss_id = tape.mse_loss(out, item.target.clone())?;
                let loss = tape.value(loss_id).item().as_f64();
                let grads = tape.backward(loss_id)?;
                let mut buf = grad_buffer(&dd_ref.ctrl);
                binds.collect(&grads, &mut buf)?;
                Ok((loss, buf))
            })
            .collect();
        let mut total = grad_buffer(&dd.ctrl);
        let mut loss_sum = 0.0;
        for r in results {
            let (l, buf) = r?;
            loss_sum += l;
            merge_grad_buffers(&mut total, &buf)?;
        }
        let mean_loss = loss_sum / opts.batch as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "detail-decoder loss non-finite at step {step}"
            )));
        }
        losses.push(mean_loss);
        dd.ctrl.zero_grads();
        apply_grad_buffer(&mut dd.ctrl, &total)?;
        dd.ctrl.scale_grads(S::of_f64(1.0 / opts.batch as f64));
        let lr = cosine_lr(step as u64, opts.steps.max(1) as u64, opts.lr0, opts.lr1)?;
        dd.ctrl.adamw_step(lr, &adamw);
        if opts.log_every > 0 && step % opts.log_every == 0 {
            log(step, lr, mean_loss);
        }
    }
    debug_assert_eq!(ae.params.checksum(), frozen);
    Ok(losses)
}
