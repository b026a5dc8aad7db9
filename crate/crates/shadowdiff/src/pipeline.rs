//! Staged orchestration: dataset generation, autoencoder and base-network
//! pretraining, control-branch + detail-decoder training, sampling, batch
//! evaluation, and the ablation matrix. Every stage is deterministic given
//! the config and writes its artifacts under the configured output dir.

use crate::autoencoder::{
    pretrain_ae, train_detail_decoder, AeCfg, Autoencoder, DetailDecoder, DetailItem,
};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::denoiser::{
    base_eval_loss, init_base_unet, pretrain_base, ControlledDenoiser, DenoiserCfg, PretrainCfg,
};
use crate::diffusion::{sample_clamped, sample_ddim, SamplePair};
use crate::error::{Error, Result};
use crate::imageio::save_png;
use crate::metrics::{aggregate, evaluate_one, rows_to_csv, EvalReport, ImageRow};
use crate::nn::ParamStore;
use crate::schedule::{ScheduleTable, TimestepSubsequence};
use crate::synthdata::{gen_dataset, load_split, DataCfg, Example, Manifest};
use crate::tensor::Tensor;
use crate::training::{SelfEnhanceConfig, TrainCfg, TrainItem, TrainMode, Trainer};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Plain noise prediction and deterministic steps; no residual channel.
    DdimMode,
    /// Self-enhancement disabled (probability 0); online weights sampled.
    NoEma,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DdimMode => "ddim",
            Variant::NoEma => "no_ema",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOpts {
    pub steps: usize,
    pub seed: u64,
    /// Sample with the EMA control weights (the default for `Full`).
    pub use_ema: bool,
    /// Deterministic baseline steps instead of the residual sampler.
    pub ddim: bool,
    /// Decode with the plain decoder instead of the detail decoder.
    pub base_decoder: bool,
}

impl SampleOpts {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            steps: cfg.sample_steps,
            seed: cfg.sample_seed,
            use_ema: true,
            ddim: false,
            base_decoder: false,
        }
    }
}

fn denoiser_cfg(cfg: &RunConfig) -> DenoiserCfg {
    DenoiserCfg {
        latent_ch: if cfg.latent_mode { cfg.latent_ch } else { 3 },
        ch: cfg.ch,
        emb_dim: cfg.emb_dim,
        use_mask: cfg.mask_cond,
    }
}

fn ae_cfg(cfg: &RunConfig) -> AeCfg {
    AeCfg {
        img_ch: 3,
        c1: cfg.ae_c1,
        c2: cfg.ae_c2,
        latent_ch: cfg.latent_ch,
    }
}

fn schedule(cfg: &RunConfig) -> Result<ScheduleTable> {
    ScheduleTable::build(cfg.t_max, cfg.beta_min, cfg.beta_max)
}

/// Average-pool a `[1,H,W]` mask down to the latent grid (factor 4).
pub fn downsample_mask(mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = mask.dims3()?;
    if c != 1 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "mask shape {:?} not divisible by 4",
            mask.shape()
        )));
    }
    let (oh, ow) = (h / 4, w / 4);
    let mut out = Tensor::zeros(&[1, oh, ow]);
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for dy in 0..4 {
                for dx in 0..4 {
                    acc += mask[(4 * y + dy) * w + 4 * x + dx];
                }
            }
            out[y * ow + x] = acc / 16.0;
        }
    }
    Ok(out)
}

fn clamp01(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| v.clamp(0.0, 1.0))
}

pub struct GenDataOutcome {
    pub manifest: Manifest,
    pub dir: PathBuf,
}

pub fn run_gen_data(cfg: &RunConfig) -> Result<GenDataOutcome> {
    let dir = PathBuf::from(&cfg.data_dir);
    let dcfg = DataCfg {
        size: cfg.size,
        train: cfg.n_train,
        val: cfg.n_val,
        test: cfg.n_test,
        seed: cfg.data_seed,
    };
    let manifest = gen_dataset(&dir, &dcfg)?;
    Ok(GenDataOutcome { manifest, dir })
}

pub struct AeOutcome {
    pub ae: Autoencoder<f32>,
    pub latent_scale: f64,
    /// Mean reconstruction quality on the held-out validation split, in dB.
    pub val_psnr: f64,
}

pub fn ae_ckpt_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join("ae.ckpt")
}

pub fn base_ckpt_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join("base.ckpt")
}

pub fn model_ckpt_path(cfg: &RunConfig, variant: Variant) -> PathBuf {
    Path::new(&cfg.out_dir).join(format!("model_{}.ckpt", variant.name()))
}

pub fn detail_ckpt_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join("detail.ckpt")
}

fn sf_images(examples: &[Example]) -> Vec<Tensor<f32>> {
    examples.iter().map(|e| e.shadow_free.clone()).collect()
}

pub fn run_pretrain_ae(cfg: &RunConfig, mut log: impl FnMut(&str)) -> Result<AeOutcome> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let train = load_split(Path::new(&cfg.data_dir), "train")?;
    let val = load_split(Path::new(&cfg.data_dir), "val")?;
    // train on both halves of the pairs so encoders see shadowed content too
    let mut images = sf_images(&train);
    images.extend(train.iter().map(|e| e.shadow.clone()));
    let mut ae = Autoencoder::init(ae_cfg(cfg), cfg.seed)?;
    let opts = PretrainCfg {
        steps: cfg.ae_steps,
        batch: cfg.batch,
        lr0: cfg.ae_lr,
        lr1: cfg.ae_lr / 50.0,
        seed: cfg.seed,
        log_every: 100,
    };
    pretrain_ae(&mut ae, &images, &opts, |step, lr, loss| {
        log(&format!("stage=ae step={step} lr={lr:.3e} loss={loss:.6}"));
    })?;
    let std = ae.latent_std(&images)?;
    if std <= 0.0 {
        return Err(Error::Divergence("degenerate latent spread".into()));
    }
    let latent_scale = 1.0 / std;
    let mut psnr_sum = 0.0;
    for e in &val {
        let recon = clamp01(&ae.decode(&ae.encode(&e.shadow_free)?)?);
        psnr_sum += crate::metrics::psnr(&recon, &e.shadow_free)?;
    }
    let val_psnr = psnr_sum / val.len() as f64;
    log(&format!(
        "stage=ae done latent_scale={latent_scale:.4} val_psnr={val_psnr:.2}"
    ));
    let sched = schedule(cfg)?;
    let mut ck = Checkpoint::new(&sched, &cfg.hash());
    ck.config_json = cfg.to_json();
    ck.meta.insert("latent_scale".into(), latent_scale);
    ck.put_store("ae", &ae.params);
    ck.save(&ae_ckpt_path(cfg))?;
    Ok(AeOutcome {
        ae,
        latent_scale,
        val_psnr,
    })
}

pub fn load_ae(cfg: &RunConfig) -> Result<(Autoencoder<f32>, f64)> {
    let ck = Checkpoint::load(&ae_ckpt_path(cfg))?;
    let params = ck.get_store("ae")?;
    let latent_scale = *ck
        .meta
        .get("latent_scale")
        .ok_or_else(|| Error::Checkpoint("missing latent_scale".into()))?;
    Ok((
        Autoencoder {
            cfg: ae_cfg(cfg),
            params,
        },
        latent_scale,
    ))
}

/// The diffused representation of an image under the current mode.
fn to_latent(
    cfg: &RunConfig,
    ae: Option<&Autoencoder<f32>>,
    scale: f64,
    img: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    if cfg.latent_mode {
        let ae = ae.ok_or_else(|| Error::InvalidArgument("latent mode needs the autoencoder".into()))?;
        Ok(ae.encode(img)?.scale(scale as f32))
    } else {
        Ok(img.map(|v| v * 2.0 - 1.0))
    }
}

pub struct BaseOutcome {
    pub base: ParamStore<f32>,
    pub holdout_before: f64,
    pub holdout_after: f64,
}

pub fn run_pretrain_base(cfg: &RunConfig, mut log: impl FnMut(&str)) -> Result<BaseOutcome> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let sched = schedule(cfg)?;
    let (ae, scale) = if cfg.latent_mode {
        let (ae, s) = load_ae(cfg)?;
        (Some(ae), s)
    } else {
        (None, 1.0)
    };
    let train = load_split(Path::new(&cfg.data_dir), "train")?;
    let val = load_split(Path::new(&cfg.data_dir), "val")?;
    let enc = |exs: &[Example]| -> Result<Vec<Tensor<f32>>> {
        exs.par_iter()
            .map(|e| to_latent(cfg, ae.as_ref(), scale, &e.shadow_free))
            .collect()
    };
    let latents = enc(&train)?;
    let holdout = enc(&val)?;
    let dcfg = denoiser_cfg(cfg);
    let mut base = init_base_unet::<f32>(&dcfg, cfg.seed)?;
    let holdout_before = base_eval_loss(&base, &dcfg, &holdout, &sched, cfg.seed ^ 0x5eed)?;
    let opts = PretrainCfg {
        steps: cfg.base_steps,
        batch: cfg.batch,
        lr0: cfg.base_lr,
        lr1: cfg.base_lr / 50.0,
        seed: cfg.seed,
        log_every: 100,
    };
    pretrain_base(&mut base, &dcfg, &latents, &sched, &opts, |step, lr, loss| {
        log(&format!("stage=base step={step} lr={lr:.3e} loss={loss:.6}"));
    })?;
    let holdout_after = base_eval_loss(&base, &dcfg, &holdout, &sched, cfg.seed ^ 0x5eed)?;
    log(&format!(
        "stage=base done holdout {holdout_before:.4} -> {holdout_after:.4}"
    ));
    let mut ck = Checkpoint::new(&sched, &cfg.hash());
    ck.config_json = cfg.to_json();
    ck.put_store("base", &base);
    ck.save(&base_ckpt_path(cfg))?;
    Ok(BaseOutcome {
        base,
        holdout_before,
        holdout_after,
    })
}

/// Everything needed to restore images end to end.
pub struct TrainedModel {
    pub cfg: RunConfig,
    pub sched: ScheduleTable,
    pub mode: TrainMode,
    pub den: ControlledDenoiser<f32>,
    pub ema: ParamStore<f32>,
    pub ae: Option<Autoencoder<f32>>,
    pub detail: Option<DetailDecoder<f32>>,
    pub latent_scale: f64,
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(&self.sched, &self.cfg.hash());
        ck.config_json = self.cfg.to_json();
        ck.meta.insert("latent_scale".into(), self.latent_scale);
        ck.meta.insert(
            "ddim_mode".into(),
            if self.mode == TrainMode::Ddim { 1.0 } else { 0.0 },
        );
        ck.put_store("base", &self.den.base);
        ck.put_store("ctrl", &self.den.ctrl);
        ck.put_store("ema", &self.ema);
        if let Some(ae) = &self.ae {
            ck.put_store("ae", &ae.params);
        }
        if let Some(dd) = &self.detail {
            ck.put_store("detail", &dd.ctrl);
        }
        ck.save(path)
    }

    pub fn load(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let sched = ck.schedule()?;
        let mode = if ck.meta.get("ddim_mode").copied().unwrap_or(0.0) == 1.0 {
            TrainMode::Ddim
        } else {
            TrainMode::Residual
        };
        let latent_scale = ck.meta.get("latent_scale").copied().unwrap_or(1.0);
        let den = ControlledDenoiser {
            cfg: denoiser_cfg(cfg),
            base: ck.get_store("base")?,
            ctrl: ck.get_store("ctrl")?,
        };
        let ema = ck.get_store("ema")?;
        let ae = if ck.has_store("ae") {
            Some(Autoencoder {
                cfg: ae_cfg(cfg),
                params: ck.get_store("ae")?,
            })
        } else {
            None
        };
        let detail = if ck.has_store("detail") {
            Some(DetailDecoder {
                cfg: ae_cfg(cfg),
                ctrl: ck.get_store("detail")?,
            })
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            sched,
            mode,
            den,
            ema,
            ae,
            detail,
            latent_scale,
        })
    }

    /// Restore one shadow image to a shadow-free estimate.
    pub fn restore(
        &self,
        shadow: &Tensor<f32>,
        mask: Option<&Tensor<f32>>,
        opts: &SampleOpts,
    ) -> Result<Tensor<f32>> {
        let z_s = to_latent(&self.cfg, self.ae.as_ref(), self.latent_scale, shadow)?;
        let latent_mask = match (self.cfg.mask_cond, mask) {
            (true, Some(m)) => Some(if self.cfg.latent_mode {
                downsample_mask(m)?
            } else {
                m.clone()
            }),
            (true, None) => {
                return Err(Error::InvalidArgument(
                    "model conditions on a mask but none was given".into(),
                ))
            }
            (false, _) => None,
        };
        let steps = TimestepSubsequence::make_strided(self.sched.t_max(), opts.steps)?;
        let ema_view = self.den.view_with_ctrl(&self.ema);
        let view = if opts.use_ema {
            ema_view
        } else {
            self.den.view()
        };
        let z0 = if opts.ddim || self.mode == TrainMode::Ddim {
            sample_ddim(&view, &z_s, &self.sched, &steps, opts.seed, latent_mask.as_ref())?
        } else {
            sample_clamped(
                &view,
                &z_s,
                &self.sched,
                &steps,
                opts.seed,
                latent_mask.as_ref(),
                self.cfg.resid_clamp,
            )?
        };
        if self.cfg.latent_mode {
            let ae = self.ae.as_ref().expect("latent mode has an autoencoder");
            let lat = z0.scale(1.0 / self.latent_scale as f32);
            let img = match (&self.detail, opts.base_decoder) {
                (Some(dd), false) => dd.decode_detail(ae, &lat, shadow)?,
                _ => ae.decode(&lat)?,
            };
            Ok(clamp01(&img))
        } else {
            Ok(clamp01(&z0.map(|v| (v + 1.0) / 2.0)))
        }
    }
}

fn make_train_items(
    cfg: &RunConfig,
    ae: Option<&Autoencoder<f32>>,
    scale: f64,
    examples: &[Example],
) -> Result<Vec<TrainItem<f32>>> {
    examples
        .par_iter()
        .map(|e| {
            let z_s = to_latent(cfg, ae, scale, &e.shadow)?;
            let z_0 = to_latent(cfg, ae, scale, &e.shadow_free)?;
            let mask = if cfg.mask_cond {
                Some(if cfg.latent_mode {
                    downsample_mask(&e.mask)?
                } else {
                    e.mask.clone()
                })
            } else {
                None
            };
            Ok(TrainItem {
                pair: SamplePair::new(z_s, z_0)?,
                mask,
            })
        })
        .collect()
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history_len: usize,
    pub final_loss: f64,
}

/// Control-branch training (variant-dependent) plus, in latent mode, the
/// shared detail decoder. The base network and autoencoder stay frozen.
pub fn run_train(
    cfg: &RunConfig,
    variant: Variant,
    mut log: impl FnMut(&str),
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let sched = schedule(cfg)?;
    let (ae, scale) = if cfg.latent_mode {
        let (ae, s) = load_ae(cfg)?;
        (Some(ae), s)
    } else {
        (None, 1.0)
    };
    let base_ck = Checkpoint::load(&base_ckpt_path(cfg))?;
    let base: ParamStore<f32> = base_ck.get_store("base")?;
    let base_sum = base.checksum();
    let dcfg = denoiser_cfg(cfg);
    let den = ControlledDenoiser::from_base(base, dcfg)?;

    let train = load_split(Path::new(&cfg.data_dir), "train")?;
    let items = make_train_items(cfg, ae.as_ref(), scale, &train)?;

    let mode = match variant {
        Variant::DdimMode => TrainMode::Ddim,
        _ => TrainMode::Residual,
    };
    let se = SelfEnhanceConfig {
        enabled: variant != Variant::NoEma,
        prob: if variant == Variant::NoEma { 0.0 } else { cfg.se_prob },
        u_max: cfg.u_max,
        ema_mix: cfg.effective_ema_mix(),
        per_sample: false,
    };
    let tcfg = TrainCfg {
        steps: cfg.ctrl_steps,
        batch: cfg.batch,
        lr0: cfg.ctrl_lr,
        lr1: cfg.ctrl_lr / 50.0,
        seed: cfg.seed,
        se_seed: cfg.se_seed,
        mode,
        se,
        log_every: 100,
    };
    let mut trainer = Trainer::new(den, sched.clone(), tcfg);
    let variant_name = variant.name();
    let history = trainer.train(&items, |s| {
        log(&format!(
            "stage=ctrl variant={variant_name} step={} lr={:.3e} loss={:.6} branch={}",
            s.step,
            s.lr,
            s.loss,
            if s.pseudo_branch { "pseudo" } else { "data" }
        ));
    })?;
    let final_loss = history.last().map(|s| s.loss).unwrap_or(f64::NAN);
    if trainer.den.base.checksum() != base_sum {
        return Err(Error::Divergence("frozen base weights changed".into()));
    }

    // The detail decoder is trained on ground-truth latents only, so it is
    // identical for every variant; train it once and reuse the checkpoint.
    let detail = match &ae {
        Some(ae_ref) => {
            let cache = detail_ckpt_path(cfg);
            if let Ok(ck) = Checkpoint::load(&cache) {
                if ck.config_hash == cfg.hash() && ck.has_store("detail") {
                    log("stage=detail reusing cached decoder");
                    Some(DetailDecoder {
                        cfg: ae_ref.cfg,
                        ctrl: ck.get_store("detail")?,
                    })
                } else {
                    None
                }
            } else {
                None
            }
            .map_or_else(
                || train_detail(cfg, ae_ref, scale, &train, &cache, &mut log).map(Some),
                |dd| Ok(Some(dd)),
            )?
        }
        None => None,
    };

    let model = TrainedModel {
        cfg: cfg.clone(),
        sched,
        mode,
        ema: trainer.ema.clone(),
        den: trainer.den,
        ae,
        detail,
        latent_scale: scale,
    };
    model.save(&model_ckpt_path(cfg, variant))?;
    Ok(TrainOutcome {
        model,
        history_len: history.len(),
        final_loss,
    })
}

fn train_detail(
    cfg: &RunConfig,
    ae_ref: &Autoencoder<f32>,
    scale: f64,
    train: &[Example],
    cache: &Path,
    mut log: impl FnMut(&str),
) -> Result<DetailDecoder<f32>> {
    let mut dd = DetailDecoder::from_autoencoder(ae_ref, cfg.seed ^ 0xdd)?;
    let data: Vec<DetailItem<f32>> = train
        .par_iter()
        .map(|e| {
            Ok(DetailItem {
                shadow: e.shadow.clone(),
                target: e.shadow_free.clone(),
                latent_sf: ae_ref.encode(&e.shadow_free)?,
            })
        })
        .collect::<Result<_>>()?;
    let opts = PretrainCfg {
        steps: cfg.detail_steps,
        batch: cfg.batch,
        lr0: cfg.detail_lr,
        lr1: cfg.detail_lr / 50.0,
        seed: cfg.seed ^ 0xde7a11,
        log_every: 100,
    };
    // detail_noise is expressed in normalized (unit-variance) latent units;
    // the decoder consumes unnormalized latents, so rescale the noise.
    let noise_std = cfg.detail_noise / scale.max(f64::MIN_POSITIVE);
    train_detail_decoder(&mut dd, ae_ref, &data, &opts, noise_std, cfg.detail_resid_mix, |step, lr, loss| {
        log(&format!("stage=detail step={step} lr={lr:.3e} loss={loss:.6}"));
    })?;
    let sched = ScheduleTable::build(cfg.t_max, cfg.beta_min, cfg.beta_max)?;
    let mut ck = Checkpoint::new(&sched, &cfg.hash());
    ck.config_json = cfg.to_json();
    ck.put_store("detail", &dd.ctrl);
    ck.save(cache)?;
    Ok(dd)
}

/// Restore every example of a split and write the outputs as PNGs named
/// like the ground-truth files, into `out_dir/samples_{tag}`.
pub fn run_sample_split(
    cfg: &RunConfig,
    model: &TrainedModel,
    split: &str,
    tag: &str,
    opts: &SampleOpts,
) -> Result<PathBuf> {
    let examples = load_split(Path::new(&cfg.data_dir), split)?;
    let out = Path::new(&cfg.out_dir).join(format!("samples_{tag}"));
    std::fs::create_dir_all(&out)?;
    examples
        .par_iter()
        .enumerate()
        .try_for_each(|(i, e)| -> Result<()> {
            let restored = model.restore(&e.shadow, Some(&e.mask), opts)?;
            save_png(&out.join(format!("{split}_{i}_sf.png")), &restored)
        })?;
    Ok(out)
}

/// Evaluate restored outputs for a split against ground truth and masks.
pub fn eval_split(
    cfg: &RunConfig,
    model: &TrainedModel,
    split: &str,
    opts: &SampleOpts,
) -> Result<(Vec<ImageRow>, EvalReport)> {
    let examples = load_split(Path::new(&cfg.data_dir), split)?;
    let rows: Vec<ImageRow> = examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let restored = model.restore(&e.shadow, Some(&e.mask), opts)?;
            evaluate_one(&restored, &e.shadow_free, &e.mask, &format!("{split}_{i}"))
        })
        .collect::<Result<_>>()?;
    let report = aggregate(&rows)?;
    Ok((rows, report))
}

/// Input-vs-ground-truth metrics for a split (the no-op baseline).
pub fn input_baseline(cfg: &RunConfig, split: &str) -> Result<EvalReport> {
    let examples = load_split(Path::new(&cfg.data_dir), split)?;
    let rows: Vec<ImageRow> = examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| evaluate_one(&e.shadow, &e.shadow_free, &e.mask, &format!("{split}_{i}")))
        .collect::<Result<_>>()?;
    aggregate(&rows)
}

pub struct AblationRow {
    pub name: String,
    pub report: EvalReport,
}

/// The ablation matrix: the full model, deterministic-baseline training,
/// training without self-enhancement, and the full model decoded without
/// detail preservation.
pub fn run_ablate(cfg: &RunConfig, mut log: impl FnMut(&str)) -> Result<Vec<AblationRow>> {
    let full = run_train(cfg, Variant::Full, &mut log)?;
    let ddim = run_train(cfg, Variant::DdimMode, &mut log)?;
    let noema = run_train(cfg, Variant::NoEma, &mut log)?;

    let opts = SampleOpts::from_config(cfg);
    let noema_opts = SampleOpts {
        use_ema: false,
        ..opts
    };
    let base_dec_opts = SampleOpts {
        base_decoder: true,
        ..opts
    };
    let mut rows = Vec::new();
    for (name, model, o) in [
        ("full", &full.model, &opts),
        ("ddim", &ddim.model, &opts),
        ("no_ema", &noema.model, &noema_opts),
        ("base_decoder", &full.model, &base_dec_opts),
    ] {
        let (_, report) = eval_split(cfg, model, "test", o)?;
        log(&format!(
            "ablation {name}: psnr={:.2} ssim={:.4}",
            report.psnr, report.ssim
        ));
        rows.push(AblationRow {
            name: name.to_string(),
            report,
        });
    }
    let table = ablation_csv(&rows);
    std::fs::write(Path::new(&cfg.out_dir).join("ablation.csv"), table)?;
    let json: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            let mut v = r.report.to_json();
            v["name"] = serde_json::json!(r.name);
            v
        })
        .collect();
    std::fs::write(
        Path::new(&cfg.out_dir).join("ablation.json"),
        serde_json::to_string_pretty(&json).expect("report serializes"),
    )?;
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("name,psnr,psnr_s,psnr_ns,ssim,ssim_s,ssim_ns\n");
    for r in rows {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{:.4},{},{},{:.4},{},{}\n",
            r.name,
            r.report.psnr,
            f(r.report.psnr_s),
            f(r.report.psnr_ns),
            r.report.ssim,
            f(r.report.ssim_s),
            f(r.report.ssim_ns),
        ));
    }
    s
}

/// Write per-image CSV and an aggregate JSON report.
pub fn write_reports(
    dir: &Path,
    stem: &str,
    rows: &[ImageRow],
    report: &EvalReport,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.csv")), rows_to_csv(rows))?;
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&report.to_json()).expect("report serializes"),
    )?;
    Ok(())
}
