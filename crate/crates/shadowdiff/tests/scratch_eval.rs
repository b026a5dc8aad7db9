use shadowdiff::config::RunConfig;
use shadowdiff::diffusion::sample;
use shadowdiff::pipeline::{eval_split, input_baseline, SampleOpts, TrainedModel};
use shadowdiff::schedule::TimestepSubsequence;
use shadowdiff::synthdata::load_split;
use std::path::Path;

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

#[test]
#[ignore]
fn scratch_eval() {
    let cfg = RunConfig::parse(
        &std::fs::read_to_string("/root/scratch_run/run3.cfg").unwrap(),
    )
    .unwrap();
    let model = TrainedModel::load(&cfg, Path::new("/root/scratch_run/out3/model_full.ckpt"))
        .expect("load model");
    let base = input_baseline(&cfg, "test").expect("baseline");
    println!(
        "baseline: psnr={:.3} psnr_s={:.3} psnr_ns={:.3}",
        base.psnr,
        base.psnr_s.unwrap(),
        base.psnr_ns.unwrap()
    );
    let opts = SampleOpts::from_config(&cfg);
    let (_, rep) = eval_split(&cfg, &model, "test", &opts).expect("eval");
    println!(
        "full: psnr={:.3} psnr_s={:.3} psnr_ns={:.3}",
        rep.psnr,
        rep.psnr_s.unwrap(),
        rep.psnr_ns.unwrap()
    );
    let bopts = SampleOpts {
        base_decoder: true,
        ..opts
    };
    let (_, brep) = eval_split(&cfg, &model, "test", &bopts).expect("eval");
    println!(
        "base_dec: psnr={:.3} psnr_s={:.3} psnr_ns={:.3}",
        brep.psnr,
        brep.psnr_s.unwrap(),
        brep.psnr_ns.unwrap()
    );

    // Oracle latent: decode GT shadow-free latent through the detail decoder.
    let examples = load_split(Path::new(&cfg.data_dir), "test").expect("split");
    let ae = model.ae.as_ref().unwrap();
    let dd = model.detail.as_ref().unwrap();
    use shadowdiff::metrics::evaluate_one;
    let (mut p_sum, mut s_sum, mut ns_sum) = (0.0, 0.0, 0.0);
    for e in examples.iter().take(10) {
        let lat = ae.encode(&e.shadow_free).unwrap();
        let img = dd.decode_detail(ae, &lat, &e.shadow).unwrap();
        let row = evaluate_one(&img, &e.shadow_free, &e.mask, "x").unwrap();
        p_sum += row.psnr;
        s_sum += row.psnr_s.unwrap();
        ns_sum += row.psnr_ns.unwrap();
    }
    println!(
        "detail decode of GT latent (10 imgs): psnr={:.3} psnr_s={:.3} psnr_ns={:.3}",
        p_sum / 10.0,
        s_sum / 10.0,
        ns_sum / 10.0
    );

    // Latent-space error of the sampler output vs the GT latent.
    let scale = model.latent_scale as f32;
    let steps = TimestepSubsequence::make_strided(model.sched.t_max(), opts.steps).unwrap();
    let view = model.den.view_with_ctrl(&model.ema);
    let mut m_in = 0.0;
    let mut m_out = 0.0;
    for (i, e) in examples.iter().take(10).enumerate() {
        let z_s = ae.encode(&e.shadow).unwrap().scale(scale);
        let z_gt = ae.encode(&e.shadow_free).unwrap().scale(scale);
        let z0 = sample(&view, &z_s, &model.sched, &steps, opts.seed + i as u64, None).unwrap();
        m_in += mse(z_s.data(), z_gt.data());
        m_out += mse(z0.data(), z_gt.data());
    }
    println!(
        "latent mse (10 imgs): shadow-vs-gt={:.5} sampled-vs-gt={:.5}",
        m_in / 10.0,
        m_out / 10.0
    );
}

#[test]
#[ignore]
fn scratch_detail_noise() {
    use shadowdiff::autoencoder::{train_detail_decoder, DetailDecoder, DetailItem};
    use shadowdiff::denoiser::PretrainCfg;

    let cfg = RunConfig::parse(
        &std::fs::read_to_string("/root/scratch_run/run3.cfg").unwrap(),
    )
    .unwrap();
    let mut model = TrainedModel::load(&cfg, Path::new("/root/scratch_run/out3/model_full.ckpt"))
        .expect("load model");
    let ae = model.ae.clone().unwrap();
    let train = load_split(Path::new(&cfg.data_dir), "train").unwrap();
    let data: Vec<DetailItem<f32>> = train
        .iter()
        .map(|e| DetailItem {
            shadow: e.shadow.clone(),
            target: e.shadow_free.clone(),
            latent_sf: ae.encode(&e.shadow_free).unwrap(),
        })
        .collect();
    let mut dd = DetailDecoder::from_autoencoder(&ae, cfg.seed ^ 0xdd).unwrap();
    let opts = PretrainCfg {
        steps: 800,
        batch: cfg.batch,
        lr0: cfg.detail_lr,
        lr1: cfg.detail_lr / 50.0,
        seed: cfg.seed ^ 0xde7a11,
        log_every: 100,
    };
    let noise_std = 0.4 / model.latent_scale;
    train_detail_decoder(&mut dd, &ae, &data, &opts, noise_std, 0.0, |s, _, l| {
        println!("detail step={s} loss={l:.6}");
    })
    .unwrap();
    {
        use shadowdiff::checkpoint::Checkpoint;
        use shadowdiff::schedule::ScheduleTable;
        let sched = ScheduleTable::build(cfg.t_max, cfg.beta_min, cfg.beta_max).unwrap();
        let mut ck = Checkpoint::new(&sched, &cfg.hash());
        ck.put_store("detail", &dd.ctrl);
        ck.save(Path::new("/root/scratch_run/out3/detail_aug.ckpt")).unwrap();
    }
    model.detail = Some(dd);

    let base = input_baseline(&cfg, "test").expect("baseline");
    let sopts = SampleOpts::from_config(&cfg);
    let (_, rep) = eval_split(&cfg, &model, "test", &sopts).expect("eval");
    println!(
        "noise-aug full: psnr={:.3} (base {:.3}) psnr_s={:.3} ({:.3}) psnr_ns={:.3} ({:.3})",
        rep.psnr,
        base.psnr,
        rep.psnr_s.unwrap(),
        base.psnr_s.unwrap(),
        rep.psnr_ns.unwrap(),
        base.psnr_ns.unwrap()
    );
}


#[test]
#[ignore]
fn scratch_noise_curve() {
    use rand::SeedableRng;
    use shadowdiff::autoencoder::DetailDecoder;
    use shadowdiff::checkpoint::Checkpoint;
    use shadowdiff::metrics::evaluate_one;
    use shadowdiff::tensor::Tensor;

    let cfg = RunConfig::parse(
        &std::fs::read_to_string("/root/scratch_run/run3.cfg").unwrap(),
    )
    .unwrap();
    let model = TrainedModel::load(&cfg, Path::new("/root/scratch_run/out3/model_full.ckpt"))
        .expect("load model");
    let ae = model.ae.clone().unwrap();
    let ck = Checkpoint::load(Path::new("/root/scratch_run/out3/detail_aug.ckpt")).unwrap();
    let dd = DetailDecoder {
        cfg: ae.cfg,
        ctrl: ck.get_store("detail").unwrap(),
    };
    let examples = load_split(Path::new(&cfg.data_dir), "test").unwrap();
    let scale = model.latent_scale as f32;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for sigma in [0.0f32, 0.15, 0.25, 0.4] {
        let (mut p, mut s_, mut ns) = (0.0, 0.0, 0.0);
        for e in examples.iter().take(10) {
            let lat = ae.encode(&e.shadow_free).unwrap();
            let noise = Tensor::<f32>::randn(&mut rng, lat.shape());
            let lat = lat.add(&noise.scale(sigma / scale)).unwrap();
            let img = dd.decode_detail(&ae, &lat, &e.shadow).unwrap();
            let row = evaluate_one(&img, &e.shadow_free, &e.mask, "x").unwrap();
            p += row.psnr;
            s_ += row.psnr_s.unwrap();
            ns += row.psnr_ns.unwrap();
        }
        println!(
            "sigma={sigma:.2}: psnr={:.2} psnr_s={:.2} psnr_ns={:.2}",
            p / 10.0,
            s_ / 10.0,
            ns / 10.0
        );
    }
}


#[test]
#[ignore]
fn scratch_latent_diag() {
    use shadowdiff::diffusion::sample;
    use shadowdiff::pipeline::downsample_mask;
    use shadowdiff::schedule::TimestepSubsequence;

    let cfg = RunConfig::parse(
        &std::fs::read_to_string("/root/scratch_run/run3.cfg").unwrap(),
    )
    .unwrap();
    let model = TrainedModel::load(&cfg, Path::new("/root/scratch_run/out3/model_full.ckpt"))
        .expect("load model");
    let ae = model.ae.clone().unwrap();
    let examples = load_split(Path::new(&cfg.data_dir), "test").unwrap();
    let scale = model.latent_scale as f32;
    let steps = TimestepSubsequence::make_strided(model.sched.t_max(), cfg.sample_steps).unwrap();
    let view = model.den.view_with_ctrl(&model.ema);
    let opts = SampleOpts::from_config(&cfg);
    for (i, e) in examples.iter().take(5).enumerate() {
        let z_s = ae.encode(&e.shadow).unwrap().scale(scale);
        let z_gt = ae.encode(&e.shadow_free).unwrap().scale(scale);
        let z0 = sample(&view, &z_s, &model.sched, &steps, opts.seed + i as u64, None).unwrap();
        let m = downsample_mask(&e.mask).unwrap();
        let hw = 16 * 16;
        let (mut in_g, mut out_g, mut in_s, mut out_s, mut n_in, mut n_out) =
            (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0usize, 0usize);
        let (mut mean_gt, mut mean_z0, mut mean_zs) = (0.0f64, 0.0, 0.0);
        for c in 0..4 {
            for px in 0..hw {
                let idx = c * hw + px;
                let dg = (z0[idx] - z_gt[idx]) as f64;
                let ds = (z0[idx] - z_s[idx]) as f64;
                mean_gt += z_gt[idx] as f64;
                mean_z0 += z0[idx] as f64;
                mean_zs += z_s[idx] as f64;
                if m[px] > 0.5 {
                    in_g += dg * dg;
                    in_s += ds * ds;
                    n_in += 1;
                } else {
                    out_g += dg * dg;
                    out_s += ds * ds;
                    n_out += 1;
                }
            }
        }
        let n = (4 * hw) as f64;
        println!(
            "img{i}: mse_vs_gt in={:.4} out={:.4} | mse_vs_shadow in={:.4} out={:.4} | means gt={:.3} z0={:.3} zs={:.3}",
            in_g / n_in as f64,
            out_g / n_out as f64,
            in_s / n_in as f64,
            out_s / n_out as f64,
            mean_gt / n,
            mean_z0 / n,
            mean_zs / n
        );
    }
}


#[test]
#[ignore]
fn scratch_ctrl_long() {
    use shadowdiff::autoencoder::DetailDecoder;
    use shadowdiff::checkpoint::Checkpoint;
    use shadowdiff::denoiser::ControlledDenoiser;
    use shadowdiff::diffusion::SamplePair;
    use shadowdiff::nn::ParamStore;
    use shadowdiff::pipeline::load_ae;
    use shadowdiff::schedule::ScheduleTable;
    use shadowdiff::training::{SelfEnhanceConfig, TrainCfg, TrainItem, TrainMode, Trainer};

    let mut cfg = RunConfig::parse(
        &std::fs::read_to_string("/root/scratch_run/run3.cfg").unwrap(),
    )
    .unwrap();
    cfg.ctrl_steps = std::env::var("CTRL_STEPS").map(|v| v.parse().unwrap()).unwrap_or(4000);
    let (ae, scale) = load_ae(&cfg).unwrap();
    let base_ck = Checkpoint::load(Path::new("/root/scratch_run/out3/base.ckpt")).unwrap();
    let base: ParamStore<f32> = base_ck.get_store("base").unwrap();
    let use_mask = std::env::var("MASK_COND").is_ok();
    cfg.mask_cond = use_mask;
    let dcfg = shadowdiff::denoiser::DenoiserCfg {
        latent_ch: cfg.latent_ch,
        ch: cfg.ch,
        emb_dim: cfg.emb_dim,
        use_mask,
    };
    let den = ControlledDenoiser::from_base(base, dcfg).unwrap();
    let train = load_split(Path::new(&cfg.data_dir), "train").unwrap();
    let items: Vec<TrainItem<f32>> = train
        .iter()
        .map(|e| TrainItem {
            pair: SamplePair::new(
                ae.encode(&e.shadow_free).unwrap().scale(scale as f32),
                ae.encode(&e.shadow).unwrap().scale(scale as f32),
            )
            .unwrap(),
            mask: if use_mask {
                Some(shadowdiff::pipeline::downsample_mask(&e.mask).unwrap())
            } else {
                None
            },
        })
        .collect();
    let sched = ScheduleTable::build(cfg.t_max, cfg.beta_min, cfg.beta_max).unwrap();
    let tcfg = TrainCfg {
        steps: cfg.ctrl_steps,
        batch: cfg.batch,
        lr0: cfg.ctrl_lr,
        lr1: cfg.ctrl_lr / 50.0,
        seed: cfg.seed,
        se_seed: cfg.se_seed,
        mode: TrainMode::Residual,
        se: SelfEnhanceConfig {
            enabled: true,
            prob: std::env::var("SE_PROB").map(|v| v.parse().unwrap()).unwrap_or(cfg.se_prob),
            u_max: cfg.u_max,
            ema_mix: cfg.effective_ema_mix(),
            per_sample: false,
        },
        log_every: 200,
    };
    let mut trainer = Trainer::new(den, sched.clone(), tcfg);
    trainer
        .train(&items, |st| {
            println!("ctrl step={} loss={:.4} pseudo={}", st.step, st.loss, st.pseudo_branch);
        })
        .unwrap();

    let mut model = TrainedModel::load(&cfg, Path::new("/root/scratch_run/out3/model_full.ckpt"))
        .expect("load model");
    model.den = trainer.den;
    model.ema = trainer.ema;
    let ck = Checkpoint::load(Path::new("/root/scratch_run/out3/detail_aug.ckpt")).unwrap();
    model.detail = Some(DetailDecoder {
        cfg: ae.cfg,
        ctrl: ck.get_store("detail").unwrap(),
    });
    let mut ck2 = Checkpoint::new(&sched, &cfg.hash());
    ck2.put_store("ctrl", &model.den.ctrl);
    ck2.put_store("ema", &model.ema);
    ck2.save(Path::new("/root/scratch_run/out3/ctrl4000.ckpt")).unwrap();

    let base_rep = input_baseline(&cfg, "test").expect("baseline");
    let sopts = SampleOpts::from_config(&cfg);
    let (_, rep) = eval_split(&cfg, &model, "test", &sopts).expect("eval");
    println!(
        "ctrl4000 full: psnr={:.3} (base {:.3}) psnr_s={:.3} ({:.3}) psnr_ns={:.3} ({:.3})",
        rep.psnr,
        base_rep.psnr,
        rep.psnr_s.unwrap(),
        base_rep.psnr_s.unwrap(),
        rep.psnr_ns.unwrap(),
        base_rep.psnr_ns.unwrap()
    );
}

#[test]
#[ignore]
fn scratch_clamp() {
    use shadowdiff::autoencoder::DetailDecoder;
    use shadowdiff::checkpoint::Checkpoint;
    use shadowdiff::diffusion::{forward_noise, nrd_decompose, sampler_step, Denoiser};
    use shadowdiff::metrics::evaluate_one;
    use shadowdiff::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let cfg = RunConfig::parse(
        &std::fs::read_to_string("/root/scratch_run/run3.cfg").unwrap(),
    )
    .unwrap();
    let ckpt = std::env::var("CKPT").unwrap_or_else(|_| "model_full.ckpt".into());
    let mut model = TrainedModel::load(&cfg, Path::new(&format!("/root/scratch_run/out3/{ckpt}")))
        .expect("load model");
    if ckpt != "model_full.ckpt" {
        // ctrl-only checkpoints carry just the control/EMA stores.
        let full = TrainedModel::load(&cfg, Path::new("/root/scratch_run/out3/model_full.ckpt")).unwrap();
        let ck = Checkpoint::load(Path::new(&format!("/root/scratch_run/out3/{ckpt}"))).unwrap();
        model = full;
        model.den.ctrl = ck.get_store("ctrl").unwrap();
        model.ema = ck.get_store("ema").unwrap();
    }
    let ae_cfg = model.ae.as_ref().unwrap().cfg;
    let ck = Checkpoint::load(Path::new("/root/scratch_run/out3/detail_aug.ckpt")).unwrap();
    model.detail = Some(DetailDecoder {
        cfg: ae_cfg,
        ctrl: ck.get_store("detail").unwrap(),
    });
    let clamp: f32 = std::env::var("CLAMP").map(|v| v.parse().unwrap()).unwrap_or(1.0);

    let examples = load_split(Path::new(&cfg.data_dir), "test").expect("split");
    let ae = model.ae.as_ref().unwrap();
    let dd = model.detail.as_ref().unwrap();
    let scale = model.latent_scale as f32;
    let opts = SampleOpts::from_config(&cfg);
    let steps = TimestepSubsequence::make_strided(model.sched.t_max(), opts.steps).unwrap();
    let view = model.den.view_with_ctrl(&model.ema);
    let sched = &model.sched;

    let (mut p_sum, mut s_sum, mut ns_sum) = (0.0, 0.0, 0.0);
    for (i, e) in examples.iter().enumerate() {
        let z_s = ae.encode(&e.shadow).unwrap().scale(scale);
        let t_max = sched.t_max();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + i as u64);
        let eps = Tensor::<f32>::randn(&mut rng, z_s.shape());
        let mut z_t = forward_noise(&z_s, &eps, t_max, sched).unwrap();
        let taus = steps.steps();
        let mut z0 = None;
        for j in (0..taus.len()).rev() {
            let t = taus[j];
            let eps_net = view.predict(&z_t, t, &z_s, None).unwrap();
            let mut nrd = nrd_decompose(&z_s, &z_t, &eps_net, t, sched).unwrap();
            if j == 0 {
                z0 = Some(z_s.sub(&nrd.r_hat).unwrap());
                break;
            }
            nrd.r_hat = nrd.r_hat.map(|v| v.clamp(-clamp, clamp));
            z_t = sampler_step(&z_s, &nrd, t, taus[j - 1], sched).unwrap();
        }
        let lat = z0.unwrap().scale(1.0 / scale);
        let img = dd.decode_detail(ae, &lat, &e.shadow).unwrap();
        let img = img.map(|v| v.clamp(0.0, 1.0));
        let row = evaluate_one(&img, &e.shadow_free, &e.mask, "x").unwrap();
        p_sum += row.psnr;
        s_sum += row.psnr_s.unwrap();
        ns_sum += row.psnr_ns.unwrap();
    }
    let n = examples.len() as f64;
    println!(
        "clamp={} ckpt={}: psnr={:.3} psnr_s={:.3} psnr_ns={:.3}",
        clamp, ckpt, p_sum / n, s_sum / n, ns_sum / n
    );
}

#[test]
#[ignore]
fn scratch_final_eval() {
    use shadowdiff::autoencoder::DetailDecoder;
    use shadowdiff::checkpoint::Checkpoint;

    let mut cfg = RunConfig::parse(
        &std::fs::read_to_string("/root/scratch_run/run3.cfg").unwrap(),
    )
    .unwrap();
    if let Ok(c) = std::env::var("CLAMP") {
        cfg.resid_clamp = c.parse().unwrap();
    }
    let mut model = TrainedModel::load(&cfg, Path::new("/root/scratch_run/out3/model_full.ckpt"))
        .expect("load model");
    let ae_cfg = model.ae.as_ref().unwrap().cfg;
    let ck = Checkpoint::load(Path::new("/root/scratch_run/out3/detail_aug.ckpt")).unwrap();
    model.detail = Some(DetailDecoder {
        cfg: ae_cfg,
        ctrl: ck.get_store("detail").unwrap(),
    });
    let base = input_baseline(&cfg, "test").expect("baseline");
    let opts = SampleOpts::from_config(&cfg);
    let (_, rep) = eval_split(&cfg, &model, "test", &opts).expect("eval");
    println!(
        "final clamp={} full: psnr={:.3} (base {:.3}) psnr_s={:.3} ({:.3}) psnr_ns={:.3} ({:.3})",
        cfg.resid_clamp,
        rep.psnr,
        base.psnr,
        rep.psnr_s.unwrap(),
        base.psnr_s.unwrap(),
        rep.psnr_ns.unwrap(),
        base.psnr_ns.unwrap()
    );
}
