//! Run the whole staged pipeline at miniature scale in a temporary
//! directory: generate data, pretrain the autoencoder and the base noise
//! predictor, train the control branch with self-enhancement plus the detail
//! decoder, sample the test split, and print the evaluation report next to
//! the no-op input baseline.
//!
//! Uses tiny sizes so it finishes in well under a minute; the shipped
//! defaults (64x64, hundreds of images) live in the `shadowdiff` binary.
//!
//! Run with: cargo run --release --example end_to_end

use shadowdiff::config::RunConfig;
use shadowdiff::pipeline::{
    self, eval_split, input_baseline, run_gen_data, run_pretrain_ae, run_pretrain_base, run_train,
    SampleOpts, Variant,
};

fn main() -> shadowdiff::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut cfg = RunConfig::default();
    cfg.data_dir = dir.path().join("data").to_string_lossy().into_owned();
    cfg.out_dir = dir.path().join("out").to_string_lossy().into_owned();
    cfg.size = 32;
    cfg.n_train = 12;
    cfg.n_val = 2;
    cfg.n_test = 4;
    cfg.t_max = 20;
    cfg.sample_steps = 4;
    cfg.ch = 16;
    cfg.emb_dim = 32;
    cfg.ae_c1 = 8;
    cfg.ae_c2 = 16;
    cfg.batch = 4;
    cfg.ae_steps = 60;
    cfg.base_steps = 40;
    cfg.ctrl_steps = 60;
    cfg.detail_steps = 40;
    cfg.u_max = 8;
    cfg.validate()?;

    let log = |line: &str| {
        if line.contains("done") || line.contains("step=20") || line.contains("step=40") {
            println!("{line}");
        }
    };

    run_gen_data(&cfg)?;
    println!("dataset ready");
    let ae = run_pretrain_ae(&cfg, log)?;
    println!("autoencoder: val psnr {:.2} dB", ae.val_psnr);
    let base = run_pretrain_base(&cfg, log)?;
    println!(
        "base: holdout loss {:.4} -> {:.4}",
        base.holdout_before, base.holdout_after
    );
    let out = run_train(&cfg, Variant::Full, log)?;
    println!("control branch trained, final loss {:.4}", out.final_loss);

    let opts = SampleOpts::from_config(&cfg);
    let samples = pipeline::run_sample_split(&cfg, &out.model, "test", "demo", &opts)?;
    println!("restored test split -> {}", samples.display());

    let baseline = input_baseline(&cfg, "test")?;
    let (_, report) = eval_split(&cfg, &out.model, "test", &opts)?;
    println!(
        "input baseline: psnr={:.2} ssim={:.4}",
        baseline.psnr, baseline.ssim
    );
    println!(
        "restored:       psnr={:.2} ssim={:.4}",
        report.psnr, report.ssim
    );
    println!("(a run this tiny only roughly beats the baseline; the binary's defaults do much better)");
    Ok(())
}
