//! Build the frozen base noise predictor, clone its encoder into a control
//! branch with a widened input conv and zero-initialized fuse convs, and
//! verify the structural guarantee: at initialization the controlled network
//! is bit-for-bit identical to the base network.
//!
//! Run with: cargo run --example control_identity

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shadowdiff::denoiser::{init_base_unet, ControlledDenoiser, DenoiserCfg};
use shadowdiff::Tensor;

fn main() -> shadowdiff::Result<()> {
    let cfg = DenoiserCfg {
        latent_ch: 4,
        ch: 16,
        emb_dim: 32,
        use_mask: false,
    };
    let base = init_base_unet::<f32>(&cfg, 42)?;
    println!("base parameters: {}", base.entries().len());
    let den = ControlledDenoiser::from_base(base, cfg)?;
    println!("control parameters: {}", den.ctrl.entries().len());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z_t = Tensor::<f32>::randn(&mut rng, &[4, 16, 16]);
    let z_s = Tensor::<f32>::randn(&mut rng, &[4, 16, 16]);

    let with_ctrl = den.view().predict(&z_t, 50, &z_s, None)?;
    let base_only = den.base_view().predict(&z_t, 50, &z_s, None)?;
    let identical = (0..with_ctrl.len()).all(|i| with_ctrl[i] == base_only[i]);
    println!("controlled output == base output at init (bitwise): {identical}");
    assert!(identical);
    Ok(())
}
