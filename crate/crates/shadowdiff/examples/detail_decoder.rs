//! Build a small autoencoder, derive the detail-preserving decoder from it,
//! and demonstrate its zero-initialization contract: before any training the
//! detail decoder reproduces the conditioning shadow image exactly, because
//! every deformable skip block and the residual head start at zero.
//!
//! Run with: cargo run --example detail_decoder

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shadowdiff::autoencoder::{AeCfg, Autoencoder, DetailDecoder};
use shadowdiff::Tensor;

fn main() -> shadowdiff::Result<()> {
    let cfg = AeCfg {
        img_ch: 3,
        c1: 8,
        c2: 16,
        latent_ch: 4,
    };
    let ae = Autoencoder::<f32>::init(cfg, 42)?;
    let dd = DetailDecoder::from_autoencoder(&ae, 43)?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shadow = Tensor::<f32>::randn(&mut rng, &[3, 16, 16]).map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0));
    let latent_sf = Tensor::<f32>::randn(&mut rng, &[4, 4, 4]);

    // per-block check: each deformable skip contributes nothing at init
    let f3 = Tensor::<f32>::randn(&mut rng, &[16, 4, 4]);
    let h3 = Tensor::<f32>::randn(&mut rng, &[16, 4, 4]);
    let skip = dd.deform_skip("zd3", &f3, &h3)?;
    let max_abs = (0..skip.len()).map(|i| skip[i].abs()).fold(0.0, f32::max);
    println!("zd3 skip output at init: |out|_max = {max_abs}");

    // whole-network check: output == shadow image, bit for bit
    let out = dd.decode_detail(&ae, &latent_sf, &shadow)?;
    let identical = (0..out.len()).all(|i| out[i] == shadow[i]);
    println!("decode_detail == shadow image at init (bitwise): {identical}");
    assert!(identical);

    // the plain decoder, by contrast, ignores the shadow image entirely
    let plain = ae.decode(&latent_sf)?;
    println!(
        "plain decoder output shape {:?} (no conditioning path)",
        plain.shape()
    );
    Ok(())
}
