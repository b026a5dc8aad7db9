//! Shared building blocks for the denoiser and autoencoder: parameter
//! initialization and named-layer forward helpers.

use super::store::ParamStore;
use super::tape::{Tape, VarId};
use super::Bindings;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

pub const GN_GROUPS: usize = 8;

pub fn he_conv<S: Scalar, R: Rng>(rng: &mut R, co: usize, ci: usize, k: usize) -> Tensor<S> {
    let std = (2.0 / (ci * k * k) as f64).sqrt();
    Tensor::<f64>::randn(rng, &[co, ci, k, k]).scale(std).cast()
}

pub fn add_conv<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    rng: &mut R,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
) -> Result<()> {
    store.insert(&format!("{name}.w"), he_conv(rng, co, ci, k))?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[co]))
}

pub fn add_zero_conv<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
) -> Result<()> {
    store.insert(&format!("{name}.w"), Tensor::zeros(&[co, ci, k, k]))?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[co]))
}

pub fn add_group_norm<S: Scalar>(store: &mut ParamStore<S>, name: &str, c: usize) -> Result<()> {
    store.insert(&format!("{name}.g"), Tensor::full(&[c], S::one()))?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[c]))
}

pub fn add_linear<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    rng: &mut R,
    name: &str,
    m: usize,
    n: usize,
) -> Result<()> {
    let std = (1.0 / n as f64).sqrt();
    store.insert(
        &format!("{name}.w"),
        Tensor::<f64>::randn(rng, &[m, n]).scale(std).cast(),
    )?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[m]))
}

/// GroupNorm -> SiLU -> conv, timestep bias, GroupNorm -> SiLU -> conv, plus
/// a 1x1 skip projection when the channel count changes.
pub fn add_res_block<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    rng: &mut R,
    prefix: &str,
    cin: usize,
    cout: usize,
    emb_dim: Option<usize>,
) -> Result<()> {
    add_group_norm(store, &format!("{prefix}.gn1"), cin)?;
    add_conv(store, rng, &format!("{prefix}.c1"), cout, cin, 3)?;
    if let Some(d) = emb_dim {
        add_linear(store, rng, &format!("{prefix}.emb"), cout, d)?;
    }
    add_group_norm(store, &format!("{prefix}.gn2"), cout)?;
    add_conv(store, rng, &format!("{prefix}.c2"), cout, cout, 3)?;
    if cin != cout {
        add_conv(store, rng, &format!("{prefix}.skip"), cout, cin, 1)?;
    }
    Ok(())
}

pub fn conv_fwd<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binds: &mut Bindings,
    name: &str,
    x: VarId,
    stride: usize,
    pad: usize,
) -> Result<VarId> {
    let w = binds.bind(tape, store, &format!("{name}.w"))?;
    let b = binds.bind(tape, store, &format!("{name}.b"))?;
    tape.conv2d(x, w, Some(b), stride, pad)
}

pub fn gn_fwd<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binds: &mut Bindings,
    name: &str,
    x: VarId,
) -> Result<VarId> {
    let g = binds.bind(tape, store, &format!("{name}.g"))?;
    let b = binds.bind(tape, store, &format!("{name}.b"))?;
    tape.group_norm(x, g, b, GN_GROUPS)
}

pub fn linear_fwd<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binds: &mut Bindings,
    name: &str,
    x: VarId,
) -> Result<VarId> {
    let w = binds.bind(tape, store, &format!("{name}.w"))?;
    let b = binds.bind(tape, store, &format!("{name}.b"))?;
    tape.linear(x, w, b)
}

pub fn res_block_fwd<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binds: &mut Bindings,
    prefix: &str,
    x: VarId,
    temb: Option<VarId>,
) -> Result<VarId> {
    let mut h = gn_fwd(tape, store, binds, &format!("{prefix}.gn1"), x)?;
    h = tape.silu(h)?;
    h = conv_fwd(tape, store, binds, &format!("{prefix}.c1"), h, 1, 1)?;
    if let Some(te) = temb {
        let bias = linear_fwd(tape, store, binds, &format!("{prefix}.emb"), te)?;
        h = tape.add_channel_bias(h, bias)?;
    }
    h = gn_fwd(tape, store, binds, &format!("{prefix}.gn2"), h)?;
    h = tape.silu(h)?;
    h = conv_fwd(tape, store, binds, &format!("{prefix}.c2"), h, 1, 1)?;
    let skip = if store.index_of(&format!("{prefix}.skip.w")).is_some() {
        conv_fwd(tape, store, binds, &format!("{prefix}.skip"), x, 1, 0)?
    } else {
        x
    };
    tape.add(h, skip)
}

/// Sinusoidal timestep embedding (host-side constant).
pub fn timestep_embedding<S: Scalar>(t: usize, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        data.push(S::of_f64((t as f64 * freq).sin()));
    }
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        data.push(S::of_f64((t as f64 * freq).cos()));
    }
    while data.len() < dim {
        data.push(S::zero());
    }
    Tensor::new(&[dim], data).expect("embedding shape")
}

/// Two-layer MLP over the sinusoidal embedding.
pub fn temb_mlp_fwd<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binds: &mut Bindings,
    prefix: &str,
    t: usize,
    dim: usize,
) -> Result<VarId> {
    let emb = tape.leaf(timestep_embedding(t, dim));
    let h = linear_fwd(tape, store, binds, &format!("{prefix}.l1"), emb)?;
    let h = tape.silu(h)?;
    linear_fwd(tape, store, binds, &format!("{prefix}.l2"), h)
}

pub fn add_temb_mlp<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    rng: &mut R,
    prefix: &str,
    dim: usize,
) -> Result<()> {
    add_linear(store, rng, &format!("{prefix}.l1"), dim, dim)?;
    add_linear(store, rng, &format!("{prefix}.l2"), dim, dim)
}
