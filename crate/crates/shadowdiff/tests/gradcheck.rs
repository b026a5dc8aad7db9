//! Finite-difference checks for every layer type's backward pass, on
//! micro-instances small enough to brute-force.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shadowdiff::nn::gradcheck;
use shadowdiff::nn::tape::Tape;
use shadowdiff::tensor::{Scalar, Tensor};

fn target<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<S> {
    Tensor::randn(rng, shape)
}

/// Run a gradcheck where `build` wires the tape from leaves to the loss.
fn run_check<S: Scalar>(
    inputs: Vec<Tensor<S>>,
    step: f64,
    tol: f64,
    build: impl Fn(&mut Tape<S>, &[usize]) -> usize,
) {
    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<usize> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<S>> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, t)| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    let report = gradcheck::check(&inputs, &analytic, step, |xs| {
        let mut tape = Tape::new();
        let ids: Vec<usize> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item().as_f64()
    });
    assert!(
        report.max_rel_err <= tol,
        "max rel err {} over {} entries exceeds {tol}",
        report.max_rel_err,
        report.n_checked
    );
}

#[test]
fn conv2d_gradcheck_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::<f64>::randn(&mut rng, &[2, 5, 5]);
    let w = Tensor::<f64>::randn(&mut rng, &[3, 2, 3, 3]).scale(0.3);
    let b = Tensor::<f64>::randn(&mut rng, &[3]);
    let t = target::<f64>(&mut rng, &[3, 5, 5]);
    run_check(vec![x, w, b], 1e-6, 1e-6, move |tape, ids| {
        let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1).unwrap();
        tape.mse_loss(y, t.clone()).unwrap()
    });
}

#[test]
fn conv2d_stride2_gradcheck_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::<f64>::randn(&mut rng, &[2, 6, 6]);
    let w = Tensor::<f64>::randn(&mut rng, &[2, 2, 3, 3]).scale(0.3);
    let t = target::<f64>(&mut rng, &[2, 3, 3]);
    run_check(vec![x, w], 1e-6, 1e-6, move |tape, ids| {
        let y = tape.conv2d(ids[0], ids[1], None, 2, 1).unwrap();
        tape.mse_loss(y, t.clone()).unwrap()
    });
}

#[test]
fn zero_conv_gradcheck_f64() {
    // 1x1 conv whose weights start at zero: gradients must still flow
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::<f64>::randn(&mut rng, &[3, 4, 4]);
    let w = Tensor::<f64>::zeros(&[2, 3, 1, 1]);
    let t = target::<f64>(&mut rng, &[2, 4, 4]);
    run_check(vec![x, w], 1e-6, 1e-6, move |tape, ids| {
        let y = tape.conv2d(ids[0], ids[1], None, 1, 0).unwrap();
        tape.mse_loss(y, t.clone()).unwrap()
    });
}

#[test]
fn group_norm_gradcheck_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::<f64>::randn(&mut rng, &[4, 3, 3]);
    let gamma = Tensor::<f64>::randn(&mut rng, &[4]).scale(0.5).map(|v| v + 1.0);
    let beta = Tensor::<f64>::randn(&mut rng, &[4]).scale(0.2);
    let t = target::<f64>(&mut rng, &[4, 3, 3]);
    run_check(vec![x, gamma, beta], 1e-6, 1e-5, move |tape, ids| {
        let y = tape.group_norm(ids[0], ids[1], ids[2], 2).unwrap();
        tape.mse_loss(y, t.clone()).unwrap()
    });
}

#[test]
fn silu_gradcheck_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::<f64>::randn(&mut rng, &[2, 4, 4]).scale(2.0);
    let t = target::<f64>(&mut rng, &[2, 4, 4]);
    run_check(vec![x], 1e-6, 1e-6, move |tape, ids| {
        let y = tape.silu(ids[0]).unwrap();
        tape.mse_loss(y, t.clone()).unwrap()
    });
}

#[test]
fn linear_and_bias_gradcheck_f64() {
    // timestep-embedding path: linear -> silu -> linear -> channel bias
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let emb = Tensor::<f64>::randn(&mut rng, &[6]);
    let w1 = Tensor::<f64>::randn(&mut rng, &[5, 6]).scale(0.4);
    let b1 = Tensor::<f64>::randn(&mut rng, &[5]).scale(0.1);
    let w2 = Tensor::<f64>::randn(&mut rng, &[2, 5]).scale(0.4);
    let b2 = Tensor::<f64>::randn(&mut rng, &[2]).scale(0.1);
    let x = Tensor::<f64>::randn(&mut rng, &[2, 3, 3]);
    let t = target::<f64>(&mut rng, &[2, 3, 3]);
    run_check(vec![emb, w1, b1, w2, b2, x], 1e-6, 1e-6, move |tape, ids| {
        let h = tape.linear(ids[0], ids[1], ids[2]).unwrap();
        let h = tape.silu(h).unwrap();
        let bias = tape.linear(h, ids[3], ids[4]).unwrap();
        let y = tape.add_channel_bias(ids[5], bias).unwrap();
        tape.mse_loss(y, t.clone()).unwrap()
    });
}

#[test]
fn upsample_concat_slice_gradcheck_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let a = Tensor::<f64>::randn(&mut rng, &[2, 2, 2]);
    let b = Tensor::<f64>::randn(&mut rng, &[1, 4, 4]);
    let t = target::<f64>(&mut rng, &[2, 4, 4]);
    run_check(vec![a, b], 1e-6, 1e-6, move |tape, ids| {
        let up = tape.upsample2(ids[0]).unwrap();
        let cat = tape.concat_c(&[up, ids[1]]).unwrap();
        let sl = tape.slice_c(cat, 0, 2).unwrap();
        tape.mse_loss(sl, t.clone()).unwrap()
    });
}

#[test]
fn deform_conv_gradcheck_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::<f64>::randn(&mut rng, &[2, 4, 4]);
    // fractional offsets keep bilinear interpolation away from its corners
    let offsets = Tensor::<f64>::randn(&mut rng, &[18, 4, 4]).scale(0.3).map(|v| v + 0.13);
    let mods = Tensor::<f64>::randn(&mut rng, &[9, 4, 4]).scale(0.5);
    let w = Tensor::<f64>::randn(&mut rng, &[2, 2, 9]).scale(0.4);
    let t = target::<f64>(&mut rng, &[2, 4, 4]);
    run_check(vec![x, offsets, mods, w], 1e-6, 1e-5, move |tape, ids| {
        let y = tape
            .deform_conv(ids[0], ids[1], ids[2], ids[3], 3)
            .unwrap();
        tape.mse_loss(y, t.clone()).unwrap()
    });
}

#[test]
fn deform_conv_gradcheck_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = Tensor::<f32>::randn(&mut rng, &[1, 4, 4]);
    let offsets = Tensor::<f32>::randn(&mut rng, &[18, 4, 4]).scale(0.3).map(|v| v + 0.13);
    let mods = Tensor::<f32>::randn(&mut rng, &[9, 4, 4]).scale(0.5);
    let w = Tensor::<f32>::randn(&mut rng, &[1, 1, 9]).scale(0.4);
    let t = target::<f32>(&mut rng, &[1, 4, 4]);
    run_check(vec![x, offsets, mods, w], 1e-3, 1e-3, move |tape, ids| {
        let y = tape
            .deform_conv(ids[0], ids[1], ids[2], ids[3], 3)
            .unwrap();
        tape.mse_loss(y, t.clone()).unwrap()
    });
}

#[test]
fn conv2d_gradcheck_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = Tensor::<f32>::randn(&mut rng, &[2, 4, 4]);
    let w = Tensor::<f32>::randn(&mut rng, &[2, 2, 3, 3]).scale(0.3);
    let b = Tensor::<f32>::randn(&mut rng, &[2]);
    let t = target::<f32>(&mut rng, &[2, 4, 4]);
    run_check(vec![x, w, b], 1e-3, 1e-3, move |tape, ids| {
        let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1).unwrap();
        tape.mse_loss(y, t.clone()).unwrap()
    });
}
