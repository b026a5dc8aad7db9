//! Raw compute kernels for the network layers: forward and backward passes
//! over [C, H, W] tensors. Single-threaded and deterministic; callers
//! parallelize across batch elements.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn conv2d_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// x [Ci,H,W], w [Co,Ci,k,k], b optional [Co] -> [Co,Ho,Wo].
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (ci, h, wd) = x.dims3()?;
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != ci {
        return Err(Error::ShapeMismatch(format!(
            "conv weight {:?} does not match input {:?}",
            ws,
            x.shape()
        )));
    }
    let (co, k) = (ws[0], ws[2]);
    if ws[3] != k {
        return Err(Error::ShapeMismatch("non-square conv kernel".into()));
    }
    let ho = conv2d_out_dim(h, k, stride, pad);
    let wo = conv2d_out_dim(wd, k, stride, pad);
    let mut out = Tensor::zeros(&[co, ho, wo]);
    if let Some(bias) = b {
        for c in 0..co {
            let bv = bias[c];
            let base = c * ho * wo;
            for i in 0..ho * wo {
                out[base + i] = bv;
            }
        }
    }
    for oc in 0..co {
        for icn in 0..ci {
            for kh in 0..k {
                for kw in 0..k {
                    let wv = w[((oc * ci + icn) * k + kh) * k + kw];
                    if wv == S::zero() {
                        continue;
                    }
                    for oh in 0..ho {
                        let ih = (oh * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        let xrow = icn * h * wd + ih as usize * wd;
                        let orow = oc * ho * wo + oh * wo;
                        for ow in 0..wo {
                            let iw = (ow * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw as usize >= wd {
                                continue;
                            }
                            out[orow + ow] = out[orow + ow] + wv * x[xrow + iw as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of conv2d w.r.t. input, weight, bias.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gy: &Tensor<S>,
    stride: usize,
    pad: usize,
    has_bias: bool,
) -> Result<(Tensor<S>, Tensor<S>, Option<Tensor<S>>)> {
    let (ci, h, wd) = x.dims3()?;
    let ws = w.shape();
    let (co, k) = (ws[0], ws[2]);
    let (gco, ho, wo) = gy.dims3()?;
    if gco != co {
        return Err(Error::ShapeMismatch("upstream grad channels".into()));
    }
    let mut gx = Tensor::zeros(&[ci, h, wd]);
    let mut gw = Tensor::zeros(ws);
    let gb = if has_bias {
        let mut gb = Tensor::zeros(&[co]);
        for oc in 0..co {
            let base = oc * ho * wo;
            let mut s = S::zero();
            for i in 0..ho * wo {
                s = s + gy[base + i];
            }
            gb[oc] = s;
        }
        Some(gb)
    } else {
        None
    };
    for oc in 0..co {
        for icn in 0..ci {
            for kh in 0..k {
                for kw in 0..k {
                    let widx = ((oc * ci + icn) * k + kh) * k + kw;
                    let wv = w[widx];
                    let mut gwv = S::zero();
                    for oh in 0..ho {
                        let ih = (oh * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        let xrow = icn * h * wd + ih as usize * wd;
                        let grow = oc * ho * wo + oh * wo;
                        for ow in 0..wo {
                            let iw = (ow * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw as usize >= wd {
                                continue;
                            }
                            let g = gy[grow + ow];
                            gwv = gwv + g * x[xrow + iw as usize];
                            gx[xrow + iw as usize] = gx[xrow + iw as usize] + g * wv;
                        }
                    }
                    gw[widx] = gw[widx] + gwv;
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Group normalization over [C,H,W] with per-channel affine.
/// Returns (y, per-group mean, per-group inv_std).
pub fn group_norm_forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    groups: usize,
    eps: f64,
) -> Result<(Tensor<S>, Vec<S>, Vec<S>)> {
    let (c, h, w) = x.dims3()?;
    if c % groups != 0 || gamma.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "group_norm: C={c}, groups={groups}, gamma={}, beta={}",
            gamma.len(),
            beta.len()
        )));
    }
    let cg = c / groups;
    let n = (cg * h * w) as f64;
    let mut y = Tensor::zeros(&[c, h, w]);
    let mut means = Vec::with_capacity(groups);
    let mut inv_stds = Vec::with_capacity(groups);
    for g in 0..groups {
        let lo = g * cg * h * w;
        let hi = lo + cg * h * w;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in lo..hi {
            let v = x[i].as_f64();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0);
        let inv = 1.0 / (var + eps).sqrt();
        means.push(S::of_f64(mean));
        inv_stds.push(S::of_f64(inv));
        let mean_s = S::of_f64(mean);
        let inv_s = S::of_f64(inv);
        for ch in 0..cg {
            let cc = g * cg + ch;
            let ga = gamma[cc];
            let be = beta[cc];
            let base = cc * h * w;
            for i in 0..h * w {
                let xh = (x[base + i] - mean_s) * inv_s;
                y[base + i] = ga * xh + be;
            }
        }
    }
    Ok((y, means, inv_stds))
}

pub fn group_norm_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    gy: &Tensor<S>,
    groups: usize,
    means: &[S],
    inv_stds: &[S],
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (c, h, w) = x.dims3()?;
    let cg = c / groups;
    let n = S::of_f64((cg * h * w) as f64);
    let mut gx = Tensor::zeros(&[c, h, w]);
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for g in 0..groups {
        let mean = means[g];
        let inv = inv_stds[g];
        // accumulate per-channel affine grads and group sums of dxhat
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        for ch in 0..cg {
            let cc = g * cg + ch;
            let ga = gamma[cc];
            let base = cc * h * w;
            let mut gg = S::zero();
            let mut gb = S::zero();
            for i in 0..h * w {
                let xh = (x[base + i] - mean) * inv;
                let gyv = gy[base + i];
                gg = gg + gyv * xh;
                gb = gb + gyv;
                let dxh = gyv * ga;
                sum_dxhat = sum_dxhat + dxh;
                sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh;
            }
            ggamma[cc] = gg;
            gbeta[cc] = gb;
        }
        for ch in 0..cg {
            let cc = g * cg + ch;
            let ga = gamma[cc];
            let base = cc * h * w;
            for i in 0..h * w {
                let xh = (x[base + i] - mean) * inv;
                let dxh = gy[base + i] * ga;
                gx[base + i] = inv / n * (n * dxh - sum_dxhat - xh * sum_dxhat_xhat);
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}

/// y[m] = sum_n w[m,n] x[n] + b[m]; x is rank-1.
pub fn linear_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    let n = x.len();
    let ws = w.shape();
    if ws.len() != 2 || ws[1] != n || b.len() != ws[0] {
        return Err(Error::ShapeMismatch(format!(
            "linear: x={n}, w={:?}, b={}",
            ws,
            b.len()
        )));
    }
    let m = ws[0];
    let mut y = Tensor::zeros(&[m]);
    for i in 0..m {
        let mut s = b[i];
        let row = i * n;
        for j in 0..n {
            s = s + w[row + j] * x[j];
        }
        y[i] = s;
    }
    Ok(y)
}

pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let n = x.len();
    let m = gy.len();
    let mut gx = Tensor::zeros(&[n]);
    let mut gw = Tensor::zeros(w.shape());
    for i in 0..m {
        let g = gy[i];
        let row = i * n;
        for j in 0..n {
            gw[row + j] = gw[row + j] + g * x[j];
            gx[j] = gx[j] + g * w[row + j];
        }
    }
    Ok((gx, gw, gy.clone()))
}

pub fn upsample2_forward<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = x.dims3()?;
    let mut y = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for cc in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[cc * h * w + i * w + j];
                let base = cc * 4 * h * w;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    y[base + (2 * i + di) * 2 * w + (2 * j + dj)] = v;
                }
            }
        }
    }
    Ok(y)
}

pub fn upsample2_backward<S: Scalar>(gy: &Tensor<S>, c: usize, h: usize, w: usize) -> Tensor<S> {
    let mut gx = Tensor::zeros(&[c, h, w]);
    for cc in 0..c {
        for i in 0..h {
            for j in 0..w {
                let base = cc * 4 * h * w;
                let mut s = S::zero();
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    s = s + gy[base + (2 * i + di) * 2 * w + (2 * j + dj)];
                }
                gx[cc * h * w + i * w + j] = s;
            }
        }
    }
    gx
}

#[inline]
fn bilinear_sample<S: Scalar>(x: &Tensor<S>, c: usize, h: usize, w: usize, py: f64, px: f64) -> f64 {
    // zero padding outside the image
    let y0 = py.floor();
    let x0 = px.floor();
    let fy = py - y0;
    let fx = px - x0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        let yy = y0 as i64 + dy;
        if yy < 0 || yy >= h as i64 {
            continue;
        }
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let xx = x0 as i64 + dx;
            if xx < 0 || xx >= w as i64 {
                continue;
            }
            acc += wy * wx * x[c * h * w + yy as usize * w + xx as usize].as_f64();
        }
    }
    acc
}

/// Modulated deformable convolution (stride 1), the core of Zero-Deconv:
/// `out[co,p] = sum_k sum_ci w[co,ci,k] * x[ci, p + p_k + dp_k] * ds_k[p]`.
///
/// x [Ci,H,W]; offsets [2K,H,W] as (dy,dx) pairs per tap; mods [K,H,W]
/// multiply each tap directly (no squashing, so zero mods annihilate the
/// output); w [Co,Ci,K] with K = ksize*ksize and base taps centered by
/// `pad = ksize/2`.
pub fn deform_conv_forward<S: Scalar>(
    x: &Tensor<S>,
    offsets: &Tensor<S>,
    mods: &Tensor<S>,
    w: &Tensor<S>,
    ksize: usize,
) -> Result<Tensor<S>> {
    let (ci, h, wd) = x.dims3()?;
    let k_total = ksize * ksize;
    let ws = w.shape();
    if ws != [ws[0], ci, k_total] {
        return Err(Error::ShapeMismatch(format!(
            "deform weight {:?} vs Ci={ci}, K={k_total}",
            ws
        )));
    }
    let co = ws[0];
    let (oc2, oh, ow) = offsets.dims3()?;
    let (mc, mh, mw) = mods.dims3()?;
    if oc2 != 2 * k_total || (oh, ow) != (h, wd) || mc != k_total || (mh, mw) != (h, wd) {
        return Err(Error::ShapeMismatch(
            "deform offsets/mods shape does not match input".into(),
        ));
    }
    let pad = (ksize / 2) as f64;
    let mut out = Tensor::zeros(&[co, h, wd]);
    let mut taps = vec![0.0f64; ci];
    for hh in 0..h {
        for ww in 0..wd {
            let pos = hh * wd + ww;
            for k in 0..k_total {
                let m = mods[k * h * wd + pos].as_f64();
                if m == 0.0 {
                    continue;
                }
                let ky = (k / ksize) as f64 - pad;
                let kx = (k % ksize) as f64 - pad;
                let py = hh as f64 + ky + offsets[(2 * k) * h * wd + pos].as_f64();
                let px = ww as f64 + kx + offsets[(2 * k + 1) * h * wd + pos].as_f64();
                for (c, tap) in taps.iter_mut().enumerate() {
                    *tap = bilinear_sample(x, c, h, wd, py, px);
                }
                for oc in 0..co {
                    let mut s = 0.0;
                    for (c, tap) in taps.iter().enumerate() {
                        s += w[(oc * ci + c) * k_total + k].as_f64() * tap;
                    }
                    let o = oc * h * wd + pos;
                    out[o] = out[o] + S::of_f64(s * m);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of the modulated deformable convolution w.r.t. input features,
/// offsets, modulations, and kernel weights.
pub fn deform_conv_backward<S: Scalar>(
    x: &Tensor<S>,
    offsets: &Tensor<S>,
    mods: &Tensor<S>,
    w: &Tensor<S>,
    ksize: usize,
    gy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (ci, h, wd) = x.dims3()?;
    let k_total = ksize * ksize;
    let co = w.shape()[0];
    let pad = (ksize / 2) as f64;
    let mut gx = Tensor::zeros(&[ci, h, wd]);
    let mut goff = Tensor::zeros(offsets.shape());
    let mut gmod = Tensor::zeros(mods.shape());
    let mut gw = Tensor::zeros(w.shape());
    for hh in 0..h {
        for ww in 0..wd {
            let pos = hh * wd + ww;
            for k in 0..k_total {
                let m = mods[k * h * wd + pos].as_f64();
                let ky = (k / ksize) as f64 - pad;
                let kx = (k % ksize) as f64 - pad;
                let py = hh as f64 + ky + offsets[(2 * k) * h * wd + pos].as_f64();
                let px = ww as f64 + kx + offsets[(2 * k + 1) * h * wd + pos].as_f64();
                let y0 = py.floor();
                let x0 = px.floor();
                let fy = py - y0;
                let fx = px - x0;
                let mut gmod_acc = 0.0;
                let mut gpy_acc = 0.0;
                let mut gpx_acc = 0.0;
                for c in 0..ci {
                    // coefficient of this tap's sampled value in the output
                    let mut coeff = 0.0;
                    for oc in 0..co {
                        let g = gy[oc * h * wd + pos].as_f64();
                        let wv = w[(oc * ci + c) * k_total + k].as_f64();
                        coeff += g * wv;
                        // weight grad needs the sampled value
                    }
                    let v = bilinear_sample(x, c, h, wd, py, px);
                    gmod_acc += coeff * v;
                    for oc in 0..co {
                        let g = gy[oc * h * wd + pos].as_f64();
                        let wi = (oc * ci + c) * k_total + k;
                        gw[wi] = gw[wi] + S::of_f64(g * v * m);
                    }
                    if m != 0.0 {
                        let cm = coeff * m;
                        // scatter into the four corners and accumulate the
                        // position derivatives, zero padding outside
                        let mut corner = |yy: i64, xx: i64, wy: f64, wx: f64| -> f64 {
                            if yy < 0 || yy >= h as i64 || xx < 0 || xx >= wd as i64 {
                                0.0
                            } else {
                                let idx = c * h * wd + yy as usize * wd + xx as usize;
                                gx[idx] = gx[idx] + S::of_f64(cm * wy * wx);
                                x[idx].as_f64()
                            }
                        };
                        let v00 = corner(y0 as i64, x0 as i64, 1.0 - fy, 1.0 - fx);
                        let v01 = corner(y0 as i64, x0 as i64 + 1, 1.0 - fy, fx);
                        let v10 = corner(y0 as i64 + 1, x0 as i64, fy, 1.0 - fx);
                        let v11 = corner(y0 as i64 + 1, x0 as i64 + 1, fy, fx);
                        // d value / d py and / d px
                        let dv_dpy = (v10 - v00) * (1.0 - fx) + (v11 - v01) * fx;
                        let dv_dpx = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy;
                        gpy_acc += cm * dv_dpy;
                        gpx_acc += cm * dv_dpx;
                    }
                }
                let gm = k * h * wd + pos;
                gmod[gm] = gmod[gm] + S::of_f64(gmod_acc);
                let gy_i = (2 * k) * h * wd + pos;
                let gx_i = (2 * k + 1) * h * wd + pos;
                goff[gy_i] = goff[gy_i] + S::of_f64(gpy_acc);
                goff[gx_i] = goff[gx_i] + S::of_f64(gpx_acc);
            }
        }
    }
    Ok((gx, goff, gmod, gw))
}
