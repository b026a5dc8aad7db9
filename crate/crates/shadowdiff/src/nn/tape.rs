//! Tape-based reverse-mode differentiation over the kernel set. One tape is
//! built per forward pass (per sample); construction order is topological
//! order, so backward is a single reverse sweep.

use super::kernels;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type VarId = usize;

enum Op<S: Scalar> {
    Leaf,
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    },
    DeformConv {
        x: VarId,
        offsets: VarId,
        mods: VarId,
        w: VarId,
        ksize: usize,
    },
    GroupNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        groups: usize,
        means: Vec<S>,
        inv_stds: Vec<S>,
    },
    Silu {
        x: VarId,
    },
    /// out = ka * a + kb * b
    LinComb {
        a: VarId,
        b: VarId,
        ka: S,
        kb: S,
    },
    AddChannelBias {
        x: VarId,
        bias: VarId,
    },
    ConcatC {
        parts: Vec<VarId>,
    },
    SliceC {
        x: VarId,
        start: usize,
        len: usize,
    },
    Upsample2 {
        x: VarId,
    },
    Linear {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    MseLoss {
        a: VarId,
        target: Tensor<S>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    check_finite: bool,
}

/// Per-node gradients produced by a backward sweep.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<S>> {
        self.grads[id].as_ref()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn value(&self, id: VarId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, what: &str) -> Result<VarId> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> VarId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        self.nodes.len() - 1
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let y = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|i| self.value(i)),
            stride,
            pad,
        )?;
        self.push(y, Op::Conv2d { x, w, b, stride, pad }, "conv2d")
    }

    pub fn deform_conv(
        &mut self,
        x: VarId,
        offsets: VarId,
        mods: VarId,
        w: VarId,
        ksize: usize,
    ) -> Result<VarId> {
        let y = kernels::deform_conv_forward(
            self.value(x),
            self.value(offsets),
            self.value(mods),
            self.value(w),
            ksize,
        )?;
        self.push(
            y,
            Op::DeformConv {
                x,
                offsets,
                mods,
                w,
                ksize,
            },
            "deform_conv",
        )
    }

    pub fn group_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        groups: usize,
    ) -> Result<VarId> {
        let eps = 1e-5;
        let (y, means, inv_stds) = kernels::group_norm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            groups,
            eps,
        )?;
        self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                inv_stds,
            },
            "group_norm",
        )
    }

    pub fn silu(&mut self, x: VarId) -> Result<VarId> {
        let y = self.value(x).map(|v| {
            let s = S::one() / (S::one() + (-v).exp());
            v * s
        });
        self.push(y, Op::Silu { x }, "silu")
    }

    pub fn lin_comb(&mut self, ka: S, a: VarId, kb: S, b: VarId) -> Result<VarId> {
        let y = self.value(a).zip_map(self.value(b), |x, z| ka * x + kb * z)?;
        self.push(y, Op::LinComb { a, b, ka, kb }, "lin_comb")
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.lin_comb(S::one(), a, S::one(), b)
    }

    pub fn add_channel_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(bias).len() != c {
            return Err(Error::ShapeMismatch("channel bias length".into()));
        }
        let mut y = self.value(x).clone();
        for cc in 0..c {
            let bv = self.value(bias)[cc];
            for i in 0..h * w {
                let idx = cc * h * w + i;
                y[idx] = y[idx] + bv;
            }
        }
        self.push(y, Op::AddChannelBias { x, bias }, "add_channel_bias")
    }

    pub fn concat_c(&mut self, parts: &[VarId]) -> Result<VarId> {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&i| self.value(i)).collect();
        let y = Tensor::concat_channels(&tensors)?;
        self.push(
            y,
            Op::ConcatC {
                parts: parts.to_vec(),
            },
            "concat_c",
        )
    }

    pub fn slice_c(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (c, h, w) = self.value(x).dims3()?;
        if start + len > c {
            return Err(Error::ShapeMismatch(format!(
                "slice_c {start}..{} out of {c} channels",
                start + len
            )));
        }
        let data = self.value(x).data()[start * h * w..(start + len) * h * w].to_vec();
        let y = Tensor::new(&[len, h, w], data)?;
        self.push(y, Op::SliceC { x, start, len }, "slice_c")
    }

    pub fn upsample2(&mut self, x: VarId) -> Result<VarId> {
        let y = kernels::upsample2_forward(self.value(x))?;
        self.push(y, Op::Upsample2 { x }, "upsample2")
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let y = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::Linear { x, w, b }, "linear")
    }

    pub fn mse_loss(&mut self, a: VarId, target: Tensor<S>) -> Result<VarId> {
        if self.value(a).shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mse: {:?} vs {:?}",
                self.value(a).shape(),
                target.shape()
            )));
        }
        let mse = S::of_f64(self.value(a).mean_sq_diff(&target));
        self.push(Tensor::scalar(mse), Op::MseLoss { a, target }, "mse_loss")
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: VarId) -> Result<Gradients<S>> {
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), S::one()));
        for i in (0..=root).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *pad,
                        b.is_some(),
                    )?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    if let (Some(bi), Some(gb)) = (b, gb) {
                        accumulate(&mut grads, *bi, gb)?;
                    }
                }
                Op::DeformConv {
                    x,
                    offsets,
                    mods,
                    w,
                    ksize,
                } => {
                    let (gx, goff, gmod, gw) = kernels::deform_conv_backward(
                        self.value(*x),
                        self.value(*offsets),
                        self.value(*mods),
                        self.value(*w),
                        *ksize,
                        &g,
                    )?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *offsets, goff)?;
                    accumulate(&mut grads, *mods, gmod)?;
                    accumulate(&mut grads, *w, gw)?;
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    means,
                    inv_stds,
                } => {
                    let (gx, gg, gb) = kernels::group_norm_backward(
                        self.value(*x),
                        self.value(*gamma),
                        &g,
                        *groups,
                        means,
                        inv_stds,
                    )?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gamma, gg)?;
                    accumulate(&mut grads, *beta, gb)?;
                }
                Op::Silu { x } => {
                    let gx = self.value(*x).zip_map(&g, |v, gy| {
                        let s = S::one() / (S::one() + (-v).exp());
                        gy * s * (S::one() + v * (S::one() - s))
                    })?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::LinComb { a, b, ka, kb } => {
                    accumulate(&mut grads, *a, g.scale(*ka))?;
                    accumulate(&mut grads, *b, g.scale(*kb))?;
                }
                Op::AddChannelBias { x, bias } => {
                    let (c, h, w) = g.dims3()?;
                    let mut gb = Tensor::zeros(&[c]);
                    for cc in 0..c {
                        let mut s = S::zero();
                        for i in 0..h * w {
                            s = s + g[cc * h * w + i];
                        }
                        gb[cc] = s;
                    }
                    accumulate(&mut grads, *x, g.clone())?;
                    accumulate(&mut grads, *bias, gb)?;
                }
                Op::ConcatC { parts } => {
                    let (_, h, w) = g.dims3()?;
                    let mut start = 0;
                    for &p in parts {
                        let (pc, _, _) = self.value(p).dims3()?;
                        let gp = Tensor::new(
                            &[pc, h, w],
                            g.data()[start * h * w..(start + pc) * h * w].to_vec(),
                        )?;
                        accumulate(&mut grads, p, gp)?;
                        start += pc;
                    }
                }
                Op::SliceC { x, start, len } => {
                    let (c, h, w) = self.value(*x).dims3()?;
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    let lo = start * h * w;
                    for i in 0..len * h * w {
                        gx[lo + i] = g[i];
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Upsample2 { x } => {
                    let (c, h, w) = self.value(*x).dims3()?;
                    let gx = kernels::upsample2_backward(&g, c, h, w);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) =
                        kernels::linear_backward(self.value(*x), self.value(*w), &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::MseLoss { a, target } => {
                    let n = S::of_f64(self.value(*a).len() as f64);
                    let k = g.item() * S::of_f64(2.0) / n;
                    let ga = self.value(*a).zip_map(target, |av, tv| k * (av - tv))?;
                    accumulate(&mut grads, *a, ga)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(
    grads: &mut [Option<Tensor<S>>],
    id: VarId,
    g: Tensor<S>,
) -> Result<()> {
    match &mut grads[id] {
        Some(existing) => existing.axpy(S::one(), &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_and_lincomb_backward() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
        let y = tape.lin_comb(2.0, a, 3.0, b).unwrap();
        let target = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        let loss = tape.mse_loss(y, target).unwrap();
        // y = [3.5, 1.0], loss = (3.5^2 + 1) / 2 = 6.625
        assert!((tape.value(loss).item() - 6.625).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        // dloss/dy = y, dloss/da = 2y, dloss/db = 3y
        let ga = g.get(a).unwrap();
        assert!((ga[0] - 2.0 * 3.5).abs() < 1e-12);
        assert!((ga[1] - 2.0 * 1.0).abs() < 1e-12);
        let gb = g.get(b).unwrap();
        assert!((gb[0] - 3.0 * 3.5).abs() < 1e-12);
    }

    #[test]
    fn non_finite_forward_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(1e308));
        let r = tape.lin_comb(1e308, a, 0.0, a);
        assert!(r.is_err());
    }

    #[test]
    fn concat_slice_roundtrip_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(&[1, 2, 2], 1.0));
        let b = tape.leaf(Tensor::full(&[2, 2, 2], 2.0));
        let cat = tape.concat_c(&[a, b]).unwrap();
        let sl = tape.slice_c(cat, 1, 2).unwrap();
        let target = Tensor::zeros(&[2, 2, 2]);
        let loss = tape.mse_loss(sl, target).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(a).is_none() || g.get(a).unwrap().max_abs() == 0.0);
        let gb = g.get(b).unwrap();
        assert!(gb.max_abs() > 0.0);
    }
}
