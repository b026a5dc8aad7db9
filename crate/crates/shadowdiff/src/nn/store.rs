//! Named parameter tensors with gradients and optimizer moments.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    m: Tensor<S>,
    v: Tensor<S>,
}

/// Flat collection of named parameters. Entry order is insertion order and
/// is the deterministic iteration/serialization order.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar = f32> {
    entries: Vec<Param<S>>,
    index: HashMap<String, usize>,
    /// AdamW timestep (number of optimizer steps taken).
    pub step: u64,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        let shape = value.shape().to_vec();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        Ok(&mut self.entries[i].value)
    }

    pub fn entries(&self) -> &[Param<S>] {
        &self.entries
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.iter_mut() {
            p.grad.fill(S::zero());
        }
    }

    pub fn add_grad(&mut self, name: &str, g: &Tensor<S>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        self.entries[i].grad.axpy(S::one(), g)
    }

    pub fn add_grad_by_index(&mut self, i: usize, g: &Tensor<S>) -> Result<()> {
        self.entries[i].grad.axpy(S::one(), g)
    }

    pub fn scale_grads(&mut self, k: S) {
        for p in self.entries.iter_mut() {
            for v in p.grad.data_mut() {
                *v = *v * k;
            }
        }
    }

    pub fn grad_max_abs(&self) -> f64 {
        self.entries
            .iter()
            .map(|p| p.grad.max_abs())
            .fold(0.0, f64::max)
    }

    /// Hash of the exact parameter bytes; used by freeze-invariance checks.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the f64 bit patterns of every value, names included.
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for p in &self.entries {
            for b in p.name.as_bytes() {
                eat(*b);
            }
            for v in p.value.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// EMA blend: every value becomes `mix * main + (1 - mix) * self`.
    /// Gradients and moments of `self` are untouched; `main` is read-only.
    pub fn ema_blend_from(&mut self, main: &Self, mix: f64) -> Result<()> {
        if !self.same_structure(main) {
            return Err(Error::StructureMismatch(
                "EMA copy does not match main parameter structure".into(),
            ));
        }
        let mix_s = S::of_f64(mix);
        let keep = S::of_f64(1.0 - mix);
        for (c, m) in self.entries.iter_mut().zip(main.entries.iter()) {
            for (cv, mv) in c.value.data_mut().iter_mut().zip(m.value.data().iter()) {
                *cv = mix_s * *mv + keep * *cv;
            }
        }
        Ok(())
    }

    /// One decoupled-weight-decay adaptive-moment update using the gradients
    /// currently stored. Advances the internal step counter.
    pub fn adamw_step(&mut self, lr: f64, cfg: &AdamWConfig) {
        self.step += 1;
        let t = self.step as f64;
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for p in self.entries.iter_mut() {
            let n = p.value.len();
            for i in 0..n {
                let g = p.grad[i].as_f64();
                let m = b1 * p.m[i].as_f64() + (1.0 - b1) * g;
                let v = b2 * p.v[i].as_f64() + (1.0 - b2) * g * g;
                p.m[i] = S::of_f64(m);
                p.v[i] = S::of_f64(v);
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let w = p.value[i].as_f64();
                let w_new = w - lr * (m_hat / (v_hat.sqrt() + cfg.eps)) - lr * cfg.weight_decay * w;
                p.value[i] = S::of_f64(w_new);
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.entries {
            out.insert(&p.name, p.value.cast()).unwrap();
        }
        out.step = self.step;
        out
    }
}

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Cosine-annealed learning rate from `lr0` at step 0 to `lr1` at `total`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr1: f64) -> Result<f64> {
    if step > total || total == 0 {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= step <= total, got step={step}, total={total}"
        )));
    }
    let frac = step as f64 / total as f64;
    Ok(lr1 + (lr0 - lr1) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_closed_form() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        s.add_grad("w", &Tensor::scalar(1.0)).unwrap();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        s.adamw_step(0.1, &cfg);
        let w = s.get("w").unwrap().item();
        // m_hat = 1, v_hat = 1 -> w' = 1 - 0.1 / (1 + 1e-8)
        assert!((w - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adamw_zero_grad_leaves_param() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::scalar(0.7)).unwrap();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        s.adamw_step(0.1, &cfg);
        assert_eq!(s.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn adamw_decoupled_decay() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        s.adamw_step(0.1, &cfg);
        assert!((s.get("w").unwrap().item() - (1.0 - 0.001)).abs() < 1e-12);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 5e-5, 1e-6).unwrap(), 5e-5);
        assert!((cosine_lr(100, 100, 5e-5, 1e-6).unwrap() - 1e-6).abs() < 1e-18);
        let mid = cosine_lr(50, 100, 5e-5, 1e-6).unwrap();
        assert!((mid - (5e-5 + 1e-6) / 2.0).abs() < 1e-12);
        assert!(cosine_lr(101, 100, 1.0, 0.0).is_err());
    }

    #[test]
    fn ema_blend_examples() {
        let mut main = ParamStore::<f64>::new();
        main.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut copy = ParamStore::<f64>::new();
        copy.insert("w", Tensor::scalar(0.0)).unwrap();
        copy.ema_blend_from(&main, 0.001).unwrap();
        assert!((copy.get("w").unwrap().item() - 0.001).abs() < 1e-15);

        // fixed point
        main.get_mut("w").unwrap().fill(0.5);
        copy.get_mut("w").unwrap().fill(0.5);
        copy.ema_blend_from(&main, 0.001).unwrap();
        assert_eq!(copy.get("w").unwrap().item(), 0.5);
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut main = ParamStore::<f64>::new();
        main.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut copy = ParamStore::<f64>::new();
        copy.insert("w", Tensor::scalar(0.0)).unwrap();
        let mix = 0.001;
        for k in 1..=2000u32 {
            copy.ema_blend_from(&main, mix).unwrap();
            let expect = 1.0 - (1.0 - mix).powi(k as i32);
            assert!((copy.get("w").unwrap().item() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_structure_mismatch_rejected() {
        let mut main = ParamStore::<f64>::new();
        main.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut copy = ParamStore::<f64>::new();
        copy.insert("other", Tensor::scalar(1.0)).unwrap();
        assert!(copy.ema_blend_from(&main, 0.5).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::full(&[3], 1.0)).unwrap();
        let c0 = s.checksum();
        s.get_mut("w").unwrap().data_mut()[1] = 2.0;
        assert_ne!(c0, s.checksum());
    }
}
