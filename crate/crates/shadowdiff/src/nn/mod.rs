//! Hand-rolled neural-network core: tensors flow through a per-sample tape;
//! parameters live in named stores with AdamW moments.

pub mod blocks;
pub mod gradcheck;
pub mod kernels;
pub mod store;
pub mod tape;

pub use store::{cosine_lr, AdamWConfig, ParamStore};
pub use tape::{Gradients, Tape, VarId};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Records which tape leaf each bound parameter landed on, so gradients can
/// be routed back into the store after the backward sweep.
pub struct Bindings {
    entries: Vec<(usize, VarId)>,
}

impl Default for Bindings {
    fn default() -> Self {
        Self::new()
    }
}

impl Bindings {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn bind<S: Scalar>(
        &mut self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        name: &str,
    ) -> Result<VarId> {
        let idx = store.index_of(name).ok_or_else(|| {
            crate::error::Error::InvalidArgument(format!("unknown parameter {name}"))
        })?;
        let id = tape.leaf(store.entries()[idx].value.clone());
        self.entries.push((idx, id));
        Ok(id)
    }

    /// Sum the tape gradients of every bound parameter into `grads`, a
    /// buffer aligned with the store's entry order.
    pub fn collect<S: Scalar>(
        &self,
        tape_grads: &Gradients<S>,
        grads: &mut [Tensor<S>],
    ) -> Result<()> {
        for &(idx, id) in &self.entries {
            if let Some(g) = tape_grads.get(id) {
                grads[idx].axpy(S::one(), g)?;
            }
        }
        Ok(())
    }
}

/// A gradient buffer aligned with a store's entries.
pub fn grad_buffer<S: Scalar>(store: &ParamStore<S>) -> Vec<Tensor<S>> {
    store
        .entries()
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect()
}

/// Add an aligned gradient buffer into the store's gradients.
pub fn apply_grad_buffer<S: Scalar>(
    store: &mut ParamStore<S>,
    buffer: &[Tensor<S>],
) -> Result<()> {
    for (i, g) in buffer.iter().enumerate() {
        store.add_grad_by_index(i, g)?;
    }
    Ok(())
}

/// Sum `src` into `dst` elementwise (fixed order across a batch).
pub fn merge_grad_buffers<S: Scalar>(dst: &mut [Tensor<S>], src: &[Tensor<S>]) -> Result<()> {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        d.axpy(S::one(), s)?;
    }
    Ok(())
}
