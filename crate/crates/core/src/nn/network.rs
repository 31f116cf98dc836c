//! Layer stacks with externalized per-batch state.

use super::layers::{Layer, LayerCache};
use super::{Mode, Param, Scalar, TensorBatch};
use crate::error::{CoreError, Result};
use rand::RngCore;
use sha2::{Digest, Sha256};

/// An ordered stack of layers plus the expected input geometry.
pub struct Network<E: Scalar> {
    pub layers: Vec<Layer<E>>,
    pub input_chw: (usize, usize, usize),
}

/// Per-batch forward caches, one entry per layer, in layer order.
pub struct Tape<E: Scalar> {
    entries: Vec<LayerCache<E>>,
}

impl<E: Scalar> Network<E> {
    pub fn new(input_chw: (usize, usize, usize), layers: Vec<Layer<E>>) -> Self {
        Self { layers, input_chw }
    }

    pub fn init_params(&mut self, rng: &mut dyn RngCore) {
        for layer in &mut self.layers {
            layer.init(rng);
        }
    }

    /// Forward pass that records the caches needed for [`Self::backward`].
    pub fn forward_tape(
        &self,
        x: TensorBatch<E>,
        rng: &mut dyn RngCore,
    ) -> Result<(TensorBatch<E>, Tape<E>)> {
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            let (y, cache) = layer.forward(cur, Mode::Train, rng)?;
            entries.push(cache);
            cur = y;
        }
        Ok((cur, Tape { entries }))
    }

    /// Deterministic evaluation pass: no caches, dropout inactive.
    pub fn forward_eval(&self, x: TensorBatch<E>) -> Result<TensorBatch<E>> {
        let mut rng = NoRng;
        let mut cur = x;
        for layer in &self.layers {
            let (y, _) = layer.forward(cur, Mode::Eval, &mut rng)?;
            cur = y;
        }
        Ok(cur)
    }

    /// Backpropagate `gy` through the tape, accumulating parameter gradients
    /// into `grads` (one buffer per parameter tensor, in [`Self::params`]
    /// order) and returning the input gradient.
    pub fn backward(&self, tape: Tape<E>, gy: TensorBatch<E>, grads: &mut Grads<E>) -> Result<TensorBatch<E>> {
        if tape.entries.len() != self.layers.len() {
            return Err(CoreError::ShapeError("tape does not match network".into()));
        }
        let mut cur = gy;
        let mut offset = grads.buffers.len();
        for (layer, cache) in self.layers.iter().zip(tape.entries).rev() {
            let n_params = layer.params().len();
            offset -= n_params;
            cur = layer.backward(cache, cur, &mut grads.buffers[offset..offset + n_params])?;
        }
        Ok(cur)
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Canonical parameter names: `layer{idx:02}.{kind}.{name}`.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for p in layer.params() {
                out.push(format!("layer{i:02}.{}.{}", layer.kind_name(), p.name));
            }
        }
        out
    }

    pub fn zero_grads(&self) -> Grads<E> {
        Grads {
            buffers: self.params().iter().map(|p| vec![E::zero(); p.len()]).collect(),
        }
    }

    /// Copy all parameters from another network with identical geometry.
    pub fn copy_params_from(&mut self, other: &Network<E>) -> Result<()> {
        let src = other.params();
        let mut dst = self.params_mut();
        if src.len() != dst.len() {
            return Err(CoreError::ShapeError("parameter count mismatch".into()));
        }
        for (d, s) in dst.iter_mut().zip(src) {
            if d.len() != s.len() {
                return Err(CoreError::ShapeError("parameter tensor mismatch".into()));
            }
            d.data.copy_from_slice(&s.data);
        }
        Ok(())
    }

    /// SHA-256 over all parameter bytes in canonical order.
    pub fn param_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for p in self.params() {
            for v in &p.data {
                hasher.update(v.cast_f64().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers aligned with a network's parameter tensors.
pub struct Grads<E: Scalar> {
    pub buffers: Vec<Vec<E>>,
}

impl<E: Scalar> Grads<E> {
    pub fn add_assign(&mut self, other: &Grads<E>) {
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: E) {
        for buf in &mut self.buffers {
            for v in buf.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.buffers.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Rng stub for paths that must not draw (eval mode).
struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval pass must not consume randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval pass must not consume randomness")
    }
    fn fill_bytes(&mut self, _dest: &mut [u8]) {
        unreachable!("eval pass must not consume randomness")
    }
    fn try_fill_bytes(&mut self, _dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("eval pass must not consume randomness")
    }
}
