//! Central finite-difference checking of analytic gradients.
//!
//! The objective is a fixed random projection of the network output,
//! `L = sum(r .* y)`, so both parameter and input gradients of every layer
//! are exercised without needing a loss head. Run this on `f64` networks;
//! the layer code is shared with the `f32` instantiation.

use super::network::Network;
use super::{Scalar, TensorBatch};
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradCheckReport {
    pub max_rel_error_params: f64,
    pub max_rel_error_input: f64,
    pub checked_params: usize,
}

fn rel_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

fn project<E: Scalar>(y: &TensorBatch<E>, r: &[f64]) -> f64 {
    let mut acc = 0.0;
    match y {
        TensorBatch::Nchw(a) => {
            for (v, w) in a.iter().zip(r) {
                acc += v.cast_f64() * w;
            }
        }
        TensorBatch::Nd(a) => {
            for (v, w) in a.iter().zip(r) {
                acc += v.cast_f64() * w;
            }
        }
    }
    acc
}

fn projection_grad<E: Scalar>(y: &TensorBatch<E>, r: &[f64]) -> TensorBatch<E> {
    match y {
        TensorBatch::Nchw(a) => {
            let mut g = a.clone();
            for (v, w) in g.iter_mut().zip(r) {
                *v = E::cast_from(*w);
            }
            TensorBatch::Nchw(g)
        }
        TensorBatch::Nd(a) => {
            let mut g = a.clone();
            for (v, w) in g.iter_mut().zip(r) {
                *v = E::cast_from(*w);
            }
            TensorBatch::Nd(g)
        }
    }
}

fn output_len<E: Scalar>(y: &TensorBatch<E>) -> usize {
    match y {
        TensorBatch::Nchw(a) => a.len(),
        TensorBatch::Nd(a) => a.len(),
    }
}

fn read_input(x: &TensorBatch<f64>) -> Vec<f64> {
    match x {
        TensorBatch::Nchw(a) => a.iter().copied().collect(),
        TensorBatch::Nd(a) => a.iter().copied().collect(),
    }
}

fn write_input(x: &TensorBatch<f64>, values: &[f64]) -> TensorBatch<f64> {
    match x {
        TensorBatch::Nchw(a) => {
            let mut b = a.clone();
            for (v, &n) in b.iter_mut().zip(values) {
                *v = n;
            }
            TensorBatch::Nchw(b)
        }
        TensorBatch::Nd(a) => {
            let mut b = a.clone();
            for (v, &n) in b.iter_mut().zip(values) {
                *v = n;
            }
            TensorBatch::Nd(b)
        }
    }
}

/// Compare analytic and central-difference gradients for all parameters
/// (subsampled above `max_coords_per_tensor`) and the input.
///
/// The dropout rng is re-seeded identically for every evaluation so
/// stochastic layers see a frozen mask.
pub fn check_network(
    net: &mut Network<f64>,
    x: &TensorBatch<f64>,
    step: f64,
    seed: u64,
    max_coords_per_tensor: usize,
) -> Result<GradCheckReport> {
    let dropout_seed = seed ^ 0x5eed;
    let eval = |net: &Network<f64>, x: &TensorBatch<f64>, r: &[f64]| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let (y, _) = net.forward_tape(x.clone(), &mut rng)?;
        Ok(project(&y, r))
    };

    // One forward to size the projection vector.
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (y0, tape) = net.forward_tape(x.clone(), &mut rng)?;
    let mut proj_rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..output_len(&y0)).map(|_| proj_rng.gen_range(-1.0..1.0)).collect();

    // Analytic gradients.
    let mut grads = net.zero_grads();
    let gx = net.backward(tape, projection_grad(&y0, &r), &mut grads)?;

    let mut max_rel_params: f64 = 0.0;
    let mut checked = 0usize;
    let n_tensors = net.params().len();
    for ti in 0..n_tensors {
        let len = net.params()[ti].len();
        let stride = len.div_ceil(max_coords_per_tensor).max(1);
        let mut coord_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ti as u64));
        for base in (0..len).step_by(stride) {
            let ci = base + coord_rng.gen_range(0..stride.min(len - base));
            let orig = net.params()[ti].data[ci];
            net.params_mut()[ti].data[ci] = orig + step;
            let up = eval(net, x, &r)?;
            net.params_mut()[ti].data[ci] = orig - step;
            let down = eval(net, x, &r)?;
            net.params_mut()[ti].data[ci] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.buffers[ti][ci];
            max_rel_params = max_rel_params.max(rel_error(numeric, analytic));
            checked += 1;
        }
    }

    // Input gradient.
    let x_values = read_input(x);
    let gx_values = read_input(&gx);
    let mut max_rel_input: f64 = 0.0;
    let stride = x_values.len().div_ceil(max_coords_per_tensor).max(1);
    for ci in (0..x_values.len()).step_by(stride) {
        let mut plus = x_values.clone();
        plus[ci] += step;
        let up = eval(net, &write_input(x, &plus), &r)?;
        let mut minus = x_values.clone();
        minus[ci] -= step;
        let down = eval(net, &write_input(x, &minus), &r)?;
        let numeric = (up - down) / (2.0 * step);
        max_rel_input = max_rel_input.max(rel_error(numeric, gx_values[ci]));
    }

    Ok(GradCheckReport {
        max_rel_error_params: max_rel_params,
        max_rel_error_input: max_rel_input,
        checked_params: checked,
    })
}

/// Finite-difference check of a loss head attached to a network. Returns the
/// worst relative error over the sampled parameter coordinates.
pub fn check_loss<L>(
    net: &mut Network<f64>,
    x: &TensorBatch<f64>,
    loss_fn: L,
    step: f64,
    seed: u64,
    max_coords_per_tensor: usize,
) -> Result<f64>
where
    L: Fn(&TensorBatch<f64>) -> Result<(f64, TensorBatch<f64>)>,
{
    let dropout_seed = seed ^ 0x10ca1;
    let eval = |net: &Network<f64>| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let (y, _) = net.forward_tape(x.clone(), &mut rng)?;
        Ok(loss_fn(&y)?.0)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (y0, tape) = net.forward_tape(x.clone(), &mut rng)?;
    let (_, gy) = loss_fn(&y0)?;
    let mut grads = net.zero_grads();
    net.backward(tape, gy, &mut grads)?;

    let mut max_rel: f64 = 0.0;
    let n_tensors = net.params().len();
    for ti in 0..n_tensors {
        let len = net.params()[ti].len();
        let stride = len.div_ceil(max_coords_per_tensor).max(1);
        let mut coord_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x77).wrapping_add(ti as u64));
        for base in (0..len).step_by(stride) {
            let ci = base + coord_rng.gen_range(0..stride.min(len - base));
            let orig = net.params()[ti].data[ci];
            net.params_mut()[ti].data[ci] = orig + step;
            let up = eval(net)?;
            net.params_mut()[ti].data[ci] = orig - step;
            let down = eval(net)?;
            net.params_mut()[ti].data[ci] = orig;
            let numeric = (up - down) / (2.0 * step);
            max_rel = max_rel.max(rel_error(numeric, grads.buffers[ti][ci]));
        }
    }
    Ok(max_rel)
}
