//! Layer implementations.
//!
//! Convolutions run on per-sample im2col buffers multiplied with the weight
//! matrix; transposed convolutions are the matching col2im scatter. Layers
//! never hold batch state: `forward` returns the cache entry that `backward`
//! later consumes, so evaluation of a frozen network is freely parallel.

use super::{Mode, Param, Scalar, TensorBatch};
use crate::error::{CoreError, Result};
use ndarray::{Array2, Array4, ArrayView2, ArrayView3};
use rand::RngCore;

/// Per-layer cache produced by the forward pass in training mode.
pub enum LayerCache<E: Scalar> {
    Stateless,
    Conv { x: Array4<E> },
    TConv { x: Array4<E> },
    Relu { y: TensorBatch<E> },
    MaxPool { in_hw: (usize, usize), argmax: Vec<u32> },
    Dropout { mask: Array2<E> },
    Flatten { c: usize, h: usize, w: usize },
    Fc { x: Array2<E> },
    Softmax { y: Array2<E> },
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::ShapeError(msg.into()))
}

/// Same-padded 2D convolution, stride 1 or 2.
pub struct Conv2d<E: Scalar> {
    pub ic: usize,
    pub oc: usize,
    pub k: usize,
    pub stride: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pad_lo: i64,
    pub w: Param<E>,
    pub b: Param<E>,
    pub init_gain: f64,
    pub bias_init: f64,
}

impl<E: Scalar> Conv2d<E> {
    pub fn new(ic: usize, oc: usize, k: usize, stride: usize, in_hw: (usize, usize)) -> Self {
        let out_h = in_hw.0.div_ceil(stride);
        let out_w = in_hw.1.div_ceil(stride);
        let pad_total = ((out_h - 1) * stride + k).saturating_sub(in_hw.0);
        let pad_lo = (pad_total / 2) as i64;
        Self {
            ic,
            oc,
            k,
            stride,
            in_hw,
            out_hw: (out_h, out_w),
            pad_lo,
            w: Param::zeros("weight", vec![oc, ic * k * k]),
            b: Param::zeros("bias", vec![oc]),
            init_gain: 1.0,
            bias_init: 0.0,
        }
    }

    fn fan_in(&self) -> usize {
        self.ic * self.k * self.k
    }

    fn im2col(&self, x: &ArrayView3<E>) -> Array2<E> {
        let (oh, ow) = self.out_hw;
        let (ih, iw) = self.in_hw;
        let k = self.k;
        let mut cols = Array2::<E>::zeros((self.ic * k * k, oh * ow));
        for c in 0..self.ic {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let mut cols_row = cols.row_mut(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as i64 - self.pad_lo;
                        if iy < 0 || iy >= ih as i64 {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as i64 - self.pad_lo;
                            if ix < 0 || ix >= iw as i64 {
                                continue;
                            }
                            cols_row[oy * ow + ox] = x[(c, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &ArrayView2<E>, gx: &mut ndarray::ArrayViewMut3<E>) {
        let (oh, ow) = self.out_hw;
        let (ih, iw) = self.in_hw;
        let k = self.k;
        for c in 0..self.ic {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let cols_row = cols.row(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as i64 - self.pad_lo;
                        if iy < 0 || iy >= ih as i64 {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as i64 - self.pad_lo;
                            if ix < 0 || ix >= iw as i64 {
                                continue;
                            }
                            gx[(c, iy as usize, ix as usize)] += cols_row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: TensorBatch<E>, mode: Mode) -> Result<(TensorBatch<E>, LayerCache<E>)> {
        let x = match x.into_nchw() {
            Some(a) => a,
            None => return shape_err("conv expects image input"),
        };
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c != self.ic || (h, w) != self.in_hw {
            return shape_err(format!(
                "conv expects {}x{}x{}, got {c}x{h}x{w}",
                self.ic, self.in_hw.0, self.in_hw.1
            ));
        }
        let (oh, ow) = self.out_hw;
        let wmat = ArrayView2::from_shape((self.oc, self.ic * self.k * self.k), &self.w.data)
            .expect("weight shape");
        let mut y = Array4::<E>::zeros((n, self.oc, oh, ow));
        for s in 0..n {
            let cols = self.im2col(&x.index_axis(ndarray::Axis(0), s));
            let out = wmat.dot(&cols);
            let mut ys = y.index_axis_mut(ndarray::Axis(0), s);
            for oc in 0..self.oc {
                let bias = self.b.data[oc];
                for oy in 0..oh {
                    for ox in 0..ow {
                        ys[(oc, oy, ox)] = out[(oc, oy * ow + ox)] + bias;
                    }
                }
            }
        }
        let cache = match mode {
            Mode::Train => LayerCache::Conv { x },
            Mode::Eval => LayerCache::Stateless,
        };
        Ok((TensorBatch::Nchw(y), cache))
    }

    fn backward(
        &self,
        cache: LayerCache<E>,
        gy: TensorBatch<E>,
        grads: &mut [Vec<E>],
    ) -> Result<TensorBatch<E>> {
        let x = match cache {
            LayerCache::Conv { x } => x,
            _ => return shape_err("conv backward without cache"),
        };
        let gy = gy.into_nchw().ok_or_else(|| CoreError::ShapeError("conv grad shape".into()))?;
        let n = x.shape()[0];
        let (oh, ow) = self.out_hw;
        let wmat = ArrayView2::from_shape((self.oc, self.ic * self.k * self.k), &self.w.data)
            .expect("weight shape");
        let (gw_buf, gb_buf) = grads.split_at_mut(1);
        let mut gw = ndarray::ArrayViewMut2::from_shape(
            (self.oc, self.ic * self.k * self.k),
            gw_buf[0].as_mut_slice(),
        )
        .expect("grad shape");
        let gb = &mut gb_buf[0];
        let mut gx = Array4::<E>::zeros(x.raw_dim());
        for s in 0..n {
            let cols = self.im2col(&x.index_axis(ndarray::Axis(0), s));
            let gys = gy.index_axis(ndarray::Axis(0), s);
            let gys2 = gys
                .to_shape((self.oc, oh * ow))
                .expect("grad reshape")
                .to_owned();
            // dW += gy . cols^T
            ndarray::linalg::general_mat_mul(E::one(), &gys2, &cols.t(), E::one(), &mut gw);
            for oc in 0..self.oc {
                let mut acc = E::zero();
                for v in gys2.row(oc) {
                    acc += *v;
                }
                gb[oc] += acc;
            }
            // dX = W^T . gy, scattered back through the patch map.
            let gcols = wmat.t().dot(&gys2);
            self.col2im(&gcols.view(), &mut gx.index_axis_mut(ndarray::Axis(0), s));
        }
        Ok(TensorBatch::Nchw(gx))
    }
}

/// Transposed convolution, stride 2, output doubling per layer.
pub struct TConv2d<E: Scalar> {
    pub ic: usize,
    pub oc: usize,
    pub k: usize,
    pub stride: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pad_lo: i64,
    pub w: Param<E>,
    pub b: Param<E>,
    pub init_gain: f64,
    pub bias_init: f64,
}

impl<E: Scalar> TConv2d<E> {
    pub fn new(ic: usize, oc: usize, k: usize, in_hw: (usize, usize)) -> Self {
        let stride = 2;
        let out_hw = (in_hw.0 * stride, in_hw.1 * stride);
        // out = (in-1)*s + k - pad_total  =>  pad_total = k - 2 for doubling.
        let pad_lo = ((k - stride) / 2) as i64;
        Self {
            ic,
            oc,
            k,
            stride,
            in_hw,
            out_hw,
            pad_lo,
            w: Param::zeros("weight", vec![ic, oc * k * k]),
            b: Param::zeros("bias", vec![oc]),
            init_gain: 1.0,
            bias_init: 0.0,
        }
    }

    fn fan_in(&self) -> usize {
        (self.ic * self.k * self.k) / (self.stride * self.stride)
    }

    /// Scatter `cols` [oc*k*k, ih*iw] into the output image.
    fn scatter(&self, cols: &ArrayView2<E>, y: &mut ndarray::ArrayViewMut3<E>) {
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let k = self.k;
        for oc in 0..self.oc {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (oc * k + ky) * k + kx;
                    let cols_row = cols.row(row);
                    for iy in 0..ih {
                        let oy = (iy * self.stride + ky) as i64 - self.pad_lo;
                        if oy < 0 || oy >= oh as i64 {
                            continue;
                        }
                        for ix in 0..iw {
                            let ox = (ix * self.stride + kx) as i64 - self.pad_lo;
                            if ox < 0 || ox >= ow as i64 {
                                continue;
                            }
                            y[(oc, oy as usize, ox as usize)] += cols_row[iy * iw + ix];
                        }
                    }
                }
            }
        }
    }

    /// Gather the output-side tensor back into cols [oc*k*k, ih*iw].
    fn gather(&self, g: &ArrayView3<E>) -> Array2<E> {
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let k = self.k;
        let mut cols = Array2::<E>::zeros((self.oc * k * k, ih * iw));
        for oc in 0..self.oc {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (oc * k + ky) * k + kx;
                    let mut cols_row = cols.row_mut(row);
                    for iy in 0..ih {
                        let oy = (iy * self.stride + ky) as i64 - self.pad_lo;
                        if oy < 0 || oy >= oh as i64 {
                            continue;
                        }
                        for ix in 0..iw {
                            let ox = (ix * self.stride + kx) as i64 - self.pad_lo;
                            if ox < 0 || ox >= ow as i64 {
                                continue;
                            }
                            cols_row[iy * iw + ix] = g[(oc, oy as usize, ox as usize)];
                        }
                    }
                }
            }
        }
        cols
    }

    fn forward(&self, x: TensorBatch<E>, mode: Mode) -> Result<(TensorBatch<E>, LayerCache<E>)> {
        let x = match x.into_nchw() {
            Some(a) => a,
            None => return shape_err("tconv expects image input"),
        };
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c != self.ic || (h, w) != self.in_hw {
            return shape_err(format!(
                "tconv expects {}x{}x{}, got {c}x{h}x{w}",
                self.ic, self.in_hw.0, self.in_hw.1
            ));
        }
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let wmat = ArrayView2::from_shape((self.ic, self.oc * self.k * self.k), &self.w.data)
            .expect("weight shape");
        let mut y = Array4::<E>::zeros((n, self.oc, oh, ow));
        for s in 0..n {
            let xs = x.index_axis(ndarray::Axis(0), s);
            let xs2 = xs.to_shape((self.ic, ih * iw)).expect("reshape").to_owned();
            let cols = wmat.t().dot(&xs2);
            let mut ys = y.index_axis_mut(ndarray::Axis(0), s);
            self.scatter(&cols.view(), &mut ys);
            for oc in 0..self.oc {
                let bias = self.b.data[oc];
                for oy in 0..oh {
                    for ox in 0..ow {
                        ys[(oc, oy, ox)] += bias;
                    }
                }
            }
        }
        let cache = match mode {
            Mode::Train => LayerCache::TConv { x },
            Mode::Eval => LayerCache::Stateless,
        };
        Ok((TensorBatch::Nchw(y), cache))
    }

    fn backward(
        &self,
        cache: LayerCache<E>,
        gy: TensorBatch<E>,
        grads: &mut [Vec<E>],
    ) -> Result<TensorBatch<E>> {
        let x = match cache {
            LayerCache::TConv { x } => x,
            _ => return shape_err("tconv backward without cache"),
        };
        let gy = gy.into_nchw().ok_or_else(|| CoreError::ShapeError("tconv grad shape".into()))?;
        let n = x.shape()[0];
        let (ih, iw) = self.in_hw;
        let wmat = ArrayView2::from_shape((self.ic, self.oc * self.k * self.k), &self.w.data)
            .expect("weight shape");
        let (gw_buf, gb_buf) = grads.split_at_mut(1);
        let mut gw = ndarray::ArrayViewMut2::from_shape(
            (self.ic, self.oc * self.k * self.k),
            gw_buf[0].as_mut_slice(),
        )
        .expect("grad shape");
        let gb = &mut gb_buf[0];
        let mut gx = Array4::<E>::zeros(x.raw_dim());
        for s in 0..n {
            let gys = gy.index_axis(ndarray::Axis(0), s);
            let gcols = self.gather(&gys);
            // dX = W . gather(gy)
            let gxs = wmat.dot(&gcols);
            let mut gx_s = gx.index_axis_mut(ndarray::Axis(0), s);
            for c in 0..self.ic {
                for iy in 0..ih {
                    for ix in 0..iw {
                        gx_s[(c, iy, ix)] = gxs[(c, iy * iw + ix)];
                    }
                }
            }
            // dW += x . gather(gy)^T
            let xs = x.index_axis(ndarray::Axis(0), s);
            let xs2 = xs.to_shape((self.ic, ih * iw)).expect("reshape").to_owned();
            ndarray::linalg::general_mat_mul(E::one(), &xs2, &gcols.t(), E::one(), &mut gw);
            for oc in 0..self.oc {
                let mut acc = E::zero();
                for v in gys.index_axis(ndarray::Axis(0), oc) {
                    acc += *v;
                }
                gb[oc] += acc;
            }
        }
        Ok(TensorBatch::Nchw(gx))
    }
}

pub struct Relu;

impl Relu {
    fn forward<E: Scalar>(
        &self,
        x: TensorBatch<E>,
        mode: Mode,
    ) -> Result<(TensorBatch<E>, LayerCache<E>)> {
        let y = match x {
            TensorBatch::Nchw(mut a) => {
                a.mapv_inplace(|v| if v > E::zero() { v } else { E::zero() });
                TensorBatch::Nchw(a)
            }
            TensorBatch::Nd(mut a) => {
                a.mapv_inplace(|v| if v > E::zero() { v } else { E::zero() });
                TensorBatch::Nd(a)
            }
        };
        let cache = match mode {
            Mode::Train => LayerCache::Relu { y: y.clone() },
            Mode::Eval => LayerCache::Stateless,
        };
        Ok((y, cache))
    }

    fn backward<E: Scalar>(&self, cache: LayerCache<E>, gy: TensorBatch<E>) -> Result<TensorBatch<E>> {
        let y = match cache {
            LayerCache::Relu { y } => y,
            _ => return shape_err("relu backward without cache"),
        };
        match (y, gy) {
            (TensorBatch::Nchw(y), TensorBatch::Nchw(mut g)) => {
                ndarray::Zip::from(&mut g).and(&y).for_each(|g, &y| {
                    if y <= E::zero() {
                        *g = E::zero();
                    }
                });
                Ok(TensorBatch::Nchw(g))
            }
            (TensorBatch::Nd(y), TensorBatch::Nd(mut g)) => {
                ndarray::Zip::from(&mut g).and(&y).for_each(|g, &y| {
                    if y <= E::zero() {
                        *g = E::zero();
                    }
                });
                Ok(TensorBatch::Nd(g))
            }
            _ => shape_err("relu grad shape mismatch"),
        }
    }
}

/// 2x2 max pooling with stride 2. Ties resolve to the first element in
/// (y, x) scan order.
pub struct MaxPool {
    pub in_hw: (usize, usize),
}

impl MaxPool {
    fn forward<E: Scalar>(
        &self,
        x: TensorBatch<E>,
        mode: Mode,
    ) -> Result<(TensorBatch<E>, LayerCache<E>)> {
        let x = match x.into_nchw() {
            Some(a) => a,
            None => return shape_err("maxpool expects image input"),
        };
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("maxpool needs even spatial size, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::<E>::zeros((n, c, oh, ow));
        let mut argmax = vec![0u32; n * c * oh * ow];
        let mut slot = 0usize;
        for s in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (by, bx) = (oy * 2, ox * 2);
                        let mut best = x[(s, ch, by, bx)];
                        let mut best_idx = (by * w + bx) as u32;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let v = x[(s, ch, by + dy, bx + dx)];
                            if v > best {
                                best = v;
                                best_idx = ((by + dy) * w + bx + dx) as u32;
                            }
                        }
                        y[(s, ch, oy, ox)] = best;
                        argmax[slot] = best_idx;
                        slot += 1;
                    }
                }
            }
        }
        let cache = match mode {
            Mode::Train => LayerCache::MaxPool {
                in_hw: (h, w),
                argmax,
            },
            Mode::Eval => LayerCache::Stateless,
        };
        Ok((TensorBatch::Nchw(y), cache))
    }

    fn backward<E: Scalar>(&self, cache: LayerCache<E>, gy: TensorBatch<E>) -> Result<TensorBatch<E>> {
        let (in_hw, argmax) = match cache {
            LayerCache::MaxPool { in_hw, argmax } => (in_hw, argmax),
            _ => return shape_err("maxpool backward without cache"),
        };
        let gy = gy.into_nchw().ok_or_else(|| CoreError::ShapeError("maxpool grad shape".into()))?;
        let (n, c, oh, ow) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
        let (h, w) = in_hw;
        let mut gx = Array4::<E>::zeros((n, c, h, w));
        let mut slot = 0usize;
        for s in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let idx = argmax[slot] as usize;
                        slot += 1;
                        gx[(s, ch, idx / w, idx % w)] += gy[(s, ch, oy, ox)];
                    }
                }
            }
        }
        Ok(TensorBatch::Nchw(gx))
    }
}

/// Inverted dropout on flat activations; identity in eval mode.
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    fn forward<E: Scalar>(
        &self,
        x: TensorBatch<E>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(TensorBatch<E>, LayerCache<E>)> {
        let x = match x.into_nd() {
            Some(a) => a,
            None => return shape_err("dropout expects flat input"),
        };
        match mode {
            Mode::Eval => Ok((TensorBatch::Nd(x), LayerCache::Stateless)),
            Mode::Train => {
                let keep_scale = E::cast_from(1.0 / (1.0 - self.rate));
                let mut rng = rng;
                let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
                    if rand::Rng::gen::<f64>(&mut rng) < self.rate {
                        E::zero()
                    } else {
                        keep_scale
                    }
                });
                let y = &x * &mask;
                Ok((TensorBatch::Nd(y), LayerCache::Dropout { mask }))
            }
        }
    }

    fn backward<E: Scalar>(&self, cache: LayerCache<E>, gy: TensorBatch<E>) -> Result<TensorBatch<E>> {
        let mask = match cache {
            LayerCache::Dropout { mask } => mask,
            _ => return shape_err("dropout backward without cache"),
        };
        let gy = gy.into_nd().ok_or_else(|| CoreError::ShapeError("dropout grad shape".into()))?;
        Ok(TensorBatch::Nd(&gy * &mask))
    }
}

/// [N,C,H,W] -> [N, C*H*W], row-major over (c, y, x).
pub struct Flatten;

impl Flatten {
    fn forward<E: Scalar>(
        &self,
        x: TensorBatch<E>,
        mode: Mode,
    ) -> Result<(TensorBatch<E>, LayerCache<E>)> {
        let x = match x.into_nchw() {
            Some(a) => a,
            None => return shape_err("flatten expects image input"),
        };
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let flat = x
            .as_standard_layout()
            .to_shape((n, c * h * w))
            .expect("flatten reshape")
            .to_owned();
        let cache = match mode {
            Mode::Train => LayerCache::Flatten { c, h, w },
            Mode::Eval => LayerCache::Stateless,
        };
        Ok((TensorBatch::Nd(flat), cache))
    }

    fn backward<E: Scalar>(&self, cache: LayerCache<E>, gy: TensorBatch<E>) -> Result<TensorBatch<E>> {
        let (c, h, w) = match cache {
            LayerCache::Flatten { c, h, w } => (c, h, w),
            _ => return shape_err("flatten backward without cache"),
        };
        let gy = gy.into_nd().ok_or_else(|| CoreError::ShapeError("flatten grad shape".into()))?;
        let n = gy.shape()[0];
        let gx = gy
            .to_shape((n, c, h, w))
            .expect("unflatten reshape")
            .to_owned();
        Ok(TensorBatch::Nchw(gx))
    }
}

/// Fully connected layer, y = x W^T + b.
pub struct Fc<E: Scalar> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Param<E>,
    pub b: Param<E>,
    pub init_gain: f64,
    pub bias_init: f64,
}

impl<E: Scalar> Fc<E> {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: Param::zeros("weight", vec![out_dim, in_dim]),
            b: Param::zeros("bias", vec![out_dim]),
            init_gain: 1.0,
            bias_init: 0.0,
        }
    }

    fn forward(&self, x: TensorBatch<E>, mode: Mode) -> Result<(TensorBatch<E>, LayerCache<E>)> {
        let x = match x.into_nd() {
            Some(a) => a,
            None => return shape_err("fc expects flat input"),
        };
        if x.shape()[1] != self.in_dim {
            return shape_err(format!("fc expects {} inputs, got {}", self.in_dim, x.shape()[1]));
        }
        let wmat = ArrayView2::from_shape((self.out_dim, self.in_dim), &self.w.data)
            .expect("weight shape");
        let mut y = x.dot(&wmat.t());
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += self.b.data[j];
            }
        }
        let cache = match mode {
            Mode::Train => LayerCache::Fc { x },
            Mode::Eval => LayerCache::Stateless,
        };
        Ok((TensorBatch::Nd(y), cache))
    }

    fn backward(
        &self,
        cache: LayerCache<E>,
        gy: TensorBatch<E>,
        grads: &mut [Vec<E>],
    ) -> Result<TensorBatch<E>> {
        let x = match cache {
            LayerCache::Fc { x } => x,
            _ => return shape_err("fc backward without cache"),
        };
        let gy = gy.into_nd().ok_or_else(|| CoreError::ShapeError("fc grad shape".into()))?;
        let wmat = ArrayView2::from_shape((self.out_dim, self.in_dim), &self.w.data)
            .expect("weight shape");
        let mut gw = ndarray::ArrayViewMut2::from_shape(
            (self.out_dim, self.in_dim),
            grads[0].as_mut_slice(),
        )
        .expect("grad shape");
        // dW += gy^T . x in one whole-batch product.
        ndarray::linalg::general_mat_mul(E::one(), &gy.t(), &x, E::one(), &mut gw);
        let gb = &mut grads[1];
        for row in gy.rows() {
            for (j, v) in row.iter().enumerate() {
                gb[j] += *v;
            }
        }
        Ok(TensorBatch::Nd(gy.dot(&wmat)))
    }
}

/// Row-wise softmax.
pub struct Softmax;

impl Softmax {
    fn forward<E: Scalar>(
        &self,
        x: TensorBatch<E>,
        mode: Mode,
    ) -> Result<(TensorBatch<E>, LayerCache<E>)> {
        let x = match x.into_nd() {
            Some(a) => a,
            None => return shape_err("softmax expects flat input"),
        };
        let mut y = x;
        for mut row in y.rows_mut() {
            let mut max = row[0];
            for v in row.iter() {
                if *v > max {
                    max = *v;
                }
            }
            let mut sum = E::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let cache = match mode {
            Mode::Train => LayerCache::Softmax { y: y.clone() },
            Mode::Eval => LayerCache::Stateless,
        };
        Ok((TensorBatch::Nd(y), cache))
    }

    fn backward<E: Scalar>(&self, cache: LayerCache<E>, gy: TensorBatch<E>) -> Result<TensorBatch<E>> {
        let y = match cache {
            LayerCache::Softmax { y } => y,
            _ => return shape_err("softmax backward without cache"),
        };
        let gy = gy.into_nd().ok_or_else(|| CoreError::ShapeError("softmax grad shape".into()))?;
        let mut gx = gy.clone();
        for ((mut gx_row, gy_row), y_row) in gx.rows_mut().into_iter().zip(gy.rows()).zip(y.rows())
        {
            let mut dot = E::zero();
            for (g, v) in gy_row.iter().zip(y_row.iter()) {
                dot += *g * *v;
            }
            for (g, v) in gx_row.iter_mut().zip(y_row.iter()) {
                *g = *v * (*g - dot);
            }
        }
        Ok(TensorBatch::Nd(gx))
    }
}

/// One network layer.
pub enum Layer<E: Scalar> {
    Conv(Conv2d<E>),
    TConv(TConv2d<E>),
    Relu(Relu),
    MaxPool(MaxPool),
    Dropout(Dropout),
    Flatten(Flatten),
    Fc(Fc<E>),
    Softmax(Softmax),
}

impl<E: Scalar> Layer<E> {
    pub fn forward(
        &self,
        x: TensorBatch<E>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(TensorBatch<E>, LayerCache<E>)> {
        match self {
            Layer::Conv(l) => l.forward(x, mode),
            Layer::TConv(l) => l.forward(x, mode),
            Layer::Relu(l) => l.forward(x, mode),
            Layer::MaxPool(l) => l.forward(x, mode),
            Layer::Dropout(l) => l.forward(x, mode, rng),
            Layer::Flatten(l) => l.forward(x, mode),
            Layer::Fc(l) => l.forward(x, mode),
            Layer::Softmax(l) => l.forward(x, mode),
        }
    }

    pub fn backward(
        &self,
        cache: LayerCache<E>,
        gy: TensorBatch<E>,
        grads: &mut [Vec<E>],
    ) -> Result<TensorBatch<E>> {
        match self {
            Layer::Conv(l) => l.backward(cache, gy, grads),
            Layer::TConv(l) => l.backward(cache, gy, grads),
            Layer::Relu(l) => l.backward(cache, gy),
            Layer::MaxPool(l) => l.backward(cache, gy),
            Layer::Dropout(l) => l.backward(cache, gy),
            Layer::Flatten(l) => l.backward(cache, gy),
            Layer::Fc(l) => l.backward(cache, gy, grads),
            Layer::Softmax(l) => l.backward(cache, gy),
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        match self {
            Layer::Conv(l) => vec![&l.w, &l.b],
            Layer::TConv(l) => vec![&l.w, &l.b],
            Layer::Fc(l) => vec![&l.w, &l.b],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        match self {
            Layer::Conv(l) => vec![&mut l.w, &mut l.b],
            Layer::TConv(l) => vec![&mut l.w, &mut l.b],
            Layer::Fc(l) => vec![&mut l.w, &mut l.b],
            _ => vec![],
        }
    }

    /// Fan-in-scaled uniform initialization: weights from
    /// U(-g*sqrt(6/fan_in), +g*sqrt(6/fan_in)), biases at the layer's
    /// constant `bias_init`. Draws happen in f64 so f32 and f64 models
    /// consume identical generator streams.
    pub fn init(&mut self, rng: &mut dyn RngCore) {
        let (fan_in, gain, bias_init) = match self {
            Layer::Conv(l) => (l.fan_in(), l.init_gain, l.bias_init),
            Layer::TConv(l) => (l.fan_in(), l.init_gain, l.bias_init),
            Layer::Fc(l) => (l.in_dim, l.init_gain, l.bias_init),
            _ => return,
        };
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        let mut rng = rng;
        let mut fill = |w: &mut Param<E>, b: &mut Param<E>| {
            for v in w.data.iter_mut() {
                *v = E::cast_from(rand::Rng::gen_range(&mut rng, -bound..bound));
            }
            for v in b.data.iter_mut() {
                *v = E::cast_from(bias_init);
            }
        };
        match self {
            Layer::Conv(l) => fill(&mut l.w, &mut l.b),
            Layer::TConv(l) => fill(&mut l.w, &mut l.b),
            Layer::Fc(l) => fill(&mut l.w, &mut l.b),
            _ => {}
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::TConv(_) => "tconv",
            Layer::Relu(_) => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::Dropout(_) => "dropout",
            Layer::Flatten(_) => "flatten",
            Layer::Fc(_) => "fc",
            Layer::Softmax(_) => "softmax",
        }
    }
}
