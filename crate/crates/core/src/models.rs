//! The four fixed network architectures and their training schedules.
//!
//! Resolution is a parameter: at the canonical 64x64 input the autoencoder
//! bottleneck is 4x4x256 = 4096 and the DQL action space matches; smaller
//! inputs scale the bottleneck down through the same layer stack, which
//! keeps desk-scale experiments affordable.

use crate::codec::EncodedImage;
use crate::error::{CoreError, Result};
use crate::nn::loss::softmax_rows;
use crate::nn::network::{Grads, Network};
use crate::nn::sgd::SgdState;
use crate::nn::{
    Bottleneck, Conv2d, Dropout, Fc, Flatten, Layer, MaxPool, Relu, TConv2d, TensorBatch,
};
use crate::par;
use ndarray::{s, Array2, Array4};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Loss family used by a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    L2,
    SoftmaxLog,
}

/// Learning-rate/decay/stop/regularization specification for one model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainingSchedule {
    pub initial_lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub stop_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub fixed_lr: bool,
    pub max_epochs: Option<usize>,
}

impl TrainingSchedule {
    /// Autoencoder defaults: SGD 1e-2, decade drop every 200 epochs down to
    /// 1e-7, weight decay 5e-4, momentum 0.9, batch 40, L2 loss.
    pub fn autoencoder_default() -> Self {
        Self {
            initial_lr: 1e-2,
            decay_every: 200,
            decay_factor: 0.1,
            stop_lr: 1e-7,
            weight_decay: 5e-4,
            momentum: 0.9,
            batch_size: 40,
            loss: LossKind::L2,
            fixed_lr: false,
            max_epochs: None,
        }
    }

    /// Classifier defaults: SGD 1e-4, decade drop every 500 epochs down to
    /// 1e-7, weight decay 5e-4, momentum 0.9, batch 50, softmax log loss.
    pub fn classifier_default() -> Self {
        Self {
            initial_lr: 1e-4,
            decay_every: 500,
            decay_factor: 0.1,
            stop_lr: 1e-7,
            weight_decay: 5e-4,
            momentum: 0.9,
            batch_size: 50,
            loss: LossKind::SoftmaxLog,
            fixed_lr: false,
            max_epochs: None,
        }
    }

    /// DQL defaults: fixed lr 1e-4, weight decay 1e-5, momentum 0.9,
    /// batch 100, 10 epochs over the whole memory per training run.
    pub fn dql_default() -> Self {
        Self {
            initial_lr: 1e-4,
            decay_every: 1,
            decay_factor: 1.0,
            stop_lr: 0.0,
            weight_decay: 1e-5,
            momentum: 0.9,
            batch_size: 100,
            loss: LossKind::L2,
            fixed_lr: true,
            max_epochs: Some(10),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.fixed_lr {
            if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
                return Err(CoreError::InvalidInput(
                    "decay_factor must be in (0,1)".into(),
                ));
            }
            if self.stop_lr >= self.initial_lr {
                return Err(CoreError::InvalidInput(
                    "stop_lr must be below initial_lr".into(),
                ));
            }
            if self.decay_every == 0 {
                return Err(CoreError::InvalidInput("decay_every must be positive".into()));
            }
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidInput("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during the given epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.fixed_lr {
            self.initial_lr
        } else {
            self.initial_lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
        }
    }

    /// Whether training continues into this epoch.
    pub fn continues_at(&self, epoch: usize) -> bool {
        if let Some(max) = self.max_epochs {
            if epoch >= max {
                return false;
            }
        }
        self.fixed_lr || self.lr_at(epoch) >= self.stop_lr
    }
}

/// Abstract layer descriptor, the unit of architecture conformance.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize },
    TConv { out_channels: usize, kernel: usize },
    Relu,
    MaxPool,
    Dropout { rate: f64 },
    Flatten,
    Fc { out_units: usize },
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchId {
    Autoencoder,
    Classifier,
    Dql,
}

impl ArchId {
    pub fn code(self) -> u32 {
        match self {
            ArchId::Autoencoder => 1,
            ArchId::Classifier => 2,
            ArchId::Dql => 3,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(ArchId::Autoencoder),
            2 => Ok(ArchId::Classifier),
            3 => Ok(ArchId::Dql),
            other => Err(CoreError::Checkpoint(format!("unknown architecture id {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub id: ArchId,
    pub layers: Vec<LayerSpec>,
}

/// Encoder half of the autoencoder: three conv blocks with pooling, then a
/// stride-2 256-channel conv so the bottleneck lands at (res/16)^2 x 256.
pub fn autoencoder_encoder_spec() -> ArchSpec {
    use LayerSpec::*;
    ArchSpec {
        id: ArchId::Autoencoder,
        layers: vec![
            Conv { out_channels: 32, kernel: 7, stride: 1 },
            Relu,
            MaxPool,
            Conv { out_channels: 64, kernel: 7, stride: 1 },
            Relu,
            MaxPool,
            Conv { out_channels: 128, kernel: 5, stride: 1 },
            Relu,
            MaxPool,
            Conv { out_channels: 256, kernel: 5, stride: 2 },
            Relu,
        ],
    }
}

/// Decoder half: four transposed convolutions, each doubling the spatial
/// size, mirroring the encoder channels back down to RGB.
pub fn autoencoder_decoder_spec() -> ArchSpec {
    use LayerSpec::*;
    ArchSpec {
        id: ArchId::Autoencoder,
        layers: vec![
            TConv { out_channels: 128, kernel: 5 },
            Relu,
            TConv { out_channels: 64, kernel: 5 },
            Relu,
            TConv { out_channels: 32, kernel: 7 },
            Relu,
            TConv { out_channels: 3, kernel: 7 },
        ],
    }
}

/// Classifier: four conv blocks with pooling, dropout, fc 512, fc classes.
pub fn classifier_spec(n_classes: usize) -> ArchSpec {
    use LayerSpec::*;
    ArchSpec {
        id: ArchId::Classifier,
        layers: vec![
            Conv { out_channels: 32, kernel: 7, stride: 1 },
            Relu,
            MaxPool,
            Conv { out_channels: 64, kernel: 7, stride: 1 },
            Relu,
            MaxPool,
            Conv { out_channels: 128, kernel: 5, stride: 1 },
            Relu,
            MaxPool,
            Conv { out_channels: 256, kernel: 5, stride: 1 },
            Relu,
            MaxPool,
            Flatten,
            Dropout { rate: 0.5 },
            Fc { out_units: 512 },
            Relu,
            Fc { out_units: n_classes },
            Softmax,
        ],
    }
}

/// Deep-Q network: three conv blocks with pooling, then one fully connected
/// output per bottleneck action.
pub fn dql_spec(action_dim: usize) -> ArchSpec {
    use LayerSpec::*;
    ArchSpec {
        id: ArchId::Dql,
        layers: vec![
            Conv { out_channels: 32, kernel: 7, stride: 1 },
            Relu,
            MaxPool,
            Conv { out_channels: 64, kernel: 7, stride: 1 },
            Relu,
            MaxPool,
            Conv { out_channels: 128, kernel: 5, stride: 1 },
            Relu,
            MaxPool,
            Flatten,
            Fc { out_units: action_dim },
        ],
    }
}

/// Materialize a spec into a network, propagating shapes from `input_chw`.
/// The trailing `Softmax` of classifier specs is applied at the interface
/// rather than stored, so logits stay available for the losses.
pub fn build_network(spec: &ArchSpec, input_chw: (usize, usize, usize)) -> Result<Network<f32>> {
    enum Shape {
        Chw(usize, usize, usize),
        Flat(usize),
    }
    let mut shape = Shape::Chw(input_chw.0, input_chw.1, input_chw.2);
    let mut layers: Vec<Layer<f32>> = Vec::new();
    for ls in &spec.layers {
        match ls {
            LayerSpec::Conv { out_channels, kernel, stride } => {
                let (c, h, w) = match shape {
                    Shape::Chw(c, h, w) => (c, h, w),
                    Shape::Flat(_) => return Err(CoreError::ShapeError("conv after flatten".into())),
                };
                let conv = Conv2d::new(c, *out_channels, *kernel, *stride, (h, w));
                shape = Shape::Chw(*out_channels, conv.out_hw.0, conv.out_hw.1);
                layers.push(Layer::Conv(conv));
            }
            LayerSpec::TConv { out_channels, kernel } => {
                let (c, h, w) = match shape {
                    Shape::Chw(c, h, w) => (c, h, w),
                    Shape::Flat(_) => return Err(CoreError::ShapeError("tconv after flatten".into())),
                };
                let tconv = TConv2d::new(c, *out_channels, *kernel, (h, w));
                shape = Shape::Chw(*out_channels, tconv.out_hw.0, tconv.out_hw.1);
                layers.push(Layer::TConv(tconv));
            }
            LayerSpec::Relu => layers.push(Layer::Relu(Relu)),
            LayerSpec::MaxPool => {
                let (c, h, w) = match shape {
                    Shape::Chw(c, h, w) => (c, h, w),
                    Shape::Flat(_) => return Err(CoreError::ShapeError("pool after flatten".into())),
                };
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(CoreError::ShapeError(format!(
                        "pooling an odd {h}x{w} feature map; input resolution must be divisible by 16"
                    )));
                }
                layers.push(Layer::MaxPool(MaxPool { in_hw: (h, w) }));
                shape = Shape::Chw(c, h / 2, w / 2);
            }
            LayerSpec::Dropout { rate } => layers.push(Layer::Dropout(Dropout { rate: *rate })),
            LayerSpec::Flatten => {
                let (c, h, w) = match shape {
                    Shape::Chw(c, h, w) => (c, h, w),
                    Shape::Flat(_) => return Err(CoreError::ShapeError("double flatten".into())),
                };
                layers.push(Layer::Flatten(Flatten));
                shape = Shape::Flat(c * h * w);
            }
            LayerSpec::Fc { out_units } => {
                let d = match shape {
                    Shape::Flat(d) => d,
                    Shape::Chw(..) => return Err(CoreError::ShapeError("fc before flatten".into())),
                };
                layers.push(Layer::Fc(Fc::new(d, *out_units)));
                shape = Shape::Flat(*out_units);
            }
            LayerSpec::Softmax => { /* applied at the interface */ }
        }
    }
    Ok(Network::new(input_chw, layers))
}

/// Bottleneck geometry for a given input resolution.
pub fn bottleneck_chw(resolution: usize) -> (usize, usize, usize) {
    (256, resolution / 16, resolution / 16)
}

pub fn bottleneck_len(resolution: usize) -> usize {
    let (c, h, w) = bottleneck_chw(resolution);
    c * h * w
}

pub struct AutoencoderModel {
    pub encoder: Network<f32>,
    pub decoder: Network<f32>,
    pub resolution: usize,
    /// Mean per-element squared reconstruction error of the final epoch.
    pub train_loss: Option<f64>,
    pub loss_trace: Vec<f64>,
}

/// Decoder layers start with a small positive bias so the transposed
/// convolutions' units are alive despite the mostly-black targets.
pub const AE_DECODER_BIAS_INIT: f64 = 0.0;

impl AutoencoderModel {
    pub fn new(resolution: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if resolution % 16 != 0 {
            return Err(CoreError::InvalidInput(
                "autoencoder resolution must be divisible by 16".into(),
            ));
        }
        let mut encoder = build_network(&autoencoder_encoder_spec(), (3, resolution, resolution))?;
        let (bc, bh, bw) = bottleneck_chw(resolution);
        let mut decoder = build_network(&autoencoder_decoder_spec(), (bc, bh, bw))?;
        for layer in &mut decoder.layers {
            if let Layer::TConv(t) = layer {
                t.bias_init = AE_DECODER_BIAS_INIT;
            }
        }
        encoder.init_params(rng);
        decoder.init_params(rng);
        Ok(Self {
            encoder,
            decoder,
            resolution,
            train_loss: None,
            loss_trace: Vec::new(),
        })
    }

    pub fn bottleneck_len(&self) -> usize {
        bottleneck_len(self.resolution)
    }

    pub fn param_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.encoder.param_hash());
        hasher.update(self.decoder.param_hash());
        hasher.finalize().into()
    }
}

pub struct ClassifierModel {
    pub net: Network<f32>,
    pub n_classes: usize,
    pub resolution: usize,
    pub loss_trace: Vec<f64>,
}

impl ClassifierModel {
    pub fn new(resolution: usize, n_classes: usize, rng: &mut dyn RngCore) -> Result<Self> {
        let mut net = build_network(&classifier_spec(n_classes), (3, resolution, resolution))?;
        net.init_params(rng);
        Ok(Self {
            net,
            n_classes,
            resolution,
            loss_trace: Vec::new(),
        })
    }

    pub fn param_hash(&self) -> [u8; 32] {
        self.net.param_hash()
    }
}

pub struct DqlModel {
    pub net: Network<f32>,
    pub action_dim: usize,
    pub resolution: usize,
}

/// Initialization gains for the Q-network. The convolution gain scales the
/// feature magnitudes the output layer sees, which sets the effective step
/// size of Q-regression under the fixed 1e-4 learning rate; the default is
/// chosen so a training run makes visible progress at desk scale.
pub const DQL_CONV_GAIN: f64 = 0.65;
pub const DQL_FC_GAIN: f64 = 0.05;

impl DqlModel {
    pub fn new(resolution: usize, rng: &mut dyn RngCore) -> Result<Self> {
        Self::with_gains(resolution, DQL_CONV_GAIN, DQL_FC_GAIN, rng)
    }

    pub fn with_gains(
        resolution: usize,
        conv_gain: f64,
        fc_gain: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let action_dim = bottleneck_len(resolution);
        let mut net = build_network(&dql_spec(action_dim), (3, resolution, resolution))?;
        for layer in &mut net.layers {
            match layer {
                Layer::Conv(c) => c.init_gain = conv_gain,
                Layer::Fc(f) => f.init_gain = fc_gain,
                _ => {}
            }
        }
        net.init_params(rng);
        Ok(Self {
            net,
            action_dim,
            resolution,
        })
    }

    pub fn param_hash(&self) -> [u8; 32] {
        self.net.param_hash()
    }
}

/// Stack encoded images into an [N,3,H,W] batch.
pub fn images_to_batch(images: &[&EncodedImage]) -> Result<Array4<f32>> {
    let res = images
        .first()
        .map(|i| i.resolution())
        .ok_or_else(|| CoreError::InvalidInput("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * 3 * res * res);
    for img in images {
        if img.resolution() != res {
            return Err(CoreError::ShapeError("mixed resolutions in batch".into()));
        }
        data.extend_from_slice(img.data());
    }
    Array4::from_shape_vec((images.len(), 3, res, res), data)
        .map_err(|e| CoreError::ShapeError(e.to_string()))
}

/// Map the autoencoder output back to images, clamping into [0,1].
pub fn batch_to_images(batch: &Array4<f32>) -> Result<Vec<EncodedImage>> {
    let (n, c, h, w) = (batch.shape()[0], batch.shape()[1], batch.shape()[2], batch.shape()[3]);
    if c != 3 || h != w {
        return Err(CoreError::ShapeError(format!("expected [n,3,r,r], got [{n},{c},{h},{w}]")));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let slice = batch.slice(s![i, .., .., ..]);
        let data: Vec<f32> = slice.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        out.push(EncodedImage::from_raw(h, data)?);
    }
    Ok(out)
}

/// Run the encoder over one image.
pub fn encode(model: &AutoencoderModel, image: &EncodedImage) -> Result<Bottleneck> {
    Ok(encode_batch(model, &[image])?.pop().unwrap())
}

pub fn encode_batch(model: &AutoencoderModel, images: &[&EncodedImage]) -> Result<Vec<Bottleneck>> {
    if images.iter().any(|i| i.resolution() != model.resolution) {
        return Err(CoreError::ShapeError(format!(
            "autoencoder expects {0}x{0} images",
            model.resolution
        )));
    }
    let x = images_to_batch(images)?;
    let y = model.encoder.forward_eval(TensorBatch::Nchw(x))?;
    let y = y.into_nchw().ok_or_else(|| CoreError::ShapeError("encoder output".into()))?;
    let len = model.bottleneck_len();
    Ok((0..images.len())
        .map(|i| {
            let slice = y.slice(s![i, .., .., ..]);
            let mut v = Vec::with_capacity(len);
            v.extend(slice.iter().copied());
            Bottleneck(v)
        })
        .collect())
}

/// Run the decoder over one bottleneck; output clamped to [0,1].
pub fn decode(model: &AutoencoderModel, b: &Bottleneck) -> Result<EncodedImage> {
    Ok(decode_batch(model, std::slice::from_ref(b))?.pop().unwrap())
}

pub fn decode_batch(model: &AutoencoderModel, bs: &[Bottleneck]) -> Result<Vec<EncodedImage>> {
    let (bc, bh, bw) = bottleneck_chw(model.resolution);
    let len = bc * bh * bw;
    let mut data = Vec::with_capacity(bs.len() * len);
    for b in bs {
        if b.len() != len {
            return Err(CoreError::ShapeError(format!(
                "bottleneck must hold {len} values, got {}",
                b.len()
            )));
        }
        data.extend_from_slice(&b.0);
    }
    let x = Array4::from_shape_vec((bs.len(), bc, bh, bw), data)
        .map_err(|e| CoreError::ShapeError(e.to_string()))?;
    let y = model.decoder.forward_eval(TensorBatch::Nchw(x))?;
    let y = y.into_nchw().ok_or_else(|| CoreError::ShapeError("decoder output".into()))?;
    batch_to_images(&y)
}

/// Class probabilities for one image.
pub fn classify(model: &ClassifierModel, image: &EncodedImage) -> Result<Vec<f64>> {
    let probs = classify_batch(model, &[image])?;
    Ok(probs.row(0).to_vec())
}

/// Class probabilities for a batch, rows summing to one.
pub fn classify_batch(model: &ClassifierModel, images: &[&EncodedImage]) -> Result<Array2<f64>> {
    if images.iter().any(|i| i.resolution() != model.resolution) {
        return Err(CoreError::ShapeError(format!(
            "classifier expects {0}x{0} images",
            model.resolution
        )));
    }
    let x = images_to_batch(images)?;
    let logits = model.net.forward_eval(TensorBatch::Nchw(x))?;
    let logits = logits.into_nd().ok_or_else(|| CoreError::ShapeError("classifier output".into()))?;
    Ok(softmax_rows(&logits))
}

/// Q-values for one image.
pub fn q_forward(model: &DqlModel, image: &EncodedImage) -> Result<Vec<f32>> {
    let q = q_forward_batch(model, &[image])?;
    Ok(q.row(0).to_vec())
}

pub fn q_forward_batch(model: &DqlModel, images: &[&EncodedImage]) -> Result<Array2<f32>> {
    if images.iter().any(|i| i.resolution() != model.resolution) {
        return Err(CoreError::ShapeError(format!(
            "dql expects {0}x{0} images",
            model.resolution
        )));
    }
    let x = images_to_batch(images)?;
    let q = model.net.forward_eval(TensorBatch::Nchw(x))?;
    q.into_nd().ok_or_else(|| CoreError::ShapeError("dql output".into()))
}

/// Fraction of items whose argmax probability matches the label.
pub fn evaluate_accuracy(model: &ClassifierModel, items: &[(&EncodedImage, usize)]) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let hits: usize = par::chunk_ranges(items.len())
        .into_par_iter()
        .map(|range| {
            let slice: Vec<&EncodedImage> = items[range.clone()].iter().map(|(i, _)| *i).collect();
            let probs = classify_batch(model, &slice)?;
            let mut hits = 0usize;
            for (row, (_, label)) in probs.rows().into_iter().zip(&items[range]) {
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                if pred == *label {
                    hits += 1;
                }
            }
            Ok::<usize, CoreError>(hits)
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / items.len() as f64)
}

/// One sharded forward/backward/SGD step over a batch. Returns the batch
/// mean loss. `loss_parts` maps the network output of a shard plus the shard
/// range to an unnormalized loss sum and its output gradient; the final
/// gradient is scaled by `grad_scale`.
fn sgd_batch_step<F>(
    net: &mut Network<f32>,
    sgd: &mut SgdState<f32>,
    batch: &Array4<f32>,
    loss_parts: &F,
    grad_scale: f64,
    loss_norm: f64,
    lr: f64,
    schedule: &TrainingSchedule,
    step_seed: u64,
) -> Result<f64>
where
    F: Fn(&TensorBatch<f32>, std::ops::Range<usize>) -> Result<(f64, TensorBatch<f32>)> + Sync,
{
    let n = batch.shape()[0];
    let ranges = par::chunk_ranges(n);
    let shards: Vec<Result<(f64, Grads<f32>)>> = ranges
        .into_par_iter()
        .enumerate()
        .map(|(shard_idx, range)| {
            let x = batch.slice(s![range.clone(), .., .., ..]).to_owned();
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed.wrapping_add(shard_idx as u64));
            let (y, tape) = net.forward_tape(TensorBatch::Nchw(x), &mut rng)?;
            let (loss_sum, gy) = loss_parts(&y, range)?;
            let mut grads = net.zero_grads();
            net.backward(tape, gy, &mut grads)?;
            Ok((loss_sum, grads))
        })
        .collect();

    let mut total_loss = 0.0;
    let mut merged: Option<Grads<f32>> = None;
    for shard in shards {
        let (loss_sum, grads) = shard?;
        total_loss += loss_sum;
        match merged.as_mut() {
            Some(m) => m.add_assign(&grads),
            None => merged = Some(grads),
        }
    }
    let mut grads = merged.expect("at least one shard");
    grads.scale(grad_scale as f32);
    sgd.step(net, &grads, lr, schedule.weight_decay, schedule.momentum)?;
    Ok(total_loss / loss_norm)
}

/// Unnormalized squared-error parts: sum plus gradient 2*(pred-target).
fn sse_parts(pred: &Array4<f32>, target: &Array4<f32>) -> (f64, Array4<f32>) {
    let mut loss = 0.0f64;
    let mut grad = pred.clone();
    ndarray::Zip::from(&mut grad).and(target).for_each(|g, &t| {
        let d = (*g - t) as f64;
        loss += d * d;
        *g = (2.0 * d) as f32;
    });
    (loss, grad)
}

/// Unnormalized log-loss parts: sum plus gradient (softmax - onehot).
fn xent_parts(logits: &Array2<f32>, labels: &[usize]) -> Result<(f64, Array2<f32>)> {
    let probs = softmax_rows(logits);
    let mut loss = 0.0f64;
    let mut grad = Array2::<f32>::zeros(logits.raw_dim());
    for (i, &label) in labels.iter().enumerate() {
        if label >= logits.shape()[1] {
            return Err(CoreError::ShapeError(format!("label {label} out of range")));
        }
        loss -= probs[(i, label)].max(1e-300).ln();
        for j in 0..logits.shape()[1] {
            let target = if j == label { 1.0 } else { 0.0 };
            grad[(i, j)] = (probs[(i, j)] - target) as f32;
        }
    }
    Ok((loss, grad))
}

/// Train the autoencoder to reconstruct its input.
pub fn train_autoencoder(
    images: &[EncodedImage],
    schedule: &TrainingSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<AutoencoderModel> {
    schedule.validate()?;
    if images.len() < schedule.batch_size {
        return Err(CoreError::InsufficientData {
            needed: schedule.batch_size,
            got: images.len(),
        });
    }
    let resolution = images[0].resolution();
    let mut model = AutoencoderModel::new(resolution, rng)?;
    let mut sgd_enc = SgdState::new(&model.encoder);
    let mut sgd_dec = SgdState::new(&model.decoder);

    let mut indices: Vec<usize> = (0..images.len()).collect();
    let mut epoch = 0usize;
    while schedule.continues_at(epoch) {
        let lr = schedule.lr_at(epoch);
        rand::seq::SliceRandom::shuffle(indices.as_mut_slice(), rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(schedule.batch_size) {
            let refs: Vec<&EncodedImage> = chunk.iter().map(|&i| &images[i]).collect();
            let batch = images_to_batch(&refs)?;
            let step_seed: u64 = rng.gen();
            let loss = autoencoder_step(
                &mut model,
                &mut sgd_enc,
                &mut sgd_dec,
                &batch,
                lr,
                schedule,
                step_seed,
            )?;
            if !loss.is_finite() {
                return Err(CoreError::TrainingDiverged {
                    epoch,
                    message: "reconstruction loss is not finite".into(),
                });
            }
            epoch_loss += loss;
            batches += 1;
        }
        model.loss_trace.push(epoch_loss / batches as f64);
        epoch += 1;
    }
    model.train_loss = model.loss_trace.last().copied();
    Ok(model)
}

/// One batch step through encoder and decoder.
///
/// The training objective follows the per-item L2 convention,
/// `L = 1/(2N) * sum over items and pixels of (pred-target)^2`, so the
/// gradient scale is independent of the pixel count and the reference
/// learning rates behave the same at every resolution. The reported trace
/// value stays per-pixel MSE for readability.
fn autoencoder_step(
    model: &mut AutoencoderModel,
    sgd_enc: &mut SgdState<f32>,
    sgd_dec: &mut SgdState<f32>,
    batch: &Array4<f32>,
    lr: f64,
    schedule: &TrainingSchedule,
    step_seed: u64,
) -> Result<f64> {
    let n = batch.shape()[0];
    let numel = batch.len() as f64;
    let encoder = &model.encoder;
    let decoder = &model.decoder;
    let ranges = par::chunk_ranges(n);
    let shards: Vec<Result<(f64, Grads<f32>, Grads<f32>)>> = ranges
        .into_par_iter()
        .enumerate()
        .map(|(shard_idx, range)| {
            let x = batch.slice(s![range, .., .., ..]).to_owned();
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed.wrapping_add(shard_idx as u64));
            let (b, tape_e) = encoder.forward_tape(TensorBatch::Nchw(x.clone()), &mut rng)?;
            let (y, tape_d) = decoder.forward_tape(b, &mut rng)?;
            let y = y.into_nchw().ok_or_else(|| CoreError::ShapeError("decoder output".into()))?;
            let (loss_sum, gy) = sse_parts(&y, &x);
            let mut gd = decoder.zero_grads();
            let gb = decoder.backward(tape_d, TensorBatch::Nchw(gy), &mut gd)?;
            let mut ge = encoder.zero_grads();
            encoder.backward(tape_e, gb, &mut ge)?;
            Ok((loss_sum, ge, gd))
        })
        .collect();

    let mut total = 0.0;
    let mut ge_merged: Option<Grads<f32>> = None;
    let mut gd_merged: Option<Grads<f32>> = None;
    for shard in shards {
        let (loss_sum, ge, gd) = shard?;
        total += loss_sum;
        match ge_merged.as_mut() {
            Some(m) => m.add_assign(&ge),
            None => ge_merged = Some(ge),
        }
        match gd_merged.as_mut() {
            Some(m) => m.add_assign(&gd),
            None => gd_merged = Some(gd),
        }
    }
    let scale = (1.0 / (2.0 * n as f64)) as f32;
    let mut ge = ge_merged.expect("shards");
    let mut gd = gd_merged.expect("shards");
    ge.scale(scale);
    gd.scale(scale);
    sgd_enc.step(&mut model.encoder, &ge, lr, schedule.weight_decay, schedule.momentum)?;
    sgd_dec.step(&mut model.decoder, &gd, lr, schedule.weight_decay, schedule.momentum)?;
    Ok(total / numel)
}

/// Train a classifier from fresh random initialization.
pub fn train_classifier(
    items: &[(EncodedImage, usize)],
    n_classes: usize,
    schedule: &TrainingSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<ClassifierModel> {
    schedule.validate()?;
    if items.is_empty() {
        return Err(CoreError::InsufficientData { needed: 1, got: 0 });
    }
    for class in 0..n_classes {
        if !items.iter().any(|(_, l)| *l == class) {
            return Err(CoreError::MissingClass(class));
        }
    }
    let resolution = items[0].0.resolution();
    let mut model = ClassifierModel::new(resolution, n_classes, rng)?;
    let mut sgd = SgdState::new(&model.net);

    let mut indices: Vec<usize> = (0..items.len()).collect();
    let mut epoch = 0usize;
    while schedule.continues_at(epoch) {
        let lr = schedule.lr_at(epoch);
        rand::seq::SliceRandom::shuffle(indices.as_mut_slice(), rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(schedule.batch_size) {
            let refs: Vec<&EncodedImage> = chunk.iter().map(|&i| &items[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| items[i].1).collect();
            let batch = images_to_batch(&refs)?;
            let step_seed: u64 = rng.gen();
            let labels_ref = &labels;
            let loss = sgd_batch_step(
                &mut model.net,
                &mut sgd,
                &batch,
                &|y, range| {
                    let logits = y
                        .as_nd()
                        .ok_or_else(|| CoreError::ShapeError("classifier output".into()))?;
                    let (loss, grad) = xent_parts(logits, &labels_ref[range])?;
                    Ok((loss, TensorBatch::Nd(grad)))
                },
                1.0 / chunk.len() as f64,
                chunk.len() as f64,
                lr,
                schedule,
                step_seed,
            )?;
            if !loss.is_finite() {
                return Err(CoreError::TrainingDiverged {
                    epoch,
                    message: "classification loss is not finite".into(),
                });
            }
            epoch_loss += loss;
            batches += 1;
        }
        model.loss_trace.push(epoch_loss / batches as f64);
        epoch += 1;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_scanpath, GazePoint, Scanpath};

    fn sample_image(res: usize, seed: u64) -> EncodedImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<GazePoint> = (0..12)
            .map(|i| GazePoint {
                t: i as f64 / 11.0,
                x: rng.gen_range(0.0..1.0),
                y: rng.gen_range(0.0..1.0),
            })
            .collect();
        let path = Scanpath {
            subject_id: "s".into(),
            stimulus_id: "i".into(),
            points,
            duration: 1.0,
        };
        encode_scanpath(&path, res).unwrap()
    }

    #[test]
    fn lr_schedule_trace_matches_decay() {
        let s = TrainingSchedule::autoencoder_default();
        assert!((s.lr_at(0) - 1e-2).abs() < 1e-15);
        assert!((s.lr_at(200) - 1e-3).abs() < 1e-15);
        assert!((s.lr_at(400) - 1e-4).abs() < 1e-16);
    }

    #[test]
    fn training_stops_when_lr_falls_below_floor() {
        let s = TrainingSchedule::autoencoder_default();
        // lr(1000) = 1e-7 == stop_lr, still runs; lr(1200) = 1e-8 stops.
        assert!(s.continues_at(1000));
        assert!(!s.continues_at(1200));
        // First epoch that does not run is the start of the 1e-8 period.
        let first_stopped = (0..3000).find(|&e| !s.continues_at(e)).unwrap();
        assert_eq!(first_stopped, 1200);
    }

    #[test]
    fn bottleneck_is_4096_at_64() {
        assert_eq!(bottleneck_len(64), 4096);
        assert_eq!(bottleneck_chw(64), (256, 4, 4));
        assert_eq!(bottleneck_len(32), 1024);
    }

    #[test]
    fn architecture_specs_match_reference_geometry() {
        use LayerSpec::*;
        let enc = autoencoder_encoder_spec();
        assert_eq!(
            enc.layers
                .iter()
                .filter(|l| matches!(l, Conv { .. }))
                .count(),
            4
        );
        assert_eq!(
            enc.layers[0],
            Conv { out_channels: 32, kernel: 7, stride: 1 }
        );
        let dec = autoencoder_decoder_spec();
        assert_eq!(dec.layers[0], TConv { out_channels: 128, kernel: 5 });
        let cls = classifier_spec(8);
        assert!(cls.layers.contains(&Dropout { rate: 0.5 }));
        assert!(cls.layers.contains(&Fc { out_units: 512 }));
        assert!(cls.layers.contains(&Fc { out_units: 8 }));
        let dql = dql_spec(4096);
        assert_eq!(dql.layers.last(), Some(&Fc { out_units: 4096 }));
        assert_eq!(
            dql.layers.iter().filter(|l| matches!(l, MaxPool)).count(),
            3
        );
    }

    #[test]
    fn zero_image_gives_zero_bottleneck_and_zero_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = AutoencoderModel::new(32, &mut rng).unwrap();
        // With all biases at zero, a zero image propagates zeros through
        // conv/relu/pool and the zero bottleneck decodes to zeros.
        for p in model.decoder.params_mut() {
            if p.name == "bias" {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let zero = EncodedImage::zeros(32);
        let b = encode(&model, &zero).unwrap();
        assert_eq!(b.len(), 1024);
        assert!(b.0.iter().all(|&v| v == 0.0));
        let img = decode(&model, &b).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bottleneck_is_nonnegative_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = AutoencoderModel::new(32, &mut rng).unwrap();
        let img = sample_image(32, 5);
        let a = encode(&model, &img).unwrap();
        let b = encode(&model, &img).unwrap();
        assert_eq!(a, b);
        assert!(a.0.iter().all(|&v| v >= 0.0));
        assert_eq!(a.len(), model.bottleneck_len());
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = AutoencoderModel::new(32, &mut rng).unwrap();
        let img64 = sample_image(64, 6);
        assert!(matches!(encode(&model, &img64), Err(CoreError::ShapeError(_))));
        let short = Bottleneck(vec![0.0; 10]);
        assert!(matches!(decode(&model, &short), Err(CoreError::ShapeError(_))));
    }

    #[test]
    fn classify_returns_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ClassifierModel::new(32, 4, &mut rng).unwrap();
        let img = sample_image(32, 7);
        let p = classify(&model, &img).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        // Eval passes are deterministic even though the net has dropout.
        assert_eq!(p, classify(&model, &img).unwrap());
    }

    #[test]
    fn q_forward_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = DqlModel::new(32, &mut rng).unwrap();
        let img = sample_image(32, 8);
        let q = q_forward(&model, &img).unwrap();
        assert_eq!(q.len(), 1024);
        assert!(q.iter().all(|v| v.is_finite()));
        assert_eq!(q, q_forward(&model, &img).unwrap());
        let zero = EncodedImage::zeros(32);
        let qz = q_forward(&model, &zero).unwrap();
        assert!(qz.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_class_is_rejected() {
        let items = vec![(sample_image(32, 1), 0usize), (sample_image(32, 2), 0)];
        let schedule = TrainingSchedule {
            max_epochs: Some(1),
            ..TrainingSchedule::classifier_default()
        };
        let schedule = TrainingSchedule { batch_size: 2, ..schedule };
        let got = train_classifier(&items, 2, &schedule, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(got, Err(CoreError::MissingClass(1))));
    }
}
