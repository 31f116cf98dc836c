//! Supervised GAN baseline: the autoencoder as generator against two
//! inverse-signed classifier discriminators.

use crate::class_agent::LabeledImage;
use crate::error::{CoreError, Result};
use crate::models::{
    evaluate_accuracy, images_to_batch, AutoencoderModel, ClassifierModel, TrainingSchedule,
};
use crate::nn::sgd::SgdState;
use crate::nn::TensorBatch;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Clamp applied inside log(1 - D) so a perfect discriminator score stays
/// finite.
pub const D_CLAMP: f64 = 1.0 - 1e-6;

/// Two-discriminator composition: the keep classifier contributes its true
/// class probability with weight 0.5, the hide classifier contributes the
/// complement with weight 0.5. Always in [0, 1].
pub fn discriminator_score(p_keep: f64, p_hide: f64) -> f64 {
    0.5 * p_keep + 0.5 * (1.0 - p_hide)
}

/// Generator objective for one sample: `log(1 - D)` with the clamp.
pub fn generator_log_term(d: f64) -> f64 {
    (1.0 - d.min(D_CLAMP)).ln()
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GanConfig {
    /// Joint pretraining epochs for generator and discriminators.
    pub pretrain_epochs: usize,
    /// Adversarial epochs after pretraining.
    pub adversarial_epochs: usize,
    pub batch_size: usize,
    /// Weight of the auxiliary reconstruction L2 term in the generator loss.
    pub recon_weight: f64,
    /// Generator learning rate during the adversarial phase.
    pub generator_lr: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 100,
            adversarial_epochs: 20,
            batch_size: 40,
            recon_weight: 1.0,
            generator_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GanReport {
    pub pretrain_recon_losses: Vec<f64>,
    pub generator_losses: Vec<f64>,
    /// Post-training accuracy of each discriminator on generated eval images.
    pub eval_accuracy: std::collections::BTreeMap<String, f64>,
}

/// Train the generator/discriminator game.
///
/// Pretraining runs `pretrain_epochs` of reconstruction training for the
/// generator while both classifiers train on real plus generated images with
/// their true labels. The adversarial phase then alternates discriminator
/// batches with generator updates on
/// `log(1 - D(G(I))) + recon_weight * L2(G(I), I)`.
#[allow(clippy::too_many_arguments)]
pub fn gan_train(
    autoencoder: &mut AutoencoderModel,
    keep: &mut ClassifierModel,
    hide: &mut ClassifierModel,
    keep_task: &str,
    hide_task: &str,
    train: &[LabeledImage],
    eval_items: &[LabeledImage],
    cfg: &GanConfig,
    classifier_schedule: &TrainingSchedule,
    autoencoder_schedule: &TrainingSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<GanReport> {
    if train.len() < cfg.batch_size {
        return Err(CoreError::InsufficientData {
            needed: cfg.batch_size,
            got: train.len(),
        });
    }
    let mut report = GanReport {
        pretrain_recon_losses: Vec::new(),
        generator_losses: Vec::new(),
        eval_accuracy: Default::default(),
    };
    let mut sgd_enc = SgdState::new(&autoencoder.encoder);
    let mut sgd_dec = SgdState::new(&autoencoder.decoder);
    let mut sgd_keep = SgdState::new(&keep.net);
    let mut sgd_hide = SgdState::new(&hide.net);

    let keep_labels: Result<Vec<usize>> = train.iter().map(|li| li.label(keep_task)).collect();
    let hide_labels: Result<Vec<usize>> = train.iter().map(|li| li.label(hide_task)).collect();
    let (keep_labels, hide_labels) = (keep_labels?, hide_labels?);

    let mut indices: Vec<usize> = (0..train.len()).collect();

    // Phase 1: joint pretraining. The generator reconstructs; the
    // discriminators also see the generated images with true labels.
    for epoch in 0..cfg.pretrain_epochs {
        rand::seq::SliceRandom::shuffle(indices.as_mut_slice(), rng);
        let mut recon_loss = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let x = gather(train, chunk)?;
            let (generated, loss) = generator_recon_step(
                autoencoder,
                &mut sgd_enc,
                &mut sgd_dec,
                &x,
                autoencoder_schedule.lr_at(epoch),
                autoencoder_schedule,
                rng.gen(),
            )?;
            recon_loss += loss;
            batches += 1;
            let lr = classifier_schedule.lr_at(epoch);
            for (model, sgd, labels) in [
                (&mut *keep, &mut sgd_keep, &keep_labels),
                (&mut *hide, &mut sgd_hide, &hide_labels),
            ] {
                let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                classifier_step(model, sgd, &x, &batch_labels, lr, classifier_schedule, rng.gen())?;
                classifier_step(model, sgd, &generated, &batch_labels, lr, classifier_schedule, rng.gen())?;
            }
        }
        report.pretrain_recon_losses.push(recon_loss / batches as f64);
    }

    // Phase 2: adversarial alternation.
    for epoch in 0..cfg.adversarial_epochs {
        rand::seq::SliceRandom::shuffle(indices.as_mut_slice(), rng);
        let mut gen_loss = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let x = gather(train, chunk)?;
            let keep_batch: Vec<usize> = chunk.iter().map(|&i| keep_labels[i]).collect();
            let hide_batch: Vec<usize> = chunk.iter().map(|&i| hide_labels[i]).collect();

            // Discriminator step on real and generated data.
            let generated = generate(autoencoder, &x, rng.gen())?;
            let lr = classifier_schedule.lr_at(epoch);
            classifier_step(keep, &mut sgd_keep, &x, &keep_batch, lr, classifier_schedule, rng.gen())?;
            classifier_step(keep, &mut sgd_keep, &generated, &keep_batch, lr, classifier_schedule, rng.gen())?;
            classifier_step(hide, &mut sgd_hide, &x, &hide_batch, lr, classifier_schedule, rng.gen())?;
            classifier_step(hide, &mut sgd_hide, &generated, &hide_batch, lr, classifier_schedule, rng.gen())?;

            // Generator step through the frozen discriminators.
            let loss = generator_adversarial_step(
                autoencoder,
                &mut sgd_enc,
                &mut sgd_dec,
                keep,
                hide,
                &x,
                &keep_batch,
                &hide_batch,
                cfg,
                rng.gen(),
            )?;
            if !loss.is_finite() {
                return Err(CoreError::TrainingDiverged {
                    epoch,
                    message: "generator loss is not finite".into(),
                });
            }
            gen_loss += loss;
            batches += 1;
        }
        report.generator_losses.push(gen_loss / batches as f64);
    }

    if !eval_items.is_empty() {
        let x = gather(train, &[])?;
        drop(x);
        let eval_batch = {
            let refs: Vec<&crate::codec::EncodedImage> =
                eval_items.iter().map(|li| &li.image).collect();
            images_to_batch(&refs)?
        };
        let generated = generate(autoencoder, &eval_batch, 0)?;
        let images = crate::models::batch_to_images(&generated)?;
        for (task, model) in [(keep_task, &*keep), (hide_task, &*hide)] {
            let pairs: Result<Vec<(&crate::codec::EncodedImage, usize)>> = images
                .iter()
                .zip(eval_items)
                .map(|(img, li)| Ok((img, li.label(task)?)))
                .collect();
            report
                .eval_accuracy
                .insert(task.to_string(), evaluate_accuracy(model, &pairs?)?);
        }
    }
    Ok(report)
}

fn gather(train: &[LabeledImage], chunk: &[usize]) -> Result<Array4<f32>> {
    if chunk.is_empty() {
        return Ok(Array4::zeros((0, 3, 1, 1)));
    }
    let refs: Vec<&crate::codec::EncodedImage> =
        chunk.iter().map(|&i| &train[i].image).collect();
    images_to_batch(&refs)
}

/// Forward through the autoencoder without gradients.
fn generate(ae: &AutoencoderModel, x: &Array4<f32>, _seed: u64) -> Result<Array4<f32>> {
    let b = ae.encoder.forward_eval(TensorBatch::Nchw(x.clone()))?;
    let y = ae.decoder.forward_eval(b)?;
    y.into_nchw()
        .ok_or_else(|| CoreError::ShapeError("generator output".into()))
}

fn generator_recon_step(
    ae: &mut AutoencoderModel,
    sgd_enc: &mut SgdState<f32>,
    sgd_dec: &mut SgdState<f32>,
    x: &Array4<f32>,
    lr: f64,
    schedule: &TrainingSchedule,
    step_seed: u64,
) -> Result<(Array4<f32>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let (b, tape_e) = ae.encoder.forward_tape(TensorBatch::Nchw(x.clone()), &mut rng)?;
    let (y, tape_d) = ae.decoder.forward_tape(b, &mut rng)?;
    let y = y
        .into_nchw()
        .ok_or_else(|| CoreError::ShapeError("decoder output".into()))?;
    let n_items = x.shape()[0] as f64;
    let numel = x.len() as f64;
    let mut loss = 0.0f64;
    let mut gy = y.clone();
    ndarray::Zip::from(&mut gy).and(x).for_each(|g, &t| {
        let d = (*g - t) as f64;
        loss += d * d;
        *g = (d / n_items) as f32;
    });
    let mut gd = ae.decoder.zero_grads();
    let gb = ae.decoder.backward(tape_d, TensorBatch::Nchw(gy), &mut gd)?;
    let mut ge = ae.encoder.zero_grads();
    ae.encoder.backward(tape_e, gb, &mut ge)?;
    sgd_dec.step(&mut ae.decoder, &gd, lr, schedule.weight_decay, schedule.momentum)?;
    sgd_enc.step(&mut ae.encoder, &ge, lr, schedule.weight_decay, schedule.momentum)?;
    Ok((y, loss / numel))
}

fn classifier_step(
    model: &mut ClassifierModel,
    sgd: &mut SgdState<f32>,
    x: &Array4<f32>,
    labels: &[usize],
    lr: f64,
    schedule: &TrainingSchedule,
    step_seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let (logits, tape) = model.net.forward_tape(TensorBatch::Nchw(x.clone()), &mut rng)?;
    let logits = logits
        .into_nd()
        .ok_or_else(|| CoreError::ShapeError("classifier output".into()))?;
    let probs = crate::nn::loss::softmax_rows(&logits);
    let n = labels.len().max(1) as f64;
    let mut loss = 0.0;
    let mut gy = Array2::<f32>::zeros(logits.raw_dim());
    for (i, &label) in labels.iter().enumerate() {
        loss -= probs[(i, label)].max(1e-300).ln();
        for j in 0..model.n_classes {
            let target = if j == label { 1.0 } else { 0.0 };
            gy[(i, j)] = ((probs[(i, j)] - target) / n) as f32;
        }
    }
    let mut grads = model.net.zero_grads();
    model.net.backward(tape, TensorBatch::Nd(gy), &mut grads)?;
    sgd.step(&mut model.net, &grads, lr, schedule.weight_decay, schedule.momentum)?;
    Ok(loss / n)
}

/// One generator update: backpropagate `log(1-D) + w*L2` through both frozen
/// classifiers into the autoencoder.
#[allow(clippy::too_many_arguments)]
fn generator_adversarial_step(
    ae: &mut AutoencoderModel,
    sgd_enc: &mut SgdState<f32>,
    sgd_dec: &mut SgdState<f32>,
    keep: &ClassifierModel,
    hide: &ClassifierModel,
    x: &Array4<f32>,
    keep_labels: &[usize],
    hide_labels: &[usize],
    cfg: &GanConfig,
    step_seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let n = x.shape()[0];
    let (b, tape_e) = ae.encoder.forward_tape(TensorBatch::Nchw(x.clone()), &mut rng)?;
    let (g, tape_d) = ae.decoder.forward_tape(b, &mut rng)?;
    let g = g
        .into_nchw()
        .ok_or_else(|| CoreError::ShapeError("generator output".into()))?;

    // Forward both discriminators with tapes so input gradients flow back.
    let (keep_logits, keep_tape) = keep
        .net
        .forward_tape(TensorBatch::Nchw(g.clone()), &mut rng)?;
    let (hide_logits, hide_tape) = hide
        .net
        .forward_tape(TensorBatch::Nchw(g.clone()), &mut rng)?;
    let keep_logits = keep_logits.into_nd().expect("classifier output");
    let hide_logits = hide_logits.into_nd().expect("classifier output");
    let p_keep = crate::nn::loss::softmax_rows(&keep_logits);
    let p_hide = crate::nn::loss::softmax_rows(&hide_logits);

    // d loss / d logits for each discriminator.
    let mut keep_gy = Array2::<f32>::zeros(keep_logits.raw_dim());
    let mut hide_gy = Array2::<f32>::zeros(hide_logits.raw_dim());
    let mut loss = 0.0f64;
    for i in 0..n {
        let pk = p_keep[(i, keep_labels[i])];
        let ph = p_hide[(i, hide_labels[i])];
        let d = discriminator_score(pk, ph).min(D_CLAMP);
        loss += (1.0 - d).ln();
        // dL/dD = -1/(1-D); dD/dpk = 0.5; dD/dph = -0.5
        let dl_dd = -1.0 / (1.0 - d) / n as f64;
        let dl_dpk = dl_dd * 0.5;
        let dl_dph = dl_dd * -0.5;
        for j in 0..keep.n_classes {
            let onehot = (j == keep_labels[i]) as u8 as f64;
            let dpk_dlogit = p_keep[(i, keep_labels[i])] * (onehot - p_keep[(i, j)]);
            keep_gy[(i, j)] = (dl_dpk * dpk_dlogit) as f32;
        }
        for j in 0..hide.n_classes {
            let onehot = (j == hide_labels[i]) as u8 as f64;
            let dph_dlogit = p_hide[(i, hide_labels[i])] * (onehot - p_hide[(i, j)]);
            hide_gy[(i, j)] = (dl_dph * dph_dlogit) as f32;
        }
    }
    loss /= n as f64;

    // Input gradients from the discriminators (their parameter grads are
    // computed and discarded; the classifiers stay frozen here).
    let mut keep_grads = keep.net.zero_grads();
    let g_from_keep = keep
        .net
        .backward(keep_tape, TensorBatch::Nd(keep_gy), &mut keep_grads)?
        .into_nchw()
        .expect("input grad");
    let mut hide_grads = hide.net.zero_grads();
    let g_from_hide = hide
        .net
        .backward(hide_tape, TensorBatch::Nd(hide_gy), &mut hide_grads)?
        .into_nchw()
        .expect("input grad");

    // Reconstruction term, per-item L2 convention matching pretraining.
    let n_items = x.shape()[0] as f64;
    let numel = x.len() as f64;
    let mut gg = g.clone();
    let mut recon = 0.0f64;
    ndarray::Zip::from(&mut gg).and(x).for_each(|v, &t| {
        let d = (*v - t) as f64;
        recon += d * d;
        *v = (cfg.recon_weight * d / n_items) as f32;
    });
    loss += cfg.recon_weight * recon / (2.0 * n_items);
    ndarray::Zip::from(&mut gg)
        .and(&g_from_keep)
        .and(&g_from_hide)
        .for_each(|v, &a, &b| *v += a + b);

    let mut gd = ae.decoder.zero_grads();
    let gb = ae.decoder.backward(tape_d, TensorBatch::Nchw(gg), &mut gd)?;
    let mut ge = ae.encoder.zero_grads();
    ae.encoder.backward(tape_e, gb, &mut ge)?;
    sgd_dec.step(&mut ae.decoder, &gd, cfg.generator_lr, 0.0, 0.9)?;
    sgd_enc.step(&mut ae.encoder, &ge, cfg.generator_lr, 0.0, 0.9)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discriminator_composition_bounds() {
        assert_eq!(discriminator_score(1.0, 0.0), 1.0);
        assert_eq!(discriminator_score(0.0, 1.0), 0.0);
        assert_eq!(discriminator_score(0.5, 0.5), 0.5);
        // p_keep == p_hide collapses to 0.5 regardless of the value.
        for p in [0.0, 0.25, 0.9] {
            assert!((discriminator_score(p, p) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_term_stays_finite_at_perfect_score() {
        let v = generator_log_term(1.0);
        assert!(v.is_finite());
        assert!(v < -10.0);
    }
}
