//! The Manipulation Agent: replay memory, deep-Q training with a fixed
//! target network, and bottleneck masking.
//!
//! The agent sees an encoded image as its state and outputs one value per
//! bottleneck feature. Values at or above 0.5 deactivate their feature. The
//! reward is the per-sample probability gap between the classifiers whose
//! accuracy must stay (keep targets) and those whose accuracy must drop
//! (hide targets).

use crate::class_agent::{LabeledImage, TaskClassifier};
use crate::codec::EncodedImage;
use crate::error::{CoreError, Result};
use crate::models::{
    classify_batch, decode_batch, encode_batch, q_forward_batch, AutoencoderModel, DqlModel,
    TrainingSchedule,
};
use crate::nn::network::Grads;
use crate::nn::sgd::SgdState;
use crate::nn::{Bottleneck, TensorBatch};
use crate::par;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::sync::Arc;

/// DQL2 is overwritten with DQL1 after this many completed training runs.
pub const DQL_SYNC_EVERY: usize = 10;

/// Random replay-seeding masks flip between 2 and 100 features.
pub const SWEEP_K_MIN: usize = 2;
pub const SWEEP_K_MAX: usize = 100;
pub const SWEEP_MASKS_PER_K: usize = 100;

/// Entries one full image sweep adds to the memory.
pub fn sweep_entries_per_image(action_dim: usize) -> usize {
    action_dim + (SWEEP_K_MAX - SWEEP_K_MIN + 1) * SWEEP_MASKS_PER_K
}

/// Binary mask over the bottleneck, stored as a bitset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionMask {
    bits: Vec<u64>,
    len: usize,
}

impl ActionMask {
    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Self {
        let mut mask = Self::zeros(len);
        for &i in indices {
            mask.set(i, true);
        }
        mask
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        debug_assert!(i < self.len);
        if value {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.get(i))
    }

    /// Bit words as u32 pairs (low, high) for serialization.
    pub fn to_words(&self) -> Vec<u32> {
        self.bits
            .iter()
            .flat_map(|w| [(*w & 0xffff_ffff) as u32, (*w >> 32) as u32])
            .collect()
    }

    pub fn from_words(len: usize, words: &[u32]) -> Result<Self> {
        let expected = len.div_ceil(64) * 2;
        if words.len() != expected {
            return Err(CoreError::ShapeError(format!(
                "mask of {len} bits needs {expected} words, got {}",
                words.len()
            )));
        }
        let bits = words
            .chunks_exact(2)
            .map(|pair| pair[0] as u64 | ((pair[1] as u64) << 32))
            .collect();
        Ok(Self { bits, len })
    }
}

/// Mask from raw q-values: 1 wherever the value is at least 0.5.
pub fn threshold_actions(q_values: &[f32]) -> Result<ActionMask> {
    let mut mask = ActionMask::zeros(q_values.len());
    for (i, &q) in q_values.iter().enumerate() {
        if !q.is_finite() {
            return Err(CoreError::InvalidQValues(format!(
                "non-finite q-value at index {i}"
            )));
        }
        if q >= 0.5 {
            mask.set(i, true);
        }
    }
    Ok(mask)
}

/// Deactivate masked features: zero where the mask is set.
pub fn apply_mask(b: &Bottleneck, mask: &ActionMask) -> Result<Bottleneck> {
    if b.len() != mask.len() {
        return Err(CoreError::ShapeError(format!(
            "bottleneck has {} values but mask has {}",
            b.len(),
            mask.len()
        )));
    }
    let mut out = b.clone();
    for i in mask.ones() {
        out.0[i] = 0.0;
    }
    Ok(out)
}

/// Which classification tasks to preserve and which to hide.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RewardSpec {
    pub keep_targets: Vec<String>,
    pub hide_targets: Vec<String>,
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.keep_targets.is_empty() || self.hide_targets.is_empty() {
            return Err(CoreError::InvalidRewardSpec(
                "keep and hide target lists must both be non-empty".into(),
            ));
        }
        for k in &self.keep_targets {
            if self.hide_targets.contains(k) {
                return Err(CoreError::InvalidRewardSpec(format!(
                    "task `{k}` appears in both keep and hide lists"
                )));
            }
        }
        Ok(())
    }
}

/// Reward: mean true-class probability over keep targets minus the mean over
/// hide targets. Bounded in [-1, 1].
pub fn compute_reward(spec: &RewardSpec, keep_probs: &[f64], hide_probs: &[f64]) -> Result<f64> {
    spec.validate()?;
    if keep_probs.len() != spec.keep_targets.len() || hide_probs.len() != spec.hide_targets.len() {
        return Err(CoreError::InvalidRewardSpec(format!(
            "expected {} keep and {} hide probabilities",
            spec.keep_targets.len(),
            spec.hide_targets.len()
        )));
    }
    for &p in keep_probs.iter().chain(hide_probs) {
        if !(0.0..=1.0).contains(&p) {
            return Err(CoreError::InvalidRewardSpec(format!(
                "probability {p} outside [0,1]"
            )));
        }
    }
    let keep = keep_probs.iter().sum::<f64>() / keep_probs.len() as f64;
    let hide = hide_probs.iter().sum::<f64>() / hide_probs.len() as f64;
    Ok(keep - hide)
}

/// Frozen classifiers grouped with the reward definition.
pub struct RewardContext<'a> {
    pub spec: &'a RewardSpec,
    pub classifiers: &'a [TaskClassifier],
}

impl<'a> RewardContext<'a> {
    pub fn new(spec: &'a RewardSpec, classifiers: &'a [TaskClassifier]) -> Result<Self> {
        spec.validate()?;
        let ctx = Self { spec, classifiers };
        for task in spec.keep_targets.iter().chain(&spec.hide_targets) {
            ctx.classifier(task)?;
        }
        Ok(ctx)
    }

    pub fn classifier(&self, task: &str) -> Result<&TaskClassifier> {
        self.classifiers
            .iter()
            .find(|c| c.task == task)
            .ok_or_else(|| CoreError::InvalidRewardSpec(format!("no classifier for task `{task}`")))
    }

    /// Per-sample rewards for manipulated images against their true labels.
    pub fn rewards(
        &self,
        images: &[&EncodedImage],
        labels: &[&BTreeMap<String, usize>],
    ) -> Result<Vec<f64>> {
        if images.len() != labels.len() {
            return Err(CoreError::ShapeError("images and labels disagree".into()));
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let true_probs = |task: &str| -> Result<Vec<f64>> {
            let cls = self.classifier(task)?;
            let probs = classify_batch(&cls.model, images)?;
            labels
                .iter()
                .enumerate()
                .map(|(n, l)| {
                    let label = *l.get(task).ok_or_else(|| {
                        CoreError::InvalidInput(format!("no label for task `{task}`"))
                    })?;
                    Ok(probs[(n, label)])
                })
                .collect()
        };
        let mut keep = vec![0.0; images.len()];
        for task in &self.spec.keep_targets {
            for (acc, p) in keep.iter_mut().zip(true_probs(task)?) {
                *acc += p;
            }
        }
        let mut hide = vec![0.0; images.len()];
        for task in &self.spec.hide_targets {
            for (acc, p) in hide.iter_mut().zip(true_probs(task)?) {
                *acc += p;
            }
        }
        let nk = self.spec.keep_targets.len() as f64;
        let nh = self.spec.hide_targets.len() as f64;
        Ok(keep
            .iter()
            .zip(&hide)
            .map(|(k, h)| k / nk - h / nh)
            .collect())
    }
}

struct StoredEntry {
    state_idx: u32,
    mask: ActionMask,
    reward: f64,
}

/// A stored experience, viewed against the shared state store.
pub struct ReplayEntry<'a> {
    pub state: &'a EncodedImage,
    pub labels: &'a BTreeMap<String, usize>,
    pub action: &'a ActionMask,
    pub reward: f64,
}

/// Bounded, append-only experience store over the training images.
///
/// States live once in a shared `Arc`; entries reference them by index, so
/// provenance is structural: only training-set images can ever appear.
/// Eviction is oldest-first; sampling is uniform.
pub struct ReplayMemory {
    states: Arc<Vec<LabeledImage>>,
    entries: VecDeque<StoredEntry>,
    capacity: usize,
}

impl ReplayMemory {
    pub fn new(states: Arc<Vec<LabeledImage>>, capacity: usize) -> Self {
        Self {
            states,
            entries: VecDeque::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn states(&self) -> &Arc<Vec<LabeledImage>> {
        &self.states
    }

    pub fn entry(&self, i: usize) -> ReplayEntry<'_> {
        let e = &self.entries[i];
        let state = &self.states[e.state_idx as usize];
        ReplayEntry {
            state: &state.image,
            labels: &state.labels,
            action: &e.mask,
            reward: e.reward,
        }
    }

    /// Append one experience, evicting the oldest entry when full.
    pub fn push(&mut self, state_idx: usize, mask: ActionMask, reward: f64) -> Result<()> {
        if state_idx >= self.states.len() {
            return Err(CoreError::InvalidInput(format!(
                "state index {state_idx} outside the training store"
            )));
        }
        if !reward.is_finite() || !(-1.0..=1.0).contains(&reward) {
            return Err(CoreError::InvalidInput(format!(
                "reward {reward} outside [-1,1]"
            )));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(StoredEntry {
            state_idx: state_idx as u32,
            mask,
            reward,
        });
        Ok(())
    }

    /// Uniform sample of entry indices, with replacement.
    pub fn sample_indices<R: Rng>(&self, rng: &mut R, n: usize) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(CoreError::EmptyMemory);
        }
        Ok((0..n).map(|_| rng.gen_range(0..self.entries.len())).collect())
    }

    /// Persist entries (states are re-derived from the dataset on load).
    pub fn save<W: std::io::Write>(
        &self,
        w: W,
        meta: &crate::checkpoint::ContainerMeta,
    ) -> Result<()> {
        use crate::checkpoint::{write_container, TensorPayload, TensorRecord};
        let n = self.entries.len();
        let action_dim = self.entries.front().map(|e| e.mask.len()).unwrap_or(0);
        let words_per = action_dim.div_ceil(64) * 2;
        let mut mask_words = Vec::with_capacity(n * words_per);
        for e in &self.entries {
            mask_words.extend(e.mask.to_words());
        }
        let tensors = vec![
            TensorRecord {
                name: "action_dim".into(),
                dims: vec![2],
                payload: TensorPayload::U32(vec![action_dim as u32, self.capacity as u32]),
            },
            TensorRecord {
                name: "state_idx".into(),
                dims: vec![n as u32],
                payload: TensorPayload::U32(self.entries.iter().map(|e| e.state_idx).collect()),
            },
            TensorRecord {
                name: "reward".into(),
                dims: vec![n as u32],
                payload: TensorPayload::F64(self.entries.iter().map(|e| e.reward).collect()),
            },
            TensorRecord {
                name: "mask_words".into(),
                dims: vec![n as u32, words_per as u32],
                payload: TensorPayload::U32(mask_words),
            },
        ];
        write_container(w, meta, &tensors)
    }

    pub fn load<R: std::io::Read>(
        r: R,
        states: Arc<Vec<LabeledImage>>,
    ) -> Result<(Self, crate::checkpoint::ContainerMeta)> {
        use crate::checkpoint::{read_container, TensorPayload};
        let (meta, tensors) = read_container(r)?;
        let get = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| CoreError::Checkpoint(format!("replay container lacks {name}")))
        };
        let head = match &get("action_dim")?.payload {
            TensorPayload::U32(v) if v.len() == 2 => v.clone(),
            _ => return Err(CoreError::Checkpoint("bad replay header".into())),
        };
        let (action_dim, capacity) = (head[0] as usize, head[1] as usize);
        let idx = match &get("state_idx")?.payload {
            TensorPayload::U32(v) => v.clone(),
            _ => return Err(CoreError::Checkpoint("bad state indices".into())),
        };
        let rewards = match &get("reward")?.payload {
            TensorPayload::F64(v) => v.clone(),
            _ => return Err(CoreError::Checkpoint("bad rewards".into())),
        };
        let words = get("mask_words")?;
        let words_per = words.dims.get(1).copied().unwrap_or(0) as usize;
        let data = match &words.payload {
            TensorPayload::U32(v) => v,
            _ => return Err(CoreError::Checkpoint("bad mask words".into())),
        };
        let mut mem = ReplayMemory::new(states, capacity);
        for i in 0..idx.len() {
            let mask =
                ActionMask::from_words(action_dim, &data[i * words_per..(i + 1) * words_per])?;
            mem.push(idx[i] as usize, mask, rewards[i])?;
        }
        Ok((mem, meta))
    }
}

/// A random exploration mask with between 2 and 100 set flags, matching the
/// distribution used to seed the memory.
pub fn random_mask<R: Rng>(action_dim: usize, rng: &mut R) -> ActionMask {
    let k = rng.gen_range(SWEEP_K_MIN..=SWEEP_K_MAX.min(action_dim));
    let indices = rand::seq::index::sample(rng, action_dim, k).into_vec();
    ActionMask::from_indices(action_dim, &indices)
}

pub struct InitStats {
    pub images_swept: usize,
    pub entries_added: usize,
}

/// Seed the memory: per image, one single-flag entry for every bottleneck
/// value plus 100 random masks for each flip count from 2 to 100, all with
/// measured rewards.
pub fn init_memory(
    mem: &mut ReplayMemory,
    image_indices: &[usize],
    autoencoder: &AutoencoderModel,
    ctx: &RewardContext,
    rng: &mut ChaCha8Rng,
) -> Result<InitStats> {
    if !mem.is_empty() {
        return Err(CoreError::InvalidInput(
            "memory must be empty before the sweep".into(),
        ));
    }
    let action_dim = autoencoder.bottleneck_len();
    if action_dim < SWEEP_K_MAX {
        return Err(CoreError::InvalidInput(format!(
            "bottleneck of {action_dim} values cannot host {SWEEP_K_MAX}-flag masks"
        )));
    }
    let required = sweep_entries_per_image(action_dim);
    if mem.capacity() < required {
        return Err(CoreError::CapacityError {
            capacity: mem.capacity(),
            required,
        });
    }

    let states = Arc::clone(mem.states());
    let mut added = 0usize;
    for &idx in image_indices {
        let state = states.get(idx).ok_or_else(|| {
            CoreError::InvalidInput(format!("state index {idx} outside the training store"))
        })?;
        let bottleneck = encode_batch(autoencoder, &[&state.image])?.pop().unwrap();

        let mut masks: Vec<ActionMask> = Vec::with_capacity(required);
        for i in 0..action_dim {
            masks.push(ActionMask::from_indices(action_dim, &[i]));
        }
        for k in SWEEP_K_MIN..=SWEEP_K_MAX {
            for _ in 0..SWEEP_MASKS_PER_K {
                let indices = rand::seq::index::sample(rng, action_dim, k).into_vec();
                masks.push(ActionMask::from_indices(action_dim, &indices));
            }
        }

        let rewards = measure_mask_rewards(autoencoder, ctx, state, &bottleneck, &masks)?;
        for (mask, reward) in masks.into_iter().zip(rewards) {
            mem.push(idx, mask, reward)?;
            added += 1;
        }
    }
    Ok(InitStats {
        images_swept: image_indices.len(),
        entries_added: added,
    })
}

/// Decode every masked bottleneck and score it against the classifiers.
fn measure_mask_rewards(
    autoencoder: &AutoencoderModel,
    ctx: &RewardContext,
    state: &LabeledImage,
    bottleneck: &Bottleneck,
    masks: &[ActionMask],
) -> Result<Vec<f64>> {
    const EVAL_CHUNK: usize = 64;
    let chunk_results: Vec<Result<Vec<f64>>> = masks
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let masked: Result<Vec<Bottleneck>> =
                chunk.iter().map(|m| apply_mask(bottleneck, m)).collect();
            let images = decode_batch(autoencoder, &masked?)?;
            let refs: Vec<&EncodedImage> = images.iter().collect();
            let labels: Vec<&BTreeMap<String, usize>> =
                std::iter::repeat(&state.labels).take(refs.len()).collect();
            ctx.rewards(&refs, &labels)
        })
        .collect();
    let mut rewards = Vec::with_capacity(masks.len());
    for r in chunk_results {
        rewards.extend(r?);
    }
    Ok(rewards)
}

/// Mean per-epoch losses of one training run.
#[derive(Debug, Clone)]
pub struct RunStats {
    pub epoch_losses: Vec<f64>,
}

/// One training run: the given number of epochs over the memory.
///
/// For each sampled entry the acted positions regress toward
/// `R + y * DQL2(state)`, minimizing half the squared target error. Each
/// action's gradient is averaged over the batch entries that acted on it,
/// so sparse singleton sweeps and dense masks carry comparable step sizes.
/// The reported loss is the batch mean over entries of the mean squared
/// target error over acted positions.
pub fn train_dql(
    dql1: &mut DqlModel,
    dql2: &DqlModel,
    sgd: &mut SgdState<f32>,
    mem: &ReplayMemory,
    discount_y: f64,
    schedule: &TrainingSchedule,
    batches_per_epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RunStats> {
    if mem.is_empty() {
        return Err(CoreError::EmptyMemory);
    }
    schedule.validate()?;
    let epochs = schedule.max_epochs.unwrap_or(10);
    let full = mem.len().div_ceil(schedule.batch_size);
    let batches = if batches_per_epoch == 0 {
        full
    } else {
        batches_per_epoch.min(full)
    };

    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..batches {
            let picks = mem.sample_indices(rng, schedule.batch_size)?;
            let loss = dql_batch_step(dql1, dql2, sgd, mem, &picks, discount_y, schedule, rng.gen())?;
            if !loss.is_finite() {
                return Err(CoreError::TrainingDiverged {
                    epoch,
                    message: "q-loss is not finite".into(),
                });
            }
            epoch_loss += loss;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok(RunStats { epoch_losses })
}

fn dql_batch_step(
    dql1: &mut DqlModel,
    dql2: &DqlModel,
    sgd: &mut SgdState<f32>,
    mem: &ReplayMemory,
    picks: &[usize],
    discount_y: f64,
    schedule: &TrainingSchedule,
    step_seed: u64,
) -> Result<f64> {
    let n = picks.len();
    let action_dim = dql1.action_dim;
    let states: Vec<&EncodedImage> = picks.iter().map(|&i| mem.entry(i).state).collect();
    let batch = crate::models::images_to_batch(&states)?;

    // Per-action counts over the batch normalize the gradient.
    let mut counts = vec![0u32; action_dim];
    for &i in picks {
        for a in mem.entry(i).action.ones() {
            counts[a] += 1;
        }
    }

    let net1 = &dql1.net;
    let net2 = &dql2.net;
    let ranges = par::chunk_ranges(n);
    let shards: Vec<Result<(f64, Grads<f32>)>> = ranges
        .into_par_iter()
        .enumerate()
        .map(|(shard_idx, range)| {
            let x = batch.slice(s![range.clone(), .., .., ..]).to_owned();
            let q2 = net2
                .forward_eval(TensorBatch::Nchw(x.clone()))?
                .into_nd()
                .ok_or_else(|| CoreError::ShapeError("dql2 output".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed.wrapping_add(shard_idx as u64));
            let (q1, tape) = net1.forward_tape(TensorBatch::Nchw(x), &mut rng)?;
            let q1 = q1
                .into_nd()
                .ok_or_else(|| CoreError::ShapeError("dql1 output".into()))?;

            let mut gy = Array2::<f32>::zeros(q1.raw_dim());
            let mut loss_sum = 0.0f64;
            for (row, pick) in range.clone().enumerate() {
                let entry = mem.entry(picks[pick]);
                let reward = entry.reward;
                let mut acted = 0usize;
                let mut sq = 0.0f64;
                for a in entry.action.ones() {
                    let target = reward + discount_y * q2[(row, a)] as f64;
                    let diff = q1[(row, a)] as f64 - target;
                    sq += diff * diff;
                    acted += 1;
                    gy[(row, a)] = (diff / counts[a].max(1) as f64) as f32;
                }
                if acted > 0 {
                    loss_sum += sq / acted as f64;
                }
            }
            let mut grads = net1.zero_grads();
            net1.backward(tape, TensorBatch::Nd(gy), &mut grads)?;
            Ok((loss_sum, grads))
        })
        .collect();

    let mut total = 0.0;
    let mut merged: Option<Grads<f32>> = None;
    for shard in shards {
        let (loss, grads) = shard?;
        total += loss;
        match merged.as_mut() {
            Some(m) => m.add_assign(&grads),
            None => merged = Some(grads),
        }
    }
    let grads = merged.expect("shards");
    sgd.step(
        &mut dql1.net,
        &grads,
        schedule.initial_lr,
        schedule.weight_decay,
        schedule.momentum,
    )?;
    Ok(total / n as f64)
}

/// Greedy manipulation of one image: threshold the q-values, zero the masked
/// bottleneck features, decode.
pub fn manipulate(
    image: &EncodedImage,
    dql1: &DqlModel,
    autoencoder: &AutoencoderModel,
) -> Result<(EncodedImage, ActionMask)> {
    let b = encode_batch(autoencoder, &[image])?.pop().unwrap();
    Ok(manipulate_batch(&[image], &[b], dql1, autoencoder)?.pop().unwrap())
}

/// Greedy manipulation with precomputed bottlenecks.
pub fn manipulate_batch(
    images: &[&EncodedImage],
    bottlenecks: &[Bottleneck],
    dql1: &DqlModel,
    autoencoder: &AutoencoderModel,
) -> Result<Vec<(EncodedImage, ActionMask)>> {
    if images.len() != bottlenecks.len() {
        return Err(CoreError::ShapeError("images and bottlenecks disagree".into()));
    }
    let q = q_forward_batch(dql1, images)?;
    let mut masks = Vec::with_capacity(images.len());
    for row in q.rows() {
        masks.push(threshold_actions(row.as_slice().expect("contiguous q row"))?);
    }
    let masked: Result<Vec<Bottleneck>> = bottlenecks
        .iter()
        .zip(&masks)
        .map(|(b, m)| apply_mask(b, m))
        .collect();
    let decoded = decode_batch(autoencoder, &masked?)?;
    Ok(decoded.into_iter().zip(masks).collect())
}

/// Greedy manipulation of a whole labeled set, in parallel chunks.
pub fn manipulate_set(
    items: &[LabeledImage],
    autoencoder: &AutoencoderModel,
    dql1: &DqlModel,
) -> Result<Vec<(EncodedImage, ActionMask)>> {
    let chunked: Vec<Result<Vec<(EncodedImage, ActionMask)>>> = par::chunk_ranges(items.len())
        .into_par_iter()
        .map(|range| {
            let refs: Vec<&EncodedImage> = items[range].iter().map(|li| &li.image).collect();
            let bs = encode_batch(autoencoder, &refs)?;
            manipulate_batch(&refs, &bs, dql1, autoencoder)
        })
        .collect();
    let mut out = Vec::with_capacity(items.len());
    for c in chunked {
        out.extend(c?);
    }
    Ok(out)
}

/// Linear anneal of the discount factor and the exploration rate across an
/// iteration's training runs.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DiscountSchedule {
    pub y_start: f64,
    pub y_end: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
}

impl Default for DiscountSchedule {
    fn default() -> Self {
        Self {
            y_start: 0.9,
            y_end: 0.1,
            epsilon_start: 0.5,
            epsilon_end: 0.05,
        }
    }
}

impl DiscountSchedule {
    pub fn at(&self, step: usize, total_steps: usize) -> (f64, f64) {
        let frac = if total_steps > 1 {
            step as f64 / (total_steps - 1) as f64
        } else {
            0.0
        };
        (
            self.y_start + (self.y_end - self.y_start) * frac,
            self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac,
        )
    }
}

/// Knobs of one reinforcement-learning iteration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct IterationConfig {
    /// Training runs per iteration.
    pub steps: usize,
    /// Images manipulated (and appended to memory) per training run.
    pub manip_batch: usize,
    pub discount: DiscountSchedule,
    /// Stop early when the moving average of the reward changes less than
    /// the tolerance between consecutive windows.
    pub moving_avg_window: usize,
    pub moving_avg_tol: f64,
    /// Batches per DQL epoch; 0 covers the whole memory.
    pub dql_batches_per_epoch: usize,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            manip_batch: 32,
            discount: DiscountSchedule::default(),
            moving_avg_window: 50,
            moving_avg_tol: 0.005,
            dql_batches_per_epoch: 0,
        }
    }
}

/// The Manipulation Agent: both Q-networks, the optimizer state, the replay
/// memory, and the global run counter that drives DQL2 synchronization.
pub struct AgentState {
    pub dql1: DqlModel,
    pub dql2: DqlModel,
    pub memory: ReplayMemory,
    pub runs_completed: usize,
    sgd: SgdState<f32>,
}

impl AgentState {
    /// Fresh agent; DQL2 starts as a copy of DQL1.
    pub fn new(resolution: usize, memory: ReplayMemory, rng: &mut ChaCha8Rng) -> Result<Self> {
        let dql1 = DqlModel::new(resolution, rng)?;
        let mut dql2 = DqlModel::new(resolution, rng)?;
        dql2.net.copy_params_from(&dql1.net)?;
        let sgd = SgdState::new(&dql1.net);
        Ok(Self {
            dql1,
            dql2,
            memory,
            runs_completed: 0,
            sgd,
        })
    }

    /// Persist both networks, the optimizer state, the run counter, and the
    /// replay entries under `dir`.
    pub fn save_dir(&self, dir: &std::path::Path, meta: &crate::checkpoint::ContainerMeta) -> Result<()> {
        use crate::checkpoint::{save_dql, write_container, TensorPayload, TensorRecord};
        std::fs::create_dir_all(dir)?;
        let mut meta = meta.clone();
        meta.epoch = self.runs_completed as u64;
        save_dql(&dir.join("dql1.gzck"), &self.dql1, &meta)?;
        save_dql(&dir.join("dql2.gzck"), &self.dql2, &meta)?;
        let vel: Vec<TensorRecord> = self
            .sgd
            .buffers()
            .iter()
            .enumerate()
            .map(|(i, b)| TensorRecord {
                name: format!("velocity{i:03}"),
                dims: vec![b.len() as u32],
                payload: TensorPayload::F32(b.clone()),
            })
            .collect();
        write_container(
            std::io::BufWriter::new(std::fs::File::create(dir.join("dql1_vel.gzck"))?),
            &meta,
            &vel,
        )?;
        self.memory.save(
            std::io::BufWriter::new(std::fs::File::create(dir.join("replay.gzck"))?),
            &meta,
        )
    }

    pub fn load_dir(dir: &std::path::Path, states: Arc<Vec<LabeledImage>>) -> Result<Self> {
        use crate::checkpoint::{load_dql, read_container, TensorPayload};
        let (dql1, meta) = load_dql(&dir.join("dql1.gzck"))?;
        let (dql2, _) = load_dql(&dir.join("dql2.gzck"))?;
        let (_, vel_tensors) = read_container(std::io::BufReader::new(std::fs::File::open(
            dir.join("dql1_vel.gzck"),
        )?))?;
        let buffers: Result<Vec<Vec<f32>>> = vel_tensors
            .into_iter()
            .map(|t| match t.payload {
                TensorPayload::F32(v) => Ok(v),
                _ => Err(CoreError::Checkpoint("bad velocity tensor".into())),
            })
            .collect();
        let sgd = SgdState::restore(&dql1.net, buffers?)?;
        let (memory, _) = ReplayMemory::load(
            std::io::BufReader::new(std::fs::File::open(dir.join("replay.gzck"))?),
            states,
        )?;
        Ok(Self {
            dql1,
            dql2,
            memory,
            runs_completed: meta.epoch as usize,
            sgd,
        })
    }

    /// One training run plus the fixed-target bookkeeping: after every tenth
    /// completed run DQL2 is overwritten with DQL1.
    pub fn training_run(
        &mut self,
        discount_y: f64,
        schedule: &TrainingSchedule,
        batches_per_epoch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<RunStats> {
        let stats = train_dql(
            &mut self.dql1,
            &self.dql2,
            &mut self.sgd,
            &self.memory,
            discount_y,
            schedule,
            batches_per_epoch,
            rng,
        )?;
        self.runs_completed += 1;
        if self.runs_completed % DQL_SYNC_EVERY == 0 {
            self.dql2.net.copy_params_from(&self.dql1.net)?;
        }
        Ok(stats)
    }
}

/// Machine-readable record of one iteration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub runs: usize,
    pub mean_reward: f64,
    /// Accuracy of the frozen classifiers on the manipulated test set.
    pub pre_adaptation_accuracy: BTreeMap<String, f64>,
}

/// One reinforcement-learning iteration: alternate manipulation of sampled
/// training images, reward queries, memory appends, and DQL training runs,
/// then evaluate the frozen classifiers on the manipulated test set.
#[allow(clippy::too_many_arguments)]
pub fn run_iteration(
    state: &mut AgentState,
    train_bottlenecks: &[Bottleneck],
    test: &[LabeledImage],
    autoencoder: &AutoencoderModel,
    ctx: &RewardContext,
    cfg: &IterationConfig,
    dql_schedule: &TrainingSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<IterationReport> {
    let states = Arc::clone(state.memory.states());
    if train_bottlenecks.len() != states.len() {
        return Err(CoreError::ShapeError(
            "precomputed bottlenecks disagree with the training store".into(),
        ));
    }
    let action_dim = state.dql1.action_dim;
    let mut reward_history: Vec<f64> = Vec::with_capacity(cfg.steps);
    let mut runs = 0usize;

    for step in 0..cfg.steps {
        let (y, epsilon) = cfg.discount.at(step, cfg.steps);

        // (a) manipulate a sampled batch of training images
        let picks: Vec<usize> = (0..cfg.manip_batch)
            .map(|_| rng.gen_range(0..states.len()))
            .collect();
        let images: Vec<&EncodedImage> = picks.iter().map(|&i| &states[i].image).collect();
        let q = q_forward_batch(&state.dql1, &images)?;
        let mut masks = Vec::with_capacity(picks.len());
        for row in q.rows() {
            let greedy = threshold_actions(row.as_slice().expect("contiguous q row"))?;
            // epsilon-greedy: sometimes substitute a random sweep-style mask
            let mask = if rng.gen::<f64>() < epsilon {
                random_mask(action_dim, rng)
            } else {
                greedy
            };
            masks.push(mask);
        }
        let masked: Result<Vec<Bottleneck>> = picks
            .iter()
            .zip(&masks)
            .map(|(&i, m)| apply_mask(&train_bottlenecks[i], m))
            .collect();
        let manipulated = decode_batch(autoencoder, &masked?)?;

        // (b) query the frozen classifiers for rewards
        let refs: Vec<&EncodedImage> = manipulated.iter().collect();
        let labels: Vec<&BTreeMap<String, usize>> =
            picks.iter().map(|&i| &states[i].labels).collect();
        let rewards = ctx.rewards(&refs, &labels)?;
        let step_reward = rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;
        reward_history.push(step_reward);

        // (c) append the experiences
        for ((pick, mask), reward) in picks.into_iter().zip(masks).zip(&rewards) {
            state.memory.push(pick, mask, *reward)?;
        }

        // (d) one DQL training run
        state.training_run(y, dql_schedule, cfg.dql_batches_per_epoch, rng)?;
        runs += 1;

        // optional early stop on a stabilized reward
        let w = cfg.moving_avg_window;
        if w > 0 && reward_history.len() >= 2 * w {
            let recent: f64 = reward_history[reward_history.len() - w..].iter().sum::<f64>() / w as f64;
            let prior: f64 = reward_history
                [reward_history.len() - 2 * w..reward_history.len() - w]
                .iter()
                .sum::<f64>()
                / w as f64;
            if (recent - prior).abs() < cfg.moving_avg_tol {
                break;
            }
        }
    }

    // pre-adaptation accuracies on the manipulated test set
    let manipulated_test = manipulate_set(test, autoencoder, &state.dql1)?;
    let mut pre_adaptation_accuracy = BTreeMap::new();
    for cls in ctx.classifiers {
        let pairs: Result<Vec<(&EncodedImage, usize)>> = manipulated_test
            .iter()
            .zip(test)
            .map(|((img, _), li)| Ok((img, li.label(&cls.task)?)))
            .collect();
        let acc = crate::models::evaluate_accuracy(&cls.model, &pairs?)?;
        pre_adaptation_accuracy.insert(cls.task.clone(), acc);
    }

    Ok(IterationReport {
        iteration: 0,
        runs,
        mean_reward: reward_history.iter().sum::<f64>() / reward_history.len().max(1) as f64,
        pre_adaptation_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_is_inclusive_at_half() {
        let mask = threshold_actions(&[0.5; 8]).unwrap();
        assert_eq!(mask.count_ones(), 8);
        let mask = threshold_actions(&[0.4999; 8]).unwrap();
        assert_eq!(mask.count_ones(), 0);
        let mut q = vec![0.0f32; 8];
        q[..3].copy_from_slice(&[0.2, 0.7, 0.5]);
        let mask = threshold_actions(&q).unwrap();
        assert!(!mask.get(0));
        assert!(mask.get(1));
        assert!(mask.get(2));
        assert_eq!(mask.count_ones(), 2);
    }

    #[test]
    fn threshold_rejects_non_finite() {
        assert!(matches!(
            threshold_actions(&[0.1, f32::NAN]),
            Err(CoreError::InvalidQValues(_))
        ));
    }

    #[test]
    fn apply_mask_zeros_selected_positions() {
        let b = Bottleneck(vec![1.0, 2.0, 0.0, 3.0]);
        let empty = ActionMask::zeros(4);
        assert_eq!(apply_mask(&b, &empty).unwrap(), b);

        let all = ActionMask::from_indices(4, &[0, 1, 2, 3]);
        assert_eq!(apply_mask(&b, &all).unwrap().0, vec![0.0; 4]);

        let some = ActionMask::from_indices(4, &[1, 2]);
        let out = apply_mask(&b, &some).unwrap();
        assert_eq!(out.0, vec![1.0, 0.0, 0.0, 3.0]);
        // idempotent
        assert_eq!(apply_mask(&out, &some).unwrap(), out);

        let short = ActionMask::zeros(3);
        assert!(matches!(apply_mask(&b, &short), Err(CoreError::ShapeError(_))));
    }

    #[test]
    fn reward_is_keep_minus_hide() {
        let spec = RewardSpec {
            keep_targets: vec!["stimulus".into()],
            hide_targets: vec!["subject".into()],
        };
        assert_eq!(compute_reward(&spec, &[1.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(compute_reward(&spec, &[0.0], &[1.0]).unwrap(), -1.0);
        let r = compute_reward(&spec, &[0.96], &[0.93]).unwrap();
        assert!((r - 0.03).abs() < 1e-12);
    }

    #[test]
    fn reward_spec_is_validated() {
        let bad = RewardSpec {
            keep_targets: vec![],
            hide_targets: vec!["subject".into()],
        };
        assert!(matches!(
            compute_reward(&bad, &[], &[0.5]),
            Err(CoreError::InvalidRewardSpec(_))
        ));
        let overlap = RewardSpec {
            keep_targets: vec!["a".into()],
            hide_targets: vec!["a".into()],
        };
        assert!(overlap.validate().is_err());
        let spec = RewardSpec {
            keep_targets: vec!["a".into()],
            hide_targets: vec!["b".into()],
        };
        assert!(compute_reward(&spec, &[1.2], &[0.0]).is_err());
    }

    #[test]
    fn memory_bounds_and_eviction() {
        let states = Arc::new(vec![LabeledImage {
            image: EncodedImage::zeros(16),
            labels: BTreeMap::new(),
        }]);
        let mut mem = ReplayMemory::new(states, 3);
        for i in 0..5 {
            mem.push(0, ActionMask::from_indices(4, &[i % 4]), 0.1).unwrap();
        }
        assert_eq!(mem.len(), 3);
        // oldest-first eviction: surviving masks are those of pushes 2,3,4
        assert!(mem.entry(0).action.get(2));
        assert!(mem.entry(1).action.get(3));
        assert!(mem.entry(2).action.get(0));
    }

    #[test]
    fn memory_rejects_bad_rewards_and_indices() {
        let states = Arc::new(vec![LabeledImage {
            image: EncodedImage::zeros(16),
            labels: BTreeMap::new(),
        }]);
        let mut mem = ReplayMemory::new(states, 8);
        assert!(mem.push(0, ActionMask::zeros(4), 1.5).is_err());
        assert!(mem.push(0, ActionMask::zeros(4), f64::NAN).is_err());
        assert!(mem.push(1, ActionMask::zeros(4), 0.0).is_err());
        assert!(mem.sample_indices(&mut ChaCha8Rng::seed_from_u64(0), 4).is_err());
    }

    #[test]
    fn random_masks_have_2_to_100_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let m = random_mask(256, &mut rng);
            let k = m.count_ones();
            assert!((SWEEP_K_MIN..=SWEEP_K_MAX).contains(&k));
        }
    }

    #[test]
    fn sweep_count_formula() {
        assert_eq!(sweep_entries_per_image(4096), 13_996);
        assert_eq!(sweep_entries_per_image(1024), 10_924);
    }

    #[test]
    fn discount_schedule_anneals_linearly() {
        let d = DiscountSchedule::default();
        let (y0, e0) = d.at(0, 11);
        let (y10, e10) = d.at(10, 11);
        assert!((y0 - 0.9).abs() < 1e-12 && (e0 - 0.5).abs() < 1e-12);
        assert!((y10 - 0.1).abs() < 1e-12 && (e10 - 0.05).abs() < 1e-12);
    }
}
