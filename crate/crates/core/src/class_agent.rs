//! The Classification Agent: an append-only memory of manipulated training
//! images plus from-scratch retraining of every task classifier.

use crate::checkpoint::{
    read_container, write_container, ContainerMeta, TensorPayload, TensorRecord,
};
use crate::codec::EncodedImage;
use crate::error::{CoreError, Result};
use crate::models::{evaluate_accuracy, train_classifier, ClassifierModel, TrainingSchedule};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};

/// Where an image came from. Only training data may enter agent memories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Train,
    Test,
}

/// An image with one class label per task, the currency of both agents.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: EncodedImage,
    pub labels: BTreeMap<String, usize>,
}

impl LabeledImage {
    pub fn label(&self, task: &str) -> Result<usize> {
        self.labels
            .get(task)
            .copied()
            .ok_or_else(|| CoreError::InvalidInput(format!("no label for task `{task}`")))
    }
}

/// A classification task: name and class count.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub n_classes: usize,
}

/// A trained classifier bound to its task name.
pub struct TaskClassifier {
    pub task: String,
    pub model: ClassifierModel,
}

#[derive(Debug, Clone)]
struct MemoryEntry {
    image: EncodedImage,
    labels: BTreeMap<String, usize>,
    iteration: u32,
}

/// All manipulated training images seen so far, with labels. Entries are
/// never deleted across iterations.
#[derive(Debug, Clone, Default)]
pub struct ClassifierMemory {
    entries: Vec<MemoryEntry>,
}

impl ClassifierMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append one manipulated image. Test-set data is refused.
    pub fn record(
        &mut self,
        image: EncodedImage,
        labels: BTreeMap<String, usize>,
        iteration: u32,
        provenance: Provenance,
    ) -> Result<()> {
        if provenance != Provenance::Train {
            return Err(CoreError::ProvenanceError);
        }
        self.entries.push(MemoryEntry {
            image,
            labels,
            iteration,
        });
        Ok(())
    }

    pub fn iterations_present(&self) -> Vec<u32> {
        let mut seen: Vec<u32> = self.entries.iter().map(|e| e.iteration).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    fn labeled_images(&self) -> impl Iterator<Item = (&EncodedImage, &BTreeMap<String, usize>)> {
        self.entries.iter().map(|e| (&e.image, &e.labels))
    }

    /// Persist as a data container: images as one f32 tensor plus one u32
    /// label tensor per task and the iteration indices.
    pub fn save<W: Write>(&self, w: W, meta: &ContainerMeta) -> Result<()> {
        let n = self.entries.len();
        let res = self.entries.first().map(|e| e.image.resolution()).unwrap_or(0);
        let mut image_data = Vec::with_capacity(n * 3 * res * res);
        for e in &self.entries {
            image_data.extend_from_slice(e.image.data());
        }
        let mut tensors = vec![
            TensorRecord {
                name: "images".into(),
                dims: vec![n as u32, 3, res as u32, res as u32],
                payload: TensorPayload::F32(image_data),
            },
            TensorRecord {
                name: "iterations".into(),
                dims: vec![n as u32],
                payload: TensorPayload::U32(self.entries.iter().map(|e| e.iteration).collect()),
            },
        ];
        let mut task_names: Vec<&String> = self
            .entries
            .first()
            .map(|e| e.labels.keys().collect())
            .unwrap_or_default();
        task_names.sort();
        for task in task_names {
            let labels: Option<Vec<u32>> = self
                .entries
                .iter()
                .map(|e| e.labels.get(task).map(|&l| l as u32))
                .collect();
            let labels = labels.ok_or_else(|| {
                CoreError::InvalidInput(format!("memory entry lacks task `{task}`"))
            })?;
            tensors.push(TensorRecord {
                name: format!("labels.{task}"),
                dims: vec![n as u32],
                payload: TensorPayload::U32(labels),
            });
        }
        write_container(w, meta, &tensors)
    }

    pub fn load<R: Read>(r: R) -> Result<(Self, ContainerMeta)> {
        let (meta, tensors) = read_container(r)?;
        let find = |name: &str| tensors.iter().find(|t| t.name == name);
        let images = find("images")
            .ok_or_else(|| CoreError::Checkpoint("memory container lacks images".into()))?;
        let (n, res) = (images.dims[0] as usize, images.dims[2] as usize);
        let image_data = match &images.payload {
            TensorPayload::F32(v) => v,
            _ => return Err(CoreError::Checkpoint("images must be f32".into())),
        };
        let iterations = match find("iterations").map(|t| &t.payload) {
            Some(TensorPayload::U32(v)) => v.clone(),
            _ => return Err(CoreError::Checkpoint("memory container lacks iterations".into())),
        };
        let mut labels_by_task: Vec<(String, &Vec<u32>)> = Vec::new();
        for t in &tensors {
            if let Some(task) = t.name.strip_prefix("labels.") {
                match &t.payload {
                    TensorPayload::U32(v) => labels_by_task.push((task.to_string(), v)),
                    _ => return Err(CoreError::Checkpoint("labels must be u32".into())),
                }
            }
        }
        let stride = 3 * res * res;
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let data = image_data[i * stride..(i + 1) * stride].to_vec();
            let image = EncodedImage::from_raw(res, data)?;
            let mut labels = BTreeMap::new();
            for (task, vals) in &labels_by_task {
                labels.insert(task.clone(), vals[i] as usize);
            }
            entries.push(MemoryEntry {
                image,
                labels,
                iteration: iterations[i],
            });
        }
        Ok((Self { entries }, meta))
    }
}

/// Outcome of one adaptation: fresh classifiers plus their accuracies on the
/// supplied evaluation set.
pub struct AdaptOutcome {
    pub classifiers: Vec<TaskClassifier>,
    pub eval_accuracy: BTreeMap<String, f64>,
}

/// Rebuild every task classifier from random initialization and train it on
/// the union of `base_train` and the memory (no deduplication; repeats are
/// intentional oversampling). Accuracies are measured on `eval_items`.
pub fn adapt(
    mem: &ClassifierMemory,
    base_train: &[LabeledImage],
    tasks: &[TaskSpec],
    schedule: &TrainingSchedule,
    eval_items: &[LabeledImage],
    rng: &mut ChaCha8Rng,
) -> Result<AdaptOutcome> {
    if mem.is_empty() && base_train.is_empty() {
        return Err(CoreError::InsufficientData { needed: 1, got: 0 });
    }
    let mut classifiers = Vec::with_capacity(tasks.len());
    let mut eval_accuracy = BTreeMap::new();
    for task in tasks {
        let mut items: Vec<(EncodedImage, usize)> =
            Vec::with_capacity(base_train.len() + mem.len());
        for li in base_train {
            items.push((li.image.clone(), li.label(&task.name)?));
        }
        for (image, labels) in mem.labeled_images() {
            let label = labels.get(&task.name).copied().ok_or_else(|| {
                CoreError::InvalidInput(format!("memory entry lacks task `{}`", task.name))
            })?;
            items.push((image.clone(), label));
        }
        let model = train_classifier(&items, task.n_classes, schedule, rng)?;
        if !eval_items.is_empty() {
            let pairs: Result<Vec<(&EncodedImage, usize)>> = eval_items
                .iter()
                .map(|li| Ok((&li.image, li.label(&task.name)?)))
                .collect();
            let acc = evaluate_accuracy(&model, &pairs?)?;
            eval_accuracy.insert(task.name.clone(), acc);
        }
        classifiers.push(TaskClassifier {
            task: task.name.clone(),
            model,
        });
    }
    Ok(AdaptOutcome {
        classifiers,
        eval_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(subject: usize, stimulus: usize) -> BTreeMap<String, usize> {
        BTreeMap::from([("subject".to_string(), subject), ("stimulus".to_string(), stimulus)])
    }

    #[test]
    fn record_appends_and_keeps_everything() {
        let mut mem = ClassifierMemory::new();
        mem.record(EncodedImage::zeros(16), labels(0, 1), 1, Provenance::Train)
            .unwrap();
        assert_eq!(mem.len(), 1);
        for it in 2..=5 {
            mem.record(EncodedImage::zeros(16), labels(1, 0), it, Provenance::Train)
                .unwrap();
        }
        assert_eq!(mem.len(), 5);
        assert!(mem.iterations_present().contains(&1));
    }

    #[test]
    fn test_provenance_is_refused() {
        let mut mem = ClassifierMemory::new();
        let got = mem.record(EncodedImage::zeros(16), labels(0, 0), 1, Provenance::Test);
        assert!(matches!(got, Err(CoreError::ProvenanceError)));
        assert_eq!(mem.len(), 0);
    }

    #[test]
    fn memory_round_trips_through_container() {
        let mut mem = ClassifierMemory::new();
        let mut img = EncodedImage::zeros(16);
        img.set(0, 3, 4, 1.0);
        mem.record(img, labels(2, 3), 7, Provenance::Train).unwrap();
        let mut buf = Vec::new();
        mem.save(&mut buf, &ContainerMeta::generic(0, [0u8; 32])).unwrap();
        let (back, _) = ClassifierMemory::load(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.entries[0].labels, labels(2, 3));
        assert_eq!(back.entries[0].iteration, 7);
        assert_eq!(back.entries[0].image.get(0, 3, 4), 1.0);
    }
}
