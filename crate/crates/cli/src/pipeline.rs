//! Shared experiment stages: dataset preparation, model training with
//! checkpoint/resume, and the labeled-image plumbing every subcommand uses.

use crate::artifacts::{stage_checkpoint_current, stage_meta, Stage, RunPaths};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use gazecloak_core::class_agent::{LabeledImage, TaskClassifier, TaskSpec};
use gazecloak_core::codec::{augment, encode_scanpath, EncodedImage};
use gazecloak_core::dataset::{load_gaze_csv, split_fifty_fifty, synth_generate_with, LabeledRecord, SynthOptions};
use gazecloak_core::models::{
    evaluate_accuracy, train_autoencoder, train_classifier, AutoencoderModel, ClassifierModel,
};
use gazecloak_core::rng::stage_rng;
use gazecloak_core::{checkpoint, par};
use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

pub const TASK_STIMULUS: &str = "stimulus";
pub const TASK_SUBJECT: &str = "subject";

/// Everything downstream stages need from the data.
pub struct Prepared {
    pub resolution: usize,
    pub n_subjects: usize,
    pub n_stimuli: usize,
    pub train_records: Vec<LabeledRecord>,
    pub test_records: Vec<LabeledRecord>,
    /// Clean encoded training images with task labels.
    pub train_items: Vec<LabeledImage>,
    pub test_items: Vec<LabeledImage>,
    /// Clean plus augmented copies, the model-training pool.
    pub train_model_items: Vec<LabeledImage>,
    pub tasks: Vec<TaskSpec>,
    pub split_warnings: Vec<String>,
}

impl Prepared {
    pub fn chance(&self, task: &str) -> f64 {
        match task {
            TASK_SUBJECT => 1.0 / self.n_subjects as f64,
            TASK_STIMULUS => 1.0 / self.n_stimuli as f64,
            _ => 0.0,
        }
    }

    pub fn task_items(items: &[LabeledImage], task: &str) -> CliResult<Vec<(EncodedImage, usize)>> {
        items
            .iter()
            .map(|li| Ok((li.image.clone(), li.label(task).map_err(CliError::from)?)))
            .collect()
    }
}

pub fn labels_of(record: &LabeledRecord) -> BTreeMap<String, usize> {
    BTreeMap::from([
        (TASK_STIMULUS.to_string(), record.stimulus_label),
        (TASK_SUBJECT.to_string(), record.subject_label),
    ])
}

fn records_from_config(cfg: &ExperimentConfig) -> CliResult<Vec<LabeledRecord>> {
    if cfg.dataset.source == "synth" {
        let opts = SynthOptions {
            points_per_path: cfg.synth.points_per_path,
            curve_seed: cfg.synth.curve_seed,
            ..SynthOptions::default()
        };
        let mut rng = stage_rng(cfg.seed, "synth", cfg.synth.curve_seed);
        Ok(synth_generate_with(
            cfg.synth.subjects,
            cfg.synth.stimuli,
            cfg.synth.trials_per_pair,
            cfg.synth.signature_strength,
            &opts,
            &mut rng,
        )?)
    } else {
        let file = File::open(&cfg.dataset.source).map_err(|e| {
            CliError::Data(format!("cannot open dataset {}: {e}", cfg.dataset.source))
        })?;
        let (records, stats) = load_gaze_csv(file, &cfg.dataset.schema)?;
        if stats.skipped_groups > 0 {
            eprintln!("warning: skipped {} empty trial groups", stats.skipped_groups);
        }
        if stats.clamped_points > 0 {
            eprintln!("warning: clamped {} out-of-extent points", stats.clamped_points);
        }
        Ok(records)
    }
}

fn encode_records(records: &[LabeledRecord], resolution: usize) -> CliResult<Vec<LabeledImage>> {
    let images: Vec<CliResult<LabeledImage>> = par::map_chunked(records.len(), |i| {
        let r = &records[i];
        Ok(LabeledImage {
            image: encode_scanpath(&r.scanpath, resolution).map_err(CliError::from)?,
            labels: labels_of(r),
        })
    });
    images.into_iter().collect()
}

/// Load or synthesize, split 50/50, encode, and build the augmented
/// model-training pool.
pub fn prepare(cfg: &ExperimentConfig) -> CliResult<Prepared> {
    par::set_threads(cfg.threads);
    let records = records_from_config(cfg)?;
    if records.is_empty() {
        return Err(CliError::Data("dataset is empty".into()));
    }
    let n_subjects = records.iter().map(|r| r.subject_label).max().unwrap() + 1;
    let n_stimuli = records.iter().map(|r| r.stimulus_label).max().unwrap() + 1;

    let mut split_rng = stage_rng(cfg.seed, "split", 0);
    let (split, split_warnings) = split_fifty_fifty(&records, &mut split_rng)?;
    for w in &split_warnings {
        eprintln!("warning: {w}");
    }

    let resolution = cfg.dataset.resolution;
    let train_items = encode_records(&split.train, resolution)?;
    let test_items = encode_records(&split.test, resolution)?;

    // Augmented copies extend the model-training pool; the RL loop and all
    // evaluations see only the clean encodings.
    let mut train_model_items = train_items.clone();
    let mut aug_rng = stage_rng(cfg.seed, "augment", 0);
    for record in &split.train {
        for _ in 0..cfg.augment.copies {
            let path = augment(&record.scanpath, &cfg.augment.params, &mut aug_rng)?;
            train_model_items.push(LabeledImage {
                image: encode_scanpath(&path, resolution)?,
                labels: labels_of(record),
            });
        }
    }

    Ok(Prepared {
        resolution,
        n_subjects,
        n_stimuli,
        train_records: split.train,
        test_records: split.test,
        train_items,
        test_items,
        train_model_items,
        tasks: vec![
            TaskSpec {
                name: TASK_STIMULUS.into(),
                n_classes: n_stimuli,
            },
            TaskSpec {
                name: TASK_SUBJECT.into(),
                n_classes: n_subjects,
            },
        ],
        split_warnings,
    })
}

/// Train the autoencoder, or load the checkpoint when it matches the config.
pub fn ensure_autoencoder(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    paths: &RunPaths,
) -> CliResult<AutoencoderModel> {
    let path = paths.autoencoder();
    if stage_checkpoint_current(&path, cfg, Stage::Training) {
        eprintln!("stage autoencoder: checkpoint current, skipping");
        let (model, _) = checkpoint::load_autoencoder(&path)?;
        return Ok(model);
    }
    eprintln!(
        "stage autoencoder: training on {} images",
        prepared.train_model_items.len()
    );
    let images: Vec<EncodedImage> = prepared
        .train_model_items
        .iter()
        .map(|li| li.image.clone())
        .collect();
    let mut rng = stage_rng(cfg.seed, "autoencoder", 0);
    let model = train_autoencoder(&images, &cfg.autoencoder, &mut rng)?;
    std::fs::create_dir_all(paths.checkpoints())?;
    checkpoint::save_autoencoder(&path, &model, &stage_meta(cfg, Stage::Training))?;
    Ok(model)
}

/// Train one task classifier, or load its matching checkpoint.
pub fn ensure_classifier(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    paths: &RunPaths,
    task: &TaskSpec,
) -> CliResult<ClassifierModel> {
    let path = paths.classifier(&task.name);
    if stage_checkpoint_current(&path, cfg, Stage::Training) {
        eprintln!("stage classifier[{}]: checkpoint current, skipping", task.name);
        let (model, _) = checkpoint::load_classifier(&path)?;
        return Ok(model);
    }
    eprintln!(
        "stage classifier[{}]: training on {} images",
        task.name,
        prepared.train_model_items.len()
    );
    let items = Prepared::task_items(&prepared.train_model_items, &task.name)?;
    let mut rng = stage_rng(cfg.seed, &format!("classifier-{}", task.name), 0);
    let model = train_classifier(&items, task.n_classes, &cfg.classifier, &mut rng)?;
    std::fs::create_dir_all(paths.checkpoints())?;
    checkpoint::save_classifier(&path, &model, &stage_meta(cfg, Stage::Training))?;
    Ok(model)
}

/// Accuracy of task classifiers on clean items.
pub fn accuracies_on(
    classifiers: &[TaskClassifier],
    items: &[LabeledImage],
) -> CliResult<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for cls in classifiers {
        let pairs: CliResult<Vec<(&EncodedImage, usize)>> = items
            .iter()
            .map(|li| Ok((&li.image, li.label(&cls.task).map_err(CliError::from)?)))
            .collect();
        out.insert(cls.task.clone(), evaluate_accuracy(&cls.model, &pairs?)?);
    }
    Ok(out)
}

/// Write one JSON object per line.
pub fn append_jsonl<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(file, "{}", serde_json::to_string(value).expect("serializable"))?;
    Ok(())
}
