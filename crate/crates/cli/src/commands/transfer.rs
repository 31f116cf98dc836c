//! Apply a trained manipulator and autoencoder to a new dataset without
//! retraining them; only the classifiers are rebuilt.

use crate::artifacts::{create_report, RunPaths};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{accuracies_on, prepare, Prepared};
use gazecloak_core::class_agent::{adapt, ClassifierMemory, LabeledImage, Provenance, TaskClassifier};
use gazecloak_core::codec::EncodedImage;
use gazecloak_core::manip_agent::manipulate_set;
use gazecloak_core::models::evaluate_accuracy;
use gazecloak_core::rng::stage_rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct TransferReport {
    pub baseline_accuracy: BTreeMap<String, f64>,
    pub manipulated_accuracy: BTreeMap<String, f64>,
    pub adapted_accuracy: BTreeMap<String, f64>,
    pub autoencoder_hash_unchanged: bool,
    pub dql_hash_unchanged: bool,
}

pub fn cmd_transfer(cfg: &ExperimentConfig, from: &Path) -> CliResult<TransferReport> {
    let source = RunPaths::new(from);
    let paths = RunPaths::new(&cfg.out);
    std::fs::create_dir_all(paths.reports())?;

    // Frozen components from the source run; the last completed iteration's
    // agent if present, otherwise the post-seeding agent.
    let (autoencoder, _) = gazecloak_core::checkpoint::load_autoencoder(&source.autoencoder())
        .map_err(|e| CliError::Data(format!("cannot load source autoencoder: {e}")))?;
    let dql_dir = last_agent_dir(&source)?;
    let (dql1, _) = gazecloak_core::checkpoint::load_dql(&dql_dir.join("dql1.gzck"))?;
    let ae_hash_before = autoencoder.param_hash();
    let dql_hash_before = dql1.param_hash();

    // The new dataset (different curves, same generator family).
    let prepared = prepare(cfg)?;
    if prepared.resolution != autoencoder.resolution {
        return Err(CliError::Config(format!(
            "transfer dataset resolution {} does not match the source models ({})",
            prepared.resolution, autoencoder.resolution
        )));
    }

    // Fresh classifiers trained on the new training data only.
    let mut classifiers: Vec<TaskClassifier> = Vec::new();
    for task in &prepared.tasks {
        let items = Prepared::task_items(&prepared.train_model_items, &task.name)?;
        let mut rng = stage_rng(cfg.seed, &format!("transfer-classifier-{}", task.name), 0);
        let model = gazecloak_core::models::train_classifier(&items, task.n_classes, &cfg.classifier, &mut rng)?;
        classifiers.push(TaskClassifier {
            task: task.name.clone(),
            model,
        });
    }
    let baseline_accuracy = accuracies_on(&classifiers, &prepared.test_items)?;

    // Manipulate with the frozen agent.
    let manipulated_test = manipulate_set(&prepared.test_items, &autoencoder, &dql1)?;
    let mut manipulated_accuracy = BTreeMap::new();
    for cls in &classifiers {
        let pairs: CliResult<Vec<(&EncodedImage, usize)>> = manipulated_test
            .iter()
            .zip(&prepared.test_items)
            .map(|((img, _), li)| Ok((img, li.label(&cls.task).map_err(CliError::from)?)))
            .collect();
        manipulated_accuracy.insert(cls.task.clone(), evaluate_accuracy(&cls.model, &pairs?)?);
    }

    // Adapt: manipulated training data joins the pool, classifiers rebuilt.
    let manipulated_train = manipulate_set(&prepared.train_items, &autoencoder, &dql1)?;
    let mut memory = ClassifierMemory::new();
    for ((image, _), li) in manipulated_train.iter().zip(&prepared.train_items) {
        memory.record(image.clone(), li.labels.clone(), 1, Provenance::Train)?;
    }
    let eval_items: Vec<LabeledImage> = manipulated_test
        .iter()
        .zip(&prepared.test_items)
        .map(|((img, _), li)| LabeledImage {
            image: img.clone(),
            labels: li.labels.clone(),
        })
        .collect();
    let base = if cfg.augment.adapt_augment {
        &prepared.train_model_items
    } else {
        &prepared.train_items
    };
    let mut adapt_rng = stage_rng(cfg.seed, "transfer-adapt", 0);
    let outcome = adapt(&memory, base, &prepared.tasks, &cfg.classifier, &eval_items, &mut adapt_rng)?;

    let report = TransferReport {
        baseline_accuracy,
        manipulated_accuracy,
        adapted_accuracy: outcome.eval_accuracy,
        autoencoder_hash_unchanged: autoencoder.param_hash() == ae_hash_before,
        dql_hash_unchanged: dql1.param_hash() == dql_hash_before,
    };
    let mut w = create_report(&paths.reports().join("transfer_report.json"), cfg)?;
    writeln!(w, "{}", serde_json::to_string_pretty(&report).expect("serializable"))?;
    eprintln!(
        "transfer: baseline {:?} -> manipulated {:?} -> adapted {:?}",
        report.baseline_accuracy, report.manipulated_accuracy, report.adapted_accuracy
    );
    Ok(report)
}

/// The newest iteration directory of a source run, or the seeded agent.
fn last_agent_dir(source: &RunPaths) -> CliResult<std::path::PathBuf> {
    let iters = source.root.join("iters");
    let mut best: Option<(u32, std::path::PathBuf)> = None;
    if iters.is_dir() {
        for entry in std::fs::read_dir(&iters)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(num) = name.strip_prefix("iter_").and_then(|s| s.parse::<u32>().ok()) {
                if entry.path().join("done").exists()
                    && best.as_ref().map(|(b, _)| num > *b).unwrap_or(true)
                {
                    best = Some((num, entry.path()));
                }
            }
        }
    }
    if let Some((_, path)) = best {
        return Ok(path);
    }
    let seeded = source.agent_init();
    if seeded.join("dql1.gzck").exists() {
        return Ok(seeded);
    }
    Err(CliError::Data(format!(
        "no trained agent found under {}; run `gazecloak run` first",
        source.root.display()
    )))
}
