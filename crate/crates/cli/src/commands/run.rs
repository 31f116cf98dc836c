//! The full adversarial pipeline: dataset, autoencoder, classifiers, replay
//! seeding, and the manipulation/adaptation loop, with per-stage
//! checkpointing and resume.

use crate::artifacts::{create_report, stage_checkpoint_current, stage_meta, write_resolved_config, RunPaths, Stage};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{accuracies_on, append_jsonl, ensure_autoencoder, ensure_classifier, prepare, Prepared, TASK_STIMULUS, TASK_SUBJECT};
use gazecloak_core::analysis::{
    channel_importance_agg, format_accuracy_table, write_accuracy_csv, AccuracyRow,
    DEFAULT_CHANGE_THRESHOLD,
};
use gazecloak_core::class_agent::{adapt, ClassifierMemory, Provenance, TaskClassifier};
use gazecloak_core::codec::EncodedImage;
use gazecloak_core::manip_agent::{
    init_memory, manipulate_set, run_iteration, AgentState, DiscountSchedule, IterationConfig,
    IterationReport, ReplayMemory, RewardContext, RewardSpec,
};
use gazecloak_core::models::{decode_batch, encode_batch};
use gazecloak_core::nn::Bottleneck;
use gazecloak_core::rng::stage_rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub initial_accuracy: BTreeMap<String, f64>,
    pub chance: BTreeMap<String, f64>,
    pub n_subjects: usize,
    pub n_stimuli: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub iteration: u32,
    pub accuracy: BTreeMap<String, f64>,
    pub channel_importance: gazecloak_core::ChannelImportance,
}

pub fn cmd_run(cfg: &ExperimentConfig) -> CliResult<()> {
    let paths = RunPaths::new(&cfg.out);
    std::fs::create_dir_all(paths.reports())?;
    write_resolved_config(&paths, cfg)?;

    let prepared = prepare(cfg)?;
    eprintln!(
        "dataset: {} train / {} test records, {} subjects x {} stimuli, {}x{} px",
        prepared.train_records.len(),
        prepared.test_records.len(),
        prepared.n_subjects,
        prepared.n_stimuli,
        prepared.resolution,
        prepared.resolution
    );

    let autoencoder = ensure_autoencoder(cfg, &prepared, &paths)?;
    let mut classifiers: Vec<TaskClassifier> = Vec::new();
    for task in &prepared.tasks {
        let model = ensure_classifier(cfg, &prepared, &paths, task)?;
        classifiers.push(TaskClassifier {
            task: task.name.clone(),
            model,
        });
    }

    // Initial accuracies on the clean test set.
    let initial_acc = accuracies_on(&classifiers, &prepared.test_items)?;
    eprintln!("initial accuracy: {initial_acc:?}");
    let summary = RunSummary {
        initial_accuracy: initial_acc.clone(),
        chance: BTreeMap::from([
            (TASK_STIMULUS.to_string(), prepared.chance(TASK_STIMULUS)),
            (TASK_SUBJECT.to_string(), prepared.chance(TASK_SUBJECT)),
        ]),
        n_subjects: prepared.n_subjects,
        n_stimuli: prepared.n_stimuli,
    };
    {
        let mut w = create_report(&paths.reports().join("run_summary.json"), cfg)?;
        writeln!(w, "{}", serde_json::to_string_pretty(&summary).expect("serializable"))?;
    }

    let spec = RewardSpec {
        keep_targets: cfg.reward.keep.clone(),
        hide_targets: cfg.reward.hide.clone(),
    };

    // Shared training store and precomputed bottlenecks for the RL loop.
    let states = Arc::new(prepared.train_items.clone());
    let train_refs: Vec<&EncodedImage> = states.iter().map(|li| &li.image).collect();
    let train_bottlenecks: Vec<Bottleneck> = encode_batch(&autoencoder, &train_refs)?;

    // Replay seeding (resumable).
    let agent_init_dir = paths.agent_init();
    let mut agent = if agent_init_dir.join("replay.gzck").exists()
        && stage_checkpoint_current(&agent_init_dir.join("dql1.gzck"), cfg, Stage::Agent)
    {
        eprintln!("stage replay-init: checkpoint current, skipping");
        AgentState::load_dir(&agent_init_dir, Arc::clone(&states))?
    } else {
        let memory = ReplayMemory::new(Arc::clone(&states), cfg.rl.replay_capacity);
        let mut rng = stage_rng(cfg.seed, "agent", 0);
        let mut agent = AgentState::new(prepared.resolution, memory, &mut rng)?;
        let init_count = cfg.rl.init_images.max(1).min(states.len());
        let indices: Vec<usize> = (0..init_count).collect();
        eprintln!(
            "stage replay-init: sweeping {} images ({} entries each)",
            init_count,
            gazecloak_core::manip_agent::sweep_entries_per_image(agent.dql1.action_dim)
        );
        let ctx = RewardContext::new(&spec, &classifiers)?;
        let mut init_rng = stage_rng(cfg.seed, "replay-init", 0);
        let stats = init_memory(&mut agent.memory, &indices, &autoencoder, &ctx, &mut init_rng)?;
        eprintln!("stage replay-init: stored {} entries", stats.entries_added);
        // Initial training runs on the seeded memory, as many as one sync cycle.
        let mut train_rng = stage_rng(cfg.seed, "replay-init-train", 0);
        for _ in 0..gazecloak_core::manip_agent::DQL_SYNC_EVERY {
            agent.training_run(
                cfg.rl.y_start,
                &cfg.dql,
                cfg.rl.dql_batches_per_epoch,
                &mut train_rng,
            )?;
        }
        agent.save_dir(&agent_init_dir, &stage_meta(cfg, Stage::Agent))?;
        agent
    };

    let iteration_cfg = IterationConfig {
        steps: cfg.rl.steps,
        manip_batch: cfg.rl.manip_batch,
        discount: DiscountSchedule {
            y_start: cfg.rl.y_start,
            y_end: cfg.rl.y_end,
            epsilon_start: cfg.rl.epsilon_start,
            epsilon_end: cfg.rl.epsilon_end,
        },
        moving_avg_window: cfg.rl.moving_avg_window,
        moving_avg_tol: cfg.rl.moving_avg_tol,
        dql_batches_per_epoch: cfg.rl.dql_batches_per_epoch,
    };

    let mut class_memory = ClassifierMemory::new();
    let mut iteration_reports: Vec<IterationReport> = Vec::new();
    let mut adaptation_records: Vec<AdaptationRecord> = Vec::new();

    // Resume: find the last completed iteration.
    let mut start_iter = 1u32;
    for k in 1..=cfg.rl.iterations {
        let dir = paths.iter_dir(k);
        if dir.join("done").exists() && stage_checkpoint_current(&dir.join("dql1.gzck"), cfg, Stage::Iteration) {
            start_iter = k + 1;
        } else {
            break;
        }
    }
    if start_iter > 1 {
        let resume_from = start_iter - 1;
        eprintln!("resuming after completed iteration {resume_from}");
        let dir = paths.iter_dir(resume_from);
        agent = AgentState::load_dir(&dir, Arc::clone(&states))?;
        let (mem, _) = ClassifierMemory::load(std::io::BufReader::new(std::fs::File::open(
            dir.join("class_memory.gzck"),
        )?))?;
        class_memory = mem;
        classifiers.clear();
        for task in &prepared.tasks {
            let (model, _) =
                gazecloak_core::checkpoint::load_classifier(&dir.join(format!("classifier_{}.gzck", task.name)))?;
            classifiers.push(TaskClassifier {
                task: task.name.clone(),
                model,
            });
        }
        for line in std::fs::read_to_string(paths.iterations_jsonl())?.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let report: IterationReport =
                serde_json::from_str(line).map_err(|e| CliError::Data(e.to_string()))?;
            if report.iteration <= resume_from {
                iteration_reports.push(report);
            }
        }
        for line in std::fs::read_to_string(paths.adaptation_jsonl())?.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let record: AdaptationRecord =
                serde_json::from_str(line).map_err(|e| CliError::Data(e.to_string()))?;
            if record.iteration <= resume_from {
                adaptation_records.push(record);
            }
        }
    } else {
        // Fresh run: start the report streams with headers.
        let mut w = create_report(&paths.iterations_jsonl(), cfg)?;
        w.flush()?;
        let mut w = create_report(&paths.adaptation_jsonl(), cfg)?;
        w.flush()?;
    }

    for iteration in start_iter..=cfg.rl.iterations {
        eprintln!("iteration {iteration}: reinforcement phase ({} steps)", iteration_cfg.steps);
        let ctx = RewardContext::new(&spec, &classifiers)?;
        let mut rl_rng = stage_rng(cfg.seed, "rl-iter", iteration as u64);
        let mut report = run_iteration(
            &mut agent,
            &train_bottlenecks,
            &prepared.test_items,
            &autoencoder,
            &ctx,
            &iteration_cfg,
            &cfg.dql,
            &mut rl_rng,
        )?;
        report.iteration = iteration;
        eprintln!(
            "iteration {iteration}: mean reward {:.4}, pre-adaptation {:?}",
            report.mean_reward, report.pre_adaptation_accuracy
        );

        // Manipulate the training set and record it for the classifier agent.
        let manipulated_train = manipulate_set(&prepared.train_items, &autoencoder, &agent.dql1)?;
        for ((image, _mask), li) in manipulated_train.iter().zip(&prepared.train_items) {
            class_memory.record(image.clone(), li.labels.clone(), iteration, Provenance::Train)?;
        }

        // Channel importance: plain reconstruction vs manipulated, test set.
        let test_refs: Vec<&EncodedImage> =
            prepared.test_items.iter().map(|li| &li.image).collect();
        let test_bottlenecks = encode_batch(&autoencoder, &test_refs)?;
        let plain_recon = decode_batch(&autoencoder, &test_bottlenecks)?;
        let manipulated_test = manipulate_set(&prepared.test_items, &autoencoder, &agent.dql1)?;
        let pairs: Vec<(&EncodedImage, &EncodedImage)> = plain_recon
            .iter()
            .zip(manipulated_test.iter().map(|(img, _)| img))
            .collect();
        let importance = channel_importance_agg(&pairs, DEFAULT_CHANGE_THRESHOLD)?;

        // Adaptation: fresh classifiers on clean(+augmented) plus everything
        // the memory holds, evaluated on the manipulated test set.
        eprintln!(
            "iteration {iteration}: adaptation on {} base + {} memory images",
            prepared.train_model_items.len(),
            class_memory.len()
        );
        let base = if cfg.augment.adapt_augment {
            &prepared.train_model_items
        } else {
            &prepared.train_items
        };
        let eval_items: Vec<gazecloak_core::class_agent::LabeledImage> = manipulated_test
            .iter()
            .zip(&prepared.test_items)
            .map(|((img, _), li)| gazecloak_core::class_agent::LabeledImage {
                image: img.clone(),
                labels: li.labels.clone(),
            })
            .collect();
        let mut adapt_rng = stage_rng(cfg.seed, "adapt", iteration as u64);
        let outcome = adapt(&class_memory, base, &prepared.tasks, &cfg.classifier, &eval_items, &mut adapt_rng)?;
        classifiers = outcome.classifiers;
        eprintln!(
            "iteration {iteration}: post-adaptation {:?}",
            outcome.eval_accuracy
        );

        // Persist the iteration.
        let dir = paths.iter_dir(iteration);
        std::fs::create_dir_all(&dir)?;
        agent.save_dir(&dir, &stage_meta(cfg, Stage::Iteration))?;
        class_memory.save(
            std::io::BufWriter::new(std::fs::File::create(dir.join("class_memory.gzck"))?),
            &stage_meta(cfg, Stage::Iteration),
        )?;
        for cls in &classifiers {
            gazecloak_core::checkpoint::save_classifier(
                &dir.join(format!("classifier_{}.gzck", cls.task)),
                &cls.model,
                &stage_meta(cfg, Stage::Iteration),
            )?;
        }
        append_jsonl(&paths.iterations_jsonl(), &report)?;
        let adaptation = AdaptationRecord {
            iteration,
            accuracy: outcome.eval_accuracy,
            channel_importance: importance,
        };
        append_jsonl(&paths.adaptation_jsonl(), &adaptation)?;
        iteration_reports.push(report);
        adaptation_records.push(adaptation);
        std::fs::write(dir.join("done"), b"ok")?;
    }

    write_reports(
        cfg,
        &paths,
        &prepared,
        &initial_acc,
        &iteration_reports,
        &adaptation_records,
    )?;
    eprintln!("run complete; reports in {}", paths.reports().display());
    Ok(())
}

fn write_reports(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    prepared: &Prepared,
    initial_acc: &BTreeMap<String, f64>,
    iteration_reports: &[IterationReport],
    adaptation_records: &[AdaptationRecord],
) -> CliResult<()> {
    let rows = accuracy_rows(initial_acc, iteration_reports, adaptation_records);
    let chance_stim = prepared.chance(TASK_STIMULUS);
    let chance_sub = prepared.chance(TASK_SUBJECT);

    let mut w = create_report(&paths.accuracy_csv(), cfg)?;
    write_accuracy_csv(&mut w, &rows, chance_stim, chance_sub)?;
    let mut w = create_report(&paths.accuracy_txt(), cfg)?;
    w.write_all(format_accuracy_table(&rows, chance_stim, chance_sub).as_bytes())?;

    let mut w = create_report(&paths.channel_importance_csv(), cfg)?;
    writeln!(w, "iteration,red_pct,green_pct,blue_pct,degenerate")?;
    for rec in adaptation_records {
        let imp = &rec.channel_importance;
        writeln!(
            w,
            "{},{:.4},{:.4},{:.4},{}",
            rec.iteration, imp.red_pct, imp.green_pct, imp.blue_pct, imp.degenerate
        )?;
    }
    Ok(())
}

/// Assemble Table-2-shaped rows from the per-iteration streams.
pub fn accuracy_rows(
    initial_acc: &BTreeMap<String, f64>,
    iteration_reports: &[IterationReport],
    adaptation_records: &[AdaptationRecord],
) -> Vec<AccuracyRow> {
    let mut rows = vec![AccuracyRow {
        label: "RL-Initial".into(),
        stim_no_adapt: None,
        sub_no_adapt: None,
        stim_adapt: initial_acc.get(TASK_STIMULUS).copied(),
        sub_adapt: initial_acc.get(TASK_SUBJECT).copied(),
    }];
    let adapt_by_iter: BTreeMap<u32, &BTreeMap<String, f64>> = adaptation_records
        .iter()
        .map(|a| (a.iteration, &a.accuracy))
        .collect();
    for report in iteration_reports {
        let adapt = adapt_by_iter.get(&report.iteration);
        rows.push(AccuracyRow {
            label: format!("RL-{}", report.iteration),
            stim_no_adapt: report.pre_adaptation_accuracy.get(TASK_STIMULUS).copied(),
            sub_no_adapt: report.pre_adaptation_accuracy.get(TASK_SUBJECT).copied(),
            stim_adapt: adapt.and_then(|a| a.get(TASK_STIMULUS).copied()),
            sub_adapt: adapt.and_then(|a| a.get(TASK_SUBJECT).copied()),
        });
    }
    rows
}
