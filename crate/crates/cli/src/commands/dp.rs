//! Differential-privacy sweep over the test split, frontier emission, and
//! operating-point selection.

use crate::artifacts::{create_report, stage_checkpoint_current, RunPaths, Stage};
use crate::config::{DomainChoice, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::pipeline::{prepare, TASK_SUBJECT};
use gazecloak_core::class_agent::TaskClassifier;
use gazecloak_core::privacy::dp::write_frontier_csv;
use gazecloak_core::privacy::{dp_evaluate, select_optimal_epsilon, DpDomain, DpEvalItem, EpsilonSweep, FrontierRow};
use std::io::Write;

pub fn cmd_dp(cfg: &ExperimentConfig) -> CliResult<()> {
    let paths = RunPaths::new(&cfg.out);
    let prepared = prepare(cfg)?;

    // The sweep needs the pretrained classifiers of a previous run.
    let mut classifiers = Vec::new();
    for task in &prepared.tasks {
        let path = paths.classifier(&task.name);
        if !stage_checkpoint_current(&path, cfg, Stage::Training) {
            return Err(CliError::Data(format!(
                "no trained classifier for `{}` under {}; run `gazecloak run` first",
                task.name,
                paths.checkpoints().display()
            )));
        }
        let (model, _) = gazecloak_core::checkpoint::load_classifier(&path)?;
        classifiers.push(TaskClassifier {
            task: task.name.clone(),
            model,
        });
    }

    let limit = if cfg.dp.max_items == 0 {
        prepared.test_records.len()
    } else {
        cfg.dp.max_items.min(prepared.test_records.len())
    };
    let items: Vec<DpEvalItem> = prepared
        .test_records
        .iter()
        .take(limit)
        .zip(prepared.test_items.iter().take(limit))
        .map(|(record, li)| DpEvalItem {
            record: record.clone(),
            image: li.image.clone(),
        })
        .collect();

    let domains: Vec<DpDomain> = match cfg.dp.domain {
        DomainChoice::Raw => vec![DpDomain::Raw],
        DomainChoice::Image => vec![DpDomain::Image],
        DomainChoice::Both => vec![DpDomain::Image, DpDomain::Raw],
    };

    let mut all_rows: Vec<FrontierRow> = Vec::new();
    for domain in domains {
        let rows = run_domain(cfg, &prepared, &items, &classifiers, domain)?;
        all_rows.extend(rows);
    }

    let mut w = create_report(&paths.reports().join("dp_frontier.csv"), cfg)?;
    write_frontier_csv(&mut w, &all_rows)?;

    let chance = prepared.chance(TASK_SUBJECT);
    match select_optimal_epsilon(&all_rows, "stimulus", "subject", chance, cfg.dp.chance_tolerance)
    {
        Ok(idx) => {
            let row = &all_rows[idx];
            let mut w = create_report(&paths.reports().join("dp_selected.txt"), cfg)?;
            writeln!(
                w,
                "domain={} epsilon={:.6} stim_acc={:.4} sub_acc={:.4}",
                row.domain,
                row.epsilon,
                row.accuracy.get("stimulus").copied().unwrap_or(f64::NAN),
                row.accuracy.get("subject").copied().unwrap_or(f64::NAN),
            )?;
            println!(
                "selected epsilon {:.6} ({}) with stimulus {:.4} / subject {:.4}",
                row.epsilon,
                row.domain,
                row.accuracy.get("stimulus").copied().unwrap_or(f64::NAN),
                row.accuracy.get("subject").copied().unwrap_or(f64::NAN),
            );
            Ok(())
        }
        Err(_) => {
            // Nearest-miss diagnostics: closest subject accuracy to chance.
            let nearest = all_rows
                .iter()
                .filter_map(|r| r.accuracy.get("subject").map(|a| (r, (a - chance).abs())))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let detail = nearest
                .map(|(r, d)| {
                    format!(
                        "nearest miss: epsilon {:.6} ({}) subject accuracy off chance by {:.4}",
                        r.epsilon, r.domain, d
                    )
                })
                .unwrap_or_else(|| "frontier is empty".to_string());
            Err(CliError::Data(format!(
                "no epsilon keeps subject accuracy within {:.3} of chance {:.3}; {detail}",
                cfg.dp.chance_tolerance, chance
            )))
        }
    }
}

fn run_domain(
    cfg: &ExperimentConfig,
    prepared: &crate::pipeline::Prepared,
    items: &[DpEvalItem],
    classifiers: &[TaskClassifier],
    domain: DpDomain,
) -> CliResult<Vec<FrontierRow>> {
    let sweep = match domain {
        DpDomain::Image => {
            if cfg.dp.image_values.is_empty() {
                EpsilonSweep {
                    lo: cfg.dp.image.lo,
                    hi: cfg.dp.image.hi,
                    step: cfg.dp.image.step,
                    domain,
                }
            } else {
                return run_explicit(cfg, prepared, items, classifiers, domain, &cfg.dp.image_values);
            }
        }
        DpDomain::Raw => {
            if cfg.dp.raw_values.is_empty() {
                EpsilonSweep {
                    lo: cfg.dp.raw.lo,
                    hi: cfg.dp.raw.hi,
                    step: cfg.dp.raw.step,
                    domain,
                }
            } else {
                return run_explicit(cfg, prepared, items, classifiers, domain, &cfg.dp.raw_values);
            }
        }
    };
    eprintln!(
        "dp sweep ({domain}): {} epsilon values x {} items x {} repetitions",
        sweep.values().len(),
        items.len(),
        cfg.dp.repetitions
    );
    Ok(dp_evaluate(
        &sweep,
        items,
        classifiers,
        cfg.dp.repetitions,
        prepared.resolution,
        cfg.seed,
    )?)
}

fn run_explicit(
    cfg: &ExperimentConfig,
    prepared: &crate::pipeline::Prepared,
    items: &[DpEvalItem],
    classifiers: &[TaskClassifier],
    domain: DpDomain,
    values: &[f64],
) -> CliResult<Vec<FrontierRow>> {
    eprintln!(
        "dp sweep ({domain}): {} explicit epsilon values x {} items x {} repetitions",
        values.len(),
        items.len(),
        cfg.dp.repetitions
    );
    let mut rows = Vec::new();
    for &v in values {
        let sweep = EpsilonSweep {
            lo: v,
            hi: v,
            step: 1.0,
            domain,
        };
        rows.extend(dp_evaluate(
            &sweep,
            items,
            classifiers,
            cfg.dp.repetitions,
            prepared.resolution,
            cfg.seed,
        )?);
    }
    Ok(rows)
}
