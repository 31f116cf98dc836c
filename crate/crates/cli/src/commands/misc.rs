//! Smaller subcommands: gan, encode, synth, report, plot, verify.

use crate::artifacts::{create_report, load_resolved_config, read_report_header, RunPaths};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{prepare, TASK_STIMULUS, TASK_SUBJECT};
use gazecloak_core::analysis::{format_accuracy_table, write_accuracy_csv};
use gazecloak_core::codec::EncodedImage;
use gazecloak_core::dataset::write_gaze_csv;
use gazecloak_core::models::ClassifierModel;
use gazecloak_core::privacy::gan_train;
use gazecloak_core::rng::stage_rng;
use std::io::Write;
use std::path::Path;

pub fn cmd_gan(cfg: &ExperimentConfig) -> CliResult<()> {
    let paths = RunPaths::new(&cfg.out);
    std::fs::create_dir_all(paths.reports())?;
    let prepared = prepare(cfg)?;

    let keep_task = cfg.reward.keep.first().cloned().unwrap_or_else(|| TASK_STIMULUS.into());
    let hide_task = cfg.reward.hide.first().cloned().unwrap_or_else(|| TASK_SUBJECT.into());
    let keep_classes = prepared
        .tasks
        .iter()
        .find(|t| t.name == keep_task)
        .map(|t| t.n_classes)
        .ok_or_else(|| CliError::Config(format!("unknown keep task `{keep_task}`")))?;
    let hide_classes = prepared
        .tasks
        .iter()
        .find(|t| t.name == hide_task)
        .map(|t| t.n_classes)
        .ok_or_else(|| CliError::Config(format!("unknown hide task `{hide_task}`")))?;

    let mut rng = stage_rng(cfg.seed, "gan", 0);
    let mut autoencoder =
        gazecloak_core::models::AutoencoderModel::new(prepared.resolution, &mut rng)?;
    let mut keep = ClassifierModel::new(prepared.resolution, keep_classes, &mut rng)?;
    let mut hide = ClassifierModel::new(prepared.resolution, hide_classes, &mut rng)?;

    eprintln!(
        "gan: pretraining {} epochs, adversarial {} epochs on {} images",
        cfg.gan.gan.pretrain_epochs,
        cfg.gan.gan.adversarial_epochs,
        prepared.train_model_items.len()
    );
    let report = gan_train(
        &mut autoencoder,
        &mut keep,
        &mut hide,
        &keep_task,
        &hide_task,
        &prepared.train_model_items,
        &prepared.test_items,
        &cfg.gan.gan,
        &cfg.classifier,
        &cfg.autoencoder,
        &mut rng,
    )?;

    let mut w = create_report(&paths.reports().join("gan_report.json"), cfg)?;
    writeln!(w, "{}", serde_json::to_string_pretty(&report).expect("serializable"))?;
    eprintln!("gan: eval accuracy {:?}", report.eval_accuracy);
    Ok(())
}

pub fn cmd_synth(cfg: &ExperimentConfig) -> CliResult<()> {
    let paths = RunPaths::new(&cfg.out);
    std::fs::create_dir_all(&paths.root)?;
    let opts = gazecloak_core::dataset::SynthOptions {
        points_per_path: cfg.synth.points_per_path,
        curve_seed: cfg.synth.curve_seed,
        ..gazecloak_core::dataset::SynthOptions::default()
    };
    let mut rng = stage_rng(cfg.seed, "synth", cfg.synth.curve_seed);
    let records = gazecloak_core::dataset::synth_generate_with(
        cfg.synth.subjects,
        cfg.synth.stimuli,
        cfg.synth.trials_per_pair,
        cfg.synth.signature_strength,
        &opts,
        &mut rng,
    )?;
    let path = paths.root.join("synthetic.csv");
    let mut w = create_report(&path, cfg)?;
    write_gaze_csv(&mut w, &records)?;
    println!("wrote {} records to {}", records.len(), path.display());
    Ok(())
}

pub fn cmd_encode(cfg: &ExperimentConfig, input: &Path, limit: usize) -> CliResult<()> {
    let paths = RunPaths::new(&cfg.out);
    let dir = paths.root.join("encoded");
    std::fs::create_dir_all(&dir)?;
    let file = std::fs::File::open(input)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", input.display())))?;
    let (records, _) = gazecloak_core::dataset::load_gaze_csv(file, &cfg.dataset.schema)?;
    let take = if limit == 0 { records.len() } else { limit.min(records.len()) };
    for (i, record) in records.iter().take(take).enumerate() {
        let image = gazecloak_core::codec::encode_scanpath(&record.scanpath, cfg.dataset.resolution)?;
        let stem = format!(
            "{i:04}_{}_{}",
            record.scanpath.subject_id, record.scanpath.stimulus_id
        );
        write_png(&dir.join(format!("{stem}.png")), &image)?;
        write_npy(&dir.join(format!("{stem}.npy")), &image)?;
    }
    println!("encoded {take} records into {}", dir.display());
    Ok(())
}

/// 8-bit PNG dump of the three channels.
pub fn write_png(path: &Path, image: &EncodedImage) -> CliResult<()> {
    let res = image.resolution() as u32;
    let mut img = image::RgbImage::new(res, res);
    for y in 0..res {
        for x in 0..res {
            let px = image::Rgb([
                (image.get(0, y as usize, x as usize) * 255.0).round() as u8,
                (image.get(1, y as usize, x as usize) * 255.0).round() as u8,
                (image.get(2, y as usize, x as usize) * 255.0).round() as u8,
            ]);
            img.put_pixel(x, y, px);
        }
    }
    img.save(path).map_err(|e| CliError::Data(e.to_string()))
}

/// Portable float dump: npy v1.0, little-endian f32, shape (3, res, res).
pub fn write_npy(path: &Path, image: &EncodedImage) -> CliResult<()> {
    let res = image.resolution();
    let header_body = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
        3, res, res
    );
    let unpadded = 10 + header_body.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(b"\x93NUMPY\x01\x00")?;
    let header_len = (header_body.len() + padding + 1) as u16;
    file.write_all(&header_len.to_le_bytes())?;
    file.write_all(header_body.as_bytes())?;
    file.write_all(&vec![b' '; padding])?;
    file.write_all(b"\n")?;
    for v in image.data() {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn cmd_report(cfg: &ExperimentConfig) -> CliResult<()> {
    let paths = RunPaths::new(&cfg.out);
    let stored = load_resolved_config(&paths.root)?;
    let summary = read_run_summary(&paths)?;
    let prepared_chance_stim = summary.chance.get(TASK_STIMULUS).copied().unwrap_or(0.0);
    let prepared_chance_sub = summary.chance.get(TASK_SUBJECT).copied().unwrap_or(0.0);

    let mut iteration_reports = Vec::new();
    for line in std::fs::read_to_string(paths.iterations_jsonl())?.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        iteration_reports.push(
            serde_json::from_str::<gazecloak_core::manip_agent::IterationReport>(line)
                .map_err(|e| CliError::Data(e.to_string()))?,
        );
    }
    let mut adaptation = Vec::new();
    for line in std::fs::read_to_string(paths.adaptation_jsonl())?.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CliError::Data(e.to_string()))?;
        adaptation.push(v);
    }

    let rows = crate::commands::run::accuracy_rows(
        &summary.initial_accuracy,
        &iteration_reports,
        &adaptation
            .iter()
            .map(|v| serde_json::from_value(v.clone()).map_err(|e| CliError::Data(e.to_string())))
            .collect::<CliResult<Vec<_>>>()?,
    );
    let mut w = create_report(&paths.accuracy_csv(), &stored)?;
    write_accuracy_csv(&mut w, &rows, prepared_chance_stim, prepared_chance_sub)?;
    let mut w = create_report(&paths.accuracy_txt(), &stored)?;
    w.write_all(
        format_accuracy_table(&rows, prepared_chance_stim, prepared_chance_sub).as_bytes(),
    )?;
    println!("{}", format_accuracy_table(&rows, prepared_chance_stim, prepared_chance_sub));
    let _ = cfg;
    Ok(())
}

pub fn cmd_verify(out: &Path) -> CliResult<()> {
    let paths = RunPaths::new(out);
    let cfg = load_resolved_config(out)?;
    let expect_hash = cfg.hash_hex();
    let stage_hashes = [cfg.hash(), cfg.training_hash(), cfg.agent_hash(), cfg.iter_hash()];
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for entry in walk(out)? {
        let name = entry.to_string_lossy().into_owned();
        if name.ends_with(".gzck") {
            checked += 1;
            match std::fs::File::open(&entry)
                .map_err(CliError::from)
                .and_then(|f| {
                    gazecloak_core::checkpoint::read_container(std::io::BufReader::new(f))
                        .map_err(CliError::from)
                })
            {
                Ok((meta, _)) => {
                    if !stage_hashes.contains(&meta.config_hash) || meta.seed != cfg.seed {
                        failures.push(format!("{name}: metadata disagrees with the resolved config"));
                    }
                }
                Err(e) => failures.push(format!("{name}: {e}")),
            }
        } else if name.ends_with(".csv") || name.ends_with(".jsonl") || name.ends_with(".txt") || name.ends_with(".toml") || name.ends_with(".json") {
            checked += 1;
            match read_report_header(&entry)? {
                Some((hash, seed)) => {
                    if hash != expect_hash || seed != cfg.seed {
                        failures.push(format!("{name}: header disagrees with the resolved config"));
                    }
                }
                None => failures.push(format!("{name}: missing artifact header")),
            }
        }
    }
    let _ = paths;
    if failures.is_empty() {
        println!("verified {checked} artifacts against config {expect_hash}");
        Ok(())
    } else {
        for f in &failures {
            eprintln!("verify: {f}");
        }
        Err(CliError::Data(format!(
            "{} of {checked} artifacts failed verification",
            failures.len()
        )))
    }
}

pub fn read_run_summary(paths: &RunPaths) -> CliResult<crate::commands::run::RunSummary> {
    let path = paths.reports().join("run_summary.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("no run summary at {} ({e})", path.display())))?;
    let body: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n");
    serde_json::from_str(&body).map_err(|e| CliError::Data(format!("bad run summary: {e}")))
}

fn walk(dir: &Path) -> CliResult<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn cmd_plot(cfg: &ExperimentConfig) -> CliResult<()> {
    let paths = RunPaths::new(&cfg.out);
    std::fs::create_dir_all(paths.plots())?;
    plot_csv(
        &paths.accuracy_csv(),
        &paths.plots().join("accuracy.png"),
        &[1, 2, 3, 4],
    )?;
    plot_csv(
        &paths.channel_importance_csv(),
        &paths.plots().join("channel_importance.png"),
        &[1, 2, 3],
    )?;
    println!("plots written to {}", paths.plots().display());
    Ok(())
}

/// Minimal line chart: one polyline per selected column.
fn plot_csv(input: &Path, output: &Path, columns: &[usize]) -> CliResult<()> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", input.display())))?;
    let mut series: Vec<Vec<f64>> = vec![Vec::new(); columns.len()];
    for line in text.lines().skip(1) {
        if line.starts_with('#') || line.trim().is_empty() || line.starts_with("iteration") {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        for (si, &col) in columns.iter().enumerate() {
            if let Some(v) = cells.get(col).and_then(|c| c.parse::<f64>().ok()) {
                series[si].push(v);
            }
        }
    }
    let (w, h) = (480u32, 320u32);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let palette = [
        image::Rgb([200u8, 40, 40]),
        image::Rgb([40, 150, 40]),
        image::Rgb([40, 60, 200]),
        image::Rgb([150, 110, 20]),
    ];
    let max_y = series
        .iter()
        .flat_map(|s| s.iter())
        .fold(1e-9f64, |m, &v| m.max(v))
        .max(1.0);
    for x in 0..w {
        img.put_pixel(x, h - 20, image::Rgb([0, 0, 0]));
    }
    for y in 0..h {
        img.put_pixel(20, y, image::Rgb([0, 0, 0]));
    }
    for (si, s) in series.iter().enumerate() {
        if s.len() < 2 {
            continue;
        }
        let color = palette[si % palette.len()];
        let to_px = |i: usize, v: f64| -> (i64, i64) {
            let x = 20.0 + (w as f64 - 40.0) * i as f64 / (s.len() - 1) as f64;
            let y = (h as f64 - 20.0) - (h as f64 - 40.0) * (v / max_y);
            (x as i64, y as i64)
        };
        for i in 1..s.len() {
            let a = to_px(i - 1, s[i - 1]);
            let b = to_px(i, s[i]);
            for (px, py) in gazecloak_core::codec::segment_pixels(a, b) {
                if px >= 0 && py >= 0 && (px as u32) < w && (py as u32) < h {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }
    img.save(output).map_err(|e| CliError::Data(e.to_string()))
}
