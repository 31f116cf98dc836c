//! Staged probe of the desk-scale adversarial run (tuning aid).

use gazecloak_cli::config::{ExperimentConfig, Overrides};
use gazecloak_cli::pipeline::{accuracies_on, prepare};
use gazecloak_core::class_agent::TaskClassifier;
use gazecloak_core::codec::EncodedImage;
use gazecloak_core::manip_agent::*;
use gazecloak_core::models::*;
use gazecloak_core::rng::stage_rng;
use gazecloak_core::par;
use std::sync::Arc;

fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(None, &Overrides::default()).unwrap();
    cfg.seed = 100;
    cfg.threads = 2;
    cfg.dataset.resolution = 32;
    cfg.synth.subjects = 8;
    cfg.synth.stimuli = 4;
    cfg.synth.trials_per_pair = 20;
    cfg.synth.points_per_path = 32;
    cfg.augment.copies = 1;
    cfg.autoencoder.initial_lr = 5e-3;
    cfg.autoencoder.batch_size = 40;
    cfg.autoencoder.max_epochs = Some(25);
    cfg.classifier.initial_lr = 1e-3;
    cfg.classifier.batch_size = 50;
    cfg.classifier.max_epochs = Some(15);
    cfg.dql.max_epochs = Some(5);
    cfg.rl.init_images = 1;
    cfg.rl.replay_capacity = 24_000;
    cfg.rl.dql_batches_per_epoch = 6;
    cfg
}

#[test]
fn probe_stage1() {
    let cfg = desk_config();
    par::set_threads(cfg.threads);
    let t0 = std::time::Instant::now();
    let prepared = prepare(&cfg).unwrap();
    println!("[{}s] prepared {} train / {} test", t0.elapsed().as_secs(), prepared.train_items.len(), prepared.test_items.len());

    // Train AE + classifiers directly (no checkpointing).
    let images: Vec<EncodedImage> = prepared.train_model_items.iter().map(|li| li.image.clone()).collect();
    let mut rng = stage_rng(cfg.seed, "autoencoder", 0);
    let ae = train_autoencoder(&images, &cfg.autoencoder, &mut rng).unwrap();
    println!("[{}s] AE trained, final loss {:?}", t0.elapsed().as_secs(), ae.train_loss);

    let mut classifiers = Vec::new();
    for task in &prepared.tasks {
        let items: Vec<(EncodedImage, usize)> = prepared.train_model_items.iter()
            .map(|li| (li.image.clone(), li.label(&task.name).unwrap())).collect();
        let mut rng = stage_rng(cfg.seed, &format!("classifier-{}", task.name), 0);
        let model = train_classifier(&items, task.n_classes, &cfg.classifier, &mut rng).unwrap();
        classifiers.push(TaskClassifier { task: task.name.clone(), model });
    }
    let clean_acc = accuracies_on(&classifiers, &prepared.test_items).unwrap();
    println!("[{}s] clean test accuracy: {:?}", t0.elapsed().as_secs(), clean_acc);

    // Accuracy on plain reconstructions (upper bound for the keep target).
    let test_refs: Vec<&EncodedImage> = prepared.test_items.iter().map(|li| &li.image).collect();
    let bs = encode_batch(&ae, &test_refs).unwrap();
    let recon = decode_batch(&ae, &bs).unwrap();
    for cls in &classifiers {
        let pairs: Vec<(&EncodedImage, usize)> = recon.iter().zip(&prepared.test_items)
            .map(|(img, li)| (img, li.label(&cls.task).unwrap())).collect();
        let acc = evaluate_accuracy(&cls.model, &pairs).unwrap();
        println!("  recon accuracy [{}] = {:.4}", cls.task, acc);
    }

    // Init sweep on one image; reward stats.
    let spec = RewardSpec { keep_targets: vec!["stimulus".into()], hide_targets: vec!["subject".into()] };
    let ctx = RewardContext::new(&spec, &classifiers).unwrap();
    let states = Arc::new(prepared.train_items.clone());
    let memory = ReplayMemory::new(Arc::clone(&states), cfg.rl.replay_capacity);
    let mut agent = AgentState::new(prepared.resolution, memory, &mut stage_rng(cfg.seed, "agent", 0)).unwrap();
    let mut init_rng = stage_rng(cfg.seed, "replay-init", 0);
    init_memory(&mut agent.memory, &[0], &ae, &ctx, &mut init_rng).unwrap();
    println!("[{}s] init sweep: {} entries", t0.elapsed().as_secs(), agent.memory.len());
    let rewards: Vec<f64> = (0..agent.memory.len()).map(|i| agent.memory.entry(i).reward).collect();
    let mut sorted = rewards.clone(); sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    println!("  rewards: min {:.3} p25 {:.3} median {:.3} p95 {:.3} max {:.3}",
        sorted[0], sorted[n/4], sorted[n/2], sorted[n*95/100], sorted[n-1]);
    // Reward by mask size bucket
    for (lo, hi) in [(1,1),(2,20),(21,60),(61,100)] {
        let vals: Vec<f64> = (0..agent.memory.len()).filter_map(|i| {
            let e = agent.memory.entry(i);
            let k = e.action.count_ones();
            (k >= lo && k <= hi).then_some(e.reward)
        }).collect();
        if !vals.is_empty() {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let max = vals.iter().fold(f64::MIN, |m,&v| m.max(v));
            println!("  k in [{lo},{hi}]: n={} mean {:.4} max {:.4}", vals.len(), mean, max);
        }
    }

    // Initial DQL training runs, then greedy behavior.
    let mut train_rng = stage_rng(cfg.seed, "replay-init-train", 0);
    for run in 0..10 {
        let stats = agent.training_run(cfg.rl.y_start, &cfg.dql, cfg.rl.dql_batches_per_epoch, &mut train_rng).unwrap();
        if run % 3 == 0 {
            println!("  run {run}: losses {:?}", stats.epoch_losses.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>());
        }
    }
    println!("[{}s] after 10 init runs", t0.elapsed().as_secs());
    let some_refs: Vec<&EncodedImage> = prepared.test_items.iter().take(16).map(|li| &li.image).collect();
    let q = q_forward_batch(&agent.dql1, &some_refs).unwrap();
    let mut sizes = Vec::new();
    for row in q.rows() {
        let mask = threshold_actions(row.as_slice().unwrap()).unwrap();
        sizes.push(mask.count_ones());
    }
    let qmax = q.iter().fold(f32::MIN, |m, &v| m.max(v));
    let qmean = q.iter().map(|&v| v as f64).sum::<f64>() / q.len() as f64;
    println!("  greedy mask sizes on 16 test imgs: {:?}", sizes);
    println!("  q stats: mean {qmean:.4} max {qmax:.4}");

    let manipulated = manipulate_set(&prepared.test_items, &ae, &agent.dql1).unwrap();
    for cls in &classifiers {
        let pairs: Vec<(&EncodedImage, usize)> = manipulated.iter().zip(&prepared.test_items)
            .map(|((img, _), li)| (img, li.label(&cls.task).unwrap())).collect();
        let acc = evaluate_accuracy(&cls.model, &pairs).unwrap();
        println!("  post-init manipulated accuracy [{}] = {:.4}", cls.task, acc);
    }
    println!("[{}s] done", t0.elapsed().as_secs());
}
