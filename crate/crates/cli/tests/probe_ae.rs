use gazecloak_cli::config::{ExperimentConfig, Overrides};
use gazecloak_cli::pipeline::prepare;
use gazecloak_core::codec::EncodedImage;
use gazecloak_core::models::*;
use gazecloak_core::par;
use gazecloak_core::rng::stage_rng;

#[test]
fn probe_ae_and_recon_classifier() {
    let mut cfg = ExperimentConfig::load(None, &Overrides::default()).unwrap();
    cfg.seed = 100;
    cfg.threads = 2;
    cfg.dataset.resolution = 32;
    cfg.synth = gazecloak_cli::config::SynthConfig { subjects: 8, stimuli: 4, trials_per_pair: 20, signature_strength: 1.0, points_per_path: 32, curve_seed: 0 };
    cfg.augment.copies = 1;
    par::set_threads(2);
    let prepared = prepare(&cfg).unwrap();
    let clean: Vec<EncodedImage> = prepared.train_items.iter().map(|li| li.image.clone()).collect();

    let t0 = std::time::Instant::now();
    let sched = TrainingSchedule { initial_lr: 3e-4, decay_every: 120, max_epochs: Some(240), ..TrainingSchedule::autoencoder_default() };
    let mut rng = stage_rng(cfg.seed, "autoencoder", 0);
    let ae = train_autoencoder(&clean, &sched, &mut rng).unwrap();
    let tr = &ae.loss_trace;
    println!("[{}s] AE mse: e0 {:.4} e60 {:.4} e120 {:.4} e180 {:.4} e239 {:.4}", t0.elapsed().as_secs(), tr[0], tr[60], tr[120], tr[180], tr[239]);

    // recon of train and test
    let train_refs: Vec<&EncodedImage> = prepared.train_items.iter().map(|li| &li.image).collect();
    let train_recon = decode_batch(&ae, &encode_batch(&ae, &train_refs).unwrap()).unwrap();
    let test_refs: Vec<&EncodedImage> = prepared.test_items.iter().map(|li| &li.image).collect();
    let test_recon = decode_batch(&ae, &encode_batch(&ae, &test_refs).unwrap()).unwrap();

    for task in &prepared.tasks {
        // classifier pool: clean + augmented + reconstructed copies
        let mut items: Vec<(EncodedImage, usize)> = prepared.train_model_items.iter()
            .map(|li| (li.image.clone(), li.label(&task.name).unwrap())).collect();
        for (img, li) in train_recon.iter().zip(&prepared.train_items) {
            items.push((img.clone(), li.label(&task.name).unwrap()));
        }
        let csched = TrainingSchedule { initial_lr: 1e-3, max_epochs: Some(15), ..TrainingSchedule::classifier_default() };
        let mut rng = stage_rng(cfg.seed, &format!("cls-{}", task.name), 0);
        let model = train_classifier(&items, task.n_classes, &csched, &mut rng).unwrap();
        let clean_pairs: Vec<(&EncodedImage, usize)> = prepared.test_items.iter().map(|li| (&li.image, li.label(&task.name).unwrap())).collect();
        let recon_pairs: Vec<(&EncodedImage, usize)> = test_recon.iter().zip(&prepared.test_items).map(|(img, li)| (img, li.label(&task.name).unwrap())).collect();
        println!("[{}s] {}: clean acc {:.4} | recon acc {:.4}", t0.elapsed().as_secs(), task.name,
            evaluate_accuracy(&model, &clean_pairs).unwrap(), evaluate_accuracy(&model, &recon_pairs).unwrap());
    }
}
