use gazecloak_core::class_agent::{LabeledImage, TaskClassifier};
use gazecloak_core::codec::{encode_scanpath, GazePoint, Scanpath};
use gazecloak_core::manip_agent::*;
use gazecloak_core::models::*;
use gazecloak_core::nn::sgd::SgdState;
use gazecloak_core::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

fn state(res: usize, seed: u64) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<GazePoint> = (0..32).map(|i| GazePoint { t: i as f64/31.0, x: rng.gen_range(0.0..1.0), y: rng.gen_range(0.0..1.0) }).collect();
    let img = encode_scanpath(&Scanpath { subject_id: "s".into(), stimulus_id: "i".into(), points, duration: 1.0 }, res).unwrap();
    LabeledImage { image: img, labels: BTreeMap::from([("stimulus".to_string(), 1usize), ("subject".to_string(), 3usize)]) }
}

#[test]
fn dql_regression_scenario() {
    par::set_threads(2);
    let res = 64usize;
    for seed in [0u64, 1, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let li = state(res, 100 + seed);
        let states = Arc::new(vec![li.clone()]);

        let spec = RewardSpec { keep_targets: vec!["stimulus".into()], hide_targets: vec!["subject".into()] };
        let classifiers = vec![
            TaskClassifier { task: "stimulus".into(), model: ClassifierModel::new(res, 4, &mut rng).unwrap() },
            TaskClassifier { task: "subject".into(), model: ClassifierModel::new(res, 8, &mut rng).unwrap() },
        ];
        let ctx = RewardContext::new(&spec, &classifiers).unwrap();
        let mut ae_rng = ChaCha8Rng::seed_from_u64(7 + seed);
        let ae = AutoencoderModel::new(res, &mut ae_rng).unwrap();
        let b = encode(&ae, &li.image).unwrap();

        // 100-entry memory: 50 singletons + 50 random masks, measured rewards.
        let action_dim = ae.bottleneck_len();
        let mut masks = Vec::new();
        for i in 0..50 { masks.push(ActionMask::from_indices(action_dim, &[i * 81])); }
        for _ in 0..50 { masks.push(random_mask(action_dim, &mut rng)); }
        let mut mem = ReplayMemory::new(states, 200);
        // measure rewards through the real path
        for m in &masks {
            let masked = apply_mask(&b, m).unwrap();
            let img = decode(&ae, &masked).unwrap();
            let r = ctx.rewards(&[&img], &[&li.labels]).unwrap()[0];
            mem.push(0, m.clone(), r).unwrap();
        }
        let rewards: Vec<f64> = (0..mem.len()).map(|i| mem.entry(i).reward).collect();
        let rmean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let rspread = rewards.iter().map(|r| (r - rmean).abs()).sum::<f64>() / rewards.len() as f64;

        for gain in [0.65, 0.75, 0.85, 0.95, 1.1] {
            let mut grng = ChaCha8Rng::seed_from_u64(seed * 31 + 5);
            let mut dql1 = DqlModel::with_gains(res, gain, 0.05, &mut grng).unwrap();
            let dql2 = DqlModel::with_gains(res, gain, 0.05, &mut grng).unwrap();
            let mut sgd = SgdState::new(&dql1.net);
            let mut trng = ChaCha8Rng::seed_from_u64(seed * 77 + 9);
            let stats = train_dql(&mut dql1, &dql2, &mut sgd, &mem, 0.0, &TrainingSchedule::dql_default(), 0, &mut trng).unwrap();
            let q = q_forward(&dql1, &li.image).unwrap();
            let mut err = 0.0; let mut cnt = 0;
            for i in 0..mem.len() {
                let e = mem.entry(i);
                for a in e.action.ones() { err += (q[a] as f64 - e.reward).abs(); cnt += 1; }
            }
            println!("seed {seed} gain {gain}: Rm {rmean:+.3} ; loss {:.5}->{:.5}; mean|q-R| = {:.4}",
                     stats.epoch_losses[0], stats.epoch_losses[9], err / cnt as f64);
        }
    }
}
