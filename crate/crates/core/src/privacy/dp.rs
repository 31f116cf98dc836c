//! Epsilon-differential-privacy baselines: the Laplacian mechanism on raw
//! gaze coordinates and on encoded images, sensitivity estimation, the
//! epsilon sweep with majority voting, and operating-point selection.

use crate::class_agent::TaskClassifier;
use crate::codec::{encode_scanpath, EncodedImage, Scanpath};
use crate::dataset::LabeledRecord;
use crate::error::{CoreError, Result};
use crate::models::classify_batch;
use crate::rng::stage_rng;
use rand::Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;

/// Which data the mechanism perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DpDomain {
    Raw,
    Image,
}

impl std::fmt::Display for DpDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DpDomain::Raw => write!(f, "raw"),
            DpDomain::Image => write!(f, "image"),
        }
    }
}

/// L1 sensitivity, per channel for images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sensitivity {
    Raw(f64),
    Image([f64; 3]),
}

/// One mechanism configuration. For images `epsilon` is the per-pixel
/// budget and the reported budget is `epsilon * composition_multiplier`
/// (sequential composition over the independent pixels).
#[derive(Debug, Clone)]
pub struct DpConfig {
    pub epsilon: f64,
    pub sensitivity: Sensitivity,
    pub repetitions: usize,
    pub composition_multiplier: usize,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(CoreError::InvalidScale(self.epsilon));
        }
        let ok = match self.sensitivity {
            Sensitivity::Raw(s) => s >= 0.0 && s.is_finite(),
            Sensitivity::Image(s) => s.iter().all(|v| *v >= 0.0 && v.is_finite()),
        };
        if !ok {
            return Err(CoreError::InvalidInput("sensitivity must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn effective_epsilon(&self) -> f64 {
        self.epsilon * self.composition_multiplier as f64
    }
}

/// The epsilon search range of one domain, traversed in fixed steps.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpsilonSweep {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    pub domain: DpDomain,
}

impl EpsilonSweep {
    /// Paper range for images: per-pixel [0.01, 15.0] in 0.01 steps.
    pub fn image_default() -> Self {
        Self {
            lo: 0.01,
            hi: 15.0,
            step: 0.01,
            domain: DpDomain::Image,
        }
    }

    /// Paper range for raw gaze: [10.0, 500.0] in 0.01 steps.
    pub fn raw_default() -> Self {
        Self {
            lo: 10.0,
            hi: 500.0,
            step: 0.01,
            domain: DpDomain::Raw,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut i = 0u64;
        loop {
            let v = self.lo + self.step * i as f64;
            if v > self.hi + self.step * 1e-9 {
                break;
            }
            out.push(v);
            i += 1;
        }
        out
    }
}

/// Resample a scanpath to `len` points by linear interpolation over the
/// point index.
pub fn resample_points(path: &Scanpath, len: usize) -> Vec<(f64, f64)> {
    let n = path.points.len();
    if n == 1 {
        return vec![(path.points[0].x, path.points[0].y); len];
    }
    (0..len)
        .map(|i| {
            let u = i as f64 / (len - 1).max(1) as f64 * (n - 1) as f64;
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = u - lo as f64;
            let (a, b) = (&path.points[lo], &path.points[hi]);
            (a.x + (b.x - a.x) * frac, a.y + (b.y - a.y) * frac)
        })
        .collect()
}

/// Maximum Manhattan distance between any two recordings after resampling
/// them to a common length.
pub fn l1_sensitivity_raw(records: &[Scanpath], alignment_len: usize) -> Result<f64> {
    if records.len() < 2 {
        return Err(CoreError::InsufficientData {
            needed: 2,
            got: records.len(),
        });
    }
    if alignment_len == 0 {
        return Err(CoreError::InvalidInput("alignment length must be positive".into()));
    }
    let resampled: Vec<Vec<(f64, f64)>> = records
        .iter()
        .map(|r| resample_points(r, alignment_len))
        .collect();
    let mut max = 0.0f64;
    for i in 0..resampled.len() {
        for j in i + 1..resampled.len() {
            let d: f64 = resampled[i]
                .iter()
                .zip(&resampled[j])
                .map(|(a, b)| (a.0 - b.0).abs() + (a.1 - b.1).abs())
                .sum();
            max = max.max(d);
        }
    }
    Ok(max)
}

/// Median point count, the default alignment length.
pub fn median_point_count(records: &[Scanpath]) -> usize {
    let mut counts: Vec<usize> = records.iter().map(|r| r.points.len()).collect();
    counts.sort_unstable();
    counts.get(counts.len() / 2).copied().unwrap_or(1).max(1)
}

/// Per-channel maximum absolute pixel distance over the image set, computed
/// as the per-pixel max-minus-min envelope.
pub fn l1_sensitivity_image(images: &[&EncodedImage]) -> Result<[f64; 3]> {
    if images.len() < 2 {
        return Err(CoreError::InsufficientData {
            needed: 2,
            got: images.len(),
        });
    }
    let res = images[0].resolution();
    let mut out = [0.0f64; 3];
    for (c, out_c) in out.iter_mut().enumerate() {
        let per_pixel = res * res;
        let mut worst = 0.0f32;
        for p in 0..per_pixel {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for img in images {
                let v = img.channel(c)[p];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            worst = worst.max(hi - lo);
        }
        *out_c = worst as f64;
    }
    Ok(out)
}

/// I.i.d. Laplace(0, lambda) samples via a signed exponential draw.
pub fn laplace_noise<R: Rng>(n: usize, lambda: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(CoreError::InvalidScale(lambda));
    }
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.gen(); // [0, 1); 1-u is in (0, 1]
            let magnitude = -(1.0 - u).ln() * lambda;
            if rng.gen::<bool>() {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect())
}

/// Outcome of the raw mechanism: too-noisy recordings are skipped entirely.
#[derive(Debug, Clone)]
pub enum DpRawOutcome {
    Noised(Scanpath),
    Skipped,
}

/// Laplace noise on every coordinate; points pushed outside the unit square
/// are dropped, and fewer than three survivors skips the recording.
pub fn dp_raw<R: Rng>(path: &Scanpath, cfg: &DpConfig, rng: &mut R) -> Result<DpRawOutcome> {
    cfg.validate()?;
    let sensitivity = match cfg.sensitivity {
        Sensitivity::Raw(s) => s,
        Sensitivity::Image(_) => {
            return Err(CoreError::InvalidInput("raw mechanism needs a raw sensitivity".into()))
        }
    };
    let n = path.points.len();
    if sensitivity == 0.0 {
        return Ok(DpRawOutcome::Noised(path.clone()));
    }
    let lambda = sensitivity / cfg.epsilon;
    let noise = laplace_noise(2 * n, lambda, rng)?;
    let mut points = Vec::with_capacity(n);
    for (i, p) in path.points.iter().enumerate() {
        let x = p.x + noise[2 * i];
        let y = p.y + noise[2 * i + 1];
        if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
            points.push(crate::codec::GazePoint { t: p.t, x, y });
        }
    }
    if points.len() < 3 {
        return Ok(DpRawOutcome::Skipped);
    }
    Ok(DpRawOutcome::Noised(Scanpath {
        subject_id: path.subject_id.clone(),
        stimulus_id: path.stimulus_id.clone(),
        points,
        duration: path.duration,
    }))
}

/// Per-pixel Laplace noise with per-channel scales, clamped back to [0,1].
/// A zero-sensitivity channel passes through unchanged.
pub fn dp_image<R: Rng>(image: &EncodedImage, cfg: &DpConfig, rng: &mut R) -> Result<EncodedImage> {
    cfg.validate()?;
    let sens = match cfg.sensitivity {
        Sensitivity::Image(s) => s,
        Sensitivity::Raw(_) => {
            return Err(CoreError::InvalidInput("image mechanism needs image sensitivities".into()))
        }
    };
    let res = image.resolution();
    let mut out = image.clone();
    for (c, &s) in sens.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        let lambda = s / cfg.epsilon;
        let noise = laplace_noise(res * res, lambda, rng)?;
        for y in 0..res {
            for x in 0..res {
                let v = out.get(c, y, x) as f64 + noise[y * res + x];
                out.set(c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(out)
}

/// One sweep row. `epsilon` is the effective (reported) budget.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FrontierRow {
    pub epsilon: f64,
    pub domain: DpDomain,
    pub accuracy: BTreeMap<String, f64>,
    pub skipped_fraction: f64,
}

/// Inputs of the sweep: held-out records with their encoded images.
pub struct DpEvalItem {
    pub record: LabeledRecord,
    pub image: EncodedImage,
}

/// Run the mechanism `repetitions` times per item and epsilon, majority-vote
/// the predicted class per item, and report mean accuracy per task.
///
/// Ties vote for the lowest class index. Raw-domain repetitions that fall
/// below three surviving points are excluded; an item skipped in every
/// repetition is excluded from the accuracy and counted in
/// `skipped_fraction`. Every (epsilon, item, repetition) derives its own
/// seed, so results do not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn dp_evaluate(
    sweep: &EpsilonSweep,
    items: &[DpEvalItem],
    classifiers: &[TaskClassifier],
    repetitions: usize,
    resolution: usize,
    seed: u64,
) -> Result<Vec<FrontierRow>> {
    if items.is_empty() {
        return Err(CoreError::InsufficientData { needed: 1, got: 0 });
    }
    let refs: Vec<&Scanpath> = items.iter().map(|i| &i.record.scanpath).collect();
    let raw_sensitivity = if sweep.domain == DpDomain::Raw {
        let owned: Vec<Scanpath> = refs.iter().map(|r| (*r).clone()).collect();
        let len = median_point_count(&owned);
        l1_sensitivity_raw(&owned, len)?
    } else {
        0.0
    };
    let image_sensitivity = if sweep.domain == DpDomain::Image {
        let imgs: Vec<&EncodedImage> = items.iter().map(|i| &i.image).collect();
        l1_sensitivity_image(&imgs)?
    } else {
        [0.0; 3]
    };

    let multiplier = match sweep.domain {
        DpDomain::Raw => 1,
        DpDomain::Image => resolution * resolution,
    };

    let mut rows = Vec::new();
    for (eps_idx, eps) in sweep.values().into_iter().enumerate() {
        let cfg = DpConfig {
            epsilon: eps,
            sensitivity: match sweep.domain {
                DpDomain::Raw => Sensitivity::Raw(raw_sensitivity),
                DpDomain::Image => Sensitivity::Image(image_sensitivity),
            },
            repetitions,
            composition_multiplier: multiplier,
        };

        // Majority votes per item and task, computed in deterministic chunks.
        let votes: Vec<Result<Option<Vec<usize>>>> = items
            .par_iter()
            .enumerate()
            .map(|(item_idx, item)| {
                vote_for_item(
                    item,
                    &cfg,
                    sweep.domain,
                    classifiers,
                    resolution,
                    seed,
                    eps_idx as u64,
                    item_idx as u64,
                )
            })
            .collect();

        let mut counted = 0usize;
        let mut skipped = 0usize;
        let mut hits: Vec<usize> = vec![0; classifiers.len()];
        for (item, vote) in items.iter().zip(votes) {
            match vote? {
                None => skipped += 1,
                Some(preds) => {
                    counted += 1;
                    for (k, cls) in classifiers.iter().enumerate() {
                        let label = match cls.task.as_str() {
                            "subject" => item.record.subject_label,
                            "stimulus" => item.record.stimulus_label,
                            other => {
                                return Err(CoreError::InvalidInput(format!(
                                    "unknown task `{other}` in dp evaluation"
                                )))
                            }
                        };
                        if preds[k] == label {
                            hits[k] += 1;
                        }
                    }
                }
            }
        }
        let mut accuracy = BTreeMap::new();
        if counted > 0 {
            for (k, cls) in classifiers.iter().enumerate() {
                accuracy.insert(cls.task.clone(), hits[k] as f64 / counted as f64);
            }
        }
        rows.push(FrontierRow {
            epsilon: cfg.effective_epsilon(),
            domain: sweep.domain,
            accuracy,
            skipped_fraction: skipped as f64 / items.len() as f64,
        });
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn vote_for_item(
    item: &DpEvalItem,
    cfg: &DpConfig,
    domain: DpDomain,
    classifiers: &[TaskClassifier],
    resolution: usize,
    seed: u64,
    eps_idx: u64,
    item_idx: u64,
) -> Result<Option<Vec<usize>>> {
    let mut ballots: Vec<Vec<usize>> =
        vec![vec![0; 0]; classifiers.len()];
    for (k, cls) in classifiers.iter().enumerate() {
        ballots[k] = vec![0; cls.model.n_classes];
    }
    let mut any = false;
    let mut noised_images: Vec<EncodedImage> = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        let mut rng = stage_rng(seed, "dp-rep", (eps_idx << 40) ^ (item_idx << 20) ^ rep as u64);
        match domain {
            DpDomain::Raw => match dp_raw(&item.record.scanpath, cfg, &mut rng)? {
                DpRawOutcome::Skipped => continue,
                DpRawOutcome::Noised(path) => {
                    noised_images.push(encode_scanpath(&path, resolution)?);
                    any = true;
                }
            },
            DpDomain::Image => {
                noised_images.push(dp_image(&item.image, cfg, &mut rng)?);
                any = true;
            }
        }
    }
    if !any {
        return Ok(None);
    }
    let refs: Vec<&EncodedImage> = noised_images.iter().collect();
    for (k, cls) in classifiers.iter().enumerate() {
        let probs = classify_batch(&cls.model, &refs)?;
        for row in probs.rows() {
            let pred = argmax_lowest(row.iter().copied());
            ballots[k][pred] += 1;
        }
    }
    Ok(Some(
        ballots
            .iter()
            .map(|votes| argmax_lowest(votes.iter().map(|&v| v as f64)))
            .collect(),
    ))
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for (i, v) in values.enumerate() {
        if v > best {
            best = v;
            best_idx = i;
        }
    }
    best_idx
}

/// Among rows whose hide-task accuracy sits within `tolerance` of chance,
/// pick the one maximizing the keep-hide accuracy gap. Returns the index
/// into `rows`.
pub fn select_optimal_epsilon(
    rows: &[FrontierRow],
    keep_task: &str,
    hide_task: &str,
    chance_level: f64,
    tolerance: f64,
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in rows.iter().enumerate() {
        let (Some(keep), Some(hide)) = (row.accuracy.get(keep_task), row.accuracy.get(hide_task))
        else {
            continue;
        };
        if (hide - chance_level).abs() > tolerance {
            continue;
        }
        let gap = keep - hide;
        if best.map(|(_, g)| gap > g).unwrap_or(true) {
            best = Some((i, gap));
        }
    }
    best.map(|(i, _)| i).ok_or(CoreError::NoFeasibleEpsilon)
}

/// CSV emission: `epsilon,domain,stim_acc,sub_acc,skipped_fraction`.
pub fn write_frontier_csv<W: Write>(mut w: W, rows: &[FrontierRow]) -> Result<()> {
    writeln!(w, "epsilon,domain,stim_acc,sub_acc,skipped_fraction")?;
    for row in rows {
        let fmt = |task: &str| {
            row.accuracy
                .get(task)
                .map(|a| format!("{a:.6}"))
                .unwrap_or_else(|| "-".to_string())
        };
        writeln!(
            w,
            "{:.6},{},{},{},{:.6}",
            row.epsilon,
            row.domain,
            fmt("stimulus"),
            fmt("subject"),
            row.skipped_fraction
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::GazePoint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path(points: Vec<(f64, f64)>) -> Scanpath {
        let n = points.len();
        Scanpath {
            subject_id: "s".into(),
            stimulus_id: "i".into(),
            points: points
                .into_iter()
                .enumerate()
                .map(|(i, (x, y))| GazePoint {
                    t: i as f64 / n.max(2) as f64,
                    x,
                    y,
                })
                .collect(),
            duration: 1.0,
        }
    }

    #[test]
    fn identical_records_have_zero_sensitivity() {
        let a = path(vec![(0.1, 0.2), (0.4, 0.5)]);
        let s = l1_sensitivity_raw(&[a.clone(), a], 8).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn manhattan_distance_of_corner_points() {
        let a = path(vec![(0.0, 0.0)]);
        let b = path(vec![(1.0, 1.0)]);
        let s = l1_sensitivity_raw(&[a, b], 1).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn raw_sensitivity_matches_pairwise_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let records: Vec<Scanpath> = (0..5)
            .map(|_| {
                path((0..7)
                    .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
                    .collect())
            })
            .collect();
        let len = 7;
        let fast = l1_sensitivity_raw(&records, len).unwrap();
        let mut brute = 0.0f64;
        for i in 0..records.len() {
            for j in 0..records.len() {
                if i == j {
                    continue;
                }
                let a = resample_points(&records[i], len);
                let b = resample_points(&records[j], len);
                let d: f64 = a
                    .iter()
                    .zip(&b)
                    .map(|(p, q)| (p.0 - q.0).abs() + (p.1 - q.1).abs())
                    .sum();
                brute = brute.max(d);
            }
        }
        assert!((fast - brute).abs() < 1e-12);
    }

    #[test]
    fn image_sensitivity_cases() {
        let zero = EncodedImage::zeros(16);
        assert_eq!(l1_sensitivity_image(&[&zero, &zero]).unwrap(), [0.0; 3]);

        let mut red = EncodedImage::zeros(16);
        for y in 0..16 {
            for x in 0..16 {
                red.set(0, y, x, 1.0);
            }
        }
        let s = l1_sensitivity_image(&[&zero, &red]).unwrap();
        assert_eq!(s, [1.0, 0.0, 0.0]);
        assert!(l1_sensitivity_image(&[&zero]).is_err());
    }

    #[test]
    fn image_sensitivity_matches_exhaustive_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let images: Vec<EncodedImage> = (0..4)
            .map(|_| {
                let data: Vec<f32> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
                EncodedImage::from_raw(16, data).unwrap()
            })
            .collect();
        let refs: Vec<&EncodedImage> = images.iter().collect();
        let fast = l1_sensitivity_image(&refs).unwrap();
        let mut brute = [0.0f64; 3];
        for i in 0..images.len() {
            for j in i + 1..images.len() {
                for c in 0..3 {
                    for (a, b) in images[i].channel(c).iter().zip(images[j].channel(c)) {
                        brute[c] = brute[c].max((a - b).abs() as f64);
                    }
                }
            }
        }
        for c in 0..3 {
            assert!((fast[c] - brute[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn laplace_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = laplace_noise(1_000_000, 1.0, &mut rng).unwrap();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / samples.len() as f64;
        assert!((var - 2.0).abs() < 0.05, "variance {var}");
        assert!(laplace_noise(4, 0.0, &mut rng).is_err());
        assert!(laplace_noise(4, -1.0, &mut rng).is_err());
    }

    #[test]
    fn laplace_ks_statistic_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let lambda = 1.5;
        let mut samples = laplace_noise(100_000, lambda, &mut rng).unwrap();
        samples.sort_by(f64::total_cmp);
        let cdf = |x: f64| {
            if x < 0.0 {
                0.5 * (x / lambda).exp()
            } else {
                1.0 - 0.5 * (-x / lambda).exp()
            }
        };
        let n = samples.len() as f64;
        let mut ks = 0.0f64;
        for (i, &x) in samples.iter().enumerate() {
            let f = cdf(x);
            ks = ks.max((f - i as f64 / n).abs());
            ks = ks.max(((i + 1) as f64 / n - f).abs());
        }
        assert!(ks < 0.01, "ks {ks}");
    }

    #[test]
    fn dp_raw_limits() {
        let p = path(vec![(0.5, 0.5), (0.52, 0.5), (0.5, 0.52), (0.48, 0.5)]);
        let cfg = DpConfig {
            epsilon: 1e9,
            sensitivity: Sensitivity::Raw(1.0),
            repetitions: 1,
            composition_multiplier: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        match dp_raw(&p, &cfg, &mut rng).unwrap() {
            DpRawOutcome::Noised(out) => {
                assert_eq!(out.points.len(), 4);
                for (a, b) in out.points.iter().zip(&p.points) {
                    assert!((a.x - b.x).abs() < 1e-6);
                    assert!((a.y - b.y).abs() < 1e-6);
                }
            }
            DpRawOutcome::Skipped => panic!("vanishing noise must keep all points"),
        }

        // Two-point paths can never keep three points.
        let two = path(vec![(0.5, 0.5), (0.6, 0.6)]);
        match dp_raw(&two, &cfg, &mut rng).unwrap() {
            DpRawOutcome::Skipped => {}
            DpRawOutcome::Noised(_) => panic!("two-point path must be skipped"),
        }
    }

    #[test]
    fn dp_raw_drops_out_of_bounds_points() {
        // Huge noise pushes essentially every point out of the unit square.
        let p = path(vec![(0.5, 0.5); 8]);
        let cfg = DpConfig {
            epsilon: 1e-6,
            sensitivity: Sensitivity::Raw(1.0),
            repetitions: 1,
            composition_multiplier: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut skips = 0;
        for _ in 0..20 {
            if matches!(dp_raw(&p, &cfg, &mut rng).unwrap(), DpRawOutcome::Skipped) {
                skips += 1;
            }
        }
        assert!(skips >= 19, "only {skips} of 20 skipped");
    }

    #[test]
    fn dp_image_effective_epsilon_endpoints() {
        for (eps, expect) in [(0.01, 40.96), (15.0, 61440.0)] {
            let cfg = DpConfig {
                epsilon: eps,
                sensitivity: Sensitivity::Image([1.0, 1.0, 1.0]),
                repetitions: 100,
                composition_multiplier: 64 * 64,
            };
            assert!((cfg.effective_epsilon() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn dp_image_zero_sensitivity_channel_unchanged() {
        let mut img = EncodedImage::zeros(16);
        img.set(1, 2, 2, 0.75);
        let cfg = DpConfig {
            epsilon: 0.5,
            sensitivity: Sensitivity::Image([1.0, 0.0, 1.0]),
            repetitions: 1,
            composition_multiplier: 256,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = dp_image(&img, &cfg, &mut rng).unwrap();
        assert_eq!(out.channel(1), img.channel(1));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(out.channel(0), img.channel(0));
    }

    #[test]
    fn epsilon_selection_rules() {
        let row = |eps: f64, stim: f64, sub: f64| FrontierRow {
            epsilon: eps,
            domain: DpDomain::Image,
            accuracy: BTreeMap::from([
                ("stimulus".to_string(), stim),
                ("subject".to_string(), sub),
            ]),
            skipped_fraction: 0.0,
        };
        let rows = vec![row(1.0, 0.30, 0.12), row(2.0, 0.41, 0.12), row(3.0, 0.9, 0.5)];
        let idx = select_optimal_epsilon(&rows, "stimulus", "subject", 0.12, 0.03).unwrap();
        assert_eq!(idx, 1);

        let single = vec![row(5.0, 0.5, 0.13)];
        assert_eq!(
            select_optimal_epsilon(&single, "stimulus", "subject", 0.12, 0.03).unwrap(),
            0
        );

        let none = vec![row(1.0, 0.5, 0.9)];
        assert!(matches!(
            select_optimal_epsilon(&none, "stimulus", "subject", 0.12, 0.03),
            Err(CoreError::NoFeasibleEpsilon)
        ));
    }

    #[test]
    fn vote_ties_take_lowest_class() {
        assert_eq!(argmax_lowest([1.0, 3.0, 3.0].into_iter()), 1);
        assert_eq!(argmax_lowest([2.0, 2.0].into_iter()), 0);
    }

    #[test]
    fn sweep_values_cover_range() {
        let sweep = EpsilonSweep {
            lo: 0.01,
            hi: 0.05,
            step: 0.01,
            domain: DpDomain::Image,
        };
        let vals = sweep.values();
        assert_eq!(vals.len(), 5);
        assert!((vals[4] - 0.05).abs() < 1e-12);
    }
}
