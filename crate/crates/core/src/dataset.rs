//! Dataset ingestion, balanced splitting, and synthetic data generation.

use crate::codec::{GazePoint, Scanpath};
use crate::error::{CoreError, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};

/// A scanpath with integer class indices for both classification tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub scanpath: Scanpath,
    pub subject_label: usize,
    pub stimulus_label: usize,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<LabeledRecord>,
    pub test: Vec<LabeledRecord>,
}

/// How to treat coordinates that fall outside the stimulus extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClampMode {
    Clamp,
    Reject,
}

/// Column mapping for gaze CSV files.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CsvSchema {
    pub subject: String,
    pub stimulus: String,
    /// Optional; without it, trials are segmented by `time_gap`.
    pub trial: Option<String>,
    pub t: String,
    pub x: String,
    pub y: String,
    pub extent_x: Option<String>,
    pub extent_y: Option<String>,
    pub clamp_mode: ClampMode,
    /// Seconds of silence that start a new trial when no trial column exists.
    pub time_gap: f64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            subject: "subject".into(),
            stimulus: "stimulus".into(),
            trial: Some("trial".into()),
            t: "t".into(),
            x: "x".into(),
            y: "y".into(),
            extent_x: Some("extent_x".into()),
            extent_y: Some("extent_y".into()),
            clamp_mode: ClampMode::Clamp,
            time_gap: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadStats {
    pub rows: usize,
    pub clamped_points: usize,
    pub skipped_groups: usize,
}

struct RawRow {
    t: f64,
    x: f64,
    y: f64,
}

/// Parse a gaze CSV into labeled records, one per (subject, stimulus, trial)
/// group, points sorted by time. Row order in the file does not matter.
pub fn load_gaze_csv<R: Read>(source: R, schema: &CsvSchema) -> Result<(Vec<LabeledRecord>, LoadStats)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(source);

    let headers = reader
        .headers()
        .map_err(|e| CoreError::InvalidInput(format!("cannot read csv header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CoreError::SchemaError(name.to_string()))
    };
    let opt_col = |name: &Option<String>| -> Option<usize> {
        name.as_deref().and_then(|n| headers.iter().position(|h| h == n))
    };

    let subject_i = col(&schema.subject)?;
    let stimulus_i = col(&schema.stimulus)?;
    let t_i = col(&schema.t)?;
    let x_i = col(&schema.x)?;
    let y_i = col(&schema.y)?;
    let trial_i = opt_col(&schema.trial);
    let ex_i = opt_col(&schema.extent_x);
    let ey_i = opt_col(&schema.extent_y);

    let mut stats = LoadStats::default();
    // Group key -> rows; BTreeMap keeps the output order deterministic.
    let mut groups: BTreeMap<(String, String, String), Vec<RawRow>> = BTreeMap::new();

    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 2; // 1-based, after the header
        let record = record.map_err(|e| CoreError::RowError {
            line,
            message: e.to_string(),
        })?;
        let field = |i: usize| -> Result<&str> {
            record.get(i).ok_or(CoreError::RowError {
                line,
                message: format!("missing field {i}"),
            })
        };
        let num = |i: usize| -> Result<f64> {
            field(i)?.trim().parse::<f64>().map_err(|e| CoreError::RowError {
                line,
                message: format!("bad number `{}`: {e}", record.get(i).unwrap_or("")),
            })
        };

        let subject = field(subject_i)?.trim().to_string();
        let stimulus = field(stimulus_i)?.trim().to_string();
        let trial = match trial_i {
            Some(i) => field(i)?.trim().to_string(),
            None => String::new(),
        };
        let t = num(t_i)?;
        let mut x = num(x_i)?;
        let mut y = num(y_i)?;
        if let Some(i) = ex_i {
            let ex = num(i)?;
            if ex > 0.0 {
                x /= ex;
            }
        }
        if let Some(i) = ey_i {
            let ey = num(i)?;
            if ey > 0.0 {
                y /= ey;
            }
        }
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            match schema.clamp_mode {
                ClampMode::Clamp => {
                    x = x.clamp(0.0, 1.0);
                    y = y.clamp(0.0, 1.0);
                    stats.clamped_points += 1;
                }
                ClampMode::Reject => {
                    return Err(CoreError::RowError {
                        line,
                        message: format!("coordinates ({x:.4},{y:.4}) outside the extent"),
                    })
                }
            }
        }
        if t < 0.0 || !t.is_finite() {
            return Err(CoreError::RowError {
                line,
                message: format!("bad timestamp {t}"),
            });
        }
        stats.rows += 1;
        groups
            .entry((subject, stimulus, trial))
            .or_default()
            .push(RawRow { t, x, y });
    }

    // Assign label indices from the sorted unique id sets.
    let subjects = dedup_sorted(groups.keys().map(|k| k.0.clone()));
    let stimuli = dedup_sorted(groups.keys().map(|k| k.1.clone()));
    let subject_index: BTreeMap<String, usize> =
        subjects.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
    let stimulus_index: BTreeMap<String, usize> =
        stimuli.into_iter().enumerate().map(|(i, s)| (s, i)).collect();

    let mut records = Vec::new();
    for ((subject, stimulus, _trial), mut rows) in groups {
        rows.sort_by(|a, b| a.t.total_cmp(&b.t));
        if rows.is_empty() {
            stats.skipped_groups += 1;
            continue;
        }
        // Without a trial column, split on time gaps.
        let pieces: Vec<Vec<RawRow>> = if trial_i.is_some() {
            vec![rows]
        } else {
            split_on_gaps(rows, schema.time_gap)
        };
        for piece in pieces {
            if piece.is_empty() {
                stats.skipped_groups += 1;
                continue;
            }
            let t0 = piece[0].t;
            let points: Vec<GazePoint> = piece
                .iter()
                .map(|r| GazePoint {
                    t: r.t - t0,
                    x: r.x,
                    y: r.y,
                })
                .collect();
            let duration = points.last().unwrap().t;
            records.push(LabeledRecord {
                scanpath: Scanpath {
                    subject_id: subject.clone(),
                    stimulus_id: stimulus.clone(),
                    points,
                    duration,
                },
                subject_label: subject_index[&subject],
                stimulus_label: stimulus_index[&stimulus],
            });
        }
    }
    Ok((records, stats))
}

fn dedup_sorted(iter: impl Iterator<Item = String>) -> Vec<String> {
    let mut v: Vec<String> = iter.collect();
    v.sort();
    v.dedup();
    v
}

fn split_on_gaps(rows: Vec<RawRow>, gap: f64) -> Vec<Vec<RawRow>> {
    let mut out: Vec<Vec<RawRow>> = Vec::new();
    for row in rows {
        let start_new = match out.last().and_then(|p| p.last()) {
            Some(prev) => row.t - prev.t > gap,
            None => true,
        };
        if start_new {
            out.push(Vec::new());
        }
        out.last_mut().unwrap().push(row);
    }
    out
}

/// Write records in the canonical gaze CSV layout. Trial ids are assigned
/// per (subject, stimulus) pair in record order.
pub fn write_gaze_csv<W: Write>(sink: W, records: &[LabeledRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["subject", "stimulus", "trial", "t", "x", "y"])
        .map_err(|e| CoreError::InvalidInput(e.to_string()))?;
    let mut trial_counter: BTreeMap<(String, String), usize> = BTreeMap::new();
    for rec in records {
        let key = (rec.scanpath.subject_id.clone(), rec.scanpath.stimulus_id.clone());
        let trial = trial_counter.entry(key).or_insert(0);
        for p in &rec.scanpath.points {
            w.write_record([
                rec.scanpath.subject_id.as_str(),
                rec.scanpath.stimulus_id.as_str(),
                &trial.to_string(),
                &format!("{:.6}", p.t),
                &format!("{:.6}", p.x),
                &format!("{:.6}", p.y),
            ])
            .map_err(|e| CoreError::InvalidInput(e.to_string()))?;
        }
        *trial_counter.get_mut(&(rec.scanpath.subject_id.clone(), rec.scanpath.stimulus_id.clone())).unwrap() += 1;
    }
    w.flush()?;
    Ok(())
}

/// Stratified 50/50 split.
///
/// Records are grouped per (subject, stimulus) cell, shuffled within the
/// cell, and assigned alternately to train and test. Odd cells place their
/// extra record on whichever side currently runs behind, so per-class counts
/// stay within one of each other whenever the data allows it.
pub fn split_fifty_fifty<R: Rng>(
    records: &[LabeledRecord],
    rng: &mut R,
) -> Result<(DatasetSplit, Vec<String>)> {
    if records.is_empty() {
        return Err(CoreError::InsufficientData { needed: 1, got: 0 });
    }
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        cells.entry((r.subject_label, r.stimulus_label)).or_default().push(i);
    }

    let mut warnings = Vec::new();
    let mut split = DatasetSplit::default();
    // Imbalance trackers: train minus test, per class and overall.
    let mut subj_bias: BTreeMap<usize, i64> = BTreeMap::new();
    let mut stim_bias: BTreeMap<usize, i64> = BTreeMap::new();
    let mut total_bias: i64 = 0;

    for (&(subj, stim), indices) in cells.iter_mut() {
        indices.shuffle(rng);
        if indices.len() == 1 {
            warnings.push(format!(
                "cell (subject {subj}, stimulus {stim}) has a single record; placed in train"
            ));
        }
        // Which side takes the first (and, in odd cells, the extra) record.
        let train_first = if indices.len() == 1 {
            true
        } else if indices.len() % 2 == 0 {
            true
        } else {
            // Odd cell: give the extra record to the side that runs behind.
            total_bias
                + subj_bias.get(&subj).copied().unwrap_or(0)
                + stim_bias.get(&stim).copied().unwrap_or(0)
                <= 0
        };
        for (pos, &idx) in indices.iter().enumerate() {
            let to_train = (pos % 2 == 0) == train_first;
            if to_train {
                split.train.push(records[idx].clone());
                *subj_bias.entry(subj).or_insert(0) += 1;
                *stim_bias.entry(stim).or_insert(0) += 1;
                total_bias += 1;
            } else {
                split.test.push(records[idx].clone());
                *subj_bias.entry(subj).or_insert(0) -= 1;
                *stim_bias.entry(stim).or_insert(0) -= 1;
                total_bias -= 1;
            }
        }
    }

    // Single-record cells with the extra on the test side would break the
    // "every class appears in train" invariant; pull them back.
    let mut moved = Vec::new();
    for (i, r) in split.test.iter().enumerate() {
        let subj_in_train = split.train.iter().any(|t| t.subject_label == r.subject_label);
        let stim_in_train = split.train.iter().any(|t| t.stimulus_label == r.stimulus_label);
        if !subj_in_train || !stim_in_train {
            moved.push(i);
        }
    }
    for &i in moved.iter().rev() {
        let r = split.test.remove(i);
        warnings.push(format!(
            "moved a (subject {}, stimulus {}) record to train to keep class coverage",
            r.subject_label, r.stimulus_label
        ));
        split.train.push(r);
    }

    Ok((split, warnings))
}

/// Synthetic generator controls beyond the spec'd signature.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SynthOptions {
    pub points_per_path: usize,
    /// Selects the stimulus curve set; different seeds give different curves
    /// from the same family.
    pub curve_seed: u64,
    pub duration: f64,
    /// Per-point positional jitter amplitude.
    pub jitter: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            points_per_path: 32,
            curve_seed: 0,
            duration: 1.0,
            jitter: 0.015,
        }
    }
}

/// Generate a desk-scale dataset with a controllable subject signature.
///
/// Each stimulus is a distinct closed Lissajous-style curve; each subject
/// contributes a fixed spatial offset plus a fixed dwell-time warp, both
/// mixed in with weight `signature_strength`. At strength 0 the subject
/// index does not influence the data at all.
pub fn synth_generate<R: Rng>(
    n_subjects: usize,
    n_stimuli: usize,
    trials_per_pair: usize,
    signature_strength: f64,
    rng: &mut R,
) -> Result<Vec<LabeledRecord>> {
    synth_generate_with(
        n_subjects,
        n_stimuli,
        trials_per_pair,
        signature_strength,
        &SynthOptions::default(),
        rng,
    )
}

const CURVE_FREQS: [(f64, f64); 8] = [
    (1.0, 2.0),
    (3.0, 2.0),
    (3.0, 4.0),
    (5.0, 4.0),
    (2.0, 1.0),
    (5.0, 2.0),
    (4.0, 5.0),
    (1.0, 3.0),
];

pub fn synth_generate_with<R: Rng>(
    n_subjects: usize,
    n_stimuli: usize,
    trials_per_pair: usize,
    signature_strength: f64,
    opts: &SynthOptions,
    rng: &mut R,
) -> Result<Vec<LabeledRecord>> {
    if n_subjects < 2 || n_stimuli < 2 {
        return Err(CoreError::InvalidInput(
            "need at least 2 subjects and 2 stimuli".into(),
        ));
    }
    if trials_per_pair == 0 || opts.points_per_path == 0 {
        return Err(CoreError::InvalidInput(
            "trials_per_pair and points_per_path must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&signature_strength) {
        return Err(CoreError::InvalidInput(
            "signature_strength must be in [0,1]".into(),
        ));
    }

    let alpha = signature_strength;
    let t_count = opts.points_per_path;

    // Stimulus curves: frequency pair from a fixed table, phase from the
    // curve seed. The curve seed rotates the table so a different seed is a
    // different curve set from the same family.
    let curves: Vec<(f64, f64, f64)> = (0..n_stimuli)
        .map(|s| {
            let (a, b) = CURVE_FREQS[(s + opts.curve_seed as usize) % CURVE_FREQS.len()];
            let phase = ((opts.curve_seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(s as u64))
                % 1024) as f64
                / 1024.0
                * std::f64::consts::TAU;
            (a, b, phase)
        })
        .collect();

    // Subject signatures: a fixed offset direction and a dwell-time warp.
    let signatures: Vec<(f64, f64, f64)> = (0..n_subjects)
        .map(|u| {
            let angle = std::f64::consts::TAU * u as f64 / n_subjects as f64;
            let warp = 0.55 + 1.3 * u as f64 / (n_subjects.max(2) - 1) as f64;
            (0.13 * angle.cos(), 0.13 * angle.sin(), warp)
        })
        .collect();

    let mut records = Vec::with_capacity(n_subjects * n_stimuli * trials_per_pair);
    for u in 0..n_subjects {
        for s in 0..n_stimuli {
            for _trial in 0..trials_per_pair {
                let (fa, fb, phase) = curves[s];
                let (dx, dy, warp) = signatures[u];
                let trial_phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let gamma = 1.0 + alpha * (warp - 1.0);
                let mut points = Vec::with_capacity(t_count);
                for i in 0..t_count {
                    let theta = trial_phase + std::f64::consts::TAU * i as f64 / t_count as f64;
                    let jx = rng.gen_range(-opts.jitter..=opts.jitter);
                    let jy = rng.gen_range(-opts.jitter..=opts.jitter);
                    let x = 0.5 + 0.32 * (fa * theta + phase).sin() + alpha * dx + jx;
                    let y = 0.5 + 0.32 * (fb * theta).sin() + alpha * dy + jy;
                    let frac = if t_count > 1 {
                        i as f64 / (t_count - 1) as f64
                    } else {
                        0.0
                    };
                    points.push(GazePoint {
                        t: opts.duration * frac.powf(gamma),
                        x: x.clamp(0.0, 1.0),
                        y: y.clamp(0.0, 1.0),
                    });
                }
                records.push(LabeledRecord {
                    scanpath: Scanpath {
                        subject_id: format!("s{u:02}"),
                        stimulus_id: format!("i{s:02}"),
                        points,
                        duration: opts.duration,
                    },
                    subject_label: u,
                    stimulus_label: s,
                });
            }
        }
    }
    Ok(records)
}
