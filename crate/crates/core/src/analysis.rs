//! Derived metrics: per-channel change importance and the accuracy table.

use crate::codec::EncodedImage;
use crate::error::{CoreError, Result};
use std::io::Write;

/// Share of changed values per channel, in percent. Sums to 100 unless no
/// pixel changed at all.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelImportance {
    pub red_pct: f64,
    pub green_pct: f64,
    pub blue_pct: f64,
    /// Set when no value changed anywhere; the percentages are then zero.
    pub degenerate: bool,
}

pub const DEFAULT_CHANGE_THRESHOLD: f64 = 1.0 / 255.0;

/// Count values with |after - before| > tau per channel and normalize by the
/// total changed count.
pub fn channel_importance(
    before: &EncodedImage,
    after: &EncodedImage,
    tau: f64,
) -> Result<ChannelImportance> {
    channel_importance_agg(&[(before, after)], tau)
}

/// Aggregate importance over image pairs: counts are pooled before
/// normalizing.
pub fn channel_importance_agg(
    pairs: &[(&EncodedImage, &EncodedImage)],
    tau: f64,
) -> Result<ChannelImportance> {
    if tau <= 0.0 {
        return Err(CoreError::InvalidInput("change threshold must be positive".into()));
    }
    let mut counts = [0u64; 3];
    for (before, after) in pairs {
        if before.resolution() != after.resolution() {
            return Err(CoreError::ShapeError("image pair resolutions disagree".into()));
        }
        for (c, count) in counts.iter_mut().enumerate() {
            for (a, b) in before.channel(c).iter().zip(after.channel(c)) {
                if ((a - b).abs() as f64) > tau {
                    *count += 1;
                }
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Ok(ChannelImportance {
            red_pct: 0.0,
            green_pct: 0.0,
            blue_pct: 0.0,
            degenerate: true,
        });
    }
    let pct = |c: u64| c as f64 / total as f64 * 100.0;
    Ok(ChannelImportance {
        red_pct: pct(counts[0]),
        green_pct: pct(counts[1]),
        blue_pct: pct(counts[2]),
        degenerate: false,
    })
}

/// One row of the iteration accuracy table. Missing measurements stay
/// empty rather than interpolated.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AccuracyRow {
    pub label: String,
    pub stim_no_adapt: Option<f64>,
    pub sub_no_adapt: Option<f64>,
    pub stim_adapt: Option<f64>,
    pub sub_adapt: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".to_string())
}

/// Accuracy table as CSV with a trailing chance-level row. Five columns:
/// iteration, stim/sub before adaptation, stim/sub after adaptation.
pub fn write_accuracy_csv<W: Write>(
    mut w: W,
    rows: &[AccuracyRow],
    chance_stim: f64,
    chance_sub: f64,
) -> Result<()> {
    writeln!(w, "iteration,stim_no_adapt,sub_no_adapt,stim_adapt,sub_adapt")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            row.label,
            cell(row.stim_no_adapt),
            cell(row.sub_no_adapt),
            cell(row.stim_adapt),
            cell(row.sub_adapt)
        )?;
    }
    writeln!(
        w,
        "chance,{:.4},{:.4},{:.4},{:.4}",
        chance_stim, chance_sub, chance_stim, chance_sub
    )?;
    Ok(())
}

/// Human-readable aligned rendering of the same table.
pub fn format_accuracy_table(rows: &[AccuracyRow], chance_stim: f64, chance_sub: f64) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>14} {:>14} {:>12} {:>12}\n",
        "iteration", "stim_no_adapt", "sub_no_adapt", "stim_adapt", "sub_adapt"
    ));
    for row in rows {
        out.push_str(&format!(
            "{:<12} {:>14} {:>14} {:>12} {:>12}\n",
            row.label,
            cell(row.stim_no_adapt),
            cell(row.sub_no_adapt),
            cell(row.stim_adapt),
            cell(row.sub_adapt)
        ));
    }
    out.push_str(&format!(
        "{:<12} {:>14.4} {:>14.4} {:>12.4} {:>12.4}\n",
        "chance", chance_stim, chance_sub, chance_stim, chance_sub
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img_with(c: usize, value: f32, n: usize) -> EncodedImage {
        let mut img = EncodedImage::zeros(16);
        for i in 0..n {
            img.set(c, i / 16, i % 16, value);
        }
        img
    }

    #[test]
    fn only_red_changes_gives_full_red() {
        let before = EncodedImage::zeros(16);
        let after = img_with(0, 1.0, 10);
        let imp = channel_importance(&before, &after, DEFAULT_CHANGE_THRESHOLD).unwrap();
        assert_eq!(imp.red_pct, 100.0);
        assert_eq!(imp.green_pct, 0.0);
        assert_eq!(imp.blue_pct, 0.0);
        assert!(!imp.degenerate);
    }

    #[test]
    fn equal_changes_split_evenly() {
        let before = EncodedImage::zeros(16);
        let mut after = EncodedImage::zeros(16);
        for c in 0..3 {
            for i in 0..7 {
                after.set(c, 0, i, 0.5);
            }
        }
        let imp = channel_importance(&before, &after, DEFAULT_CHANGE_THRESHOLD).unwrap();
        for pct in [imp.red_pct, imp.green_pct, imp.blue_pct] {
            assert!((pct - 100.0 / 3.0).abs() < 0.1);
        }
        let sum = imp.red_pct + imp.green_pct + imp.blue_pct;
        assert!((sum - 100.0).abs() < 0.1);
    }

    #[test]
    fn no_change_is_degenerate() {
        let img = img_with(1, 0.4, 5);
        let imp = channel_importance(&img, &img, DEFAULT_CHANGE_THRESHOLD).unwrap();
        assert!(imp.degenerate);
        assert_eq!(imp.red_pct + imp.green_pct + imp.blue_pct, 0.0);
    }

    #[test]
    fn importance_is_symmetric() {
        let a = img_with(0, 1.0, 9);
        let b = img_with(2, 0.8, 4);
        let x = channel_importance(&a, &b, DEFAULT_CHANGE_THRESHOLD).unwrap();
        let y = channel_importance(&b, &a, DEFAULT_CHANGE_THRESHOLD).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn sub_threshold_noise_is_ignored() {
        let before = EncodedImage::zeros(16);
        let mut after = EncodedImage::zeros(16);
        after.set(0, 0, 0, 0.001);
        after.set(1, 0, 0, 0.9);
        let imp = channel_importance(&before, &after, DEFAULT_CHANGE_THRESHOLD).unwrap();
        assert_eq!(imp.green_pct, 100.0);
    }

    #[test]
    fn accuracy_table_layout() {
        let rows = vec![
            AccuracyRow {
                label: "RL-1".into(),
                stim_no_adapt: Some(0.95),
                sub_no_adapt: Some(0.13),
                stim_adapt: Some(0.96),
                sub_adapt: Some(0.93),
            },
            AccuracyRow {
                label: "RL-2".into(),
                stim_no_adapt: None,
                sub_no_adapt: None,
                stim_adapt: Some(0.95),
                sub_adapt: Some(0.91),
            },
        ];
        let mut buf = Vec::new();
        write_accuracy_csv(&mut buf, &rows, 0.25, 0.12).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        for line in &lines {
            assert_eq!(line.split(',').count(), 5);
        }
        assert!(lines[2].contains("-"));
        assert_eq!(lines[3], "chance,0.2500,0.1200,0.2500,0.1200");

        // Pure formatting: identical input gives identical bytes.
        let mut again = Vec::new();
        write_accuracy_csv(&mut again, &rows, 0.25, 0.12).unwrap();
        assert_eq!(text.as_bytes(), again.as_slice());
    }
}
