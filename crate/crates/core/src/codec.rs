//! Scanpath-to-image encoding and scanpath-level augmentation.
//!
//! A recording becomes a square 3-channel image: gaze points are dots in the
//! red channel, recording time modulates the dot intensity in the green
//! channel, and consecutive points are connected by lines in the blue
//! channel. All model inputs in this crate are produced here.

use crate::error::{CoreError, Result};
use rand::Rng;

/// One gaze sample. Coordinates are normalized to the stimulus extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazePoint {
    /// Seconds since the start of the recording.
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

/// A time-ordered gaze recording with its categorical labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scanpath {
    pub subject_id: String,
    pub stimulus_id: String,
    pub points: Vec<GazePoint>,
    /// Total recording length in seconds; at least the last timestamp.
    pub duration: f64,
}

impl Scanpath {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(CoreError::InvalidScanpath("no points".into()));
        }
        let mut prev_t = 0.0;
        for (i, p) in self.points.iter().enumerate() {
            if !(p.t.is_finite() && p.x.is_finite() && p.y.is_finite()) {
                return Err(CoreError::InvalidScanpath(format!(
                    "non-finite values at point {i}"
                )));
            }
            if p.t < 0.0 {
                return Err(CoreError::InvalidScanpath(format!(
                    "negative timestamp at point {i}"
                )));
            }
            if p.t < prev_t {
                return Err(CoreError::InvalidScanpath(format!(
                    "timestamps not monotone at point {i}"
                )));
            }
            if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                return Err(CoreError::InvalidScanpath(format!(
                    "coordinates outside [0,1] at point {i}"
                )));
            }
            prev_t = p.t;
        }
        if self.duration < prev_t {
            return Err(CoreError::InvalidScanpath(
                "duration shorter than last timestamp".into(),
            ));
        }
        Ok(())
    }
}

/// A `res`×`res`×3 float image in `[0,1]`, stored channel-major
/// (`c`, then `y`, then `x`), channels ordered R, G, B.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    res: usize,
    data: Vec<f32>,
}

pub const CHANNEL_R: usize = 0;
pub const CHANNEL_G: usize = 1;
pub const CHANNEL_B: usize = 2;

impl EncodedImage {
    pub fn zeros(res: usize) -> Self {
        Self {
            res,
            data: vec![0.0; 3 * res * res],
        }
    }

    /// Wrap raw channel-major data, checking shape and range.
    pub fn from_raw(res: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * res * res {
            return Err(CoreError::ShapeError(format!(
                "expected {} values for a {res}x{res}x3 image, got {}",
                3 * res * res,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(CoreError::InvalidInput(
                "image values must be finite and in [0,1]".into(),
            ));
        }
        Ok(Self { res, data })
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.res + y) * self.res + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.res + y) * self.res + x] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.res * self.res..(c + 1) * self.res * self.res]
    }
}

/// Knobs the image encoding leaves open.
#[derive(Debug, Clone, Copy)]
pub struct EncodeOptions {
    /// Green intensity of the first sample (`t = 0`); later samples ramp
    /// linearly up to 1.0. Keeps early dots visible.
    pub g_floor: f64,
    /// Dot radius in pixels; 1 paints a single pixel.
    pub dot_radius: u32,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            g_floor: 0.1,
            dot_radius: 1,
        }
    }
}

/// Rasterize a scanpath into the 3-channel image representation.
///
/// R is 1.0 at every gaze pixel, G carries `t/duration` mapped into
/// `[g_floor, 1]` (max-composed on collisions, so the latest visit wins),
/// and B is 1.0 along the straight segment between consecutive gaze pixels.
pub fn encode_scanpath(path: &Scanpath, resolution: usize) -> Result<EncodedImage> {
    encode_scanpath_with(path, resolution, &EncodeOptions::default())
}

pub fn encode_scanpath_with(
    path: &Scanpath,
    resolution: usize,
    opts: &EncodeOptions,
) -> Result<EncodedImage> {
    if resolution < 8 {
        return Err(CoreError::InvalidInput(format!(
            "resolution must be at least 8, got {resolution}"
        )));
    }
    path.validate()?;

    let mut img = EncodedImage::zeros(resolution);
    let scale = (resolution - 1) as f64;
    let pixels: Vec<(i64, i64)> = path
        .points
        .iter()
        .map(|p| ((p.x * scale).round() as i64, (p.y * scale).round() as i64))
        .collect();

    // Blue: segments between consecutive gaze pixels.
    for pair in pixels.windows(2) {
        for (px, py) in segment_pixels(pair[0], pair[1]) {
            img.set(CHANNEL_B, py as usize, px as usize, 1.0);
        }
    }

    // Red dots and green time intensity. Later points overwrite via max.
    for (p, &(px, py)) in path.points.iter().zip(&pixels) {
        let ratio = if path.duration > 0.0 {
            p.t / path.duration
        } else {
            0.0
        };
        let g = (opts.g_floor + ratio * (1.0 - opts.g_floor)) as f32;
        for (dx, dy) in dot_offsets(opts.dot_radius) {
            let (x, y) = (px + dx, py + dy);
            if x < 0 || y < 0 || x >= resolution as i64 || y >= resolution as i64 {
                continue;
            }
            let (x, y) = (x as usize, y as usize);
            img.set(CHANNEL_R, y, x, 1.0);
            let cur = img.get(CHANNEL_G, y, x);
            img.set(CHANNEL_G, y, x, cur.max(g));
        }
    }
    Ok(img)
}

fn dot_offsets(radius: u32) -> Vec<(i64, i64)> {
    let r = radius.max(1) as i64 - 1;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Integer Bresenham walk between two pixels, one pixel per step of the
/// major axis. The minor coordinate follows `round(minor_a + m*dmin/dmaj)`
/// with halves rounded toward +inf; segments are undirected (the walk is
/// canonicalized to an increasing major axis), so (a,b) and (b,a) paint the
/// same set.
pub fn segment_pixels(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    if a == b {
        return vec![a];
    }
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let x_major = dx.abs() >= dy.abs();
    // Map onto (major, minor) and make the major delta positive.
    let (mut p, mut q) = if x_major { (a, b) } else { ((a.1, a.0), (b.1, b.0)) };
    if q.0 < p.0 {
        std::mem::swap(&mut p, &mut q);
    }
    let dmaj = q.0 - p.0;
    let dmin = q.1 - p.1;
    let step = dmin.signum();
    let tie_steps = dmin >= 0;

    let mut out = Vec::with_capacity(dmaj as usize + 1);
    let mut minor = p.1;
    let mut err = 0i64;
    out.push(if x_major { (p.0, minor) } else { (minor, p.0) });
    for m in 1..=dmaj {
        err += dmin.abs();
        let twice = 2 * err - dmaj;
        if twice > 0 || (twice == 0 && tie_steps) {
            minor += step;
            err -= dmaj;
        }
        let major = p.0 + m;
        out.push(if x_major { (major, minor) } else { (minor, major) });
    }
    out
}

/// Scanpath-level augmentation parameters. Fractions are of the stimulus
/// extent (coordinates are normalized, so of 1.0).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AugmentParams {
    /// Upper bound for the per-path noise amplitude, at most 0.20.
    pub noise_max: f64,
    /// Crop window bounds as fractions of the point count, within [0.60, 1.0].
    pub crop_min_fraction: f64,
    pub crop_max_fraction: f64,
    /// Constant-shift bound per component, at most 0.30.
    pub shift_max_fraction: f64,
    /// Seed the pipeline uses to derive the augmentation stream.
    pub rng_seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            noise_max: 0.20,
            crop_min_fraction: 0.60,
            crop_max_fraction: 1.00,
            shift_max_fraction: 0.30,
            rng_seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidAugmentParams(m.into()));
        if !(0.0..=0.20).contains(&self.noise_max) {
            return bad("noise_max must be in [0, 0.20]");
        }
        if !(0.60..=1.0).contains(&self.crop_min_fraction)
            || !(0.60..=1.0).contains(&self.crop_max_fraction)
            || self.crop_min_fraction > self.crop_max_fraction
        {
            return bad("crop fractions must satisfy 0.60 <= min <= max <= 1.0");
        }
        if !(0.0..=0.30).contains(&self.shift_max_fraction) {
            return bad("shift_max_fraction must be in [0, 0.30]");
        }
        Ok(())
    }
}

/// Crop, shift, and noise a scanpath.
///
/// Draws, in order: the crop fraction, the window start, one shift offset
/// per axis, the noise amplitude, then per-point noise. Timestamps and
/// duration are kept as recorded; coordinates are clamped to [0,1].
/// The same generator state always yields the same output.
pub fn augment<R: Rng>(path: &Scanpath, params: &AugmentParams, rng: &mut R) -> Result<Scanpath> {
    path.validate()?;
    params.validate()?;

    let n = path.points.len();
    let frac = draw_range(rng, params.crop_min_fraction, params.crop_max_fraction);
    let len = ((n as f64 * frac).round() as usize).clamp(1, n);
    let start = rng.gen_range(0..=n - len);

    let shift_x = draw_sym(rng, params.shift_max_fraction);
    let shift_y = draw_sym(rng, params.shift_max_fraction);
    let noise_level = draw_range(rng, 0.0, params.noise_max);

    let points = path.points[start..start + len]
        .iter()
        .map(|p| {
            let nx = draw_sym(rng, noise_level);
            let ny = draw_sym(rng, noise_level);
            GazePoint {
                t: p.t,
                x: (p.x + shift_x + nx).clamp(0.0, 1.0),
                y: (p.y + shift_y + ny).clamp(0.0, 1.0),
            }
        })
        .collect();

    Ok(Scanpath {
        subject_id: path.subject_id.clone(),
        stimulus_id: path.stimulus_id.clone(),
        points,
        duration: path.duration,
    })
}

fn draw_range<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn draw_sym<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.gen_range(-bound..=bound)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path(points: Vec<(f64, f64, f64)>, duration: f64) -> Scanpath {
        Scanpath {
            subject_id: "s0".into(),
            stimulus_id: "i0".into(),
            points: points
                .into_iter()
                .map(|(t, x, y)| GazePoint { t, x, y })
                .collect(),
            duration,
        }
    }

    #[test]
    fn single_point_paints_one_dot() {
        let img = encode_scanpath(&path(vec![(0.0, 0.5, 0.5)], 1.0), 64).unwrap();
        assert_eq!(img.get(CHANNEL_R, 32, 32), 1.0);
        assert!((img.get(CHANNEL_G, 32, 32) - 0.1).abs() < 1e-6);
        assert!(img.channel(CHANNEL_B).iter().all(|&v| v == 0.0));
        let r_count = img.channel(CHANNEL_R).iter().filter(|&&v| v > 0.0).count();
        assert_eq!(r_count, 1);
    }

    #[test]
    fn diagonal_segment_hits_exact_diagonal() {
        let img = encode_scanpath(&path(vec![(0.0, 0.0, 0.0), (1.0, 1.0, 1.0)], 1.0), 64).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let expect = if x == y { 1.0 } else { 0.0 };
                assert_eq!(img.get(CHANNEL_B, y, x), expect, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn output_shape_and_range() {
        let img = encode_scanpath(
            &path(vec![(0.0, 0.1, 0.9), (0.4, 0.8, 0.2), (0.9, 0.5, 0.5)], 1.0),
            64,
        )
        .unwrap();
        assert_eq!(img.data().len(), 64 * 64 * 3);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_scanpaths() {
        let empty = path(vec![], 1.0);
        assert!(matches!(
            encode_scanpath(&empty, 64),
            Err(CoreError::InvalidScanpath(_))
        ));
        let backwards = path(vec![(0.5, 0.1, 0.1), (0.2, 0.2, 0.2)], 1.0);
        assert!(matches!(
            encode_scanpath(&backwards, 64),
            Err(CoreError::InvalidScanpath(_))
        ));
    }

    #[test]
    fn encoding_is_deterministic() {
        let p = path(vec![(0.0, 0.3, 0.7), (0.5, 0.6, 0.1), (1.0, 0.9, 0.9)], 1.0);
        assert_eq!(
            encode_scanpath(&p, 64).unwrap(),
            encode_scanpath(&p, 64).unwrap()
        );
    }

    #[test]
    fn g_ramp_increases_with_time() {
        let p = path(
            vec![(0.0, 0.1, 0.1), (0.3, 0.4, 0.4), (0.6, 0.7, 0.7), (1.0, 0.9, 0.2)],
            1.0,
        );
        let img = encode_scanpath(&p, 64).unwrap();
        let scale = 63.0;
        let mut prev = -1.0f32;
        for gp in &p.points {
            let (px, py) = (
                (gp.x * scale).round() as usize,
                (gp.y * scale).round() as usize,
            );
            let g = img.get(CHANNEL_G, py, px);
            assert!(g > prev, "g not increasing: {g} after {prev}");
            prev = g;
        }
    }

    #[test]
    fn segment_is_undirected() {
        let a = (3, 10);
        let b = (40, 21);
        let mut fwd = segment_pixels(a, b);
        let mut rev = segment_pixels(b, a);
        fwd.sort_unstable();
        rev.sort_unstable();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn blue_pixels_stay_near_their_segment() {
        // Every painted pixel center must be within sqrt(2)/2 of the ideal line.
        let cases = [((0, 0), (63, 20)), ((5, 60), (55, 3)), ((10, 10), (10, 50))];
        for (a, b) in cases {
            let (ax, ay) = (a.0 as f64, a.1 as f64);
            let (bx, by) = (b.0 as f64, b.1 as f64);
            for (px, py) in segment_pixels(a, b) {
                let (px, py) = (px as f64, py as f64);
                let seg_len2 = (bx - ax).powi(2) + (by - ay).powi(2);
                let t = (((px - ax) * (bx - ax) + (py - ay) * (by - ay)) / seg_len2)
                    .clamp(0.0, 1.0);
                let (cx, cy) = (ax + t * (bx - ax), ay + t * (by - ay));
                let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                assert!(d <= 0.7072, "pixel ({px},{py}) is {d} from segment");
            }
        }
    }

    #[test]
    fn augment_identity_params_is_identity() {
        let p = path(vec![(0.0, 0.2, 0.2), (0.5, 0.5, 0.6), (1.0, 0.9, 0.4)], 1.0);
        let params = AugmentParams {
            noise_max: 0.0,
            crop_min_fraction: 1.0,
            crop_max_fraction: 1.0,
            shift_max_fraction: 0.0,
            rng_seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(&p, &params, &mut rng).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn augment_crop_takes_contiguous_window() {
        let p = path((0..10).map(|i| (i as f64, 0.05 * i as f64, 0.5)).collect(), 10.0);
        let params = AugmentParams {
            noise_max: 0.0,
            crop_min_fraction: 0.6,
            crop_max_fraction: 0.6,
            shift_max_fraction: 0.0,
            rng_seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = augment(&p, &params, &mut rng).unwrap();
        assert_eq!(out.points.len(), 6);
        // The output must equal some direct index-window slice of the input.
        let matches_window = (0..=4).any(|s| out.points == p.points[s..s + 6]);
        assert!(matches_window);
    }

    #[test]
    fn augment_is_deterministic_under_seed() {
        let p = path(vec![(0.0, 0.2, 0.2), (0.5, 0.5, 0.6), (1.0, 0.9, 0.4)], 1.0);
        let params = AugmentParams::default();
        let a = augment(&p, &params, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment(&p, &params, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn augment_single_point_keeps_one_point() {
        let p = path(vec![(0.0, 0.5, 0.5)], 1.0);
        let params = AugmentParams::default();
        let out = augment(&p, &params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.points.len(), 1);
    }

    #[test]
    fn augment_rejects_bad_params() {
        let p = path(vec![(0.0, 0.5, 0.5)], 1.0);
        let params = AugmentParams {
            noise_max: 0.5,
            ..AugmentParams::default()
        };
        assert!(matches!(
            augment(&p, &params, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(CoreError::InvalidAugmentParams(_))
        ));
    }
}
