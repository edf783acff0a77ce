//! Deterministic synthetic scenes with two complementary observation
//! channels.
//!
//! Lidar rendering gives precise but sparse geometry (points on box
//! footprints, range-dependent dropout, clutter); camera rendering gives a
//! dense but degraded bird's-eye density (blur plus distance-growing noise).
//! The asymmetry is what makes one modality a useful teacher for the other.
//!
//! Scene file layout: 8-byte magic `"BEVSCENE"`, u32 version, u32 scene
//! count, then per scene: u64 id, u8 under-filled flag, grid extents
//! (4 LE f64) + u32 rows + u32 cols, u32 box count, per box 6 LE f64
//! (cx, cy, length, width, yaw, reserved 0) + u32 class id, u32 point count
//! + LE f64 (x, y, intensity) triples, then the rows*cols LE f64 camera
//! grid. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::geometry::{GridSpec, RotatedBox};

const MAGIC: &[u8; 8] = b"BEVSCENE";
const VERSION: u32 = 1;

/// Standard deviation of per-point position jitter, meters.
pub const JITTER_SIGMA: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a scene file (bad magic)")]
    BadMagic,
    #[error("unsupported scene file version {0}")]
    BadVersion(u32),
    #[error("scene file is corrupt: {0}")]
    Corrupt(String),
    #[error("bad generation params: {0}")]
    BadParams(String),
}

/// One object category the generator can sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    /// Min/max length, meters.
    pub length: (f64, f64),
    /// Min/max width, meters.
    pub width: (f64, f64),
    /// Relative sampling frequency.
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenParams {
    pub grid: GridSpec,
    pub classes: Vec<ClassSpec>,
    /// Inclusive min/max boxes per scene.
    pub boxes_per_scene: (usize, usize),
    /// In-box lidar points per square meter.
    pub lidar_density: f64,
    /// Range-dependent dropout: survival probability exp(-kappa * dist).
    pub lidar_dropout: f64,
    /// Background clutter points per square meter of ROI.
    pub clutter_density: f64,
    /// Box-blur kernel width in cells; odd.
    pub camera_blur: usize,
    /// Per-cell noise sigma per meter of distance from the origin.
    pub camera_noise: f64,
    pub seed: u64,
}

impl SceneGenParams {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::BadParams(m));
        if self.classes.is_empty() {
            return bad("no classes configured".into());
        }
        for c in &self.classes {
            if c.length.0 <= 0.0 || c.length.1 < c.length.0 || c.width.0 <= 0.0 || c.width.1 < c.width.0
            {
                return bad(format!("class {}: bad dimension ranges", c.class_id));
            }
            if c.weight < 0.0 {
                return bad(format!("class {}: negative weight", c.class_id));
            }
        }
        if self.classes.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
            return bad("class weights sum to zero".into());
        }
        if self.boxes_per_scene.1 < self.boxes_per_scene.0 {
            return bad("boxes_per_scene max < min".into());
        }
        if self.camera_blur % 2 == 0 {
            return bad("camera_blur must be odd".into());
        }
        if self.lidar_density < 0.0 || self.clutter_density < 0.0 || self.camera_noise < 0.0 {
            return bad("densities and noise must be nonnegative".into());
        }
        Ok(())
    }
}

impl Default for SceneGenParams {
    fn default() -> Self {
        SceneGenParams {
            grid: GridSpec::new(-8.0, 8.0, -8.0, 8.0, 16, 16).unwrap(),
            classes: vec![
                ClassSpec {
                    class_id: 0,
                    length: (2.5, 4.0),
                    width: (1.2, 2.0),
                    weight: 1.0,
                },
                ClassSpec {
                    class_id: 1,
                    length: (0.8, 1.4),
                    width: (0.6, 1.0),
                    weight: 0.5,
                },
            ],
            boxes_per_scene: (1, 4),
            lidar_density: 12.0,
            lidar_dropout: 0.05,
            clutter_density: 0.08,
            camera_blur: 3,
            camera_noise: 0.04,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub grid: GridSpec,
    pub boxes: Vec<RotatedBox>,
    pub lidar_points: Vec<(f64, f64, f64)>,
    /// Row-major rows x cols density grid.
    pub camera_obs: Vec<f64>,
    /// Rejection sampling gave up before reaching the configured minimum.
    pub under_filled: bool,
}

fn half_diagonal(b: &RotatedBox) -> f64 {
    0.5 * b.length.hypot(b.width)
}

/// Generates scene `id`. All randomness comes from one ChaCha stream keyed
/// by (params.seed, id), so scenes are independent and reproducible.
pub fn gen_scene(params: &SceneGenParams, id: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(id.wrapping_add(1));
    let g = &params.grid;

    let (min_boxes, max_boxes) = params.boxes_per_scene;
    let target = if max_boxes == 0 {
        0
    } else {
        rng.gen_range(min_boxes..=max_boxes)
    };
    let weights = WeightedIndex::new(params.classes.iter().map(|c| c.weight)).expect("validated");

    let mut boxes: Vec<RotatedBox> = Vec::with_capacity(target);
    let mut attempts = 0;
    while boxes.len() < target && attempts < 100 {
        attempts += 1;
        let class = &params.classes[weights.sample(&mut rng)];
        let length = rng.gen_range(class.length.0..=class.length.1);
        let width = rng.gen_range(class.width.0..=class.width.1);
        let cx = rng.gen_range(g.x_min..g.x_max);
        let cy = rng.gen_range(g.y_min..g.y_max);
        let yaw = rng.gen_range(-std::f64::consts::PI..=std::f64::consts::PI);
        let candidate = RotatedBox::new(cx, cy, length, width, yaw, class.class_id).expect("positive dims");
        let clear = boxes.iter().all(|b| {
            (b.cx - cx).hypot(b.cy - cy) >= half_diagonal(b) + half_diagonal(&candidate)
        });
        if clear {
            boxes.push(candidate);
        }
    }
    let under_filled = boxes.len() < min_boxes;

    let lidar_points = render_lidar(&boxes, params, &mut rng);
    let camera_obs = render_camera(&boxes, params, g, &mut rng);
    Scene {
        id,
        grid: g.clone(),
        boxes,
        lidar_points,
        camera_obs,
        under_filled,
    }
}

fn poisson_count(mean: f64, rng: &mut ChaCha8Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

/// Samples lidar returns: uniform points on each box footprint at the
/// configured density plus ROI-wide clutter, jittered with sigma 0.05 m,
/// each kept with probability exp(-kappa * distance from origin). In-box
/// intensities are bright (0.5..1), clutter dim (0..0.3).
pub fn render_lidar(
    boxes: &[RotatedBox],
    params: &SceneGenParams,
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64, f64)> {
    let jitter = Normal::new(0.0, JITTER_SIGMA).unwrap();
    let mut points = Vec::new();
    let emit = |x: f64, y: f64, intensity: f64, rng: &mut ChaCha8Rng, out: &mut Vec<(f64, f64, f64)>| {
        let x = x + jitter.sample(rng);
        let y = y + jitter.sample(rng);
        let survival = (-params.lidar_dropout * x.hypot(y)).exp();
        if rng.gen_range(0.0..1.0) < survival {
            out.push((x, y, intensity));
        }
    };
    for b in boxes {
        let n = poisson_count(params.lidar_density * b.length * b.width, rng);
        let (s, c) = b.yaw.sin_cos();
        for _ in 0..n {
            let lx = rng.gen_range(-0.5 * b.length..0.5 * b.length);
            let ly = rng.gen_range(-0.5 * b.width..0.5 * b.width);
            let x = b.cx + c * lx - s * ly;
            let y = b.cy + s * lx + c * ly;
            let intensity = rng.gen_range(0.5..1.0);
            emit(x, y, intensity, rng, &mut points);
        }
    }
    let g = &params.grid;
    let roi_area = (g.x_max - g.x_min) * (g.y_max - g.y_min);
    let n_clutter = poisson_count(params.clutter_density * roi_area, rng);
    for _ in 0..n_clutter {
        let x = rng.gen_range(g.x_min..g.x_max);
        let y = rng.gen_range(g.y_min..g.y_max);
        let intensity = rng.gen_range(0.0..0.3);
        emit(x, y, intensity, rng, &mut points);
    }
    points
}

/// Rasterizes box footprints (cell centers), blurs with a normalized box
/// kernel whose out-of-grid taps accumulate at the nearest edge cell (so
/// blur conserves mass exactly), then adds zero-mean Gaussian noise whose
/// sigma grows linearly with distance from the origin. Clamped at zero.
pub fn render_camera(
    boxes: &[RotatedBox],
    params: &SceneGenParams,
    g: &GridSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let (h, w) = (g.h, g.w);
    let mut raster = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = g.grid_to_world(r as f64, c as f64);
            if boxes.iter().any(|b| b.contains(x, y, 0.0)) {
                raster[r * w + c] = 1.0;
            }
        }
    }

    let k = params.camera_blur as i64;
    let half = k / 2;
    let mut blurred = vec![0.0f64; h * w];
    let share = 1.0 / (k * k) as f64;
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let v = raster[r as usize * w + c as usize];
            if v == 0.0 {
                continue;
            }
            for dr in -half..=half {
                for dc in -half..=half {
                    let rr = (r + dr).clamp(0, h as i64 - 1) as usize;
                    let cc = (c + dc).clamp(0, w as i64 - 1) as usize;
                    blurred[rr * w + cc] += v * share;
                }
            }
        }
    }

    for r in 0..h {
        for c in 0..w {
            let (x, y) = g.grid_to_world(r as f64, c as f64);
            let sigma = params.camera_noise * x.hypot(y);
            if sigma > 0.0 {
                blurred[r * w + c] += Normal::new(0.0, sigma).unwrap().sample(rng);
            }
            blurred[r * w + c] = blurred[r * w + c].max(0.0);
        }
    }
    blurred
}

pub fn save_scenes(path: &Path, scenes: &[Scene]) -> Result<(), SceneError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(scenes.len() as u32)?;
    for s in scenes {
        out.write_u64::<LittleEndian>(s.id)?;
        out.write_u8(s.under_filled as u8)?;
        let g = &s.grid;
        for v in [g.x_min, g.x_max, g.y_min, g.y_max] {
            out.write_f64::<LittleEndian>(v)?;
        }
        out.write_u32::<LittleEndian>(g.h as u32)?;
        out.write_u32::<LittleEndian>(g.w as u32)?;
        out.write_u32::<LittleEndian>(s.boxes.len() as u32)?;
        for b in &s.boxes {
            for v in [b.cx, b.cy, b.length, b.width, b.yaw, 0.0] {
                out.write_f64::<LittleEndian>(v)?;
            }
            out.write_u32::<LittleEndian>(b.class_id as u32)?;
        }
        out.write_u32::<LittleEndian>(s.lidar_points.len() as u32)?;
        for &(x, y, i) in &s.lidar_points {
            out.write_f64::<LittleEndian>(x)?;
            out.write_f64::<LittleEndian>(y)?;
            out.write_f64::<LittleEndian>(i)?;
        }
        for &v in &s.camera_obs {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>, SceneError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| SceneError::BadMagic)?;
    if &magic != MAGIC {
        return Err(SceneError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(SceneError::BadVersion(version));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let corrupt = |what: &str, i: u32| SceneError::Corrupt(format!("scene {i}: truncated {what}"));
    let mut scenes = Vec::with_capacity(count as usize);
    for i in 0..count {
        let id = r.read_u64::<LittleEndian>().map_err(|_| corrupt("header", i))?;
        let under_filled = r.read_u8().map_err(|_| corrupt("header", i))? != 0;
        let mut ext = [0.0f64; 4];
        r.read_f64_into::<LittleEndian>(&mut ext)
            .map_err(|_| corrupt("grid extents", i))?;
        let h = r.read_u32::<LittleEndian>().map_err(|_| corrupt("grid size", i))? as usize;
        let w = r.read_u32::<LittleEndian>().map_err(|_| corrupt("grid size", i))? as usize;
        if h * w > 1 << 24 {
            return Err(SceneError::Corrupt(format!("scene {i}: implausible grid {h}x{w}")));
        }
        let grid = GridSpec::new(ext[0], ext[1], ext[2], ext[3], h, w)
            .map_err(|e| SceneError::Corrupt(format!("scene {i}: bad grid: {e}")))?;
        let n_boxes = r.read_u32::<LittleEndian>().map_err(|_| corrupt("box count", i))?;
        if n_boxes > 1 << 20 {
            return Err(SceneError::Corrupt(format!("scene {i}: implausible box count")));
        }
        let mut boxes = Vec::with_capacity(n_boxes as usize);
        for _ in 0..n_boxes {
            let mut rec = [0.0f64; 6];
            r.read_f64_into::<LittleEndian>(&mut rec)
                .map_err(|_| corrupt("box record", i))?;
            let class_id = r.read_u32::<LittleEndian>().map_err(|_| corrupt("box class", i))? as usize;
            let b = RotatedBox::new(rec[0], rec[1], rec[2], rec[3], rec[4], class_id)
                .map_err(|e| SceneError::Corrupt(format!("scene {i}: bad box: {e}")))?;
            boxes.push(b);
        }
        let n_points = r.read_u32::<LittleEndian>().map_err(|_| corrupt("point count", i))?;
        if n_points > 1 << 26 {
            return Err(SceneError::Corrupt(format!("scene {i}: implausible point count")));
        }
        let mut flat = vec![0.0f64; n_points as usize * 3];
        r.read_f64_into::<LittleEndian>(&mut flat)
            .map_err(|_| corrupt("points", i))?;
        let lidar_points = flat.chunks_exact(3).map(|p| (p[0], p[1], p[2])).collect();
        let mut camera_obs = vec![0.0f64; h * w];
        r.read_f64_into::<LittleEndian>(&mut camera_obs)
            .map_err(|_| corrupt("camera grid", i))?;
        scenes.push(Scene {
            id,
            grid,
            boxes,
            lidar_points,
            camera_obs,
            under_filled,
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params() -> SceneGenParams {
        SceneGenParams::default()
    }

    #[test]
    fn validate_catches_bad_params() {
        let mut p = params();
        p.camera_blur = 2;
        assert!(p.validate().is_err());
        let mut p = params();
        p.classes.clear();
        assert!(p.validate().is_err());
        let mut p = params();
        for c in &mut p.classes {
            c.weight = 0.0;
        }
        assert!(p.validate().is_err());
        assert!(params().validate().is_ok());
    }

    #[test]
    fn zero_boxes_gives_empty_geometry() {
        let mut p = params();
        p.boxes_per_scene = (0, 0);
        p.clutter_density = 0.0;
        p.camera_noise = 0.0;
        let s = gen_scene(&p, 0);
        assert!(s.boxes.is_empty());
        assert!(s.lidar_points.is_empty());
        assert!(s.camera_obs.iter().all(|&v| v == 0.0));
        assert!(!s.under_filled);
    }

    #[test]
    fn same_seed_and_id_regenerate_bit_identically() {
        let p = params();
        let a = gen_scene(&p, 17);
        let b = gen_scene(&p, 17);
        assert_eq!(a, b);
        let c = gen_scene(&p, 18);
        assert_ne!(a, c);
    }

    #[test]
    fn box_centers_stay_in_roi_and_counts_in_range() {
        let p = params();
        for id in 0..50 {
            let s = gen_scene(&p, id);
            assert!(s.boxes.len() <= p.boxes_per_scene.1);
            assert!(s.under_filled || s.boxes.len() >= p.boxes_per_scene.0);
            for b in &s.boxes {
                assert!(p.grid.contains_world(b.cx, b.cy));
            }
        }
    }

    #[test]
    fn sampled_boxes_do_not_overlap() {
        let p = params();
        for id in 0..30 {
            let s = gen_scene(&p, id);
            for (i, a) in s.boxes.iter().enumerate() {
                for b in &s.boxes[i + 1..] {
                    let d = (a.cx - b.cx).hypot(a.cy - b.cy);
                    assert!(d >= half_diagonal(a) + half_diagonal(b) - 1e-12);
                }
            }
        }
    }

    #[test]
    fn class_frequencies_match_weights() {
        let mut p = params();
        // skip rendering cost: boxes only matter here
        p.lidar_density = 0.0;
        p.clutter_density = 0.0;
        p.camera_noise = 0.0;
        let mut counts = [0usize; 2];
        let mut total = 0usize;
        for id in 0..1000 {
            for b in gen_scene(&p, id).boxes {
                counts[b.class_id] += 1;
                total += 1;
            }
        }
        let p0 = 1.0 / 1.5;
        let n = total as f64;
        let sigma = (n * p0 * (1.0 - p0)).sqrt();
        let observed = counts[0] as f64;
        assert!(
            (observed - n * p0).abs() <= 3.0 * sigma,
            "class 0: {} of {} (expected {:.0} +- {:.0})",
            counts[0],
            total,
            n * p0,
            3.0 * sigma
        );
    }

    #[test]
    fn lidar_zero_density_is_empty() {
        let mut p = params();
        p.lidar_density = 0.0;
        p.clutter_density = 0.0;
        let b = RotatedBox::new(0.0, 0.0, 3.0, 1.5, 0.4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(render_lidar(&[b], &p, &mut rng).is_empty());
    }

    #[test]
    fn lidar_point_count_matches_density() {
        let mut p = params();
        p.lidar_dropout = 0.0;
        p.clutter_density = 0.0;
        let b = RotatedBox::new(1.0, -2.0, 3.0, 2.0, 0.7, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut total = 0usize;
        let reps = 200;
        for _ in 0..reps {
            total += render_lidar(&[b], &p, &mut rng).len();
        }
        let mean = p.lidar_density * b.length * b.width * reps as f64;
        let sigma = mean.sqrt();
        assert!(
            (total as f64 - mean).abs() <= 3.0 * sigma,
            "{total} points, expected {mean:.0} +- {:.0}",
            3.0 * sigma
        );
    }

    #[test]
    fn lidar_points_lie_in_jitter_expanded_boxes() {
        let mut p = params();
        p.clutter_density = 0.0;
        let boxes = [
            RotatedBox::new(2.0, 3.0, 3.0, 1.5, 1.1, 0).unwrap(),
            RotatedBox::new(-4.0, -1.0, 2.0, 1.0, -0.6, 1).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = render_lidar(&boxes, &p, &mut rng);
        assert!(!pts.is_empty());
        // 10-sigma jitter margin: effectively certain containment
        let margin = 10.0 * JITTER_SIGMA;
        for (x, y, _) in pts {
            assert!(
                boxes.iter().any(|b| b.contains(x, y, margin)),
                "stray point at ({x}, {y})"
            );
        }
    }

    #[test]
    fn camera_empty_scene_zero_noise_is_zero() {
        let mut p = params();
        p.camera_noise = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = render_camera(&[], &p, &p.grid.clone(), &mut rng);
        assert!(obs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn camera_blur_width_one_is_exact_raster() {
        let mut p = params();
        p.camera_blur = 1;
        p.camera_noise = 0.0;
        let g = p.grid.clone();
        let b = RotatedBox::new(0.5, 0.5, 4.0, 3.0, 0.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let obs = render_camera(&[b], &p, &g, &mut rng);
        for r in 0..g.h {
            for c in 0..g.w {
                let (x, y) = g.grid_to_world(r as f64, c as f64);
                let expect = if b.contains(x, y, 0.0) { 1.0 } else { 0.0 };
                assert_eq!(obs[r * g.w + c], expect, "cell ({r},{c})");
            }
        }
    }

    #[test]
    fn camera_blur_conserves_mass() {
        let mut p = params();
        p.camera_noise = 0.0;
        p.camera_blur = 5;
        let g = p.grid.clone();
        // box pushed to the edge so boundary handling is exercised
        let boxes = [
            RotatedBox::new(-7.0, -7.0, 3.0, 2.0, 0.9, 0).unwrap(),
            RotatedBox::new(3.0, 2.0, 4.0, 2.0, -0.3, 0).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let obs = render_camera(&boxes, &p, &g, &mut rng);

        let mut raster_mass = 0.0;
        for r in 0..g.h {
            for c in 0..g.w {
                let (x, y) = g.grid_to_world(r as f64, c as f64);
                if boxes.iter().any(|b| b.contains(x, y, 0.0)) {
                    raster_mass += 1.0;
                }
            }
        }
        assert!(raster_mass > 0.0);
        assert_abs_diff_eq!(obs.iter().sum::<f64>(), raster_mass, epsilon = 1e-9);
    }

    #[test]
    fn empty_scene_list_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.scenes");
        save_scenes(&path, &[]).unwrap();
        assert!(load_scenes(&path).unwrap().is_empty());
    }

    #[test]
    fn scene_round_trip_is_bit_exact() {
        let p = params();
        let scenes: Vec<Scene> = (0..100).map(|id| gen_scene(&p, id)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.bin");
        save_scenes(&path, &scenes).unwrap();
        let loaded = load_scenes(&path).unwrap();
        assert_eq!(scenes, loaded);
    }

    #[test]
    fn corrupted_file_is_an_error_not_a_crash() {
        let p = params();
        let scenes: Vec<Scene> = (0..3).map(|id| gen_scene(&p, id)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.bin");
        save_scenes(&path, &scenes).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bad_magic.bin");
        let mut flipped = bytes.clone();
        flipped[0] ^= 0xff;
        std::fs::write(&bad_magic, &flipped).unwrap();
        assert!(matches!(load_scenes(&bad_magic), Err(SceneError::BadMagic)));

        let bad_version = dir.path().join("bad_version.bin");
        bytes[8] = 99;
        std::fs::write(&bad_version, &bytes).unwrap();
        assert!(matches!(load_scenes(&bad_version), Err(SceneError::BadVersion(99))));

        let truncated = dir.path().join("truncated.bin");
        let orig = std::fs::read(&path).unwrap();
        std::fs::write(&truncated, &orig[..orig.len() - 64]).unwrap();
        assert!(matches!(load_scenes(&truncated), Err(SceneError::Corrupt(_))));
    }
}
