//! Toy BEV detectors for three modalities.
//!
//! Every modality follows the same paradigm: build low-level BEV features
//! from the raw observation, encode them to high-level features, and run a
//! center-style head producing classification and regression heatmaps.
//! The networks are deliberately tiny; they exist to exhibit a genuine
//! teacher/student gap, not to be good detectors.

mod checkpoint;

pub use checkpoint::{load_params, save_params, CheckpointError};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{GridSpec, MaskParams, RotatedBox};
use crate::losses::{response_features, BevFeatures, LossError};
use crate::tensor::{Tape, Tensor, TensorError};

/// Number of regression targets: dx, dy offsets in cells; log-length and
/// log-width in log-meters; sin yaw, cos yaw.
pub const NUM_REG_TARGETS: usize = 6;

/// Channels of the pre-conv pillar scatter: log1p(count), mean intensity,
/// mean in-cell offset x, mean in-cell offset y.
pub const LIDAR_SCATTER_CHANNELS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("camera observation is {got:?} but the grid is {h}x{w}")]
    ObsSizeMismatch { got: Vec<usize>, h: usize, w: usize },
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("cannot infer modality from parameter names")]
    UnknownModality,
}

pub type Result<T> = std::result::Result<T, DetectorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Lidar,
    Camera,
    Fusion,
}

impl std::str::FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "lidar" => Ok(Modality::Lidar),
            "camera" => Ok(Modality::Camera),
            "fusion" => Ok(Modality::Fusion),
            other => Err(format!("unknown modality '{other}'")),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Modality::Lidar => "lidar",
            Modality::Camera => "camera",
            Modality::Fusion => "fusion",
        };
        write!(f, "{s}")
    }
}

/// Head output description. T is fixed at [`NUM_REG_TARGETS`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub num_classes: usize,
}

/// Network widths for one detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub modality: Modality,
    pub c_low: usize,
    pub c_high: usize,
    pub num_classes: usize,
}

/// Named parameter tensors of one detector, in a deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub entries: IndexMap<String, (Vec<usize>, Vec<f64>)>,
}

/// Per-step view of a [`ParamSet`]: the same tensors bound either as tape
/// leaves (trainable) or constants (frozen teacher).
pub type BoundParams = IndexMap<String, Tensor>;

impl ParamSet {
    /// Seeded initialization: He-style normal kernels, zero biases, and a
    /// negative classification bias so the initial foreground probability
    /// is low.
    pub fn init(cfg: &DetectorConfig, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = IndexMap::new();
        let mut conv = |name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng| {
            let fan_in = (c_in * k * k) as f64;
            let std = (2.0 / fan_in).sqrt();
            let data: Vec<f64> = (0..c_out * c_in * k * k)
                .map(|_| {
                    // Box-Muller keeps us off rand_distr for a single normal
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    std * (-2.0 * u1.ln()).sqrt() * u2.cos()
                })
                .collect();
            entries.insert(format!("{name}.weight"), (vec![c_out, c_in, k, k], data));
            entries.insert(format!("{name}.bias"), (vec![c_out], vec![0.0; c_out]));
        };
        match cfg.modality {
            Modality::Lidar => {
                conv("ldr.conv1", cfg.c_low, LIDAR_SCATTER_CHANNELS, 3, &mut rng);
            }
            Modality::Camera => {
                conv("cam.conv1", cfg.c_low, 1, 3, &mut rng);
                conv("cam.conv2", cfg.c_low, cfg.c_low, 3, &mut rng);
            }
            Modality::Fusion => {
                conv("ldr.conv1", cfg.c_low, LIDAR_SCATTER_CHANNELS, 3, &mut rng);
                conv("cam.conv1", cfg.c_low, 1, 3, &mut rng);
                conv("cam.conv2", cfg.c_low, cfg.c_low, 3, &mut rng);
                conv("fuse.conv1", cfg.c_low, 2 * cfg.c_low, 3, &mut rng);
            }
        }
        conv("bev.conv1", cfg.c_high, cfg.c_low, 3, &mut rng);
        conv("bev.conv2", cfg.c_high, cfg.c_high, 3, &mut rng);
        conv("head.shared", cfg.c_high, cfg.c_high, 3, &mut rng);
        conv("head.cls", cfg.num_classes, cfg.c_high, 1, &mut rng);
        conv("head.reg", NUM_REG_TARGETS, cfg.c_high, 1, &mut rng);
        // start near background: sigmoid(-2.19) is about 0.1
        entries.insert(
            "head.cls.bias".to_string(),
            (vec![cfg.num_classes], vec![-2.19; cfg.num_classes]),
        );
        ParamSet { entries }
    }

    /// Adds the removable 1x1 adaptive layers used during distillation.
    pub fn add_adapt_layers(
        &mut self,
        adapt_low: Option<(usize, usize)>,
        adapt_high: Option<(usize, usize)>,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut add = |name: &str, c_out: usize, c_in: usize, rng: &mut ChaCha8Rng| {
            // near-identity start
            let mut data = vec![0.0; c_out * c_in];
            for o in 0..c_out {
                data[o * c_in + o % c_in] = 1.0;
            }
            for v in data.iter_mut() {
                *v += 0.01 * rng.gen_range(-1.0..1.0);
            }
            self.entries
                .insert(format!("{name}.weight"), (vec![c_out, c_in, 1, 1], data));
            self.entries
                .insert(format!("{name}.bias"), (vec![c_out], vec![0.0; c_out]));
        };
        if let Some((c_in, c_out)) = adapt_low {
            add("adapt.low", c_out, c_in, &mut rng);
        }
        if let Some((c_in, c_out)) = adapt_high {
            add("adapt.high", c_out, c_in, &mut rng);
        }
    }

    /// Drops the adaptive layers (inference form of a distilled student).
    pub fn strip_adapt_layers(&mut self) {
        self.entries.retain(|name, _| !name.starts_with("adapt."));
    }

    pub fn bind_leaves(&self, tape: &Tape) -> BoundParams {
        self.entries
            .iter()
            .map(|(n, (s, d))| (n.clone(), tape.leaf(s, d.clone())))
            .collect()
    }

    pub fn bind_const(&self) -> BoundParams {
        self.entries
            .iter()
            .map(|(n, (s, d))| (n.clone(), Tensor::constant(s, d.clone())))
            .collect()
    }

    /// Reads the detector layout back from parameter names and shapes.
    pub fn infer_config(&self) -> Result<DetectorConfig> {
        let has = |n: &str| self.entries.contains_key(n);
        let modality = match (has("ldr.conv1.weight"), has("cam.conv1.weight")) {
            (true, true) if has("fuse.conv1.weight") => Modality::Fusion,
            (true, false) => Modality::Lidar,
            (false, true) => Modality::Camera,
            _ => return Err(DetectorError::UnknownModality),
        };
        let bev1 = self
            .entries
            .get("bev.conv1.weight")
            .ok_or_else(|| DetectorError::MissingParam("bev.conv1.weight".into()))?;
        let cls = self
            .entries
            .get("head.cls.weight")
            .ok_or_else(|| DetectorError::MissingParam("head.cls.weight".into()))?;
        Ok(DetectorConfig {
            modality,
            c_low: bev1.0[1],
            c_high: bev1.0[0],
            num_classes: cls.0[0],
        })
    }
}

fn get<'a>(params: &'a BoundParams, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .ok_or_else(|| DetectorError::MissingParam(name.to_string()))
}

/// Pillar scatter of a 2D point cloud onto the grid: per cell, log1p point
/// count, mean intensity and the mean in-cell offset (meters from the cell
/// center). Points outside the ROI are dropped. Not differentiable.
pub fn pillar_scatter(points: &[(f64, f64, f64)], g: &GridSpec) -> Tensor {
    let hw = g.h * g.w;
    let mut count = vec![0.0f64; hw];
    let mut intensity = vec![0.0f64; hw];
    let mut off_x = vec![0.0f64; hw];
    let mut off_y = vec![0.0f64; hw];
    for &(x, y, i) in points {
        let (row, col, _) = g.world_to_grid(x, y);
        let (r, c) = (row.round(), col.round());
        if r < 0.0 || r >= g.h as f64 || c < 0.0 || c >= g.w as f64 {
            continue;
        }
        let idx = r as usize * g.w + c as usize;
        let (cx, cy) = g.grid_to_world(r, c);
        count[idx] += 1.0;
        intensity[idx] += i;
        off_x[idx] += x - cx;
        off_y[idx] += y - cy;
    }
    let mut data = Vec::with_capacity(LIDAR_SCATTER_CHANNELS * hw);
    data.extend(count.iter().map(|&n| n.ln_1p()));
    for (sums, counts) in [(&intensity, &count), (&off_x, &count), (&off_y, &count)] {
        data.extend(
            sums.iter()
                .zip(counts.iter())
                .map(|(&s, &n)| if n > 0.0 { s / n } else { 0.0 }),
        );
    }
    Tensor::constant(&[LIDAR_SCATTER_CHANNELS, g.h, g.w], data)
}

/// Lidar low-level features: pillar scatter followed by one 3x3 conv + relu.
pub fn encode_lidar(
    points: &[(f64, f64, f64)],
    g: &GridSpec,
    params: &BoundParams,
) -> Result<Tensor> {
    let scatter = pillar_scatter(points, g);
    Ok(scatter
        .conv2d(get(params, "ldr.conv1.weight")?, get(params, "ldr.conv1.bias")?)?
        .relu())
}

/// Camera low-level features from the degraded BEV density: two 3x3
/// conv + relu layers.
pub fn encode_camera(obs: &Tensor, g: &GridSpec, params: &BoundParams) -> Result<Tensor> {
    if obs.shape() != [1, g.h, g.w] {
        return Err(DetectorError::ObsSizeMismatch {
            got: obs.shape().to_vec(),
            h: g.h,
            w: g.w,
        });
    }
    let x = obs
        .conv2d(get(params, "cam.conv1.weight")?, get(params, "cam.conv1.bias")?)?
        .relu();
    Ok(x
        .conv2d(get(params, "cam.conv2.weight")?, get(params, "cam.conv2.bias")?)?
        .relu())
}

/// Fused low-level features: channel concat, then one 3x3 conv + relu back to
/// the common low width.
pub fn fuse_low(ldr_low: &Tensor, cam_low: &Tensor, params: &BoundParams) -> Result<Tensor> {
    let cat = Tensor::concat_channels(&[ldr_low, cam_low])?;
    Ok(cat
        .conv2d(get(params, "fuse.conv1.weight")?, get(params, "fuse.conv1.bias")?)?
        .relu())
}

/// High-level features: two 3x3 conv + relu layers.
pub fn bev_encoder(low: &Tensor, params: &BoundParams) -> Result<Tensor> {
    let x = low
        .conv2d(get(params, "bev.conv1.weight")?, get(params, "bev.conv1.bias")?)?
        .relu();
    Ok(x
        .conv2d(get(params, "bev.conv2.weight")?, get(params, "bev.conv2.bias")?)?
        .relu())
}

/// Center-style head: shared 3x3 conv + relu, then 1x1 classification (with
/// sigmoid) and 1x1 regression branches.
pub fn det_head(high: &Tensor, params: &BoundParams) -> Result<(Tensor, Tensor)> {
    let shared = high
        .conv2d(
            get(params, "head.shared.weight")?,
            get(params, "head.shared.bias")?,
        )?
        .relu();
    let cls = shared
        .conv2d(get(params, "head.cls.weight")?, get(params, "head.cls.bias")?)?
        .sigmoid();
    let reg = shared.conv2d(get(params, "head.reg.weight")?, get(params, "head.reg.bias")?)?;
    Ok((cls, reg))
}

/// Raw per-scene observations a detector may consume.
pub struct SceneInputs<'a> {
    pub lidar_points: &'a [(f64, f64, f64)],
    /// Row-major H x W density grid.
    pub camera_obs: &'a [f64],
}

/// Runs the full pipeline for a modality and bundles every feature map.
pub fn forward_all(
    inputs: &SceneInputs<'_>,
    modality: Modality,
    params: &BoundParams,
    g: &GridSpec,
    use_max: bool,
) -> Result<BevFeatures> {
    let low = match modality {
        Modality::Lidar => encode_lidar(inputs.lidar_points, g, params)?,
        Modality::Camera => {
            let obs = Tensor::constant(&[1, g.h, g.w], inputs.camera_obs.to_vec());
            encode_camera(&obs, g, params)?
        }
        Modality::Fusion => {
            let ldr = encode_lidar(inputs.lidar_points, g, params)?;
            let obs = Tensor::constant(&[1, g.h, g.w], inputs.camera_obs.to_vec());
            let cam = encode_camera(&obs, g, params)?;
            fuse_low(&ldr, &cam, params)?
        }
    };
    let high = bev_encoder(&low, params)?;
    let (cls, reg) = det_head(&high, params)?;
    let resp = response_features(&cls, &reg, use_max)?;
    Ok(BevFeatures {
        low,
        high,
        cls,
        reg,
        resp,
    })
}

/// Ground-truth targets for one scene: the Gaussian-splatted class heatmap
/// and, per box, its center cell with the 6 regression targets.
pub struct DetectionTargets {
    /// [C, H, W] row-major.
    pub heatmap: Vec<f64>,
    /// (row, col, [dx, dy, log l, log w, sin yaw, cos yaw]) per box.
    pub centers: Vec<(usize, usize, [f64; NUM_REG_TARGETS])>,
}

pub fn detection_targets(
    boxes: &[RotatedBox],
    g: &GridSpec,
    num_classes: usize,
    mask_params: &MaskParams,
) -> DetectionTargets {
    let hw = g.h * g.w;
    let mut heatmap = vec![0.0; num_classes * hw];
    let mut centers = Vec::with_capacity(boxes.len());
    for b in boxes {
        let class_plane = b.class_id.min(num_classes - 1);
        let mut mask = crate::geometry::GaussianMask::zeros(g.h, g.w);
        let radius = crate::geometry::gaussian_radius(b, g, mask_params.min_overlap);
        let (row, col, _) = g.world_to_grid(b.cx, b.cy);
        crate::geometry::draw_gaussian(&mut mask, (row, col), radius, mask_params);
        let plane = &mut heatmap[class_plane * hw..(class_plane + 1) * hw];
        for (slot, v) in plane.iter_mut().zip(mask.values) {
            if v > *slot {
                *slot = v;
            }
        }
        let (r_cell, c_cell) = (row.round(), col.round());
        if r_cell < 0.0 || r_cell >= g.h as f64 || c_cell < 0.0 || c_cell >= g.w as f64 {
            continue;
        }
        centers.push((
            r_cell as usize,
            c_cell as usize,
            [
                col - c_cell,
                row - r_cell,
                b.length.ln(),
                b.width.ln(),
                b.yaw.sin(),
                b.yaw.cos(),
            ],
        ));
    }
    DetectionTargets { heatmap, centers }
}

/// Detection loss: penalty-reduced focal loss (alpha = 2, beta = 4) on the
/// classification heatmap plus L1 regression at box-center cells, both
/// normalized by box count (min 1). No auto-scaling between the two terms.
pub fn detection_loss(
    cls: &Tensor,
    reg: &Tensor,
    boxes: &[RotatedBox],
    g: &GridSpec,
    mask_params: &MaskParams,
) -> Result<Tensor> {
    let num_classes = cls.shape()[0];
    let targets = detection_targets(boxes, g, num_classes, mask_params);
    let n = boxes.len().max(1) as f64;

    let pos_mask: Vec<f64> = targets
        .heatmap
        .iter()
        .map(|&t| if t >= 1.0 { 1.0 } else { 0.0 })
        .collect();
    let neg_weight: Vec<f64> = targets
        .heatmap
        .iter()
        .map(|&t| if t >= 1.0 { 0.0 } else { (1.0 - t).powi(4) })
        .collect();
    let pos_mask = Tensor::constant(cls.shape(), pos_mask);
    let neg_weight = Tensor::constant(cls.shape(), neg_weight);

    let p = cls.clamp(1e-6, 1.0 - 1e-6);
    let one_minus_p = p.neg().add_scalar(1.0);
    let pos_term = p
        .ln()
        .mul(&one_minus_p.powf(2.0))?
        .mul(&pos_mask)?
        .sum();
    let neg_term = one_minus_p
        .ln()
        .mul(&p.powf(2.0))?
        .mul(&neg_weight)?
        .sum();
    let l_cls = pos_term.add(&neg_term)?.scale(-1.0 / n);

    let mut reg_terms = Vec::with_capacity(targets.centers.len());
    for (r, c, t) in &targets.centers {
        let pred = reg.bilinear_sample(*r as f64, *c as f64)?;
        let target = Tensor::constant(&[NUM_REG_TARGETS], t.to_vec());
        reg_terms.push(pred.l1_sum(&target, None)?);
    }
    let l_reg = Tensor::sum_scalars(&reg_terms)?.scale(1.0 / n);

    Ok(l_cls.add(&l_reg)?)
}

/// A decoded object hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: RotatedBox,
    pub score: f64,
}

/// Center-style decoding: 3x3 local maxima of the channel-max classification
/// map above the score threshold, each reconstructed into a rotated box from
/// the regression channels. Peak extraction replaces NMS.
pub fn decode(
    cls: &Tensor,
    reg: &Tensor,
    g: &GridSpec,
    score_thresh: f64,
    max_dets: usize,
) -> Result<Vec<Detection>> {
    let (num_classes, h, w) = (cls.shape()[0], cls.shape()[1], cls.shape()[2]);
    let hw = h * w;
    let max_map = cls.max_over_channel()?;
    let mut dets = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = max_map.data()[r * w + c];
            if v < score_thresh {
                continue;
            }
            let mut is_peak = true;
            'nbr: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nr >= h as i64 || nc < 0 || nc >= w as i64 {
                        continue;
                    }
                    let nv = max_map.data()[nr as usize * w + nc as usize];
                    // strict on the later neighbor so plateaus yield one peak
                    if nv > v || (nv == v && (dr, dc) < (0, 0)) {
                        is_peak = false;
                        break 'nbr;
                    }
                }
            }
            if !is_peak {
                continue;
            }
            let idx = r * w + c;
            let class_id = (0..num_classes)
                .max_by(|&a, &b| {
                    cls.data()[a * hw + idx]
                        .partial_cmp(&cls.data()[b * hw + idx])
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .unwrap();
            let t: Vec<f64> = (0..NUM_REG_TARGETS)
                .map(|k| reg.data()[k * hw + idx])
                .collect();
            let (x, y) = g.grid_to_world(r as f64 + t[1], c as f64 + t[0]);
            let mut yaw = t[4].atan2(t[5]);
            if yaw <= -std::f64::consts::PI {
                yaw += std::f64::consts::TAU;
            }
            let bbox = RotatedBox::new(x, y, t[2].exp(), t[3].exp(), yaw, class_id)
                .expect("exp dims are positive");
            dets.push(Detection { bbox, score: v });
        }
    }
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    dets.truncate(max_dets);
    Ok(dets)
}

/// Exact targets for a scene, as heatmaps: a one-hot peak per box plus the
/// encoded regression vector at its center cell. The inverse fixture of
/// [`decode`].
pub fn encode_exact(boxes: &[RotatedBox], g: &GridSpec, num_classes: usize) -> (Tensor, Tensor) {
    let hw = g.h * g.w;
    let mut cls = vec![0.0; num_classes * hw];
    let mut reg = vec![0.0; NUM_REG_TARGETS * hw];
    for b in boxes {
        let (row, col, _) = g.world_to_grid(b.cx, b.cy);
        let (r, c) = (row.round(), col.round());
        if r < 0.0 || r >= g.h as f64 || c < 0.0 || c >= g.w as f64 {
            continue;
        }
        let idx = r as usize * g.w + c as usize;
        cls[b.class_id.min(num_classes - 1) * hw + idx] = 1.0;
        let t = [
            col - c,
            row - r,
            b.length.ln(),
            b.width.ln(),
            b.yaw.sin(),
            b.yaw.cos(),
        ];
        for (k, v) in t.iter().enumerate() {
            reg[k * hw + idx] = *v;
        }
    }
    (
        Tensor::constant(&[num_classes, g.h, g.w], cls),
        Tensor::constant(&[NUM_REG_TARGETS, g.h, g.w], reg),
    )
}
