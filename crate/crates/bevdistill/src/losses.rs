//! The three distillation losses (feature, relation, response), their
//! ablation variants, adaptive layers and the total-objective composition.
//!
//! Teacher features are expected to be constant tensors (built off-tape), so
//! no gradient ever flows into the teacher.

use serde::{Deserialize, Serialize};

use crate::geometry::{boxes_mask, crucial_points, GaussianMask, GridSpec, MaskParams, RotatedBox};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("teacher has {teacher} channels but student has {student}; enable an adaptive layer or match widths")]
    ChannelMismatch { teacher: usize, student: usize },
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Which cells a loss aligns: the 9 crucial points per box, the cells under
/// a Gaussian-like mask, or every cell of the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    Crucial,
    Gaussian,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureLevel {
    Low,
    High,
}

/// Teacher modality -> student modality pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillPath {
    /// lidar -> camera
    L2C,
    /// camera -> lidar
    C2L,
    /// fusion -> lidar
    F2L,
    /// fusion -> camera
    F2C,
}

impl std::str::FromStr for DistillPath {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "l2c" => Ok(DistillPath::L2C),
            "c2l" => Ok(DistillPath::C2L),
            "f2l" => Ok(DistillPath::F2L),
            "f2c" => Ok(DistillPath::F2C),
            other => Err(format!(
                "unknown distillation path '{other}' (expected l2c, c2l, f2l or f2c)"
            )),
        }
    }
}

impl std::fmt::Display for DistillPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DistillPath::L2C => "l2c",
            DistillPath::C2L => "c2l",
            DistillPath::F2L => "f2l",
            DistillPath::F2C => "f2c",
        };
        write!(f, "{s}")
    }
}

/// Per-path loss weights balancing the three distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl DistillWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Self {
        assert!(
            lambda1 >= 0.0 && lambda2 >= 0.0 && lambda3 >= 0.0,
            "distillation weights must be nonnegative"
        );
        DistillWeights {
            lambda1,
            lambda2,
            lambda3,
        }
    }

    pub fn zero() -> Self {
        DistillWeights::new(0.0, 0.0, 0.0)
    }
}

/// Reference weights per distillation path.
pub fn default_weights(path: DistillPath) -> DistillWeights {
    match path {
        DistillPath::F2L => DistillWeights::new(10.0, 1.0, 10.0),
        DistillPath::F2C => DistillWeights::new(10.0, 5.0, 10.0),
        DistillPath::C2L => DistillWeights::new(10.0, 5.0, 1.0),
        DistillPath::L2C => DistillWeights::new(100.0, 40.0, 10.0),
    }
}

/// Removable 1x1 convolution applied to student features before alignment.
/// Disabled, it is the identity. It exists only during distillation training
/// and is stripped from saved student checkpoints.
#[derive(Clone)]
pub struct AdaptLayer {
    pub enabled: bool,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl AdaptLayer {
    pub fn disabled() -> Self {
        AdaptLayer {
            enabled: false,
            kernel: None,
            bias: None,
        }
    }

    pub fn new(kernel: Tensor, bias: Tensor) -> Self {
        AdaptLayer {
            enabled: true,
            kernel: Some(kernel),
            bias: Some(bias),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if !self.enabled {
            return Ok(x.clone());
        }
        let kernel = self.kernel.as_ref().expect("enabled adapt layer has kernel");
        let bias = self.bias.as_ref().expect("enabled adapt layer has bias");
        Ok(x.conv2d(kernel, bias)?)
    }
}

/// Full distillation configuration, including the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub path: DistillPath,
    pub weights: DistillWeights,
    pub adapt_low: bool,
    pub adapt_high: bool,
    pub fea_mode: AlignMode,
    pub rel_mode: AlignMode,
    pub resp_mode: AlignMode,
    pub fea_level: FeatureLevel,
    pub rel_level: FeatureLevel,
    pub resp_use_max: bool,
    pub mask: MaskParams,
}

impl DistillConfig {
    /// The reference configuration for a path: crucial-point feature
    /// distillation on low-level maps, crucial-point relation distillation on
    /// high-level maps, Gaussian-masked response distillation with the
    /// max-channel gather, and adaptive layers only on the camera-to-lidar
    /// path (where the teacher is the weaker detector).
    pub fn for_path(path: DistillPath) -> Self {
        let adapt = path == DistillPath::C2L;
        DistillConfig {
            path,
            weights: default_weights(path),
            adapt_low: adapt,
            adapt_high: adapt,
            fea_mode: AlignMode::Crucial,
            rel_mode: AlignMode::Crucial,
            resp_mode: AlignMode::Gaussian,
            fea_level: FeatureLevel::Low,
            rel_level: FeatureLevel::High,
            resp_use_max: true,
            mask: MaskParams::default(),
        }
    }
}

/// One detector's feature bundle for a scene.
#[derive(Clone)]
pub struct BevFeatures {
    pub low: Tensor,
    pub high: Tensor,
    pub cls: Tensor,
    pub reg: Tensor,
    pub resp: Tensor,
}

/// 9 x 9 pairwise cosine similarities between crucial-point features.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix {
    pub values: [f64; 81],
}

impl RelationMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * 9 + j]
    }
}

fn check_channels(teacher: &Tensor, student: &Tensor) -> Result<()> {
    if teacher.shape()[0] != student.shape()[0] {
        return Err(LossError::ChannelMismatch {
            teacher: teacher.shape()[0],
            student: student.shape()[0],
        });
    }
    Ok(())
}

fn grid_points_of_box(b: &RotatedBox, g: &GridSpec) -> [(f64, f64); 9] {
    crucial_points(b).map(|(x, y)| {
        let (r, c, _) = g.world_to_grid(x, y);
        // out-of-grid points clamp to the boundary and stay in the loss
        (
            r.clamp(0.0, (g.h - 1) as f64),
            c.clamp(0.0, (g.w - 1) as f64),
        )
    })
}

/// Feature distillation: per box, the mean over its 9 crucial points of the
/// channel-summed absolute feature difference, averaged over boxes. The
/// `complete` variant sums over all cells / (H*W); the `gaussian` variant
/// weights cells by the normalized Gaussian mask.
pub fn feature_distill(
    teacher: &Tensor,
    student: &Tensor,
    boxes: &[RotatedBox],
    g: &GridSpec,
    adapt: &AdaptLayer,
    mode: AlignMode,
    mask_params: &MaskParams,
) -> Result<Tensor> {
    let student = adapt.apply(student)?;
    check_channels(teacher, &student)?;
    match mode {
        AlignMode::Crucial => {
            if boxes.is_empty() {
                return Ok(Tensor::scalar(0.0));
            }
            let mut per_box = Vec::with_capacity(boxes.len());
            for b in boxes {
                let mut per_point = Vec::with_capacity(9);
                for (r, c) in grid_points_of_box(b, g) {
                    let t_vec = teacher.bilinear_sample(r, c)?;
                    let s_vec = student.bilinear_sample(r, c)?;
                    per_point.push(t_vec.l1_sum(&s_vec, None)?);
                }
                per_box.push(Tensor::sum_scalars(&per_point)?.scale(1.0 / 9.0));
            }
            Ok(Tensor::sum_scalars(&per_box)?.scale(1.0 / boxes.len() as f64))
        }
        AlignMode::Complete => {
            let hw = (teacher.shape()[1] * teacher.shape()[2]) as f64;
            Ok(teacher.l1_sum(&student, None)?.scale(1.0 / hw))
        }
        AlignMode::Gaussian => {
            let mask = boxes_mask(boxes, g, mask_params);
            let total = mask.sum();
            if total <= 0.0 {
                return Ok(Tensor::scalar(0.0));
            }
            let weight = Tensor::constant(&[g.h, g.w], mask.values);
            Ok(teacher
                .l1_sum(&student, Some(&weight))?
                .scale(1.0 / total))
        }
    }
}

/// Cosine similarity as a differentiable scalar; defined as 0 when either
/// vector's norm falls below 1e-12.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let na2 = a.dot(a)?;
    let nb2 = b.dot(b)?;
    if na2.item() < 1e-24 || nb2.item() < 1e-24 {
        return Ok(Tensor::scalar(0.0));
    }
    let denom = na2.sqrt().mul(&nb2.sqrt())?;
    Ok(a.dot(b)?.div(&denom)?)
}

/// Relation matrix of a single box over a (typically high-level) map.
pub fn relation_matrix(map: &Tensor, b: &RotatedBox, g: &GridSpec) -> Result<RelationMatrix> {
    let pts = grid_points_of_box(b, g);
    let vecs: Vec<Tensor> = pts
        .iter()
        .map(|&(r, c)| map.bilinear_sample(r, c))
        .collect::<std::result::Result<_, _>>()?;
    let mut values = [0.0; 81];
    for i in 0..9 {
        for j in 0..9 {
            values[i * 9 + j] = cosine_similarity(&vecs[i], &vecs[j])?.item();
        }
    }
    Ok(RelationMatrix { values })
}

fn pairwise_relation_loss(
    t_vecs: &[Tensor],
    s_vecs: &[Tensor],
    weights: Option<&[f64]>,
) -> Result<Tensor> {
    let n = t_vecs.len();
    let mut terms = Vec::with_capacity(n * n);
    let mut total_w = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = weights.map_or(1.0, |ws| ws[i] * ws[j]);
            if w == 0.0 {
                continue;
            }
            total_w += w;
            let t_ij = cosine_similarity(&t_vecs[i], &t_vecs[j])?;
            let s_ij = cosine_similarity(&s_vecs[i], &s_vecs[j])?;
            terms.push(s_ij.sub(&t_ij)?.abs().scale(w));
        }
    }
    if total_w <= 0.0 {
        return Ok(Tensor::scalar(0.0));
    }
    Ok(Tensor::sum_scalars(&terms)?.scale(1.0 / total_w))
}

/// Relation distillation: per box, the mean absolute difference of the two
/// 9x9 crucial-point relation matrices, averaged over boxes. The `complete`
/// and `gaussian` variants substitute the point set with all cells or
/// mask-weighted cells, normalized by the number (mass) of point pairs.
pub fn relation_distill(
    teacher: &Tensor,
    student: &Tensor,
    boxes: &[RotatedBox],
    g: &GridSpec,
    adapt: &AdaptLayer,
    mode: AlignMode,
    mask_params: &MaskParams,
) -> Result<Tensor> {
    let student = adapt.apply(student)?;
    check_channels(teacher, &student)?;
    let sample_all = |mask: Option<&GaussianMask>| -> Result<(Vec<Tensor>, Vec<Tensor>, Vec<f64>)> {
        let mut t_vecs = Vec::new();
        let mut s_vecs = Vec::new();
        let mut ws = Vec::new();
        for r in 0..g.h {
            for c in 0..g.w {
                let w = mask.map_or(1.0, |m| m.at(r, c));
                if w == 0.0 {
                    continue;
                }
                t_vecs.push(teacher.bilinear_sample(r as f64, c as f64)?);
                s_vecs.push(student.bilinear_sample(r as f64, c as f64)?);
                ws.push(w);
            }
        }
        Ok((t_vecs, s_vecs, ws))
    };
    match mode {
        AlignMode::Crucial => {
            if boxes.is_empty() {
                return Ok(Tensor::scalar(0.0));
            }
            let mut per_box = Vec::with_capacity(boxes.len());
            for b in boxes {
                let pts = grid_points_of_box(b, g);
                let t_vecs: Vec<Tensor> = pts
                    .iter()
                    .map(|&(r, c)| teacher.bilinear_sample(r, c))
                    .collect::<std::result::Result<_, _>>()?;
                let s_vecs: Vec<Tensor> = pts
                    .iter()
                    .map(|&(r, c)| student.bilinear_sample(r, c))
                    .collect::<std::result::Result<_, _>>()?;
                per_box.push(pairwise_relation_loss(&t_vecs, &s_vecs, None)?);
            }
            Ok(Tensor::sum_scalars(&per_box)?.scale(1.0 / boxes.len() as f64))
        }
        AlignMode::Complete => {
            let (t_vecs, s_vecs, _) = sample_all(None)?;
            pairwise_relation_loss(&t_vecs, &s_vecs, None)
        }
        AlignMode::Gaussian => {
            let mask = boxes_mask(boxes, g, mask_params);
            let (t_vecs, s_vecs, ws) = sample_all(Some(&mask))?;
            pairwise_relation_loss(&t_vecs, &s_vecs, Some(&ws))
        }
    }
}

/// Builds response features from the head outputs: the per-position channel
/// maximum of the classification map concatenated with the regression map.
/// With `use_max` off (ablation), the raw classification map is concatenated
/// instead.
pub fn response_features(cls: &Tensor, reg: &Tensor, use_max: bool) -> Result<Tensor> {
    if use_max {
        let (h, w) = (cls.shape()[1], cls.shape()[2]);
        let max = cls.max_over_channel()?.reshape(&[1, h, w])?;
        Ok(Tensor::concat_channels(&[&max, reg])?)
    } else {
        Ok(Tensor::concat_channels(&[cls, reg])?)
    }
}

/// Response distillation: Gaussian-masked absolute response difference over
/// the scene, normalized by (mask mass * channel count). The `complete`
/// variant uses a uniform mask, the `crucial` variant a mask of ones at the
/// rounded crucial cells of each box.
pub fn response_distill(
    teacher_resp: &Tensor,
    student_resp: &Tensor,
    boxes: &[RotatedBox],
    g: &GridSpec,
    mask_params: &MaskParams,
    mode: AlignMode,
) -> Result<Tensor> {
    if teacher_resp.shape() != student_resp.shape() {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "response_distill",
            left: teacher_resp.shape().to_vec(),
            right: student_resp.shape().to_vec(),
        }));
    }
    let channels = teacher_resp.shape()[0] as f64;
    let mask = match mode {
        AlignMode::Gaussian => boxes_mask(boxes, g, mask_params),
        AlignMode::Complete => GaussianMask {
            h: g.h,
            w: g.w,
            values: vec![1.0; g.h * g.w],
        },
        AlignMode::Crucial => {
            let mut m = GaussianMask::zeros(g.h, g.w);
            for b in boxes {
                for (r, c) in grid_points_of_box(b, g) {
                    m.values[r.round() as usize * g.w + c.round() as usize] = 1.0;
                }
            }
            m
        }
    };
    let total = mask.sum();
    if total <= 0.0 {
        return Ok(Tensor::scalar(0.0));
    }
    let weight = Tensor::constant(&[g.h, g.w], mask.values);
    Ok(teacher_resp
        .l1_sum(student_resp, Some(&weight))?
        .scale(1.0 / (total * channels)))
}

/// L_total = L_det + lambda1 L_fea + lambda2 L_rel + lambda3 L_resp.
pub fn total_loss(
    det: &Tensor,
    fea: &Tensor,
    rel: &Tensor,
    resp: &Tensor,
    w: &DistillWeights,
) -> Result<Tensor> {
    Ok(det
        .add(&fea.scale(w.lambda1))?
        .add(&rel.scale(w.lambda2))?
        .add(&resp.scale(w.lambda3))?)
}

#[cfg(test)]
#[path = "losses_tests.rs"]
mod tests;
