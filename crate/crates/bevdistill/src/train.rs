//! Training loops: plain detector training and teacher-to-student
//! distillation, both driven by a seeded Adam-style optimizer.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{
    detection_loss, forward_all, DetectorError, Modality, ParamSet, SceneInputs,
};
use crate::losses::{
    feature_distill, relation_distill, response_distill, total_loss, AdaptLayer, DistillConfig,
    DistillPath, FeatureLevel, LossError,
};
use crate::synthscene::Scene;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("loss became non-finite at step {step}")]
    NanLoss { step: usize },
    #[error("no scenes to train on")]
    NoScenes,
    #[error(
        "teacher {teacher} features have {t_ch} channels but student {student} has {s_ch}; \
         enable the adaptive layers or match the widths"
    )]
    WidthMismatch {
        teacher: Modality,
        student: Modality,
        t_ch: usize,
        s_ch: usize,
    },
}

/// Adam hyperparameters; no weight decay.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state: first/second moment per parameter tensor.
pub struct Adam {
    cfg: OptimConfig,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Self {
        Adam {
            cfg,
            moments: IndexMap::new(),
            t: 0,
        }
    }

    /// One update; parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamSet, grads: &IndexMap<String, Vec<f64>>) {
        self.t += 1;
        let t = self.t as f64;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (name, grad) in grads {
            let (_, data) = match params.entries.get_mut(name) {
                Some(e) => (&e.0, &mut e.1),
                None => continue,
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for i in 0..grad.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

/// Loss record for one optimizer step. Plain training leaves the
/// distillation columns at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub l_det: f64,
    pub l_fea: f64,
    pub l_rel: f64,
    pub l_resp: f64,
    pub total: f64,
}

pub fn steplog_csv(logs: &[StepLog]) -> String {
    let mut out = String::from("step,l_det,l_fea,l_rel,l_resp,total\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.step, l.l_det, l.l_fea, l.l_rel, l.l_resp, l.total
        ));
    }
    out
}

/// Source and target modality of each distillation path.
pub fn path_modalities(path: DistillPath) -> (Modality, Modality) {
    match path {
        DistillPath::L2C => (Modality::Lidar, Modality::Camera),
        DistillPath::C2L => (Modality::Camera, Modality::Lidar),
        DistillPath::F2L => (Modality::Fusion, Modality::Lidar),
        DistillPath::F2C => (Modality::Fusion, Modality::Camera),
    }
}

fn collect_grads(bound: &IndexMap<String, Tensor>) -> IndexMap<String, Vec<f64>> {
    bound
        .iter()
        .filter_map(|(n, t)| t.grad().map(|g| (n.clone(), g)))
        .collect()
}

fn pick_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        // full-batch: fixed scene set every step
        return (0..n).collect();
    }
    (0..batch.max(1)).map(|_| rng.gen_range(0..n)).collect()
}

/// Trains a detector on the detection loss alone.
pub fn train_detector(
    params: &mut ParamSet,
    scenes: &[Scene],
    opt: &OptimConfig,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<StepLog>, TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::NoScenes);
    }
    let modality = params.infer_config()?.modality;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(*opt);
    let mut logs = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch_ids = pick_batch(&mut rng, scenes.len(), batch);
        let tape = Tape::new();
        let bound = params.bind_leaves(&tape);
        let mut terms = Vec::with_capacity(batch_ids.len());
        for &si in &batch_ids {
            let s = &scenes[si];
            let inputs = SceneInputs {
                lidar_points: &s.lidar_points,
                camera_obs: &s.camera_obs,
            };
            let f = forward_all(&inputs, modality, &bound, &s.grid, true)?;
            terms.push(detection_loss(&f.cls, &f.reg, &s.boxes, &s.grid, &Default::default())?);
        }
        let loss = Tensor::sum_scalars(&terms)?.scale(1.0 / batch_ids.len() as f64);
        let l_det = loss.item();
        if !l_det.is_finite() {
            return Err(TrainError::NanLoss { step });
        }
        loss.backward()?;
        adam.step(params, &collect_grads(&bound));
        logs.push(StepLog {
            step,
            l_det,
            l_fea: 0.0,
            l_rel: 0.0,
            l_resp: 0.0,
            total: l_det,
        });
    }
    Ok(logs)
}

fn adapt_from(bound: &IndexMap<String, Tensor>, enabled: bool, name: &str) -> AdaptLayer {
    if enabled {
        AdaptLayer::new(
            bound[&format!("{name}.weight")].clone(),
            bound[&format!("{name}.bias")].clone(),
        )
    } else {
        AdaptLayer::disabled()
    }
}

/// Trains a student on the combined objective against a frozen teacher.
///
/// Teacher features are rendered once per scene up front. If the config
/// enables adaptive layers and the student parameter set lacks them, they
/// are added (seeded); the caller strips them before saving an inference
/// checkpoint.
pub fn distill_train(
    student: &mut ParamSet,
    teacher: &ParamSet,
    scenes: &[Scene],
    dcfg: &DistillConfig,
    opt: &OptimConfig,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<StepLog>, TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::NoScenes);
    }
    let teacher_cfg = teacher.infer_config()?;
    let student_cfg = student.infer_config()?;
    let (_, student_modality) = path_modalities(dcfg.path);

    if dcfg.adapt_low && !student.entries.contains_key("adapt.low.weight") {
        student.add_adapt_layers(Some((student_cfg.c_low, teacher_cfg.c_low)), None, seed ^ 0xadab);
    }
    if dcfg.adapt_high && !student.entries.contains_key("adapt.high.weight") {
        student.add_adapt_layers(None, Some((student_cfg.c_high, teacher_cfg.c_high)), seed ^ 0xadab);
    }
    if !dcfg.adapt_low && teacher_cfg.c_low != student_cfg.c_low {
        return Err(TrainError::WidthMismatch {
            teacher: teacher_cfg.modality,
            student: student_cfg.modality,
            t_ch: teacher_cfg.c_low,
            s_ch: student_cfg.c_low,
        });
    }
    if !dcfg.adapt_high && teacher_cfg.c_high != student_cfg.c_high {
        return Err(TrainError::WidthMismatch {
            teacher: teacher_cfg.modality,
            student: student_cfg.modality,
            t_ch: teacher_cfg.c_high,
            s_ch: student_cfg.c_high,
        });
    }

    // frozen teacher: render its features for every scene once
    let teacher_bound = teacher.bind_const();
    let mut teacher_feats = Vec::with_capacity(scenes.len());
    for s in scenes {
        let inputs = SceneInputs {
            lidar_points: &s.lidar_points,
            camera_obs: &s.camera_obs,
        };
        teacher_feats.push(forward_all(
            &inputs,
            teacher_cfg.modality,
            &teacher_bound,
            &s.grid,
            dcfg.resp_use_max,
        )?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(*opt);
    let mut logs = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch_ids = pick_batch(&mut rng, scenes.len(), batch);
        let tape = Tape::new();
        let bound = student.bind_leaves(&tape);
        let adapt_low = adapt_from(&bound, dcfg.adapt_low, "adapt.low");
        let adapt_high = adapt_from(&bound, dcfg.adapt_high, "adapt.high");

        let mut det_terms = Vec::new();
        let mut fea_terms = Vec::new();
        let mut rel_terms = Vec::new();
        let mut resp_terms = Vec::new();
        for &si in &batch_ids {
            let s = &scenes[si];
            let t = &teacher_feats[si];
            let inputs = SceneInputs {
                lidar_points: &s.lidar_points,
                camera_obs: &s.camera_obs,
            };
            let f = forward_all(&inputs, student_modality, &bound, &s.grid, dcfg.resp_use_max)?;
            det_terms.push(detection_loss(&f.cls, &f.reg, &s.boxes, &s.grid, &dcfg.mask)?);
            let (t_fea, s_fea, fea_adapt) = match dcfg.fea_level {
                FeatureLevel::Low => (&t.low, &f.low, &adapt_low),
                FeatureLevel::High => (&t.high, &f.high, &adapt_high),
            };
            fea_terms.push(feature_distill(
                t_fea, s_fea, &s.boxes, &s.grid, fea_adapt, dcfg.fea_mode, &dcfg.mask,
            )?);
            let (t_rel, s_rel, rel_adapt) = match dcfg.rel_level {
                FeatureLevel::Low => (&t.low, &f.low, &adapt_low),
                FeatureLevel::High => (&t.high, &f.high, &adapt_high),
            };
            rel_terms.push(relation_distill(
                t_rel, s_rel, &s.boxes, &s.grid, rel_adapt, dcfg.rel_mode, &dcfg.mask,
            )?);
            resp_terms.push(response_distill(
                &t.resp, &f.resp, &s.boxes, &s.grid, &dcfg.mask, dcfg.resp_mode,
            )?);
        }
        let inv = 1.0 / batch_ids.len() as f64;
        let det = Tensor::sum_scalars(&det_terms)?.scale(inv);
        let fea = Tensor::sum_scalars(&fea_terms)?.scale(inv);
        let rel = Tensor::sum_scalars(&rel_terms)?.scale(inv);
        let resp = Tensor::sum_scalars(&resp_terms)?.scale(inv);
        let loss = total_loss(&det, &fea, &rel, &resp, &dcfg.weights)?;
        let log = StepLog {
            step,
            l_det: det.item(),
            l_fea: fea.item(),
            l_rel: rel.item(),
            l_resp: resp.item(),
            total: loss.item(),
        };
        if !log.total.is_finite() {
            return Err(TrainError::NanLoss { step });
        }
        loss.backward()?;
        adam.step(student, &collect_grads(&bound));
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::synthscene::{gen_scene, SceneGenParams};
    use approx::assert_abs_diff_eq;

    fn scenes(n: u64, seed: u64) -> Vec<Scene> {
        let p = SceneGenParams {
            seed,
            ..SceneGenParams::default()
        };
        (0..n).map(|id| gen_scene(&p, id)).collect()
    }

    fn small_cfg(modality: Modality) -> DetectorConfig {
        DetectorConfig {
            modality,
            c_low: 4,
            c_high: 6,
            num_classes: 2,
        }
    }

    #[test]
    fn adam_matches_hand_computed_updates() {
        // single scalar parameter, gradient fixed at 0.5
        let cfg = OptimConfig::default();
        let mut params = ParamSet {
            entries: [("w".to_string(), (vec![1], vec![2.0]))].into_iter().collect(),
        };
        let mut adam = Adam::new(cfg);
        let grads: IndexMap<String, Vec<f64>> =
            [("w".to_string(), vec![0.5])].into_iter().collect();

        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 2.0f64);
        for t in 1..=3 {
            adam.step(&mut params, &grads);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * 0.5;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * 0.25;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            assert_abs_diff_eq!(params.entries["w"].1[0], x, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_steps_leaves_params_untouched() {
        let mut params = ParamSet::init(&small_cfg(Modality::Lidar), 1);
        let before = params.clone();
        let logs = train_detector(&mut params, &scenes(4, 1), &OptimConfig::default(), 0, 2, 7)
            .unwrap();
        assert!(logs.is_empty());
        assert_eq!(params, before);
    }

    #[test]
    fn training_is_deterministic() {
        let data = scenes(4, 2);
        let run = || {
            let mut p = ParamSet::init(&small_cfg(Modality::Lidar), 5);
            let logs =
                train_detector(&mut p, &data, &OptimConfig::default(), 10, 2, 9).unwrap();
            (p, logs)
        };
        let (pa, la) = run();
        let (pb, lb) = run();
        assert_eq!(pa, pb);
        assert_eq!(la, lb);
    }

    #[test]
    fn nan_aborts_with_step_index() {
        let mut params = ParamSet::init(&small_cfg(Modality::Lidar), 1);
        // the reg head feeds the loss raw, so a NaN there must surface
        for v in params.entries.get_mut("head.reg.bias").unwrap().1.iter_mut() {
            *v = f64::NAN;
        }
        let err = train_detector(&mut params, &scenes(2, 3), &OptimConfig::default(), 5, 1, 1)
            .unwrap_err();
        assert!(matches!(err, TrainError::NanLoss { step: 0 }));
    }

    #[test]
    fn detection_loss_halves_within_200_steps() {
        let data = scenes(8, 11);
        let mut params = ParamSet::init(&small_cfg(Modality::Lidar), 17);
        let opt = OptimConfig {
            lr: 3e-3,
            ..OptimConfig::default()
        };
        let logs = train_detector(&mut params, &data, &opt, 200, 8, 23).unwrap();
        let first = logs.first().unwrap().l_det;
        let last = logs.last().unwrap().l_det;
        assert!(
            last <= 0.5 * first,
            "loss went from {first} to {last}; expected at least a 50% drop"
        );
    }

    #[test]
    fn self_distillation_losses_start_at_zero() {
        let data = scenes(3, 4);
        let teacher = ParamSet::init(&small_cfg(Modality::Lidar), 6);
        let mut student = teacher.clone();
        let mut dcfg = DistillConfig::for_path(DistillPath::C2L);
        // identical lidar weights on both sides; adaptors off so the
        // features compare raw
        dcfg.adapt_low = false;
        dcfg.adapt_high = false;
        let logs = distill_train(
            &mut student,
            &teacher,
            &data,
            &dcfg,
            &OptimConfig::default(),
            1,
            data.len(),
            8,
        )
        .unwrap();
        assert_abs_diff_eq!(logs[0].l_fea, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(logs[0].l_rel, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(logs[0].l_resp, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(logs[0].total, logs[0].l_det, epsilon = 1e-12);
    }

    #[test]
    fn distill_with_zero_weights_equals_plain_training() {
        let data = scenes(4, 5);
        let teacher = {
            let mut t = ParamSet::init(&small_cfg(Modality::Lidar), 30);
            train_detector(&mut t, &data, &OptimConfig::default(), 5, 2, 31).unwrap();
            t
        };
        let mut dcfg = DistillConfig::for_path(DistillPath::L2C);
        dcfg.weights = crate::losses::DistillWeights::zero();

        let mut plain = ParamSet::init(&small_cfg(Modality::Camera), 32);
        train_detector(&mut plain, &data, &OptimConfig::default(), 8, 2, 33).unwrap();

        let mut distilled = ParamSet::init(&small_cfg(Modality::Camera), 32);
        distill_train(
            &mut distilled,
            &teacher,
            &data,
            &dcfg,
            &OptimConfig::default(),
            8,
            2,
            33,
        )
        .unwrap();
        distilled.strip_adapt_layers();
        assert_eq!(plain, distilled);
    }

    #[test]
    fn distill_losses_are_nonnegative_and_logged() {
        let data = scenes(3, 6);
        let mut teacher = ParamSet::init(&small_cfg(Modality::Fusion), 40);
        train_detector(&mut teacher, &data, &OptimConfig::default(), 5, 2, 41).unwrap();
        let mut student = ParamSet::init(&small_cfg(Modality::Camera), 42);
        let dcfg = DistillConfig::for_path(DistillPath::F2C);
        let logs = distill_train(
            &mut student,
            &teacher,
            &data,
            &dcfg,
            &OptimConfig::default(),
            5,
            2,
            43,
        )
        .unwrap();
        assert_eq!(logs.len(), 5);
        for l in &logs {
            assert!(l.l_fea >= 0.0 && l.l_rel >= 0.0 && l.l_resp >= 0.0);
            let expect = l.l_det
                + dcfg.weights.lambda1 * l.l_fea
                + dcfg.weights.lambda2 * l.l_rel
                + dcfg.weights.lambda3 * l.l_resp;
            assert_abs_diff_eq!(l.total, expect, epsilon = 1e-9);
        }
        let csv = steplog_csv(&logs);
        assert!(csv.starts_with("step,l_det,l_fea,l_rel,l_resp,total\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn adapt_layers_reconcile_width_mismatch() {
        let data = scenes(2, 7);
        let teacher = ParamSet::init(&small_cfg(Modality::Camera), 50);
        let narrow = DetectorConfig {
            modality: Modality::Lidar,
            c_low: 3,
            c_high: 5,
            num_classes: 2,
        };
        let mut student = ParamSet::init(&narrow, 51);
        let dcfg = DistillConfig::for_path(DistillPath::C2L);
        assert!(dcfg.adapt_low && dcfg.adapt_high);
        distill_train(
            &mut student,
            &teacher,
            &data,
            &dcfg,
            &OptimConfig::default(),
            2,
            1,
            52,
        )
        .unwrap();
        // adapters map 3->4 and 5->6 channels
        assert_eq!(student.entries["adapt.low.weight"].0, vec![4, 3, 1, 1]);
        assert_eq!(student.entries["adapt.high.weight"].0, vec![6, 5, 1, 1]);

        let mut no_adapt = dcfg;
        no_adapt.adapt_low = false;
        no_adapt.adapt_high = false;
        let mut fresh = ParamSet::init(&narrow, 51);
        let err = distill_train(
            &mut fresh,
            &teacher,
            &data,
            &no_adapt,
            &OptimConfig::default(),
            1,
            1,
            52,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::WidthMismatch { .. }));
    }
}
