//! Command implementations behind the `bevdistill` binary.
//!
//! Every command is a plain function over a [`RunConfig`] so integration
//! tests can drive them without spawning processes. The binary maps errors
//! to exit codes: 0 success, 1 usage/input error, 2 numeric failure.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use bevdistill::detector::{
    decode, detection_loss, forward_all, load_params, save_params, DetectorConfig, Modality,
    ParamSet, SceneInputs,
};
use bevdistill::eval::{evaluate, EvalReport, DEFAULT_THRESHOLDS};
use bevdistill::geometry::GridSpec;
use bevdistill::losses::{
    feature_distill, relation_distill, response_distill, total_loss, AdaptLayer, AlignMode,
    DistillConfig, DistillPath, DistillWeights, FeatureLevel,
};
use bevdistill::synthscene::{gen_scene, load_scenes, save_scenes, Scene, SceneGenParams};
use bevdistill::tensor::gradcheck::{grad_check, GradCheckReport, LeafValues};
use bevdistill::tensor::Tensor;
use bevdistill::train::{
    distill_train, path_modalities, steplog_csv, train_detector, OptimConfig, TrainError,
};

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    /// Bad arguments, missing/corrupt files. Exit code 1.
    #[error("{0}")]
    Usage(String),
    /// NaN losses or failed gradient checks. Exit code 2.
    #[error("{0}")]
    Numeric(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Numeric(_) => 2,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> AppError {
    AppError::Usage(e.to_string())
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NanLoss { .. } => AppError::Numeric(e.to_string()),
            other => AppError::Usage(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;

/// Network widths shared by every detector a run creates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorWidths {
    pub c_low: usize,
    pub c_high: usize,
    pub num_classes: usize,
}

impl Default for DetectorWidths {
    fn default() -> Self {
        DetectorWidths {
            c_low: 16,
            c_high: 32,
            num_classes: 2,
        }
    }
}

impl DetectorWidths {
    pub fn config(&self, modality: Modality) -> DetectorConfig {
        DetectorConfig {
            modality,
            c_low: self.c_low,
            c_high: self.c_high,
            num_classes: self.num_classes,
        }
    }
}

/// Decoding settings used by evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub score_thresh: f64,
    pub max_dets: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            score_thresh: 0.15,
            max_dets: 16,
        }
    }
}

/// One experiment, fully specified. Serializable so a run can be re-executed
/// bit-identically from the persisted file.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub scene: SceneGenParams,
    pub detector: DetectorWidths,
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub eval: EvalSettings,
    /// Distillation settings; if absent, `distill` starts from the path
    /// defaults.
    pub distill: Option<DistillConfig>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| usage(format!("bad config {}: {e}", p.display())))?
            }
        };
        if cfg.steps == 0 && path.is_none() {
            cfg.steps = 500;
        }
        if cfg.batch == 0 {
            cfg.batch = 4;
        }
        cfg.scene.validate().map_err(usage)?;
        Ok(cfg)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_gen_scenes(cfg: &RunConfig, count: usize, out: &Path) -> Result<()> {
    let scenes: Vec<Scene> = (0..count as u64).map(|id| gen_scene(&cfg.scene, id)).collect();
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    save_scenes(out, &scenes).map_err(usage)?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn load_scene_file(path: &Path) -> Result<Vec<Scene>> {
    load_scenes(path).map_err(usage)
}

pub fn cmd_train(cfg: &RunConfig, modality: Modality, scenes_path: &Path, out: &Path) -> Result<()> {
    let scenes = load_scene_file(scenes_path)?;
    ensure_dir(out)?;
    let mut params = ParamSet::init(&cfg.detector.config(modality), cfg.seed);
    let logs = train_detector(&mut params, &scenes, &cfg.optim, cfg.steps, cfg.batch, cfg.seed)?;
    save_params(&params, &out.join("checkpoint.ckpt")).map_err(usage)?;
    write_file(&out.join("metrics.csv"), &steplog_csv(&logs))?;
    if let Some(last) = logs.last() {
        println!("trained {modality} for {} steps, final L_Det = {:.4}", logs.len(), last.l_det);
    } else {
        println!("trained {modality} for 0 steps (checkpoint is the initialization)");
    }
    Ok(())
}

/// Builds the effective distillation config: file settings (or path
/// defaults), then flag overrides on top.
pub fn resolve_distill_config(
    cfg: &RunConfig,
    path: DistillPath,
    lambdas: (Option<f64>, Option<f64>, Option<f64>),
) -> DistillConfig {
    let mut d = match cfg.distill {
        Some(d) if d.path == path => d,
        _ => DistillConfig::for_path(path),
    };
    if let Some(l1) = lambdas.0 {
        d.weights.lambda1 = l1;
    }
    if let Some(l2) = lambdas.1 {
        d.weights.lambda2 = l2;
    }
    if let Some(l3) = lambdas.2 {
        d.weights.lambda3 = l3;
    }
    d
}

pub fn cmd_distill(
    cfg: &RunConfig,
    dcfg: &DistillConfig,
    teacher_path: &Path,
    scenes_path: &Path,
    out: &Path,
) -> Result<()> {
    let teacher = load_params(teacher_path).map_err(usage)?;
    let teacher_modality = teacher.infer_config().map_err(usage)?.modality;
    let (source, target) = path_modalities(dcfg.path);
    if teacher_modality != source {
        return Err(usage(format!(
            "path {} needs a {} teacher, but {} holds a {} checkpoint",
            dcfg.path,
            source,
            teacher_path.display(),
            teacher_modality
        )));
    }
    let scenes = load_scene_file(scenes_path)?;
    ensure_dir(out)?;
    let mut student = ParamSet::init(&cfg.detector.config(target), cfg.seed);
    let logs = distill_train(
        &mut student,
        &teacher,
        &scenes,
        dcfg,
        &cfg.optim,
        cfg.steps,
        cfg.batch,
        cfg.seed,
    )?;
    student.strip_adapt_layers();
    save_params(&student, &out.join("checkpoint.ckpt")).map_err(usage)?;
    write_file(&out.join("metrics.csv"), &steplog_csv(&logs))?;
    if let Some(last) = logs.last() {
        println!(
            "distilled {} for {} steps, final total = {:.4} (det {:.4}, fea {:.4}, rel {:.4}, resp {:.4})",
            dcfg.path, logs.len(), last.total, last.l_det, last.l_fea, last.l_rel, last.l_resp
        );
    }
    Ok(())
}

/// Runs a checkpoint over a scene file and produces the metric report.
pub fn evaluate_checkpoint(
    params: &ParamSet,
    scenes: &[Scene],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let det_cfg = params.infer_config().map_err(usage)?;
    let bound = params.bind_const();
    let mut dets = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for s in scenes {
        let inputs = SceneInputs {
            lidar_points: &s.lidar_points,
            camera_obs: &s.camera_obs,
        };
        let f = forward_all(&inputs, det_cfg.modality, &bound, &s.grid, true).map_err(usage)?;
        let d = decode(&f.cls, &f.reg, &s.grid, settings.score_thresh, settings.max_dets)
            .map_err(usage)?;
        dets.push((s.id, d));
        gts.push((s.id, s.boxes.clone()));
    }
    evaluate(&dets, &gts, &DEFAULT_THRESHOLDS).map_err(usage)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, scenes_path: &Path, out: &Path) -> Result<()> {
    let params = load_params(checkpoint).map_err(usage)?;
    let scenes = load_scene_file(scenes_path)?;
    let report = evaluate_checkpoint(&params, &scenes, &cfg.eval)?;
    ensure_dir(out)?;
    write_file(&out.join("eval.csv"), &report.to_csv())?;
    println!(
        "mAP {:.4}  mATE {:.4}  mAOE {:.4}  (TP {} FP {} FN {})",
        report.map, report.mate, report.maoe, report.tp, report.fp, report.fn_
    );
    Ok(())
}

/// Gradient checks for every loss in the objective, each wrt all student
/// parameters, on a random 16x16-grid fixture.
pub fn run_grad_checks(tol: f64) -> Vec<(String, GradCheckReport)> {
    let g = GridSpec::new(-8.0, 8.0, -8.0, 8.0, 16, 16).unwrap();
    let widths = DetectorWidths {
        c_low: 3,
        c_high: 4,
        num_classes: 2,
    };
    let teacher = {
        let mut t = ParamSet::init(&widths.config(Modality::Lidar), 1001);
        // a few steps so teacher features are not the init pattern
        let scenes: Vec<Scene> = (0..2).map(|id| gen_scene(&SceneGenParams::default(), id)).collect();
        train_detector(&mut t, &scenes, &OptimConfig::default(), 3, 2, 1002).unwrap();
        t
    };
    let student = ParamSet::init(&widths.config(Modality::Camera), 1003);
    let scene = gen_scene(&SceneGenParams { seed: 77, ..SceneGenParams::default() }, 0);
    let dcfg = DistillConfig::for_path(DistillPath::L2C);

    let teacher_bound = teacher.bind_const();
    let inputs = SceneInputs {
        lidar_points: &scene.lidar_points,
        camera_obs: &scene.camera_obs,
    };
    let t_feats = forward_all(&inputs, Modality::Lidar, &teacher_bound, &g, dcfg.resp_use_max).unwrap();

    let leaves: LeafValues = student.entries.clone();
    let student_feats = |bound: &IndexMap<String, Tensor>| {
        forward_all(&inputs, Modality::Camera, bound, &g, dcfg.resp_use_max).unwrap()
    };
    let no_adapt = AdaptLayer::disabled();
    let boxes = scene.boxes.clone();
    let mask = dcfg.mask;

    let mut out = Vec::new();
    let fea = |bound: &IndexMap<String, Tensor>| {
        let f = student_feats(bound);
        feature_distill(&t_feats.low, &f.low, &boxes, &g, &no_adapt, dcfg.fea_mode, &mask).unwrap()
    };
    out.push(("L_Fea".to_string(), grad_check(fea, &leaves, 1e-4, tol)));
    let rel = |bound: &IndexMap<String, Tensor>| {
        let f = student_feats(bound);
        relation_distill(&t_feats.high, &f.high, &boxes, &g, &no_adapt, dcfg.rel_mode, &mask).unwrap()
    };
    out.push(("L_Rel".to_string(), grad_check(rel, &leaves, 1e-4, tol)));
    let resp = |bound: &IndexMap<String, Tensor>| {
        let f = student_feats(bound);
        response_distill(&t_feats.resp, &f.resp, &boxes, &g, &mask, dcfg.resp_mode).unwrap()
    };
    out.push(("L_Resp".to_string(), grad_check(resp, &leaves, 1e-4, tol)));
    let det = |bound: &IndexMap<String, Tensor>| {
        let f = student_feats(bound);
        detection_loss(&f.cls, &f.reg, &boxes, &g, &mask).unwrap()
    };
    out.push(("L_Det".to_string(), grad_check(det, &leaves, 1e-4, tol)));
    let total = |bound: &IndexMap<String, Tensor>| {
        let f = student_feats(bound);
        let det = detection_loss(&f.cls, &f.reg, &boxes, &g, &mask).unwrap();
        let fea =
            feature_distill(&t_feats.low, &f.low, &boxes, &g, &no_adapt, dcfg.fea_mode, &mask)
                .unwrap();
        let rel =
            relation_distill(&t_feats.high, &f.high, &boxes, &g, &no_adapt, dcfg.rel_mode, &mask)
                .unwrap();
        let resp =
            response_distill(&t_feats.resp, &f.resp, &boxes, &g, &mask, dcfg.resp_mode).unwrap();
        total_loss(&det, &fea, &rel, &resp, &dcfg.weights).unwrap()
    };
    out.push(("L_Total".to_string(), grad_check(total, &leaves, 1e-4, tol)));
    out
}

pub fn cmd_grad_check(tol: f64) -> Result<()> {
    let reports = run_grad_checks(tol);
    let mut failed = false;
    for (name, report) in &reports {
        let status = if report.passed() { "ok" } else { "FAIL" };
        println!("{name}: max_rel_err {:.3e} {status}", report.max_rel_err());
        if !report.passed() {
            failed = true;
            for leaf in &report.leaves {
                if leaf.max_rel_err > report.tol {
                    println!("  {} max_rel_err={:.3e}", leaf.name, leaf.max_rel_err);
                }
            }
        }
    }
    if failed {
        return Err(AppError::Numeric(format!(
            "gradient check failed at tolerance {tol}"
        )));
    }
    Ok(())
}

/// Channel mean of a [C,H,W] map, row-major [H,W].
pub fn channel_mean(t: &Tensor) -> (usize, usize, Vec<f64>) {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let hw = h * w;
    let mut mean = vec![0.0; hw];
    for ch in 0..c {
        for i in 0..hw {
            mean[i] += t.data()[ch * hw + i];
        }
    }
    for v in &mut mean {
        *v /= c as f64;
    }
    (h, w, mean)
}

/// Plain-text PGM (P2), values normalized to [0, 255]; an all-equal map
/// renders as zeros.
pub fn to_pgm(h: usize, w: usize, values: &[f64]) -> String {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P2\n{w} {h}\n255\n");
    for r in 0..h {
        let row: Vec<String> = (0..w)
            .map(|c| {
                let v = values[r * w + c];
                let px = if span > 0.0 {
                    ((v - lo) / span * 255.0).round() as i64
                } else {
                    0
                };
                px.clamp(0, 255).to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn cmd_dump_resp(
    checkpoint: &Path,
    scenes_path: &Path,
    scene_id: Option<u64>,
    out: &Path,
) -> Result<()> {
    let params = load_params(checkpoint).map_err(usage)?;
    let det_cfg = params.infer_config().map_err(usage)?;
    let scenes = load_scene_file(scenes_path)?;
    let scene = match scene_id {
        None => scenes.first().ok_or_else(|| usage("scene file is empty".to_string()))?,
        Some(id) => scenes
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| usage(format!("no scene with id {id}")))?,
    };
    let bound = params.bind_const();
    let inputs = SceneInputs {
        lidar_points: &scene.lidar_points,
        camera_obs: &scene.camera_obs,
    };
    let f = forward_all(&inputs, det_cfg.modality, &bound, &scene.grid, true).map_err(usage)?;
    let (h, w, mean) = channel_mean(&f.resp);
    ensure_dir(out)?;
    write_file(&out.join("resp.pgm"), &to_pgm(h, w, &mean))?;
    let mut csv = String::from("row,col,value\n");
    for r in 0..h {
        for c in 0..w {
            writeln!(csv, "{r},{c},{}", mean[r * w + c]).unwrap();
        }
    }
    write_file(&out.join("resp.csv"), &csv)?;
    println!("dumped response map of scene {} ({h}x{w})", scene.id);
    Ok(())
}

/// One ablation variant: a label plus either a distillation config or the
/// undistilled baseline.
#[derive(Debug, Clone)]
pub struct AblationVariant {
    pub label: String,
    pub distill: Option<DistillConfig>,
}

/// The fixed ablation grids. Every study runs on one path and varies one
/// switch; `loss-combos` enumerates the 8 on/off combinations of the three
/// distillation losses.
pub fn ablation_variants(study: &str, path: DistillPath) -> Result<Vec<AblationVariant>> {
    let base = DistillConfig::for_path(path);
    let mk = |label: &str, d: DistillConfig| AblationVariant {
        label: label.to_string(),
        distill: Some(d),
    };
    let modes = [
        ("crucial", AlignMode::Crucial),
        ("gaussian", AlignMode::Gaussian),
        ("complete", AlignMode::Complete),
    ];
    let levels = [("low", FeatureLevel::Low), ("high", FeatureLevel::High)];
    let variants = match study {
        "fea-mode" => modes
            .iter()
            .map(|(n, m)| mk(n, DistillConfig { fea_mode: *m, ..base }))
            .collect(),
        "fea-level" => levels
            .iter()
            .map(|(n, l)| mk(n, DistillConfig { fea_level: *l, ..base }))
            .collect(),
        "rel-mode" => modes
            .iter()
            .map(|(n, m)| mk(n, DistillConfig { rel_mode: *m, ..base }))
            .collect(),
        "rel-level" => levels
            .iter()
            .map(|(n, l)| mk(n, DistillConfig { rel_level: *l, ..base }))
            .collect(),
        "resp-mode" => modes
            .iter()
            .map(|(n, m)| mk(n, DistillConfig { resp_mode: *m, ..base }))
            .collect(),
        "resp-max" => vec![
            mk("with-max", DistillConfig { resp_use_max: true, ..base }),
            mk("without-max", DistillConfig { resp_use_max: false, ..base }),
        ],
        "adapt" => vec![
            AblationVariant {
                label: "baseline".to_string(),
                distill: None,
            },
            mk("with-adapt", DistillConfig { adapt_low: true, adapt_high: true, ..base }),
            mk("without-adapt", DistillConfig { adapt_low: false, adapt_high: false, ..base }),
        ],
        "loss-combos" => {
            let d = base.weights;
            // setting 1 = none, 2-4 = single losses, 5-7 = pairs, 8 = all
            let combos = [
                (false, false, false),
                (true, false, false),
                (false, true, false),
                (false, false, true),
                (true, true, false),
                (true, false, true),
                (false, true, true),
                (true, true, true),
            ];
            combos
                .iter()
                .enumerate()
                .map(|(i, &(fea, rel, resp))| {
                    // the label lands in a CSV column, so no commas
                    let label = format!(
                        "setting-{}:fea={}.rel={}.resp={}",
                        i + 1,
                        fea as u8,
                        rel as u8,
                        resp as u8
                    );
                    mk(
                        &label,
                        DistillConfig {
                            weights: DistillWeights::new(
                                if fea { d.lambda1 } else { 0.0 },
                                if rel { d.lambda2 } else { 0.0 },
                                if resp { d.lambda3 } else { 0.0 },
                            ),
                            ..base
                        },
                    )
                })
                .collect()
        }
        other => {
            return Err(usage(format!(
                "unknown study '{other}' (expected fea-mode, fea-level, rel-mode, rel-level, \
                 resp-mode, resp-max, adapt, or loss-combos)"
            )))
        }
    };
    Ok(variants)
}

/// Trains and evaluates one variant; returns the student's report on the
/// held-out scenes.
pub fn run_variant(
    cfg: &RunConfig,
    variant: &AblationVariant,
    teacher: &ParamSet,
    train_scenes: &[Scene],
    eval_scenes: &[Scene],
    path: DistillPath,
    seed: u64,
) -> Result<EvalReport> {
    let (_, target) = path_modalities(path);
    let mut student = ParamSet::init(&cfg.detector.config(target), seed);
    match &variant.distill {
        None => {
            train_detector(&mut student, train_scenes, &cfg.optim, cfg.steps, cfg.batch, seed)?;
        }
        Some(d) => {
            distill_train(
                &mut student,
                teacher,
                train_scenes,
                d,
                &cfg.optim,
                cfg.steps,
                cfg.batch,
                seed,
            )?;
            student.strip_adapt_layers();
        }
    }
    evaluate_checkpoint(&student, eval_scenes, &cfg.eval)
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    study: &str,
    scenes_path: &Path,
    out: &Path,
    seeds: u64,
    path: DistillPath,
) -> Result<()> {
    let variants = ablation_variants(study, path)?;
    let scenes = load_scene_file(scenes_path)?;
    if scenes.len() < 2 {
        return Err(usage("need at least 2 scenes (train + held-out)".to_string()));
    }
    let holdout = (scenes.len() / 8).max(1);
    let (train_scenes, eval_scenes) = scenes.split_at(scenes.len() - holdout);

    let (source, _) = path_modalities(path);
    let mut teacher = ParamSet::init(&cfg.detector.config(source), cfg.seed ^ 0x7eac);
    train_detector(&mut teacher, train_scenes, &cfg.optim, cfg.steps, cfg.batch, cfg.seed ^ 0x7eac)?;

    let mut csv = String::from("study,variant,seed,map,mate,maoe\n");
    for variant in &variants {
        for s in 0..seeds {
            let seed = cfg.seed + s;
            let report =
                run_variant(cfg, variant, &teacher, train_scenes, eval_scenes, path, seed)?;
            writeln!(
                csv,
                "{study},{},{seed},{},{},{}",
                variant.label, report.map, report.mate, report.maoe
            )
            .unwrap();
            println!("{study} {} seed {seed}: mAP {:.4}", variant.label, report.map);
        }
    }
    ensure_dir(out)?;
    write_file(&out.join("ablation.csv"), &csv)?;
    Ok(())
}
