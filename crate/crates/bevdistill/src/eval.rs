//! Center-distance-matched detection metrics: per-class average precision
//! at several distance thresholds, their mean, and translation/orientation
//! errors over true positives.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::detector::Detection;
use crate::geometry::RotatedBox;

/// Matching distance thresholds, meters.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Threshold at which the TP error metrics (mATE/mAOE) are collected.
pub const ERROR_METRIC_THRESHOLD: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("scene ids do not line up: detections for {det:?}, ground truth for {gt:?}")]
    SceneIdMismatch { det: Vec<u64>, gt: Vec<u64> },
}

/// Outcome of matching one scene's detections against its ground truth at
/// one distance threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    /// (detection index, ground-truth index) pairs.
    pub pairs: Vec<(usize, usize)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy matching in descending score order: each detection takes the
/// nearest unmatched ground-truth box of its own class within the distance
/// threshold; distance ties go to the lower ground-truth index.
pub fn match_dets(dets: &[Detection], gts: &[RotatedBox], dist_thresh: f64) -> Matching {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for di in order {
        let d = &dets[di];
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.class_id != d.bbox.class_id {
                continue;
            }
            let dist = (d.bbox.cx - g.cx).hypot(d.bbox.cy - g.cy);
            if dist > dist_thresh {
                continue;
            }
            let closer = match best {
                None => true,
                Some((bd, _)) => dist < bd,
            };
            if closer {
                best = Some((dist, gi));
            }
        }
        if let Some((_, gi)) = best {
            taken[gi] = true;
            pairs.push((di, gi));
        }
    }
    let tp = pairs.len();
    Matching {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        pairs,
    }
}

/// 101-point interpolated average precision from a scored TP/FP list and the
/// total ground-truth count.
pub fn average_precision(mut scored: Vec<(f64, bool)>, num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(scored.len());
    for (i, &(_, is_tp)) in scored.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let recall = tp as f64 / num_gt as f64;
        let precision = tp as f64 / (i + 1) as f64;
        curve.push((recall, precision));
    }
    let mut ap = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|&&(cr, _)| cr >= r - 1e-12)
            .map(|&(_, cp)| cp)
            .fold(0.0, f64::max);
        ap += p;
    }
    ap / 101.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassThreshAp {
    pub class_id: usize,
    pub threshold: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<ClassThreshAp>,
    pub map: f64,
    /// Mean center distance over true positives, meters.
    pub mate: f64,
    /// Mean absolute yaw difference over true positives, radians, on (-pi, pi].
    pub maoe: f64,
    /// Counts at [`ERROR_METRIC_THRESHOLD`].
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// No ground-truth boxes anywhere in the dataset.
    pub empty: bool,
}

impl EvalReport {
    /// One row per (class, threshold) then summary rows. Columns: kind,
    /// class, threshold, value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,class,threshold,value\n");
        for row in &self.per_class {
            writeln!(out, "ap,{},{},{}", row.class_id, row.threshold, row.ap).unwrap();
        }
        writeln!(out, "map,,,{}", self.map).unwrap();
        writeln!(out, "mate,,,{}", self.mate).unwrap();
        writeln!(out, "maoe,,,{}", self.maoe).unwrap();
        writeln!(out, "tp,,{},{}", ERROR_METRIC_THRESHOLD, self.tp).unwrap();
        writeln!(out, "fp,,{},{}", ERROR_METRIC_THRESHOLD, self.fp).unwrap();
        writeln!(out, "fn,,{},{}", ERROR_METRIC_THRESHOLD, self.fn_).unwrap();
        out
    }
}

fn yaw_diff(a: f64, b: f64) -> f64 {
    let mut d = (a - b).rem_euclid(std::f64::consts::TAU);
    if d > std::f64::consts::PI {
        d -= std::f64::consts::TAU;
    }
    d.abs()
}

/// Full dataset evaluation. `dets` and `gts` are per-scene lists keyed by
/// scene id and must cover the same ids in the same order. AP is computed
/// for every class that occurs in the ground truth, at every threshold; mAP
/// averages those. mATE/mAOE average over the true-positive matches at
/// [`ERROR_METRIC_THRESHOLD`].
pub fn evaluate(
    dets: &[(u64, Vec<Detection>)],
    gts: &[(u64, Vec<RotatedBox>)],
    thresholds: &[f64],
) -> Result<EvalReport, EvalError> {
    let det_ids: Vec<u64> = dets.iter().map(|(id, _)| *id).collect();
    let gt_ids: Vec<u64> = gts.iter().map(|(id, _)| *id).collect();
    if det_ids != gt_ids {
        return Err(EvalError::SceneIdMismatch {
            det: det_ids,
            gt: gt_ids,
        });
    }

    let classes: BTreeSet<usize> = gts
        .iter()
        .flat_map(|(_, g)| g.iter().map(|b| b.class_id))
        .collect();

    let mut per_class = Vec::new();
    for &class_id in &classes {
        for &thresh in thresholds {
            let mut scored: Vec<(f64, bool)> = Vec::new();
            let mut num_gt = 0usize;
            for ((_, scene_dets), (_, scene_gts)) in dets.iter().zip(gts) {
                let cd: Vec<Detection> = scene_dets
                    .iter()
                    .filter(|d| d.bbox.class_id == class_id)
                    .cloned()
                    .collect();
                let cg: Vec<RotatedBox> = scene_gts
                    .iter()
                    .filter(|b| b.class_id == class_id)
                    .copied()
                    .collect();
                num_gt += cg.len();
                let m = match_dets(&cd, &cg, thresh);
                let matched: BTreeSet<usize> = m.pairs.iter().map(|&(di, _)| di).collect();
                for (di, d) in cd.iter().enumerate() {
                    scored.push((d.score, matched.contains(&di)));
                }
            }
            per_class.push(ClassThreshAp {
                class_id,
                threshold: thresh,
                ap: average_precision(scored, num_gt),
            });
        }
    }

    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut dist_sum = 0.0;
    let mut yaw_sum = 0.0;
    for ((_, scene_dets), (_, scene_gts)) in dets.iter().zip(gts) {
        let m = match_dets(scene_dets, scene_gts, ERROR_METRIC_THRESHOLD);
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
        for (di, gi) in m.pairs {
            let d = &scene_dets[di].bbox;
            let g = &scene_gts[gi];
            dist_sum += (d.cx - g.cx).hypot(d.cy - g.cy);
            yaw_sum += yaw_diff(d.yaw, g.yaw);
        }
    }

    let empty = classes.is_empty();
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|r| r.ap).sum::<f64>() / per_class.len() as f64
    };
    Ok(EvalReport {
        per_class,
        map,
        mate: if tp > 0 { dist_sum / tp as f64 } else { 0.0 },
        maoe: if tp > 0 { yaw_sum / tp as f64 } else { 0.0 },
        tp,
        fp,
        fn_,
        empty,
    })
}
