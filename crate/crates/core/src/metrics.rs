//! Benchmark metrics: PR-curve AUC, soft IoU, endpoint error and
//! flow-grounded occupancy, plus per-scene scoring and dataset aggregation.
//!
//! All scores accumulate in f64. AUC sweeps 100 linearly spaced thresholds
//! in (0,1) and takes the trapezoidal area over recall, with the curve
//! anchored at (recall 0, precision 1).

use ndarray::{Array2, ArrayViewD, Axis, Dimension, Ix2, Ix3, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{HgError, Result};
use crate::features::SceneTensors;
use crate::graph::{bilinear_taps, Arr};

const N_THRESHOLDS: usize = 100;

/// Scalar metric columns reported by the harness.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub auc_observed: f64,
    pub soft_iou_observed: f64,
    pub auc_occluded: f64,
    pub soft_iou_occluded: f64,
    pub epe: f64,
    pub auc_fg: f64,
    pub soft_iou_fg: f64,
    /// Degenerate cases hit during scoring (all-zero ground truth,
    /// empty flow support), deduplicated.
    #[serde(default)]
    pub flags: Vec<String>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("auc_observed", self.auc_observed),
            ("soft_iou_observed", self.soft_iou_observed),
            ("auc_occluded", self.auc_occluded),
            ("soft_iou_occluded", self.soft_iou_occluded),
            ("auc_fg", self.auc_fg),
            ("soft_iou_fg", self.soft_iou_fg),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(HgError::Contract(format!("{name} = {v} outside [0,1]")));
            }
        }
        if !(self.epe >= 0.0) {
            return Err(HgError::Contract(format!("epe = {} negative", self.epe)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Flat `key = value` lines, one metric per line, flags appended.
    pub fn to_flat_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("auc_observed = {}\n", self.auc_observed));
        s.push_str(&format!("soft_iou_observed = {}\n", self.soft_iou_observed));
        s.push_str(&format!("auc_occluded = {}\n", self.auc_occluded));
        s.push_str(&format!("soft_iou_occluded = {}\n", self.soft_iou_occluded));
        s.push_str(&format!("epe = {}\n", self.epe));
        s.push_str(&format!("auc_fg = {}\n", self.auc_fg));
        s.push_str(&format!("soft_iou_fg = {}\n", self.soft_iou_fg));
        for f in &self.flags {
            s.push_str(&format!("flag = {f}\n"));
        }
        s
    }
}

fn thresholds() -> impl Iterator<Item = f64> {
    (1..=N_THRESHOLDS).map(|k| k as f64 / (N_THRESHOLDS + 1) as f64)
}

/// (recall, precision) at each sweep threshold. Precision of an empty
/// positive set is defined as 1.
fn pr_pairs(pred: ArrayViewD<f32>, gt: ArrayViewD<f32>) -> Vec<(f64, f64)> {
    assert_eq!(pred.shape(), gt.shape(), "pred/gt shape mismatch");
    let mut pairs = Vec::with_capacity(N_THRESHOLDS);
    for tau in thresholds() {
        let (mut tp, mut fp, mut fal_n) = (0u64, 0u64, 0u64);
        for (&p, &y) in pred.iter().zip(gt.iter()) {
            let hit = p as f64 >= tau;
            let pos = y > 0.5;
            match (hit, pos) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fal_n += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = tp as f64 / (tp + fal_n) as f64;
        pairs.push((recall, precision));
    }
    pairs
}

fn trapezoid_over_recall(mut pairs: Vec<(f64, f64)>) -> f64 {
    pairs.push((0.0, 1.0));
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut area = 0.0;
    for win in pairs.windows(2) {
        area += (win[1].0 - win[0].0) * (win[0].1 + win[1].1) / 2.0;
    }
    area
}

/// Area under the precision-recall curve. Returns `(auc, degenerate)`;
/// all-zero ground truth yields 0 with the degenerate flag set.
pub fn compute_auc(pred: ArrayViewD<f32>, gt: ArrayViewD<f32>) -> (f64, bool) {
    assert_eq!(pred.shape(), gt.shape(), "pred/gt shape mismatch");
    if gt.iter().all(|&y| y <= 0.5) {
        return (0.0, true);
    }
    (trapezoid_over_recall(pr_pairs(pred, gt)), false)
}

/// Σpg / (Σp + Σg − Σpg); 0 when the denominator is 0.
pub fn compute_soft_iou(pred: ArrayViewD<f32>, gt: ArrayViewD<f32>) -> f64 {
    assert_eq!(pred.shape(), gt.shape(), "pred/gt shape mismatch");
    let (mut inter, mut sp, mut sg) = (0f64, 0f64, 0f64);
    for (&p, &y) in pred.iter().zip(gt.iter()) {
        inter += p as f64 * y as f64;
        sp += p as f64;
        sg += y as f64;
    }
    let denom = sp + sg - inter;
    if denom == 0.0 { 0.0 } else { inter / denom }
}

/// Mean ‖pred − gt‖₂ over cells with `gt_occ > 0`. Returns
/// `(epe, empty_support)`; no occupied cells yields 0 with the flag set.
pub fn compute_epe(
    pred_flow: ArrayViewD<f32>,
    gt_flow: ArrayViewD<f32>,
    gt_occ: ArrayViewD<f32>,
) -> (f64, bool) {
    assert_eq!(pred_flow.shape(), gt_flow.shape(), "flow shape mismatch");
    assert_eq!(
        &pred_flow.shape()[..pred_flow.ndim() - 1],
        gt_occ.shape(),
        "occupancy must match flow minus the component axis"
    );
    assert_eq!(pred_flow.shape()[pred_flow.ndim() - 1], 2);
    let (mut total, mut count) = (0f64, 0u64);
    for (idx, &occ) in gt_occ.indexed_iter() {
        if occ <= 0.0 {
            continue;
        }
        let mut full: Vec<usize> = idx.slice().to_vec();
        full.push(0);
        let dx = (pred_flow[IxDyn(&full)] - gt_flow[IxDyn(&full)]) as f64;
        *full.last_mut().unwrap() = 1;
        let dy = (pred_flow[IxDyn(&full)] - gt_flow[IxDyn(&full)]) as f64;
        total += (dx * dx + dy * dy).sqrt();
        count += 1;
    }
    if count == 0 { (0.0, true) } else { (total / count as f64, false) }
}

/// Warp-then-gate grounding: `W[x] = bilinear(gt_occ_prev; x + flow[x])`,
/// returned as `W ⊙ pred_occ`. Flow components are (Δcol, Δrow) in cells;
/// samples falling outside the grid read as zero.
pub fn flow_grounded_occupancy(
    pred_flow_t: ArrayViewD<f32>,
    gt_occ_prev: ArrayViewD<f32>,
    pred_occ_t: ArrayViewD<f32>,
) -> Array2<f32> {
    let flow = pred_flow_t.into_dimensionality::<Ix3>().expect("flow must be [H,W,2]");
    let prev = gt_occ_prev.into_dimensionality::<Ix2>().expect("prev must be [H,W]");
    let occ = pred_occ_t.into_dimensionality::<Ix2>().expect("occ must be [H,W]");
    let (h, w) = (prev.shape()[0], prev.shape()[1]);
    assert_eq!(flow.shape(), &[h, w, 2], "flow/prev shape mismatch");
    assert_eq!(occ.shape(), &[h, w], "occ/prev shape mismatch");
    let mut out = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let px = c as f32 + flow[[r, c, 0]];
            let py = r as f32 + flow[[r, c, 1]];
            let mut warped = 0f32;
            for (yy, xx, wgt) in bilinear_taps(px, py, h, w) {
                warped += wgt * prev[[yy, xx]];
            }
            out[[r, c]] = warped * occ[[r, c]];
        }
    }
    out
}

/// Per-timestep metric tracks for one scene, to be averaged over scenes
/// first and timesteps second.
#[derive(Debug, Clone)]
pub struct SceneScores {
    pub auc_observed: Vec<f64>,
    pub soft_iou_observed: Vec<f64>,
    pub auc_occluded: Vec<f64>,
    pub soft_iou_occluded: Vec<f64>,
    pub epe: Vec<f64>,
    pub auc_fg: Vec<f64>,
    pub soft_iou_fg: Vec<f64>,
    pub flags: Vec<String>,
}

fn binarize_union(observed: &ArrayViewD<f32>, occluded: &ArrayViewD<f32>) -> Arr {
    let mut g = observed.to_owned();
    g.zip_mut_with(occluded, |a, &b| *a = if *a + b > 0.5 { 1.0 } else { 0.0 });
    g
}

/// Scores one scene's predictions against its ground truth. Flow-grounded
/// scoring warps total ground-truth occupancy at t−1 (the last history
/// frame for t = 0) and gates it with the predicted occupancy union
/// p_obs + p_occl − p_obs·p_occl, scored against total occupancy at t.
pub fn score_scene(
    pred_flow: &Arr,
    pred_observed: &Arr,
    pred_occluded: &Arr,
    sc: &SceneTensors,
) -> Result<SceneScores> {
    let gt_obs = sc.gt_observed.as_ref();
    if pred_observed.shape() != gt_obs.shape()
        || pred_occluded.shape() != gt_obs.shape()
        || pred_flow.shape() != sc.gt_flow.shape()
    {
        return Err(HgError::Incompatible(format!(
            "prediction shapes {:?}/{:?}/{:?} do not match scene geometry {:?}/{:?}",
            pred_observed.shape(),
            pred_occluded.shape(),
            pred_flow.shape(),
            gt_obs.shape(),
            sc.gt_flow.shape()
        )));
    }
    let t_len = gt_obs.shape()[0];
    let (h, w) = (gt_obs.shape()[1], gt_obs.shape()[2]);
    let mut s = SceneScores {
        auc_observed: Vec::with_capacity(t_len),
        soft_iou_observed: Vec::with_capacity(t_len),
        auc_occluded: Vec::with_capacity(t_len),
        soft_iou_occluded: Vec::with_capacity(t_len),
        epe: Vec::with_capacity(t_len),
        auc_fg: Vec::with_capacity(t_len),
        soft_iou_fg: Vec::with_capacity(t_len),
        flags: Vec::new(),
    };
    let flag = |flags: &mut Vec<String>, msg: String| {
        if !flags.contains(&msg) {
            flags.push(msg);
        }
    };
    let present = sc.occ_stream.index_axis(Axis(2), sc.occ_stream.shape()[2] - 1);
    for t in 0..t_len {
        let po = pred_observed.index_axis(Axis(0), t);
        let pc = pred_occluded.index_axis(Axis(0), t);
        let go = gt_obs.index_axis(Axis(0), t);
        let gc = sc.gt_occluded.index_axis(Axis(0), t);

        let (auc_o, deg_o) = compute_auc(po.view(), go.view());
        if deg_o {
            flag(&mut s.flags, format!("observed gt all-zero at t={t}"));
        }
        s.auc_observed.push(auc_o);
        s.soft_iou_observed.push(compute_soft_iou(po.view(), go.view()));

        let (auc_c, deg_c) = compute_auc(pc.view(), gc.view());
        if deg_c {
            flag(&mut s.flags, format!("occluded gt all-zero at t={t}"));
        }
        s.auc_occluded.push(auc_c);
        s.soft_iou_occluded.push(compute_soft_iou(pc.view(), gc.view()));

        let fl = pred_flow.index_axis(Axis(0), t);
        let gfl = sc.gt_flow.index_axis(Axis(0), t);
        let mask = sc.flow_mask.index_axis(Axis(0), t);
        let (epe, empty) = compute_epe(fl.view(), gfl.view(), mask.view());
        if empty {
            flag(&mut s.flags, format!("no occupied cells for EPE at t={t}"));
        }
        s.epe.push(epe);

        let prev = if t == 0 {
            present.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }).into_dyn()
        } else {
            binarize_union(
                &gt_obs.index_axis(Axis(0), t - 1),
                &sc.gt_occluded.index_axis(Axis(0), t - 1),
            )
        };
        let mut union = po.to_owned();
        union.zip_mut_with(&pc, |a, &b| *a = *a + b - *a * b);
        let grounded = flow_grounded_occupancy(fl.view(), prev.view(), union.view());
        let gt_total = binarize_union(&go, &gc);
        debug_assert_eq!(grounded.shape(), &[h, w]);
        let (auc_f, deg_f) = compute_auc(grounded.view().into_dyn(), gt_total.view());
        if deg_f {
            flag(&mut s.flags, format!("total gt all-zero at t={t}"));
        }
        s.auc_fg.push(auc_f);
        s.soft_iou_fg.push(compute_soft_iou(grounded.view().into_dyn(), gt_total.view()));
    }
    Ok(s)
}

/// Mean over scenes at each timestep, then mean over timesteps.
pub fn aggregate(scores: &[SceneScores]) -> Result<MetricReport> {
    if scores.is_empty() {
        return Err(HgError::EmptyData("no scenes to aggregate".into()));
    }
    let t_len = scores[0].epe.len();
    for s in scores {
        if s.epe.len() != t_len {
            return Err(HgError::Incompatible(format!(
                "scene horizon {} differs from {}",
                s.epe.len(),
                t_len
            )));
        }
    }
    let mean_st = |pick: fn(&SceneScores) -> &Vec<f64>| -> f64 {
        let mut over_t = 0.0;
        for t in 0..t_len {
            let over_scenes: f64 =
                scores.iter().map(|s| pick(s)[t]).sum::<f64>() / scores.len() as f64;
            over_t += over_scenes;
        }
        over_t / t_len as f64
    };
    let mut flags: Vec<String> = Vec::new();
    for s in scores {
        for f in &s.flags {
            if !flags.contains(f) {
                flags.push(f.clone());
            }
        }
    }
    let report = MetricReport {
        auc_observed: mean_st(|s| &s.auc_observed),
        soft_iou_observed: mean_st(|s| &s.soft_iou_observed),
        auc_occluded: mean_st(|s| &s.auc_occluded),
        soft_iou_occluded: mean_st(|s| &s.soft_iou_occluded),
        epe: mean_st(|s| &s.epe),
        auc_fg: mean_st(|s| &s.auc_fg),
        soft_iou_fg: mean_st(|s| &s.soft_iou_fg),
        flags,
    };
    report.validate()?;
    Ok(report)
}
