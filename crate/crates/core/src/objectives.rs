//! Training objectives: focal plus cross-entropy loss over both occupancy
//! heads, smooth-L1 flow loss masked to ground-truth-occupied cells, and
//! the exact composition total = (100·L_occ + L_f) / (h·w·T).

use std::sync::Arc;

use crate::error::{HgError, Result};
use crate::features::SceneTensors;
use crate::graph::{Arr, Graph, Val};
use crate::model::PredictionBundle;

pub const FOCAL_GAMMA: f32 = 2.0;
pub const FOCAL_ALPHA: f32 = 0.25;

/// The loss terms of one scene, kept as graph nodes so callers can both
/// log their values and backpropagate through `total`.
pub struct LossBreakdown {
    pub l_occ: Val,
    pub l_flow: Val,
    pub total: Val,
    pub h: usize,
    pub w: usize,
    pub t: usize,
}

fn validate_unit_open(g: &Graph, pred: Val, name: &str) -> Result<()> {
    let v = g.value(pred);
    for &p in v.iter() {
        if !(p > 0.0 && p < 1.0) {
            return Err(HgError::Contract(format!(
                "{name} contains {p}, outside the open unit interval"
            )));
        }
    }
    Ok(())
}

/// Focal (γ = 2, α = 0.25) plus binary cross-entropy, summed over cells and
/// timesteps of both occupancy channels.
pub fn occupancy_loss(
    g: &Graph,
    pred_observed: Val,
    pred_occluded: Val,
    gt_observed: Arc<Arr>,
    gt_occluded: Arc<Arr>,
) -> Result<Val> {
    validate_unit_open(g, pred_observed, "observed occupancy")?;
    validate_unit_open(g, pred_occluded, "occluded occupancy")?;
    let lo = g.focal_bce_sum(pred_observed, gt_observed, FOCAL_GAMMA, FOCAL_ALPHA);
    let lc = g.focal_bce_sum(pred_occluded, gt_occluded, FOCAL_GAMMA, FOCAL_ALPHA);
    Ok(g.add(lo, lc))
}

/// Smooth-L1 (β = 1) per flow component, summed over cells the ground truth
/// marks occupied; unoccupied cells contribute exactly zero.
pub fn flow_loss(g: &Graph, pred_flow: Val, gt_flow: Arc<Arr>, occ_mask: Arc<Arr>) -> Val {
    g.smooth_l1_sum_masked(pred_flow, gt_flow, occ_mask)
}

/// total = (100·l_occ + l_flow) / (h·w·T), composed exactly in this form.
pub fn total_loss(g: &Graph, l_occ: Val, l_flow: Val, h: usize, w: usize, t: usize) -> LossBreakdown {
    assert!(h > 0 && w > 0 && t > 0);
    let total = g.div_scalar(g.add(g.scale(l_occ, 100.0), l_flow), (h * w * t) as f32);
    LossBreakdown { l_occ, l_flow, total, h, w, t }
}

/// Full objective for one scene's predictions.
pub fn scene_loss(g: &Graph, bundle: &PredictionBundle, sc: &SceneTensors) -> Result<LossBreakdown> {
    let shape = g.shape(bundle.observed);
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    let l_occ = occupancy_loss(
        g,
        bundle.observed,
        bundle.occluded,
        sc.gt_observed.clone(),
        sc.gt_occluded.clone(),
    )?;
    let l_flow = flow_loss(g, bundle.flow, sc.gt_flow.clone(), sc.flow_mask.clone());
    Ok(total_loss(g, l_occ, l_flow, h, w, t))
}
