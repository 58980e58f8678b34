//! Converts a `SceneSample` into the dense tensors and masks the network
//! consumes. All coordinates are normalized to roughly unit scale here so
//! the model never sees raw meters.

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::config::RunConfig;
use crate::graph::Arr;
use crate::scenegen::SceneSample;

/// Per-timestep agent feature width.
pub const F_AGENT: usize = 10;
/// Per-waypoint map feature width.
pub const F_MAP: usize = 5;

const VEL_SCALE: f32 = 5.0;
const SIZE_SCALE: f32 = 5.0;

pub struct SceneTensors {
    /// `[N_A, T_h+1, F_AGENT]`, invalid frames zero-filled.
    pub agent_feats: Arr,
    pub agent_types: Vec<usize>,
    /// Agent participates at t = 0.
    pub agent_mask: Vec<bool>,
    /// `[N_P, W_pts * F_MAP]` concatenated waypoint features.
    pub map_feats: Arr,
    pub map_mask: Vec<bool>,
    /// `[H, W, T_h+1]` historical occupancy stream.
    pub occ_stream: Arr,
    /// `[H, W, 2*T_h]` historical backward-flow stream.
    pub flow_stream: Arr,
    /// `[H, W, 3]` map raster stream.
    pub map_stream: Arr,
    pub gt_observed: Arc<Arr>,
    pub gt_occluded: Arc<Arr>,
    pub gt_flow: Arc<Arr>,
    /// `[T, H, W]`: 1 where ground truth marks the cell occupied.
    pub flow_mask: Arc<Arr>,
}

pub fn prepare_scene(cfg: &RunConfig, sample: &SceneSample) -> SceneTensors {
    let scfg = cfg.scene_config();
    let pos_scale = scfg.extent() / 2.0;
    let n_a = sample.agent_histories.len();
    let t_h1 = cfg.t_h + 1;

    let mut agent_feats = ArrayD::<f32>::zeros(IxDyn(&[n_a, t_h1, F_AGENT]));
    let mut agent_types = Vec::with_capacity(n_a);
    let mut agent_mask = Vec::with_capacity(n_a);
    for (i, hist) in sample.agent_histories.iter().enumerate() {
        agent_types.push(hist[0].typ.code() as usize);
        agent_mask.push(hist.last().is_some_and(|a| a.valid));
        for (j, a) in hist.iter().enumerate().take(t_h1) {
            if !a.valid {
                continue;
            }
            let row = [
                a.x / pos_scale,
                a.y / pos_scale,
                a.vx / VEL_SCALE,
                a.vy / VEL_SCALE,
                a.heading.cos(),
                a.heading.sin(),
                a.length / SIZE_SCALE,
                a.width / SIZE_SCALE,
                1.0,
                if i == sample.ego_index { 1.0 } else { 0.0 },
            ];
            for (k, v) in row.into_iter().enumerate() {
                agent_feats[[i, j, k]] = v;
            }
        }
    }

    let n_p = sample.map_polylines.len().max(1);
    // Fixed per-segment width from the config so the map MLP input size is
    // stable across scenes; longer polylines are truncated, shorter padded.
    let w_pts = scfg.waypoints_per_lane.max(1);
    let mut map_feats = ArrayD::<f32>::zeros(IxDyn(&[n_p, w_pts * F_MAP]));
    let mut map_mask = vec![false; n_p];
    for (i, lane) in sample.map_polylines.iter().enumerate() {
        map_mask[i] = !lane.is_empty();
        for (j, p) in lane.iter().enumerate().take(w_pts) {
            let next = lane.get(j + 1).unwrap_or(p);
            let at = j * F_MAP;
            map_feats[[i, at]] = p[0] / pos_scale;
            map_feats[[i, at + 1]] = p[1] / pos_scale;
            map_feats[[i, at + 2]] = (next[0] - p[0]) / pos_scale;
            map_feats[[i, at + 3]] = (next[1] - p[1]) / pos_scale;
            map_feats[[i, at + 4]] = 1.0;
        }
    }

    let (h, w) = (cfg.h, cfg.w);
    let mut occ_stream = Array3::<f32>::zeros((h, w, t_h1));
    for j in 0..t_h1 {
        for r in 0..h {
            for c in 0..w {
                occ_stream[[r, c, j]] = sample.hist_occupancy[[j, r, c]];
            }
        }
    }
    let mut flow_stream = Array3::<f32>::zeros((h, w, 2 * cfg.t_h));
    for j in 0..cfg.t_h {
        for r in 0..h {
            for c in 0..w {
                flow_stream[[r, c, 2 * j]] = sample.hist_backward_flow[[j, r, c, 0]];
                flow_stream[[r, c, 2 * j + 1]] = sample.hist_backward_flow[[j, r, c, 1]];
            }
        }
    }
    let map_stream = sample.map_raster.clone();

    let mut flow_mask = Array3::<f32>::zeros((cfg.t, h, w));
    for t in 0..cfg.t {
        for r in 0..h {
            for c in 0..w {
                let occ = sample.gt_observed[[t, r, c]] + sample.gt_occluded[[t, r, c]];
                flow_mask[[t, r, c]] = if occ > 0.5 { 1.0 } else { 0.0 };
            }
        }
    }

    SceneTensors {
        agent_feats,
        agent_types,
        agent_mask,
        map_feats,
        map_mask,
        occ_stream: occ_stream.into_dyn(),
        flow_stream: flow_stream.into_dyn(),
        map_stream: map_stream.into_dyn(),
        gt_observed: Arc::new(sample.gt_observed.clone().into_dyn()),
        gt_occluded: Arc::new(sample.gt_occluded.clone().into_dyn()),
        gt_flow: Arc::new(sample.gt_flow.clone().into_dyn()),
        flow_mask: Arc::new(flow_mask.into_dyn()),
    }
}

/// Binary union occupancy `[H, W]` for step `t` of the ground truth.
pub fn gt_union_occupancy(sample: &SceneSample, t: usize) -> Array2<f32> {
    let (h, w) = (sample.gt_observed.shape()[1], sample.gt_observed.shape()[2]);
    let mut g = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let v = sample.gt_observed[[t, r, c]] + sample.gt_occluded[[t, r, c]];
            g[[r, c]] = if v > 0.5 { 1.0 } else { 0.0 };
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{simulate_scene, SceneConfig};

    #[test]
    fn shapes_and_masks_line_up() {
        let mut cfg = RunConfig::default();
        cfg.h = 32;
        cfg.w = 32;
        let sample = simulate_scene(1, &cfg.scene_config()).unwrap();
        let st = prepare_scene(&cfg, &sample);
        let n_a = sample.agent_histories.len();
        assert_eq!(st.agent_feats.shape(), &[n_a, cfg.t_h + 1, F_AGENT]);
        assert_eq!(st.agent_mask.len(), n_a);
        assert!(st.agent_mask[sample.ego_index]);
        assert_eq!(st.occ_stream.shape(), &[32, 32, cfg.t_h + 1]);
        assert_eq!(st.flow_stream.shape(), &[32, 32, 2 * cfg.t_h]);
        assert_eq!(st.map_stream.shape(), &[32, 32, 3]);
        assert_eq!(st.flow_mask.shape(), &[cfg.t, 32, 32]);
        // Flow mask marks exactly the union-occupied cells.
        for t in 0..cfg.t {
            for r in 0..32 {
                for c in 0..32 {
                    let occ = sample.gt_observed[[t, r, c]] + sample.gt_occluded[[t, r, c]];
                    assert_eq!(st.flow_mask[[t, r, c]], if occ > 0.5 { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn invalid_history_frames_are_zero_filled() {
        let mut cfg = RunConfig::default();
        cfg.h = 32;
        cfg.w = 32;
        let scfg = SceneConfig { h: 32, w: 32, ..SceneConfig::default() };
        // Find a scene with a late-appearing agent.
        for seed in 0..200 {
            let sample = simulate_scene(seed, &scfg).unwrap();
            let late = sample
                .agent_histories
                .iter()
                .position(|h| !h[0].valid);
            if let Some(i) = late {
                let st = prepare_scene(&cfg, &sample);
                for k in 0..F_AGENT {
                    assert_eq!(st.agent_feats[[i, 0, k]], 0.0);
                }
                return;
            }
        }
        panic!("no late-appearing agent in 200 seeds");
    }
}
