//! Full model: vectorized context encoder, multi-stream visual encoder and
//! the hierarchical decoder rolled out over the future horizon.

use crate::config::RunConfig;
use crate::context::ContextEncoder;
use crate::decoder::{AblationFlags, Decoder, Trace};
use crate::error::Result;
use crate::features::{SceneTensors, F_MAP};
use crate::graph::{Graph, Val};
use crate::nn::ParamStore;
use crate::visual::VisualEncoder;

/// Grid predictions for the full future horizon.
pub struct PredictionBundle {
    /// `[T, H, W, 2]` backward flow in cell units.
    pub flow: Val,
    /// `[T, H, W]` observed occupancy, strictly in (0,1).
    pub observed: Val,
    /// `[T, H, W]` occluded occupancy, strictly in (0,1).
    pub occluded: Val,
}

pub struct HgNet {
    pub ctx: ContextEncoder,
    pub vis: VisualEncoder,
    pub dec: Decoder,
    h: usize,
    w: usize,
    t: usize,
}

impl HgNet {
    pub fn new(st: &mut ParamStore, cfg: &RunConfig) -> Self {
        let heads = cfg.num_heads();
        let map_in = cfg.waypoints_per_lane.max(1) * F_MAP;
        HgNet {
            ctx: ContextEncoder::new(st, cfg.d, heads, map_in, cfg.dropout),
            vis: VisualEncoder::new(st, cfg.h, cfg.w, cfg.d, cfg.t_h, cfg.window, cfg.dropout),
            dec: Decoder::new(
                st,
                cfg.h,
                cfg.w,
                cfg.d,
                heads,
                cfg.t_h,
                cfg.t,
                cfg.c_cov,
                cfg.l_gru,
                cfg.sigma_off,
                cfg.dropout,
            ),
            h: cfg.h,
            w: cfg.w,
            t: cfg.t,
        }
    }

    pub fn ablations(cfg: &RunConfig) -> AblationFlags {
        AblationFlags { fgat_enabled: cfg.fgat_enabled, memory_enabled: cfg.memory_enabled }
    }

    /// Full forward pass over one scene.
    pub fn forward(
        &self,
        g: &Graph,
        sc: &SceneTensors,
        flags: AblationFlags,
    ) -> Result<(PredictionBundle, Trace)> {
        let ctx = self.ctx.forward(
            g,
            g.inp(sc.agent_feats.clone()),
            &sc.agent_types,
            &sc.agent_mask,
            g.inp(sc.map_feats.clone()),
            &sc.map_mask,
        )?;
        let occ = g.inp(sc.occ_stream.clone());
        let flow = g.inp(sc.flow_stream.clone());
        let map = g.inp(sc.map_stream.clone());
        let pyr = self.vis.encode_visual(g, occ, flow, map);
        let q = self.dec.build_pathway_inputs(g, occ, flow);

        let mut state = self.dec.initial_state(g);
        let mut trace = Trace::default();
        let mut flows = Vec::with_capacity(self.t);
        let mut obs = Vec::with_capacity(self.t);
        let mut occl = Vec::with_capacity(self.t);
        for _ in 0..self.t {
            let (feats, next) = self.dec.decode_timestep(g, &q, &ctx, &pyr, state, flags, &mut trace)?;
            let (f, ob, oc) = self.dec.fpn_decode(g, &feats, &pyr);
            flows.push(g.reshape(f, &[1, self.h, self.w, 2]));
            obs.push(g.reshape(ob, &[1, self.h, self.w]));
            occl.push(g.reshape(oc, &[1, self.h, self.w]));
            state = next;
        }
        Ok((
            PredictionBundle {
                flow: g.concat(0, &flows),
                observed: g.concat(0, &obs),
                occluded: g.concat(0, &occl),
            },
            trace,
        ))
    }
}
