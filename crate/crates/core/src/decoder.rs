//! Hierarchical decoder: at every future step the flow head predicts first,
//! its features guide the observed-occupancy head, and the merged flow and
//! observed features guide the occluded-occupancy head. Each head's feature
//! map is decoded to full resolution by a feature pyramid network with
//! lateral connections from the visual encoder, sharing weights across
//! timesteps.

use crate::context::{ContextTokens, EncBlock};
use crate::error::Result;
use crate::fgat::Fgat;
use crate::graph::{Graph, Val};
use crate::memory::{Covariates, GruStack, HeadOutput, MemoryState};
use crate::nn::{Act, Conv2d, Linear, Mha, Mlp, ParamStore};
use crate::visual::{space_to_depth, VisualPyramid};

pub const FLOW: usize = 0;
pub const OBSERVED: usize = 1;
pub const OCCLUDED: usize = 2;

/// Which submodules run at full fidelity.
#[derive(Clone, Copy, Debug)]
pub struct AblationFlags {
    pub fgat_enabled: bool,
    pub memory_enabled: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { fgat_enabled: true, memory_enabled: true }
    }
}

/// Execution counters indexed by head, for control-flow contracts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub fgat_calls: [usize; 3],
    pub fallback_calls: [usize; 3],
    pub guide_calls: [usize; 3],
    pub memory_steps: [usize; 3],
}

/// Per-head query features `[S, D]`, fixed for a scene across timesteps.
pub struct PathwayQueries {
    pub flow: Val,
    pub observed: Val,
    pub occluded: Val,
}

/// Per-head decoder features for one timestep.
#[derive(Debug)]
pub struct HeadFeatures {
    pub flow: Val,
    pub observed: Val,
    pub occluded: Val,
}

/// Rolling decoder state: per-head memory and previous head outputs.
#[derive(Debug)]
pub struct RolloutState {
    mem: [MemoryState; 3],
    y_prev: [Val; 3],
    pub t: usize,
}

/// Sigmoid squeezed into [ε, 1−ε]: f32 sigmoid saturates to exactly 0 or 1
/// for |x| ≳ 17, this keeps occupancies strictly inside (0,1).
pub fn strict_sigmoid(g: &Graph, x: Val) -> Val {
    const E: f32 = 1e-5;
    g.add_scalar(g.scale(g.sigmoid(x), 1.0 - 2.0 * E), E)
}

/// Feature pyramid decoder from stride 16 to full resolution with lateral
/// convolutions on the stride-8 and stride-4 encoder maps.
pub struct Fpn {
    c3: Conv2d,
    l2: Conv2d,
    c2: Conv2d,
    l1: Conv2d,
    c1: Conv2d,
    c0: Conv2d,
    out: Conv2d,
    sigmoid: bool,
}

impl Fpn {
    pub fn new(st: &mut ParamStore, name: &str, d: usize, out_ch: usize, sigmoid: bool) -> Self {
        assert!(d % 8 == 0, "fpn needs d divisible by 8");
        Fpn {
            c3: Conv2d::new(st, &format!("{name}.c3"), 3, d, d / 2),
            l2: Conv2d::new(st, &format!("{name}.l2"), 3, d / 2, d / 2),
            c2: Conv2d::new(st, &format!("{name}.c2"), 3, d / 2, d / 4),
            l1: Conv2d::new(st, &format!("{name}.l1"), 3, d / 4, d / 4),
            c1: Conv2d::new(st, &format!("{name}.c1"), 3, d / 4, d / 8),
            c0: Conv2d::new(st, &format!("{name}.c0"), 3, d / 8, d / 8),
            out: Conv2d::new(st, &format!("{name}.out"), 3, d / 8, out_ch),
            sigmoid,
        }
    }

    /// `x3 [H/16, W/16, D]`, laterals `v2 [H/8, W/8, D/2]` and
    /// `v1 [H/4, W/4, D/4]` -> `[H, W, out_ch]`.
    pub fn forward(&self, g: &Graph, x3: Val, v2: Val, v1: Val) -> Val {
        let x = g.relu(self.c3.forward(g, x3));
        let x = g.add(g.upsample2x(x), self.l2.forward(g, v2));
        let x = g.relu(self.c2.forward(g, x));
        let x = g.add(g.upsample2x(x), self.l1.forward(g, v1));
        let x = g.relu(self.c1.forward(g, x));
        let x = g.relu(self.c0.forward(g, g.upsample2x(x)));
        let y = self.out.forward(g, g.upsample2x(x));
        if self.sigmoid {
            strict_sigmoid(g, y)
        } else {
            y
        }
    }
}

struct Pathway {
    block: EncBlock,
    fgat: Fgat,
    head: HeadOutput,
    guide_attn: Option<Mha>,
    mem: GruStack,
}

impl Pathway {
    fn new(
        st: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        h16: usize,
        w16: usize,
        sigma_off: f32,
        c_cov: usize,
        l_gru: usize,
        dropout: f32,
        guided: bool,
    ) -> Self {
        let fgat_heads = (d / 32).max(1);
        Pathway {
            block: EncBlock::with_act(st, &format!("{name}.self"), d, heads, dropout, Act::Relu),
            fgat: Fgat::new(st, &format!("{name}.fgat"), d, fgat_heads, h16, w16, sigma_off),
            head: HeadOutput::new(st, &format!("{name}.head"), d, heads),
            guide_attn: guided.then(|| Mha::new(st, &format!("{name}.guide"), d, heads)),
            mem: GruStack::new(st, &format!("{name}.mem"), d, c_cov, l_gru),
        }
    }
}

pub struct Decoder {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub t_max: usize,
    flow_patch: Linear,
    obs_patch: Linear,
    occl_fusion: Mlp,
    paths: [Pathway; 3],
    merge_mlp: Mlp,
    covariates: Covariates,
    flow_fpn: Fpn,
    obs_fpn: Fpn,
    occl_fpn: Fpn,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        st: &mut ParamStore,
        h: usize,
        w: usize,
        d: usize,
        heads: usize,
        t_h: usize,
        t_max: usize,
        c_cov: usize,
        l_gru: usize,
        sigma_off: f32,
        dropout: f32,
    ) -> Self {
        assert!(h % 16 == 0 && w % 16 == 0, "grid must divide by 16");
        let (h16, w16) = (h / 16, w / 16);
        let mk = |st: &mut ParamStore, name: &str, guided: bool| {
            Pathway::new(st, name, d, heads, h16, w16, sigma_off, c_cov, l_gru, dropout, guided)
        };
        Decoder {
            h,
            w,
            d,
            t_max,
            flow_patch: Linear::no_bias(st, "flow.patch", 256 * 2 * t_h, d),
            obs_patch: Linear::no_bias(st, "obs.patch", 256 * (t_h + 1), d),
            occl_fusion: Mlp::new(st, "occl.fusion", &[2 * d, d, d], Act::Relu, dropout),
            paths: [
                mk(st, "flow", false),
                mk(st, "obs", true),
                mk(st, "occl", true),
            ],
            merge_mlp: Mlp::new(st, "occl.merge", &[2 * d, d, d], Act::Relu, dropout),
            covariates: Covariates::new(st, "dec.covariates", t_max, c_cov),
            flow_fpn: Fpn::new(st, "flow.fpn", d, 2, false),
            obs_fpn: Fpn::new(st, "obs.fpn", d, 1, true),
            occl_fpn: Fpn::new(st, "occl.fpn", d, 1, true),
        }
    }

    fn s(&self) -> usize {
        (self.h / 16) * (self.w / 16)
    }

    /// Stride-16 patch embeds of each head's own history stream, passed
    /// through one self-attention block. The occluded stream has no raw
    /// history of its own; it fuses the flow and observed embeddings.
    pub fn build_pathway_inputs(
        &self,
        g: &Graph,
        hist_occupancy: Val,
        hist_flow: Val,
    ) -> PathwayQueries {
        let s = self.s();
        let fe = g.reshape(self.flow_patch.forward(g, space_to_depth(g, hist_flow, 16)), &[s, self.d]);
        let oe = g.reshape(self.obs_patch.forward(g, space_to_depth(g, hist_occupancy, 16)), &[s, self.d]);
        let ce = self.occl_fusion.forward(g, g.concat(1, &[fe, oe]));
        PathwayQueries {
            flow: self.paths[FLOW].block.forward(g, fe, None, None),
            observed: self.paths[OBSERVED].block.forward(g, oe, None, None),
            occluded: self.paths[OCCLUDED].block.forward(g, ce, None, None),
        }
    }

    /// Fresh rollout state: zero memory, zero previous outputs, t = 0.
    pub fn initial_state(&self, g: &Graph) -> RolloutState {
        let s = self.s();
        let zeros = || g.inp(ndarray::ArrayD::zeros(ndarray::IxDyn(&[s, self.d])));
        RolloutState {
            mem: [
                self.paths[FLOW].mem.initial_state(g, s),
                self.paths[OBSERVED].mem.initial_state(g, s),
                self.paths[OCCLUDED].mem.initial_state(g, s),
            ],
            y_prev: [zeros(), zeros(), zeros()],
            t: 0,
        }
    }

    /// Cross-attention of a raw guiding feature over v3, plus the memory
    /// feature when present. The flow head never takes a guide.
    fn guide_feature(
        &self,
        g: &Graph,
        which: usize,
        raw: Val,
        pyr: &VisualPyramid,
        m: Option<Val>,
        trace: &mut Trace,
    ) -> Val {
        trace.guide_calls[which] += 1;
        let v3 = g.reshape(pyr.v3, &[self.s(), self.d]);
        let attn = self.paths[which]
            .guide_attn
            .as_ref()
            .expect("guided head")
            .forward(g, raw, v3, None, None);
        match m {
            Some(m) => g.add(attn, m),
            None => attn,
        }
    }

    fn amplify(
        &self,
        g: &Graph,
        which: usize,
        q: Val,
        guide: Val,
        flags: AblationFlags,
        trace: &mut Trace,
    ) -> Result<Val> {
        let p = &self.paths[which];
        if flags.fgat_enabled {
            trace.fgat_calls[which] += 1;
            p.fgat.forward(g, q, guide)
        } else {
            trace.fallback_calls[which] += 1;
            p.fgat.plain_cross_attention_fallback(g, q, guide)
        }
    }

    /// One step of the ordered rollout. Advances every memory stack with its
    /// head's previous output, then decodes flow, observed and occluded in
    /// that order.
    pub fn decode_timestep(
        &self,
        g: &Graph,
        q: &PathwayQueries,
        ctx: &ContextTokens,
        pyr: &VisualPyramid,
        state: RolloutState,
        flags: AblationFlags,
        trace: &mut Trace,
    ) -> Result<(HeadFeatures, RolloutState)> {
        let t = state.t + 1;
        let (m_flow, m_occl, mem) = if flags.memory_enabled {
            let c_t = self.covariates.row(g, t)?;
            let step = |i: usize, tr: &mut Trace| -> Result<(Val, MemoryState)> {
                tr.memory_steps[i] += 1;
                self.paths[i].mem.memory_step(g, state.y_prev[i], c_t, &state.mem[i], t)
            };
            let (mf, sf) = step(FLOW, trace)?;
            // The observed stack advances on its own history but its emitted
            // feature is unused: the observed guide takes the flow memory.
            let (_mo, so) = step(OBSERVED, trace)?;
            let (mc, sc) = step(OCCLUDED, trace)?;
            (Some(mf), Some(mc), [sf, so, sc])
        } else {
            (None, None, state.mem)
        };

        let flow_att = self.amplify(g, FLOW, q.flow, q.flow, flags, trace)?;
        let y_flow = self.paths[FLOW].head.forward(g, flow_att, ctx);

        let obs_guide = self.guide_feature(g, OBSERVED, y_flow, pyr, m_flow, trace);
        let obs_att = self.amplify(g, OBSERVED, q.observed, obs_guide, flags, trace)?;
        let y_obs = self.paths[OBSERVED].head.forward(g, obs_att, ctx);

        let merged = self.merge_mlp.forward(g, g.concat(1, &[y_flow, y_obs]));
        let occl_guide = self.guide_feature(g, OCCLUDED, merged, pyr, m_occl, trace);
        let occl_att = self.amplify(g, OCCLUDED, q.occluded, occl_guide, flags, trace)?;
        let y_occl = self.paths[OCCLUDED].head.forward(g, occl_att, ctx);

        Ok((
            HeadFeatures { flow: y_flow, observed: y_obs, occluded: y_occl },
            RolloutState { mem, y_prev: [y_flow, y_obs, y_occl], t },
        ))
    }

    /// Full-resolution maps for one timestep's head features:
    /// flow `[H, W, 2]` linear, occupancies `[H, W]` strictly in (0,1).
    pub fn fpn_decode(
        &self,
        g: &Graph,
        feats: &HeadFeatures,
        pyr: &VisualPyramid,
    ) -> (Val, Val, Val) {
        let (h16, w16) = (self.h / 16, self.w / 16);
        let grid = |y: Val| g.reshape(y, &[h16, w16, self.d]);
        let flow = self.flow_fpn.forward(g, grid(feats.flow), pyr.v2, pyr.v1);
        let obs = self.obs_fpn.forward(g, grid(feats.observed), pyr.v2, pyr.v1);
        let occl = self.occl_fpn.forward(g, grid(feats.occluded), pyr.v2, pyr.v1);
        let squeeze = |x: Val| g.reshape(x, &[self.h, self.w]);
        (flow, squeeze(obs), squeeze(occl))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_check_inputs, FdSpec};
    use crate::graph::Arr;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rand_arr(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0f32))
    }

    const H: usize = 32;
    const W: usize = 32;
    const D: usize = 32;
    const TH: usize = 2;

    fn decoder(st: &mut ParamStore) -> Decoder {
        Decoder::new(st, H, W, D, 2, TH, 3, 8, 2, 1.0, 0.0)
    }

    struct Scene {
        q: PathwayQueries,
        ctx: ContextTokens,
        pyr: VisualPyramid,
    }

    fn scene(g: &Graph, dec: &Decoder, seed: u64) -> Scene {
        let hist_occ = g.inp(rand_arr(&[H, W, TH + 1], seed));
        let hist_flow = g.inp(rand_arr(&[H, W, 2 * TH], seed + 1));
        let q = dec.build_pathway_inputs(g, hist_occ, hist_flow);
        let ctx = ContextTokens {
            tokens: g.inp(rand_arr(&[3, D], seed + 2)),
            mask: Arc::new(ArrayD::from_elem(IxDyn(&[3]), true)),
        };
        let pyr = VisualPyramid {
            v1: g.inp(rand_arr(&[H / 4, W / 4, D / 4], seed + 3)),
            v2: g.inp(rand_arr(&[H / 8, W / 8, D / 2], seed + 4)),
            v3: g.inp(rand_arr(&[H / 16, W / 16, D], seed + 5)),
        };
        Scene { q, ctx, pyr }
    }

    fn rollout(
        st: &ParamStore,
        dec: &Decoder,
        steps: usize,
        flags: AblationFlags,
    ) -> (Vec<Arr>, Trace) {
        let g = Graph::new(st, false, 0);
        let sc = scene(&g, dec, 50);
        let mut state = dec.initial_state(&g);
        let mut trace = Trace::default();
        let mut maps = Vec::new();
        for _ in 0..steps {
            let (feats, next) = dec
                .decode_timestep(&g, &sc.q, &sc.ctx, &sc.pyr, state, flags, &mut trace)
                .unwrap();
            let (flow, obs, occl) = dec.fpn_decode(&g, &feats, &sc.pyr);
            maps.push(g.value(flow));
            maps.push(g.value(obs));
            maps.push(g.value(occl));
            state = next;
        }
        (maps, trace)
    }

    #[test]
    fn rollout_shapes_and_occupancy_range() {
        let mut st = ParamStore::new();
        let dec = decoder(&mut st);
        st.init_all(0);
        for flags in [
            AblationFlags::default(),
            AblationFlags { fgat_enabled: true, memory_enabled: false },
            AblationFlags { fgat_enabled: false, memory_enabled: false },
        ] {
            let (maps, _) = rollout(&st, &dec, 2, flags);
            for chunk in maps.chunks(3) {
                assert_eq!(chunk[0].shape(), &[H, W, 2]);
                assert_eq!(chunk[1].shape(), &[H, W]);
                assert_eq!(chunk[2].shape(), &[H, W]);
                for occ in &chunk[1..] {
                    assert!(occ.iter().all(|&p| p > 0.0 && p < 1.0 && p.is_finite()));
                }
                assert!(chunk[0].iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn trace_counts_follow_control_flow_contract() {
        let mut st = ParamStore::new();
        let dec = decoder(&mut st);
        st.init_all(1);
        let (_, tr) = rollout(&st, &dec, 1, AblationFlags::default());
        assert_eq!(tr.fgat_calls, [1, 1, 1]);
        assert_eq!(tr.fallback_calls, [0, 0, 0]);
        assert_eq!(tr.guide_calls, [0, 1, 1], "flow head must never take a guide");
        assert_eq!(tr.memory_steps, [1, 1, 1]);

        let (_, tr) = rollout(&st, &dec, 3, AblationFlags { fgat_enabled: false, memory_enabled: false });
        assert_eq!(tr.fgat_calls, [0, 0, 0]);
        assert_eq!(tr.fallback_calls, [3, 3, 3]);
        assert_eq!(tr.memory_steps, [0, 0, 0]);
    }

    #[test]
    fn hierarchy_is_one_directional_under_parameter_perturbation() {
        let mut st = ParamStore::new();
        let dec = decoder(&mut st);
        st.init_all(2);
        let base = rollout(&st, &dec, 2, AblationFlags::default()).0;

        let bump = |st: &mut ParamStore, prefix: &str| {
            for i in 0..st.len() {
                if st.name(i).starts_with(prefix) {
                    st.value_mut(i).mapv_inplace(|v| v + 0.05);
                }
            }
        };

        let mut st_occl = ParamStore::new();
        let dec2 = decoder(&mut st_occl);
        st_occl.init_all(2);
        bump(&mut st_occl, "occl.");
        let occl_bumped = rollout(&st_occl, &dec2, 2, AblationFlags::default()).0;
        for t in 0..2 {
            assert_eq!(base[3 * t], occl_bumped[3 * t], "flow changed with occluded params");
            assert_eq!(base[3 * t + 1], occl_bumped[3 * t + 1], "observed changed with occluded params");
            assert_ne!(base[3 * t + 2], occl_bumped[3 * t + 2], "occluded should have changed");
        }

        let mut st_obs = ParamStore::new();
        let dec3 = decoder(&mut st_obs);
        st_obs.init_all(2);
        bump(&mut st_obs, "obs.");
        let obs_bumped = rollout(&st_obs, &dec3, 2, AblationFlags::default()).0;
        for t in 0..2 {
            assert_eq!(base[3 * t], obs_bumped[3 * t], "flow changed with observed params");
            assert_ne!(base[3 * t + 1], obs_bumped[3 * t + 1], "observed should have changed");
        }
    }

    #[test]
    fn zeroed_memory_weights_match_disabled_memory() {
        let mut st = ParamStore::new();
        let dec = decoder(&mut st);
        st.init_all(3);
        for i in 0..st.len() {
            let n = st.name(i).to_string();
            if n.contains(".mem.") || n == "dec.covariates" {
                st.value_mut(i).fill(0.0);
            }
        }
        let with_mem = rollout(&st, &dec, 2, AblationFlags::default()).0;
        let without = rollout(&st, &dec, 2, AblationFlags { fgat_enabled: true, memory_enabled: false }).0;
        for (a, b) in with_mem.iter().zip(&without) {
            assert_eq!(a, b, "zero-weight memory should equal disabled memory");
        }
    }

    #[test]
    fn fd_fpn_gradients_on_toy_grid() {
        let mut st = ParamStore::new();
        let fpn = Fpn::new(&mut st, "fpn", 16, 2, false);
        st.init_all(4);
        let x3 = rand_arr(&[1, 1, 16], 60);
        let v2 = rand_arr(&[2, 2, 8], 61);
        let v1 = rand_arr(&[4, 4, 4], 62);
        // Six stacked f32 convolutions accumulate enough rounding noise in
        // the central difference to need the looser absolute floor; per-op
        // conv gradients are checked exactly in the graph tests.
        let rep = fd_check_inputs(
            &st,
            &[x3, v2, v1],
            |g, ins| fpn.forward(g, ins[0], ins[1], ins[2]),
            &FdSpec { max_checks: 8, atol: 1e-3, ..FdSpec::default() },
        )
        .unwrap();
        assert!(rep.checked >= 20);
    }

    #[test]
    fn strict_sigmoid_never_saturates() {
        let st = ParamStore::new();
        let g = Graph::new(&st, false, 0);
        let x = g.inp(ArrayD::from_shape_vec(IxDyn(&[4]), vec![-1e4f32, -30.0, 30.0, 1e4]).unwrap());
        let y = g.value(strict_sigmoid(&g, x));
        assert!(y.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn out_of_order_rollout_state_propagates_sequencing_error() {
        let mut st = ParamStore::new();
        let dec = decoder(&mut st);
        st.init_all(5);
        let g = Graph::new(&st, false, 0);
        let sc = scene(&g, &dec, 70);
        let mut trace = Trace::default();
        let state = dec.initial_state(&g);
        let (_, s1) = dec
            .decode_timestep(&g, &sc.q, &sc.ctx, &sc.pyr, state, AblationFlags::default(), &mut trace)
            .unwrap();
        let stale = RolloutState { mem: s1.mem, y_prev: s1.y_prev, t: 2 };
        let err = dec
            .decode_timestep(&g, &sc.q, &sc.ctx, &sc.pyr, stale, AblationFlags::default(), &mut trace)
            .unwrap_err();
        assert!(matches!(err, crate::error::HgError::Sequencing { .. }));
    }
}
