//! Visual encoder: per-stream embedding of historical occupancy, backward
//! flow and the map raster, followed by three stages of windowed and
//! shifted-window attention with relative positional bias, yielding a
//! three-level feature pyramid.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::graph::{Graph, Val};
use crate::nn::{attend_batched, Act, Init, LayerNorm, Linear, Mlp, ParamStore};

/// Three feature maps at strides 4, 8 and 16 with channels D/4, D/2, D.
pub struct VisualPyramid {
    pub v1: Val,
    pub v2: Val,
    pub v3: Val,
}

/// Space-to-depth on a `[h, w, c]` map: each `f`x`f` block becomes one
/// position with `f*f*c` channels.
pub fn space_to_depth(g: &Graph, x: Val, f: usize) -> Val {
    let s = g.shape(x);
    let (h, w, c) = (s[0], s[1], s[2]);
    assert!(h % f == 0 && w % f == 0, "space_to_depth needs divisible dims");
    let x = g.reshape(x, &[h / f, f, w / f, f, c]);
    let x = g.permute(x, &[0, 2, 1, 3, 4]);
    g.reshape(x, &[h / f, w / f, f * f * c])
}

/// Relative-position index matrix for a `w_s` x `w_s` window: entry (i, j)
/// indexes a `(2*w_s-1)^2` bias table by the displacement between token
/// positions i and j. Equal displacements share an index by construction.
pub fn rel_index_table(w_s: usize) -> Vec<usize> {
    let n = w_s * w_s;
    let span = 2 * w_s - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / w_s, i % w_s);
        for j in 0..n {
            let (yj, xj) = (j / w_s, j % w_s);
            let dy = yi as isize - yj as isize + w_s as isize - 1;
            let dx = xi as isize - xj as isize + w_s as isize - 1;
            idx.push(dy as usize * span + dx as usize);
        }
    }
    idx
}

/// Swin-style attention mask for a cyclically shifted grid: token pairs in
/// the same window that originate from wrapped-around image regions are
/// masked. Region ids are laid out in post-roll coordinates, so the
/// boundaries at `len - w_s` and `len - s` separate exactly the wrapped
/// content. Shape `[nW, 1, n, n]`, true = attend.
fn shift_mask(h: usize, w: usize, w_s: usize, s: usize) -> ArrayD<bool> {
    let region = |len: usize, p: usize| -> usize {
        if p < len - w_s {
            0
        } else if p < len - s {
            1
        } else {
            2
        }
    };
    let (nwy, nwx) = (h / w_s, w / w_s);
    let n = w_s * w_s;
    let mut mask = ArrayD::from_elem(IxDyn(&[nwy * nwx, 1, n, n]), false);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let b = wy * nwx + wx;
            let id_at = |k: usize| {
                region(h, wy * w_s + k / w_s) * 3 + region(w, wx * w_s + k % w_s)
            };
            for i in 0..n {
                for j in 0..n {
                    mask[[b, 0, i, j]] = id_at(i) == id_at(j);
                }
            }
        }
    }
    mask
}

/// One window-attention transformer block (optionally shifted), pre-norm.
pub struct SwinBlock {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    bias_table: usize,
    ln2: LayerNorm,
    ff: Mlp,
    heads: usize,
    w_s: usize,
    shifted: bool,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        st: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        w_s: usize,
        shifted: bool,
        dropout: f32,
    ) -> Self {
        let span = 2 * w_s - 1;
        SwinBlock {
            ln1: LayerNorm::new(st, &format!("{name}.ln1"), dim),
            wq: Linear::no_bias(st, &format!("{name}.wq"), dim, dim),
            wk: Linear::no_bias(st, &format!("{name}.wk"), dim, dim),
            wv: Linear::no_bias(st, &format!("{name}.wv"), dim, dim),
            wo: Linear::no_bias(st, &format!("{name}.wo"), dim, dim),
            bias_table: st.register(&format!("{name}.rel_bias"), &[span * span, heads], Init::Zeros),
            ln2: LayerNorm::new(st, &format!("{name}.ln2"), dim),
            ff: Mlp::new(st, &format!("{name}.ff"), &[dim, 2 * dim, dim], Act::Gelu, dropout),
            heads,
            w_s,
            shifted,
        }
    }

    /// Relative position bias `[heads, n, n]` for this block's window.
    fn bias(&self, g: &Graph) -> Val {
        let n = self.w_s * self.w_s;
        let idx = Arc::new(rel_index_table(self.w_s));
        let b = g.gather_rows(g.param(self.bias_table), idx);
        let b = g.reshape(b, &[n, n, self.heads]);
        g.permute(b, &[2, 0, 1])
    }

    pub fn forward(&self, g: &Graph, x: Val) -> Val {
        let s3 = g.shape(x);
        let (h, w, c) = (s3[0], s3[1], s3[2]);
        let w_s = self.w_s;
        let n = w_s * w_s;
        let (nwy, nwx) = (h / w_s, w / w_s);
        let shift = if self.shifted && (h > w_s || w > w_s) { w_s / 2 } else { 0 };

        let mut y = self.ln1.forward(g, x);
        if shift > 0 {
            y = g.roll2d(y, -(shift as isize), -(shift as isize));
        }
        // Partition into [nW, n, c] windows.
        let y = g.reshape(y, &[nwy, w_s, nwx, w_s, c]);
        let y = g.permute(y, &[0, 2, 1, 3, 4]);
        let y = g.reshape(y, &[nwy * nwx, n, c]);
        let (qp, kp, vp) = (
            self.wq.forward(g, y),
            self.wk.forward(g, y),
            self.wv.forward(g, y),
        );
        let mask = if shift > 0 {
            Some(Arc::new(shift_mask(h, w, w_s, shift)))
        } else {
            None
        };
        let att = attend_batched(g, qp, kp, vp, self.heads, mask, Some(self.bias(g)));
        let att = self.wo.forward(g, att);
        // Un-partition and undo the shift.
        let att = g.reshape(att, &[nwy, nwx, w_s, w_s, c]);
        let att = g.permute(att, &[0, 2, 1, 3, 4]);
        let mut att = g.reshape(att, &[h, w, c]);
        if shift > 0 {
            att = g.roll2d(att, shift as isize, shift as isize);
        }
        let x = g.add(x, att);
        let ff = self.ff.forward(g, self.ln2.forward(g, x));
        g.add(x, ff)
    }
}

pub(crate) struct Stage {
    pub(crate) win: SwinBlock,
    pub(crate) shifted: SwinBlock,
    pub(crate) merge: Option<Linear>,
}

pub struct VisualEncoder {
    occ_mlp: Mlp,
    flow_mlp: Mlp,
    map_mlp: Mlp,
    proj0: Linear,
    pub(crate) stages: Vec<Stage>,
}

impl VisualEncoder {
    /// `h`, `w` are full grid dims (divisible by 16); channel progression is
    /// D/4 at stride 4 doubling per merge to D at stride 16.
    pub fn new(
        st: &mut ParamStore,
        h: usize,
        w: usize,
        d: usize,
        t_h: usize,
        window: usize,
        dropout: f32,
    ) -> Self {
        assert!(h % 16 == 0 && w % 16 == 0, "grid must divide by 16");
        assert!(d % 4 == 0, "d must divide by 4");
        let e = (d / 8).max(4);
        let c0 = d / 4;
        let mut stages = Vec::with_capacity(3);
        let mut dim = c0;
        for i in 0..3 {
            let (gh, gw) = (h / (4 << i), w / (4 << i));
            let w_s = window.min(gh).min(gw);
            assert!(gh % w_s == 0 && gw % w_s == 0, "window must divide stage grid");
            let heads = (dim / 32).max(1);
            let name = format!("vis.stage{i}");
            let win = SwinBlock::new(st, &format!("{name}.win"), dim, heads, w_s, false, dropout);
            let shifted =
                SwinBlock::new(st, &format!("{name}.shift"), dim, heads, w_s, true, dropout);
            let merge = if i < 2 {
                let m = Linear::new(st, &format!("{name}.merge"), 4 * dim, 2 * dim);
                dim *= 2;
                Some(m)
            } else {
                None
            };
            stages.push(Stage { win, shifted, merge });
        }
        VisualEncoder {
            occ_mlp: Mlp::new(st, "vis.occ_mlp", &[t_h + 1, e, e], Act::Gelu, dropout),
            flow_mlp: Mlp::new(st, "vis.flow_mlp", &[2 * t_h, e, e], Act::Gelu, dropout),
            map_mlp: Mlp::new(st, "vis.map_mlp", &[3, e, e], Act::Gelu, dropout),
            proj0: Linear::new(st, "vis.proj0", 3 * 16 * e, c0),
            stages,
        }
    }

    /// Per-stream per-cell MLPs, 4x strided patch aggregation, channel
    /// concat, projection to C0 = D/4.
    pub fn embed_visual_inputs(&self, g: &Graph, occ: Val, flow: Val, map: Val) -> Val {
        let eo = space_to_depth(g, self.occ_mlp.forward(g, occ), 4);
        let ef = space_to_depth(g, self.flow_mlp.forward(g, flow), 4);
        let em = space_to_depth(g, self.map_mlp.forward(g, map), 4);
        let cat = g.concat(2, &[eo, ef, em]);
        self.proj0.forward(g, cat)
    }

    /// Full pyramid: stage outputs are v1, v2, v3; patch merging sits
    /// between stages.
    pub fn encode_visual(&self, g: &Graph, occ: Val, flow: Val, map: Val) -> VisualPyramid {
        let mut x = self.embed_visual_inputs(g, occ, flow, map);
        let mut levels = Vec::with_capacity(3);
        for stage in &self.stages {
            x = stage.win.forward(g, x);
            x = stage.shifted.forward(g, x);
            levels.push(x);
            if let Some(merge) = &stage.merge {
                x = merge.forward(g, space_to_depth(g, x, 2));
            }
        }
        VisualPyramid { v1: levels[0], v2: levels[1], v3: levels[2] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_check_params, FdSpec};
    use crate::graph::Arr;
    use crate::nn::attend;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0f32))
    }

    #[test]
    fn pyramid_shapes_chain() {
        for (h, w, d) in [(64usize, 64usize, 128usize), (32, 32, 64)] {
            let mut st = ParamStore::new();
            let enc = VisualEncoder::new(&mut st, h, w, d, 5, 4, 0.0);
            st.init_all(1);
            let g = Graph::new(&st, false, 0);
            let occ = g.inp(rand_arr(&[h, w, 6], 2));
            let flow = g.inp(rand_arr(&[h, w, 10], 3));
            let map = g.inp(rand_arr(&[h, w, 3], 4));
            let p = enc.encode_visual(&g, occ, flow, map);
            assert_eq!(g.shape(p.v1), vec![h / 4, w / 4, d / 4]);
            assert_eq!(g.shape(p.v2), vec![h / 8, w / 8, d / 2]);
            assert_eq!(g.shape(p.v3), vec![h / 16, w / 16, d]);
        }
    }

    #[test]
    fn zero_inputs_zero_biases_embed_to_zero() {
        let mut st = ParamStore::new();
        let enc = VisualEncoder::new(&mut st, 32, 32, 64, 5, 4, 0.0);
        st.init_all(1);
        // Zero every bias the embedding path uses.
        for i in 0..st.len() {
            let name = st.name(i).to_string();
            if (name.starts_with("vis.occ_mlp")
                || name.starts_with("vis.flow_mlp")
                || name.starts_with("vis.map_mlp")
                || name.starts_with("vis.proj0"))
                && name.ends_with(".b")
            {
                st.value_mut(i).fill(0.0);
            }
        }
        let g = Graph::new(&st, false, 0);
        let occ = g.inp(ArrayD::zeros(IxDyn(&[32, 32, 6])));
        let flow = g.inp(ArrayD::zeros(IxDyn(&[32, 32, 10])));
        let map = g.inp(ArrayD::zeros(IxDyn(&[32, 32, 3])));
        let out = enc.embed_visual_inputs(&g, occ, flow, map);
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_equals_full_attention_when_window_covers_grid() {
        let (h, w, c, heads) = (8usize, 8usize, 16usize, 1usize);
        let mut st = ParamStore::new();
        let block = SwinBlock::new(&mut st, "b", c, heads, 8, false, 0.0);
        st.init_all(3);
        // Give the zero-initialized bias table real values.
        let bt = block.bias_table;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        st.value_mut(bt).mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let g = Graph::new(&st, false, 0);
        let x = g.inp(rand_arr(&[h, w, c], 5));
        let out = block.forward(&g, x);

        // Reference: plain global attention over all 64 tokens.
        let y = block.ln1.forward(&g, x);
        let flat = g.reshape(y, &[h * w, c]);
        let (qp, kp, vp) = (
            block.wq.forward(&g, flat),
            block.wk.forward(&g, flat),
            block.wv.forward(&g, flat),
        );
        let bias = block.bias(&g);
        let att = attend(&g, qp, kp, vp, heads, None, Some(bias));
        let att = block.wo.forward(&g, att);
        let att = g.reshape(att, &[h, w, c]);
        let x1 = g.add(x, att);
        let ff = block.ff.forward(&g, block.ln2.forward(&g, x1));
        let reference = g.add(x1, ff);

        let a = g.value(out);
        let b = g.value(reference);
        let diff = a
            .iter()
            .zip(b.iter())
            .map(|(p, q)| (p - q).abs())
            .fold(0f32, f32::max);
        assert!(diff < 1e-5, "max diff {diff}");
    }

    #[test]
    fn unshifted_windows_do_not_interact() {
        let (h, w, c) = (8usize, 8usize, 8usize);
        let mut st = ParamStore::new();
        let block = SwinBlock::new(&mut st, "b", c, 1, 4, false, 0.0);
        st.init_all(4);
        let g = Graph::new(&st, false, 0);
        let base = rand_arr(&[h, w, c], 6);
        let mut pert = base.clone();
        pert[[1, 1, 3]] += 2.0; // window (0,0)
        let a = g.value(block.forward(&g, g.inp(base)));
        let b = g.value(block.forward(&g, g.inp(pert)));
        // Window (1,1) rows 4.. cols 4.. must be untouched.
        for y in 4..8 {
            for x in 4..8 {
                for ch in 0..c {
                    assert_eq!(a[[y, x, ch]], b[[y, x, ch]]);
                }
            }
        }
        // The perturbed window must change.
        assert!((0..c).any(|ch| a[[1, 1, ch]] != b[[1, 1, ch]]));
    }

    #[test]
    fn equal_displacements_share_bias_index() {
        let idx = rel_index_table(4);
        let n = 16;
        let at = |i: usize, j: usize| idx[i * n + j];
        // (1,1)->(2,3) and (0,0)->(1,2) share displacement (+1,+2).
        assert_eq!(at(1 * 4 + 1, 2 * 4 + 3), at(0, 1 * 4 + 2));
        // Opposite displacements differ.
        assert_ne!(at(0, 5), at(5, 0));
        let span = 7 * 7;
        assert!(idx.iter().all(|&k| k < span));
    }

    #[test]
    fn shifted_block_changes_cross_window_dependence() {
        let (h, w, c) = (8usize, 8usize, 8usize);
        let mut st = ParamStore::new();
        let block = SwinBlock::new(&mut st, "b", c, 1, 4, true, 0.0);
        st.init_all(5);
        let g = Graph::new(&st, false, 0);
        let base = rand_arr(&[h, w, c], 7);
        let mut pert = base.clone();
        pert[[3, 3, 0]] += 2.0;
        let a = g.value(block.forward(&g, g.inp(base)));
        let b = g.value(block.forward(&g, g.inp(pert)));
        // After a shift of 2, cell (4,4) shares a window with (3,3).
        assert!((0..c).any(|ch| a[[4, 4, ch]] != b[[4, 4, ch]]));
    }

    // Composed-path check through all three stages. The small eps keeps the
    // second-order FD truncation error (layer norm over few channels is
    // highly curved) below atol; per-op exactness is covered elsewhere.
    #[test]
    fn fd_encoder_params_on_toy_grid() {
        let mut st = ParamStore::new();
        let enc = VisualEncoder::new(&mut st, 16, 16, 8, 2, 4, 0.0);
        st.init_all(8);
        let occ = rand_arr(&[16, 16, 3], 10);
        let flow = rand_arr(&[16, 16, 4], 11);
        let map = rand_arr(&[16, 16, 3], 12);
        let ids: Vec<usize> = (0..st.len())
            .filter(|&i| {
                let n = st.name(i);
                n.starts_with("vis.proj0")
                    || n.starts_with("vis.stage0.win.wq")
                    || n.starts_with("vis.stage1.merge")
                    || n.starts_with("vis.stage2.win.rel_bias")
                    || n.starts_with("vis.stage2.shift.ff")
            })
            .collect();
        let rep = fd_check_params(
            &mut st,
            &ids,
            |g| {
                let p = enc.encode_visual(
                    g,
                    g.inp(occ.clone()),
                    g.inp(flow.clone()),
                    g.inp(map.clone()),
                );
                let v3 = p.v3;
                let s = g.shape(v3);
                let flat1 = g.reshape(p.v1, &[16 * 16 / 16 * 2]);
                let flat3 = g.reshape(v3, &[s[0] * s[1] * s[2]]);
                g.concat(0, &[flat1, flat3])
            },
            &FdSpec { max_checks: 3, eps: 2e-4, atol: 1e-3, ..FdSpec::default() },
        )
        .unwrap();
        assert!(rep.checked >= 12);
    }
}
