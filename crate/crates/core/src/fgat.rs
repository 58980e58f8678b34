//! Feature-Guided Attention: keys and values are sampled from the projected
//! query map at reference points deformed by offsets predicted from a
//! separate guiding feature, then combined by global multi-head
//! cross-attention with a relative positional bias over the reference grid.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::error::{HgError, Result};
use crate::graph::{Graph, Val};
use crate::nn::{attend, Act, Init, Linear, Mlp, ParamStore};

/// The uniform mesh grid r with r[y, x] = (x, y), flattened to `[S, 2]`.
pub fn reference_grid(h: usize, w: usize) -> ArrayD<f32> {
    let mut r = ArrayD::<f32>::zeros(IxDyn(&[h * w, 2]));
    for y in 0..h {
        for x in 0..w {
            r[[y * w + x, 0]] = x as f32;
            r[[y * w + x, 1]] = y as f32;
        }
    }
    r
}

/// Relative-displacement index for every (query, key) pair of reference
/// positions on an `h` x `w` grid, into a `(2h-1)(2w-1)` table.
fn rel_index_grid(h: usize, w: usize) -> Vec<usize> {
    let s = h * w;
    let span_x = 2 * w - 1;
    let mut idx = Vec::with_capacity(s * s);
    for i in 0..s {
        let (yi, xi) = (i / w, i % w);
        for j in 0..s {
            let (yj, xj) = (j / w, j % w);
            let dy = (yi as isize - yj as isize + h as isize - 1) as usize;
            let dx = (xi as isize - xj as isize + w as isize - 1) as usize;
            idx.push(dy * span_x + dx);
        }
    }
    idx
}

pub struct Fgat {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    offset_mlp: Mlp,
    bias_table: usize,
    pub heads: usize,
    pub sigma_off: f32,
    h: usize,
    w: usize,
}

impl Fgat {
    pub fn new(
        st: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        h: usize,
        w: usize,
        sigma_off: f32,
    ) -> Self {
        let span = (2 * h - 1) * (2 * w - 1);
        Fgat {
            wq: Linear::no_bias(st, &format!("{name}.wq"), dim, dim),
            wk: Linear::no_bias(st, &format!("{name}.wk"), dim, dim),
            wv: Linear::no_bias(st, &format!("{name}.wv"), dim, dim),
            wo: Linear::no_bias(st, &format!("{name}.wo"), dim, dim),
            offset_mlp: Mlp::new_zero_final(
                st,
                &format!("{name}.offset"),
                &[dim, dim / 2, 2],
                Act::Relu,
            ),
            bias_table: st.register(&format!("{name}.rel_bias"), &[span, heads], Init::Zeros),
            heads,
            sigma_off,
            h,
            w,
        }
    }

    /// Δr = σ_off · tanh(MLP(G)), strictly inside (−σ_off, σ_off).
    /// f32 tanh saturates to exactly ±1, so the scale is shrunk by 1e-6 to
    /// keep the bound strict under rounding.
    pub fn generate_offsets(&self, g: &Graph, guide: Val) -> Val {
        let raw = self.offset_mlp.forward(g, guide);
        g.scale(g.tanh(raw), self.sigma_off * (1.0 - 1e-6))
    }

    fn bias(&self, g: &Graph) -> Val {
        let s = self.h * self.w;
        let idx = Arc::new(rel_index_grid(self.h, self.w));
        let b = g.gather_rows(g.param(self.bias_table), idx);
        let b = g.reshape(b, &[s, s, self.heads]);
        g.permute(b, &[2, 0, 1])
    }

    fn check_shapes(&self, g: &Graph, q: Val, guide: Val) -> Result<()> {
        let (qs, gs) = (g.shape(q), g.shape(guide));
        let s = self.h * self.w;
        if qs != gs || qs[0] != s {
            return Err(HgError::Contract(format!(
                "fgat expects Q and G of shape [{s}, C], got {qs:?} and {gs:?}"
            )));
        }
        Ok(())
    }

    /// Full FGAT: Q' = Q W_q; x = bilinear(Q' as a grid, r + Δr(G));
    /// K' = x W_k, V' = x W_v; global MHCA(Q', K', V') with relative bias.
    pub fn forward(&self, g: &Graph, q: Val, guide: Val) -> Result<Val> {
        self.check_shapes(g, q, guide)?;
        let c = g.shape(q)[1];
        let qp = self.wq.forward(g, q);
        let offsets = self.generate_offsets(g, guide);
        let points = g.add(g.input(reference_grid(self.h, self.w), "ref_grid"), offsets);
        let q_grid = g.reshape(qp, &[self.h, self.w, c]);
        let x = g.bilinear_sample(q_grid, points);
        let kp = self.wk.forward(g, x);
        let vp = self.wv.forward(g, x);
        let att = attend(g, qp, kp, vp, self.heads, None, Some(self.bias(g)));
        Ok(self.wo.forward(g, att))
    }

    /// Ablation fallback: standard MHCA with queries from Q and keys/values
    /// from the guide, sharing this module's projections. The offset MLP and
    /// bias table are not touched, so they keep their initialization.
    pub fn plain_cross_attention_fallback(&self, g: &Graph, q: Val, guide: Val) -> Result<Val> {
        self.check_shapes(g, q, guide)?;
        let qp = self.wq.forward(g, q);
        let kp = self.wk.forward(g, guide);
        let vp = self.wv.forward(g, guide);
        let att = attend(g, qp, kp, vp, self.heads, None, None);
        Ok(self.wo.forward(g, att))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_check_inputs, fd_check_params, FdSpec};
    use crate::graph::Arr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0f32))
    }

    fn setup(h: usize, w: usize, c: usize, seed: u64) -> (ParamStore, Fgat) {
        let mut st = ParamStore::new();
        let f = Fgat::new(&mut st, "f", c, 2, h, w, 1.0);
        st.init_all(seed);
        (st, f)
    }

    #[test]
    fn offsets_bounded_by_sigma() {
        let (mut st, f) = setup(4, 4, 8, 1);
        // Randomize the zero-initialized final layer so offsets are nonzero.
        for i in 0..st.len() {
            if st.name(i).starts_with("f.offset") {
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                st.value_mut(i).mapv_inplace(|_| rng.random_range(-2.0..2.0));
            }
        }
        let g = Graph::new(&st, false, 0);
        let mut worst = 0f32;
        for s in 0..100 {
            let guide = g.inp(rand_arr(&[16, 8], 100 + s));
            let off = g.value(f.generate_offsets(&g, guide));
            worst = worst.max(off.iter().fold(0f32, |a, &v| a.max(v.abs())));
        }
        assert!(worst < 1.0, "offsets must stay inside (-sigma, sigma)");
        assert!(worst > 0.5, "randomized mlp should reach near the bound");
    }

    #[test]
    fn zero_init_reduces_to_self_attention_of_projected_q() {
        let (st, f) = setup(4, 4, 16, 2);
        let g = Graph::new(&st, false, 0);
        let q = g.inp(rand_arr(&[16, 16], 5));
        let guide = g.inp(rand_arr(&[16, 16], 6));
        let out = g.value(f.forward(&g, q, guide).unwrap());
        // Reference: x = Q' exactly, zero bias.
        let qp = f.wq.forward(&g, q);
        let kp = f.wk.forward(&g, qp);
        let vp = f.wv.forward(&g, qp);
        let att = attend(&g, qp, kp, vp, f.heads, None, None);
        let reference = g.value(f.wo.forward(&g, att));
        let diff = out
            .iter()
            .zip(reference.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(diff < 1e-5, "identity reduction diff {diff}");
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let (st, f) = setup(4, 4, 8, 3);
        let g = Graph::new(&st, false, 0);
        let q = g.inp(rand_arr(&[16, 8], 1));
        let bad = g.inp(rand_arr(&[8, 8], 2));
        assert!(matches!(f.forward(&g, q, bad), Err(HgError::Contract(_))));
        assert!(matches!(
            f.plain_cross_attention_fallback(&g, bad, q),
            Err(HgError::Contract(_))
        ));
    }

    #[test]
    fn output_finite_for_large_inputs() {
        let (st, f) = setup(4, 4, 8, 4);
        let g = Graph::new(&st, false, 0);
        let q = g.inp(rand_arr(&[16, 8], 7).mapv(|v| v * 1e3));
        let guide = g.inp(rand_arr(&[16, 8], 8).mapv(|v| v * 1e3));
        let out = f.forward(&g, q, guide).unwrap();
        assert!(g.value(out).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fallback_with_self_guide_is_self_attention() {
        let (st, f) = setup(3, 3, 8, 5);
        let g = Graph::new(&st, false, 0);
        let q = g.inp(rand_arr(&[9, 8], 9));
        let out = g.value(f.plain_cross_attention_fallback(&g, q, q).unwrap());
        let qp = f.wq.forward(&g, q);
        let kp = f.wk.forward(&g, q);
        let vp = f.wv.forward(&g, q);
        let reference = g.value(f.wo.forward(&g, attend(&g, qp, kp, vp, f.heads, None, None)));
        assert_eq!(out, reference);
    }

    #[test]
    fn fd_full_forward_gradient() {
        // Randomize offsets and bias so the deformable path is exercised.
        let (mut st, f) = setup(4, 4, 8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for i in 0..st.len() {
            if st.name(i).starts_with("f.offset") || st.name(i).contains("rel_bias") {
                st.value_mut(i).mapv_inplace(|_| rng.random_range(-0.3..0.3));
            }
        }
        let q = rand_arr(&[16, 8], 41);
        let guide = rand_arr(&[16, 8], 42);
        let rep = fd_check_inputs(
            &st,
            &[q.clone(), guide.clone()],
            |g, ins| f.forward(g, ins[0], ins[1]).unwrap(),
            &FdSpec { max_checks: 12, ..FdSpec::default() },
        )
        .unwrap();
        assert!(rep.checked >= 20);

        let ids: Vec<usize> = (0..st.len()).collect();
        let rep = fd_check_params(
            &mut st,
            &ids,
            |g| f.forward(g, g.inp(q.clone()), g.inp(guide.clone())).unwrap(),
            &FdSpec { max_checks: 3, ..FdSpec::default() },
        )
        .unwrap();
        assert!(rep.checked >= 20);
    }
}
