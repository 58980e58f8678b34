//! Time series memory: independent gated-recurrence stacks, one per
//! prediction head, consume that head's previous output concatenated with a
//! learned per-step covariate and emit a memory feature that is added to
//! the head's guiding feature. The recurrence runs per spatial position
//! with shared weights; hidden state starts at zero.

use ndarray::{ArrayD, IxDyn};

use crate::context::ContextTokens;
use crate::error::{HgError, Result};
use crate::graph::{Graph, Val};
use crate::nn::{GruCell, Init, Mha, ParamStore};

/// Learned covariate embeddings, one row per future step 1..=T.
pub struct Covariates {
    table: usize,
    pub t_max: usize,
}

impl Covariates {
    pub fn new(st: &mut ParamStore, name: &str, t_max: usize, c_cov: usize) -> Self {
        Covariates {
            table: st.register(name, &[t_max, c_cov], Init::TruncNormal(0.02)),
            t_max,
        }
    }

    /// Embedding row for future step `t` in 1..=T, shaped `[1, C_cov]`.
    pub fn row(&self, g: &Graph, t: usize) -> Result<Val> {
        if t == 0 || t > self.t_max {
            return Err(HgError::Contract(format!(
                "covariate step {t} outside 1..={}",
                self.t_max
            )));
        }
        Ok(g.narrow(g.param(self.table), 0, t - 1, 1))
    }
}

/// Rolling state of one memory stack: per-layer hidden states `[S, C]` and
/// the step index they correspond to (0 before the first step).
#[derive(Debug)]
pub struct MemoryState {
    pub h: Vec<Val>,
    pub t: usize,
}

/// Multi-layer gated recurrence over flattened spatial positions.
pub struct GruStack {
    pub cells: Vec<GruCell>,
    hidden: usize,
}

impl GruStack {
    pub fn new(st: &mut ParamStore, name: &str, feat: usize, c_cov: usize, layers: usize) -> Self {
        assert!(layers >= 1, "memory stack needs at least one layer");
        let cells = (0..layers)
            .map(|i| {
                let in_dim = if i == 0 { feat + c_cov } else { feat };
                GruCell::new(st, &format!("{name}.l{i}"), in_dim, feat)
            })
            .collect();
        GruStack { cells, hidden: feat }
    }

    /// All-zero hidden state covering `s` spatial positions.
    pub fn initial_state(&self, g: &Graph, s: usize) -> MemoryState {
        let h = self
            .cells
            .iter()
            .map(|_| g.inp(ArrayD::zeros(IxDyn(&[s, self.hidden]))))
            .collect();
        MemoryState { h, t: 0 }
    }

    /// One factor of the autoregressive rollout: consumes the previous head
    /// output `y_prev [S, C]` and the covariate for step `t`, returns the
    /// memory feature `m [S, C]` and the advanced state.
    pub fn memory_step(
        &self,
        g: &Graph,
        y_prev: Val,
        c_t: Val,
        state: &MemoryState,
        t: usize,
    ) -> Result<(Val, MemoryState)> {
        if state.t + 1 != t {
            return Err(HgError::Sequencing { expected: state.t + 1, got: t });
        }
        let s = g.shape(y_prev)[0];
        let cs = g.shape(c_t);
        let c_row = if cs.len() == 1 { g.reshape(c_t, &[1, cs[0]]) } else { c_t };
        let c_cov = g.shape(c_row)[1];
        let c_rows = g.add(g.inp(ArrayD::zeros(IxDyn(&[s, c_cov]))), c_row);
        let mut x = g.concat(1, &[y_prev, c_rows]);
        let mut h_next = Vec::with_capacity(self.cells.len());
        for (cell, &h) in self.cells.iter().zip(&state.h) {
            let hn = cell.step(g, x, h);
            h_next.push(hn);
            x = hn;
        }
        Ok((x, MemoryState { h: h_next, t }))
    }
}

/// Head output cross-attention: FGAT output rows query the encoded context
/// tokens and the result is added back residually, yielding the y_t that
/// feeds both the FPN head and the next memory step.
pub struct HeadOutput {
    mha: Mha,
}

impl HeadOutput {
    pub fn new(st: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Self {
        HeadOutput { mha: Mha::new(st, &format!("{name}.mha"), dim, heads) }
    }

    pub fn forward(&self, g: &Graph, fgat_out: Val, ctx: &ContextTokens) -> Val {
        let att = self.mha.forward(g, fgat_out, ctx.tokens, Some(ctx.mask.clone()), None);
        g.add(fgat_out, att)
    }
}
