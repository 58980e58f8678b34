//! Context encoder: agent history recurrence plus type embedding, agent-agent
//! self-attention, map polyline encoding, and agent-map cross-attention,
//! producing one context token per agent.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::error::{HgError, Result};
use crate::features::F_AGENT;
use crate::graph::{Graph, Val};
use crate::nn::{Act, LayerNorm, Linear, Lstm, Mha, Mlp, ParamStore};

const TYPE_EMB: usize = 16;
const N_TYPES: usize = 3;

/// Per-agent context tokens plus their validity mask.
pub struct ContextTokens {
    pub tokens: Val,
    pub mask: Arc<ArrayD<bool>>,
}

/// One pre-norm transformer block; self-attention when `kv` is `None`.
pub struct EncBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    mha: Mha,
    ln_ff: LayerNorm,
    ff: Mlp,
}

impl EncBlock {
    pub fn new(st: &mut ParamStore, name: &str, dim: usize, heads: usize, dropout: f32) -> Self {
        Self::with_act(st, name, dim, heads, dropout, Act::Gelu)
    }

    pub fn with_act(
        st: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f32,
        act: Act,
    ) -> Self {
        EncBlock {
            ln_q: LayerNorm::new(st, &format!("{name}.ln_q"), dim),
            ln_kv: LayerNorm::new(st, &format!("{name}.ln_kv"), dim),
            mha: Mha::new(st, &format!("{name}.mha"), dim, heads),
            ln_ff: LayerNorm::new(st, &format!("{name}.ln_ff"), dim),
            ff: Mlp::new(st, &format!("{name}.ff"), &[dim, 2 * dim, dim], act, dropout),
        }
    }

    pub fn forward(
        &self,
        g: &Graph,
        x: Val,
        kv: Option<Val>,
        mask: Option<Arc<ArrayD<bool>>>,
    ) -> Val {
        let q = self.ln_q.forward(g, x);
        let kvn = match kv {
            Some(other) => self.ln_kv.forward(g, other),
            None => q,
        };
        let att = self.mha.forward(g, q, kvn, mask, None);
        let x = g.add(x, att);
        let ff = self.ff.forward(g, self.ln_ff.forward(g, x));
        g.add(x, ff)
    }
}

pub struct ContextEncoder {
    lstm: Lstm,
    type_table: usize,
    hist_proj: Linear,
    agent_blocks: Vec<EncBlock>,
    map_mlp: Mlp,
    map_block: EncBlock,
    cross_block: EncBlock,
}

impl ContextEncoder {
    pub fn new(
        st: &mut ParamStore,
        d: usize,
        heads: usize,
        map_in: usize,
        dropout: f32,
    ) -> Self {
        ContextEncoder {
            lstm: Lstm::new(st, "ctx.hist_lstm", F_AGENT, d),
            type_table: st.register("ctx.type_emb", &[N_TYPES, TYPE_EMB], crate::nn::Init::TruncNormal(0.02)),
            hist_proj: Linear::new(st, "ctx.hist_proj", d + TYPE_EMB, d),
            agent_blocks: (0..2)
                .map(|i| EncBlock::new(st, &format!("ctx.agent{i}"), d, heads, dropout))
                .collect(),
            map_mlp: Mlp::new(st, "ctx.map_mlp", &[map_in, d, d], Act::Gelu, dropout),
            map_block: EncBlock::new(st, "ctx.map_attn", d, heads, dropout),
            cross_block: EncBlock::new(st, "ctx.cross", d, heads, dropout),
        }
    }

    /// LSTM over each agent's history, concatenated with its type embedding
    /// and projected to D.
    pub fn encode_agent_history(&self, g: &Graph, feats: Val, types: &[usize]) -> Val {
        let hidden = self.lstm.forward_last(g, feats);
        let te = g.gather_rows(g.param(self.type_table), Arc::new(types.to_vec()));
        let cat = g.concat(1, &[hidden, te]);
        self.hist_proj.forward(g, cat)
    }

    /// Two pre-norm self-attention blocks over agent tokens. Masked agents
    /// are excluded as keys; an all-masked scene is an error.
    pub fn agent_self_attention(&self, g: &Graph, tokens: Val, mask: &[bool]) -> Result<Val> {
        if !mask.iter().any(|&m| m) {
            return Err(HgError::EmptyScene);
        }
        let m = Arc::new(
            ArrayD::from_shape_vec(IxDyn(&[mask.len()]), mask.to_vec()).unwrap(),
        );
        let mut x = tokens;
        for b in &self.agent_blocks {
            x = b.forward(g, x, None, Some(m.clone()));
        }
        Ok(x)
    }

    /// Per-segment MLP over concatenated waypoint features, then one
    /// self-attention block across segments.
    pub fn encode_map(&self, g: &Graph, map_feats: Val, mask: &[bool]) -> Val {
        let tokens = self.map_mlp.forward(g, map_feats);
        if !mask.iter().any(|&m| m) {
            return tokens;
        }
        let m = Arc::new(
            ArrayD::from_shape_vec(IxDyn(&[mask.len()]), mask.to_vec()).unwrap(),
        );
        self.map_block.forward(g, tokens, None, Some(m))
    }

    /// Agents query the map tokens; with every map token masked the
    /// attention contributes zero and the residual passes through.
    pub fn agent_map_cross_attention(
        &self,
        g: &Graph,
        agent_tokens: Val,
        map_tokens: Val,
        map_mask: &[bool],
    ) -> Val {
        let m = Arc::new(
            ArrayD::from_shape_vec(IxDyn(&[map_mask.len()]), map_mask.to_vec()).unwrap(),
        );
        self.cross_block.forward(g, agent_tokens, Some(map_tokens), Some(m))
    }

    /// Full pass producing the per-agent context tokens.
    pub fn forward(
        &self,
        g: &Graph,
        agent_feats: Val,
        agent_types: &[usize],
        agent_mask: &[bool],
        map_feats: Val,
        map_mask: &[bool],
    ) -> Result<ContextTokens> {
        let hist = self.encode_agent_history(g, agent_feats, agent_types);
        let agents = self.agent_self_attention(g, hist, agent_mask)?;
        let map = self.encode_map(g, map_feats, map_mask);
        let tokens = self.agent_map_cross_attention(g, agents, map, map_mask);
        let mask = Arc::new(
            ArrayD::from_shape_vec(IxDyn(&[agent_mask.len()]), agent_mask.to_vec()).unwrap(),
        );
        Ok(ContextTokens { tokens, mask })
    }
}
