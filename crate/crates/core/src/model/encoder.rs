use rand_chacha::ChaCha8Rng;

use super::params::{Bound, EncoderParams, LayerIds, TransformIds};
use crate::autodiff::{Graph, Var};
use crate::error::{MpcError, Result};
use crate::sampling::InputLanes;
use crate::seed::substream;

/// One forward pass context: parameters bound onto a graph, plus the
/// dropout stream when training.
pub struct Forward<'p> {
    pub params: &'p EncoderParams,
    pub bound: Bound,
    dropout_rng: Option<(u64, ChaCha8Rng)>,
}

fn check_ids(name: &str, ids: &[usize], rows: usize) -> Result<()> {
    match ids.iter().find(|&&i| i >= rows) {
        Some(bad) => Err(MpcError::invalid(format!("{name} id {bad} is outside the table of {rows} rows"))),
        None => Ok(()),
    }
}

impl<'p> Forward<'p> {
    pub fn new(g: &mut Graph, params: &'p EncoderParams) -> Self {
        Forward {
            params,
            bound: params.bind(g),
            dropout_rng: None,
        }
    }

    /// Uses already-bound graph leaves, e.g. inside a gradient check.
    pub fn from_bound(params: &'p EncoderParams, bound: Bound) -> Self {
        Forward {
            params,
            bound,
            dropout_rng: None,
        }
    }

    /// Enables dropout (the graph must also be a training graph).
    pub fn with_dropout(mut self, seed: u64) -> Self {
        self.dropout_rng = Some((seed, substream(seed, "dropout", &[0])));
        self
    }

    /// Restarts dropout on stream `k` of the seed, so masks of one sample do
    /// not depend on which other samples were encoded before it.
    pub fn fork_dropout(&mut self, k: u64) {
        if let Some((seed, rng)) = self.dropout_rng.as_mut() {
            *rng = substream(*seed, "dropout", &[k]);
        }
    }

    pub fn var(&self, id: usize) -> Var {
        self.bound[id]
    }

    fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        let p = self.params.config.dropout;
        match self.dropout_rng.as_mut() {
            Some((_, rng)) => g.dropout(x, p, rng),
            None => x,
        }
    }

    pub fn layer_norm(&self, g: &mut Graph, x: Var, gain: usize, bias: usize) -> Result<Var> {
        let n = g.layer_norm(x);
        let s = g.mul_row(n, self.var(gain))?;
        g.add_row(s, self.var(bias))
    }

    pub fn dense(&self, g: &mut Graph, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = g.matmul(x, self.var(w))?;
        g.add_row(y, self.var(b))
    }

    /// Task-specific dense + GELU + layer norm.
    pub fn transform(&self, g: &mut Graph, x: Var, t: &TransformIds) -> Result<Var> {
        let y = self.dense(g, x, t.w, t.b)?;
        let y = g.gelu(y);
        self.layer_norm(g, y, t.ln_g, t.ln_b)
    }

    /// Transformed vectors at `positions` of the encoder output.
    pub fn rows_through(&self, g: &mut Graph, h: Var, positions: &[usize], t: &TransformIds) -> Result<Var> {
        let rows = g.gather_rows(h, positions)?;
        self.transform(g, rows, t)
    }

    /// Token vectors `[len, d]` of one input.
    pub fn encode(&mut self, g: &mut Graph, lanes: &InputLanes) -> Result<Var> {
        let params = self.params;
        let cfg = &params.config;
        let len = lanes.len();
        if len == 0 {
            return Err(MpcError::invalid("cannot encode an empty input"));
        }
        if len > cfg.max_seq_len {
            return Err(MpcError::invalid(format!("input length {len} exceeds max_seq_len {}", cfg.max_seq_len)));
        }
        let lane_lens = [
            lanes.position_ids.len(),
            lanes.segment_ids.len(),
            lanes.speaker_ids.len(),
            lanes.attention_mask.len(),
        ];
        if lane_lens.iter().any(|&l| l != len) {
            return Err(MpcError::shape("encode", format!("lane lengths {lane_lens:?} vs {len} tokens")));
        }
        let tokens: Vec<usize> = lanes.token_ids.iter().map(|&t| t as usize).collect();
        check_ids("token", &tokens, cfg.vocab_size)?;
        check_ids("position", &lanes.position_ids, cfg.max_seq_len)?;
        check_ids("segment", &lanes.segment_ids, 2)?;
        check_ids("interlocutor", &lanes.speaker_ids, cfg.speaker_rows())?;
        if !lanes.attention_mask.iter().any(|&m| m) {
            return Err(MpcError::invalid("attention mask has no active position"));
        }

        let ids = params.ids();
        let e_tok = g.embedding(self.var(ids.tok), &tokens)?;
        let e_pos = g.embedding(self.var(ids.pos), &lanes.position_ids)?;
        let e_seg = g.embedding(self.var(ids.seg), &lanes.segment_ids)?;
        let e_spk = g.embedding(self.var(ids.spk), &lanes.speaker_ids)?;
        let x = g.add(e_tok, e_pos)?;
        let x = g.add(x, e_seg)?;
        let x = g.add(x, e_spk)?;
        let x = self.layer_norm(g, x, ids.emb_ln_g, ids.emb_ln_b)?;
        let mut x = self.dropout(g, x);

        let mask: Vec<bool> = (0..len).flat_map(|_| lanes.attention_mask.iter().copied()).collect();
        for layer in &ids.layers {
            x = self.block(g, x, layer, &mask)?;
        }
        Ok(x)
    }

    fn block(&mut self, g: &mut Graph, x: Var, l: &LayerIds, mask: &[bool]) -> Result<Var> {
        let params = self.params;
        let cfg = &params.config;
        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let q = self.dense(g, x, l.wq, l.bq)?;
        let k = self.dense(g, x, l.wk, l.bk)?;
        let v = self.dense(g, x, l.wv, l.bv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let p = g.masked_softmax(s, mask)?;
            ctx.push(g.matmul(p, vh)?);
        }
        let c = if heads == 1 { ctx[0] } else { g.concat(&ctx)? };
        let a = self.dense(g, c, l.wo, l.bo)?;
        let a = self.dropout(g, a);
        let r = g.add(x, a)?;
        let x = self.layer_norm(g, r, l.ln1_g, l.ln1_b)?;

        let f = self.dense(g, x, l.w1, l.b1)?;
        let f = g.gelu(f);
        let f = self.dense(g, f, l.w2, l.b2)?;
        let f = self.dropout(g, f);
        let r = g.add(x, f)?;
        self.layer_norm(g, r, l.ln2_g, l.ln2_b)
    }
}
