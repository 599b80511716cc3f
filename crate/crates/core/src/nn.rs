//! Layers shared by the encoders and the fusion networks.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive logit bias applied to padded keys.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(fan_in, fan_out));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Linear { weight, bias }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.g.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.g.layer_norm_rows(x, g, b, LAYER_NORM_EPS)
    }
}

#[derive(Debug)]
pub struct AttentionOutput {
    pub out: Var,
    /// Softmax weights per head, each `[B, Lq, Lk]`.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention with full-width projections;
/// head `i` uses column block `i` of each projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("d = {d} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            wq: store.add(format!("{name}.wq"), init.xavier(d, d)),
            wk: store.add(format!("{name}.wk"), init.xavier(d, d)),
            wv: store.add(format!("{name}.wv"), init.xavier(d, d)),
            wo: store.add(format!("{name}.wo"), init.xavier(d, d)),
            heads,
            d,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn projections(&self, s: &mut Session, query: Var, kv: Var) -> Result<(Var, Var, Var)> {
        let (wq, wk, wv) = (s.param(self.wq), s.param(self.wk), s.param(self.wv));
        Ok((s.g.matmul(query, wq)?, s.g.matmul(kv, wk)?, s.g.matmul(kv, wv)?))
    }

    /// Per-head query/key/value matrices for `head`.
    pub fn project_qkv(&self, s: &mut Session, query: Var, kv: Var, head: usize) -> Result<(Var, Var, Var)> {
        if head >= self.heads {
            return Err(Error::Config(format!(
                "head {head} out of range ({} heads)",
                self.heads
            )));
        }
        let (q, k, v) = self.projections(s, query, kv)?;
        let dh = self.head_dim();
        Ok((
            s.g.slice_last(q, head * dh, dh)?,
            s.g.slice_last(k, head * dh, dh)?,
            s.g.slice_last(v, head * dh, dh)?,
        ))
    }

    /// `query[B, Lq, d]` attends over `kv[B, Lk, d]`; `key_mask` is an additive `[B, Lk]` bias.
    pub fn forward(&self, s: &mut Session, query: Var, kv: Var, key_mask: Option<&[f64]>) -> Result<AttentionOutput> {
        let (q, k, v) = self.projections(s, query, kv)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = s.g.slice_last(q, h * dh, dh)?;
            let kh = s.g.slice_last(k, h * dh, dh)?;
            let vh = s.g.slice_last(v, h * dh, dh)?;
            let scores = s.g.bmm_nt(qh, kh)?;
            let mut scores = s.g.scale(scores, scale);
            if let Some(mask) = key_mask {
                scores = s.g.add_key_mask(scores, mask)?;
            }
            let w = s.g.softmax_rows(scores);
            heads.push(s.g.bmm(w, vh)?);
            weights.push(w);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            s.g.concat_last(&heads)?
        };
        let wo = s.param(self.wo);
        let out = s.g.matmul(cat, wo)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Post-norm encoder layer: `h = LN(x + MHA(x, x))`, `out = LN(h + FFN(h))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ln2: LayerNorm,
    pub dropout: f64,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), d, heads)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ffn_in: Linear::new(store, init, &format!("{name}.ffn_in"), d, 4 * d, true),
            ffn_out: Linear::new(store, init, &format!("{name}.ffn_out"), 4 * d, d, true),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            dropout,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, key_mask: Option<&[f64]>) -> Result<AttentionOutput> {
        let att = self.attn.forward(s, x, x, key_mask)?;
        let res = s.g.add(x, att.out)?;
        let h = self.ln1.forward(s, res)?;
        let f = self.ffn_in.forward(s, h)?;
        let f = s.g.relu(f);
        let f = self.ffn_out.forward(s, f)?;
        let f = s.dropout(f, self.dropout)?;
        let res = s.g.add(h, f)?;
        let out = self.ln2.forward(s, res)?;
        Ok(AttentionOutput {
            out,
            weights: att.weights,
        })
    }
}
