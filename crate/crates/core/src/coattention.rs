//! Matching-aware co-attention networks.
//!
//! One network is centered on a modality: that modality supplies the queries
//! and the other supplies keys and values. The multi-head co-attention output
//! is scaled row by row with a gate computed from the matching logits,
//!
//! ```text
//! alpha = sigmoid(H^M W^M + b^M)            // one scalar per query position
//! H^C   = alpha (.) MH-Att(query, kv)       // MH-Att includes the W' projection
//! O~    = LN(query + H^C)
//! H_S   = LN(O~ + MH-Att(O~, O~))
//! O     = LN(H_S + FFN(H_S))
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::MATCH_DIM;
use crate::nn::{LayerNorm, MultiHeadAttention, TransformerLayer};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Center {
    Text,
    Vision,
}

/// `Matching` applies the learned gate; `Open` skips it (alpha = 1), which is
/// plain co-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Matching,
    Open,
}

#[derive(Debug)]
pub struct CoAttentionOutput {
    pub hc: Var,
    /// Per-head co-attention weights `[B, Lq, Lkv]`.
    pub weights: Vec<Var>,
    /// Gate values `[B, Lq]`, absent for an open gate.
    pub gate: Option<Var>,
}

#[derive(Debug)]
pub struct NetworkOutput {
    pub fusion: Var,
    pub coattention_weights: Vec<Var>,
    pub gate: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct CoAttentionNetwork {
    pub center: Center,
    pub query_len: usize,
    pub attn: MultiHeadAttention,
    pub gate_weight: ParamId,
    pub gate_bias: ParamId,
    pub ln: LayerNorm,
    pub self_attn: TransformerLayer,
    pub dropout: f64,
}

impl CoAttentionNetwork {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        center: Center,
        d: usize,
        heads: usize,
        query_len: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(CoAttentionNetwork {
            center,
            query_len,
            attn: MultiHeadAttention::new(store, init, &format!("{name}.coattn"), d, heads)?,
            gate_weight: store.add(format!("{name}.gate.weight"), init.xavier(MATCH_DIM, query_len)),
            gate_bias: store.add(format!("{name}.gate.bias"), Tensor::zeros(&[query_len])),
            ln: LayerNorm::new(store, &format!("{name}.coattn_ln"), d),
            self_attn: TransformerLayer::new(store, init, &format!("{name}.self"), d, heads, dropout)?,
            dropout,
        })
    }

    pub fn project_qkv(&self, s: &mut Session, query: Var, kv: Var, head: usize) -> Result<(Var, Var, Var)> {
        self.attn.project_qkv(s, query, kv, head)
    }

    /// `alpha = sigmoid(hm W^M + b^M)`, shape `[B, Lq]`.
    pub fn gate(&self, s: &mut Session, hm: Var) -> Result<Var> {
        let w = s.param(self.gate_weight);
        let b = s.param(self.gate_bias);
        let z = s.g.matmul(hm, w)?;
        let z = s.g.add_broadcast(z, b)?;
        Ok(s.g.sigmoid(z))
    }

    pub fn itm_gated_coattention(
        &self,
        s: &mut Session,
        query: Var,
        kv: Var,
        kv_mask: Option<&[f64]>,
        hm: Var,
        mode: GateMode,
    ) -> Result<CoAttentionOutput> {
        let qshape = s.g.shape(query).to_vec();
        let gate_len = s.store().get(self.gate_weight).shape()[1];
        if qshape.len() != 3 || qshape[1] != gate_len {
            return Err(Error::Config(format!(
                "gate length {gate_len} does not match query sequence length {:?}",
                qshape.get(1)
            )));
        }
        let att = self.attn.forward(s, query, kv, kv_mask)?;
        let (hc, gate) = match mode {
            GateMode::Open => (att.out, None),
            GateMode::Matching => {
                let alpha = self.gate(s, hm)?;
                (s.g.mul_rows(att.out, alpha)?, Some(alpha))
            }
        };
        let hc = s.dropout(hc, self.dropout)?;
        Ok(CoAttentionOutput {
            hc,
            weights: att.weights,
            gate,
        })
    }

    /// `LN(query + hc)`
    pub fn coattention_unit(&self, s: &mut Session, query: Var, hc: Var) -> Result<Var> {
        let res = s.g.add(query, hc)?;
        self.ln.forward(s, res)
    }

    pub fn self_attention_unit(&self, s: &mut Session, x: Var, key_mask: Option<&[f64]>) -> Result<Var> {
        Ok(self.self_attn.forward(s, x, key_mask)?.out)
    }

    /// Full network on encoded features. `text_mask` is the additive pad mask of the text side.
    pub fn forward(
        &self,
        s: &mut Session,
        text: Var,
        image: Var,
        text_mask: &[f64],
        hm: Var,
        mode: GateMode,
    ) -> Result<NetworkOutput> {
        let (query, kv, kv_mask, query_mask) = match self.center {
            Center::Text => (text, image, None, Some(text_mask)),
            Center::Vision => (image, text, Some(text_mask), None),
        };
        let co = self.itm_gated_coattention(s, query, kv, kv_mask, hm, mode)?;
        let unit = self.coattention_unit(s, query, co.hc)?;
        let fusion = self.self_attention_unit(s, unit, query_mask)?;
        Ok(NetworkOutput {
            fusion,
            coattention_weights: co.weights,
            gate: co.gate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net(center: Center, d: usize, heads: usize, lq: usize, seed: u64) -> (ParamStore, CoAttentionNetwork) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let n = CoAttentionNetwork::new(&mut store, &mut init, "net", center, d, heads, lq, 0.0).unwrap();
        (store, n)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
        store.set_values(id, t.data()).unwrap();
    }

    #[test]
    fn identity_and_zero_projections() {
        let (mut store, n) = net(Center::Vision, 4, 2, 3, 1);
        set(&mut store, n.attn.wq, Tensor::eye(4));
        set(&mut store, n.attn.wk, Tensor::eye(4));
        set(&mut store, n.attn.wv, Tensor::zeros(&[4, 4]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let qx = random(&[1, 3, 4], &mut rng);
        let kx = random(&[1, 2, 4], &mut rng);
        let mut s = Session::eval(&store);
        let (q, k) = (s.g.constant(&qx), s.g.constant(&kx));
        let (q1, k1, v1) = n.project_qkv(&mut s, q, k, 1).unwrap();
        let expect: Vec<f64> = (0..3).flat_map(|r| qx.data()[r * 4 + 2..r * 4 + 4].to_vec()).collect();
        assert_eq!(s.g.value(q1), expect.as_slice());
        assert_eq!(s.g.shape(k1), &[1, 2, 2]);
        assert!(s.g.value(v1).iter().all(|&v| v == 0.0));
        assert!(n.project_qkv(&mut s, q, k, 2).is_err());
    }

    #[test]
    fn projection_matches_loop_oracle() {
        let (store, n) = net(Center::Text, 6, 3, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let qx = random(&[2, 5, 6], &mut rng);
        let kx = random(&[2, 4, 6], &mut rng);
        let mut s = Session::eval(&store);
        let (q, k) = (s.g.constant(&qx), s.g.constant(&kx));
        let head = 2;
        let (q2, _, v2) = n.project_qkv(&mut s, q, k, head).unwrap();
        let wq = store.get(n.attn.wq).data();
        let wv = store.get(n.attn.wv).data();
        for b in 0..2 {
            for r in 0..5 {
                for c in 0..2 {
                    let mut acc = 0.0;
                    for i in 0..6 {
                        acc += qx.data()[(b * 5 + r) * 6 + i] * wq[i * 6 + head * 2 + c];
                    }
                    assert_abs_diff_eq!(s.g.value(q2)[(b * 5 + r) * 2 + c], acc, epsilon = 1e-12);
                }
            }
            for r in 0..4 {
                for c in 0..2 {
                    let mut acc = 0.0;
                    for i in 0..6 {
                        acc += kx.data()[(b * 4 + r) * 6 + i] * wv[i * 6 + head * 2 + c];
                    }
                    assert_abs_diff_eq!(s.g.value(v2)[(b * 4 + r) * 2 + c], acc, epsilon = 1e-12);
                }
            }
        }
    }

    fn gated(
        store: &ParamStore,
        n: &CoAttentionNetwork,
        qx: &Tensor,
        kx: &Tensor,
        hm: [f64; 2],
        mode: GateMode,
    ) -> Vec<f64> {
        let mut s = Session::eval(store);
        let (q, k) = (s.g.constant(qx), s.g.constant(kx));
        let hm = s.g.constant_raw(&[1, 2], hm.to_vec()).unwrap();
        let out = n.itm_gated_coattention(&mut s, q, k, None, hm, mode).unwrap();
        s.g.value(out.hc).to_vec()
    }

    #[test]
    fn saturated_gate_closes_and_opens() {
        let (mut store, n) = net(Center::Vision, 8, 2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let qx = random(&[1, 3, 8], &mut rng);
        let kx = random(&[1, 4, 8], &mut rng);
        set(&mut store, n.gate_weight, Tensor::zeros(&[2, 3]));

        set(&mut store, n.gate_bias, Tensor::full(&[3], -50.0));
        let closed = gated(&store, &n, &qx, &kx, [5.0, -5.0], GateMode::Matching);
        assert!(closed.iter().all(|v| v.abs() < 1e-20));

        set(&mut store, n.gate_bias, Tensor::full(&[3], 50.0));
        let open = gated(&store, &n, &qx, &kx, [-5.0, 5.0], GateMode::Matching);
        let plain = gated(&store, &n, &qx, &kx, [0.0, 0.0], GateMode::Open);
        for (a, b) in open.iter().zip(&plain) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    /// Two query rows, two keys, one head, hand-set weights; evaluated scalar by scalar.
    #[test]
    fn tiny_instance_matches_scalar_oracle() {
        let (mut store, n) = net(Center::Vision, 2, 1, 2, 4);
        let wq = [0.5, -0.2, 0.1, 0.9];
        let wk = [1.0, 0.3, -0.4, 0.2];
        let wv = [0.7, 0.0, 0.2, -1.1];
        let wo = [1.0, 0.5, -0.5, 1.0];
        let gw = [0.3, -0.2, 0.1, 0.4];
        let gb = [0.05, -0.1];
        for (id, w) in [
            (n.attn.wq, &wq[..]),
            (n.attn.wk, &wk),
            (n.attn.wv, &wv),
            (n.attn.wo, &wo),
            (n.gate_weight, &gw),
            (n.gate_bias, &gb),
        ] {
            store.set_values(id, w).unwrap();
        }
        let qx = [[0.2, -0.4], [1.0, 0.5]];
        let kx = [[-0.3, 0.8], [0.6, 0.1]];
        let hm = [1.5, -2.0];

        let mm = |x: &[f64; 2], w: &[f64]| [x[0] * w[0] + x[1] * w[2], x[0] * w[1] + x[1] * w[3]];
        let q: Vec<[f64; 2]> = qx.iter().map(|x| mm(x, &wq)).collect();
        let k: Vec<[f64; 2]> = kx.iter().map(|x| mm(x, &wk)).collect();
        let v: Vec<[f64; 2]> = kx.iter().map(|x| mm(x, &wv)).collect();
        let mut expect = Vec::new();
        for r in 0..2 {
            let scores: Vec<f64> = (0..2)
                .map(|c| (q[r][0] * k[c][0] + q[r][1] * k[c][1]) / 2f64.sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let a: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
            let att = [a[0] * v[0][0] + a[1] * v[1][0], a[0] * v[0][1] + a[1] * v[1][1]];
            let o = mm(&att, &wo);
            let logit = hm[0] * gw[r] + hm[1] * gw[2 + r] + gb[r];
            let alpha = 1.0 / (1.0 + (-logit).exp());
            expect.push(alpha * o[0]);
            expect.push(alpha * o[1]);
        }

        let qt = Tensor::new(&[1, 2, 2], qx.concat()).unwrap();
        let kt = Tensor::new(&[1, 2, 2], kx.concat()).unwrap();
        let got = gated(&store, &n, &qt, &kt, hm, GateMode::Matching);
        for (a, b) in got.iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn gate_length_mismatch_is_config_error() {
        let (store, n) = net(Center::Vision, 4, 2, 3, 5);
        let mut s = Session::eval(&store);
        let q = s.g.constant(&Tensor::zeros(&[1, 4, 4]));
        let k = s.g.constant(&Tensor::zeros(&[1, 2, 4]));
        let hm = s.g.constant_raw(&[1, 2], vec![1.0, -1.0]).unwrap();
        assert!(matches!(
            n.itm_gated_coattention(&mut s, q, k, None, hm, GateMode::Matching),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn coattention_unit_cases() {
        let (store, n) = net(Center::Vision, 4, 2, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qx = random(&[1, 3, 4], &mut rng);
        let mut s = Session::eval(&store);
        let q = s.g.constant(&qx);
        let zero = s.g.constant(&Tensor::zeros(&[1, 3, 4]));
        let out = n.coattention_unit(&mut s, q, zero).unwrap();
        let direct = n.ln.forward(&mut s, q).unwrap();
        assert_eq!(s.g.value(out), s.g.value(direct));

        let neg = s.g.scale(q, -1.0);
        let cancel = n.coattention_unit(&mut s, q, neg).unwrap();
        // gamma = 1, beta = 0 at init, zero input normalizes to zero.
        assert!(s.g.value(cancel).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_attention_single_position_and_determinism() {
        let (store, n) = net(Center::Vision, 4, 2, 1, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 1, 4], &mut rng);
        let run = || {
            let mut s = Session::eval(&store);
            let v = s.g.constant(&x);
            let out = n.self_attn.forward(&mut s, v, None).unwrap();
            for w in &out.weights {
                assert!(s.g.value(*w).iter().all(|&p| p == 1.0));
            }
            s.g.value(out.out).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn vision_network_shape_and_closed_gate_composition() {
        let (mut store, n) = net(Center::Vision, 8, 2, 1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let text = random(&[1, 5, 8], &mut rng);
        let image = random(&[1, 1, 8], &mut rng);
        set(&mut store, n.gate_weight, Tensor::zeros(&[2, 1]));
        set(&mut store, n.gate_bias, Tensor::full(&[1], -800.0));
        let mask = vec![0.0, 0.0, 0.0, -1e9, -1e9];

        let mut s = Session::eval(&store);
        let (t, i) = (s.g.constant(&text), s.g.constant(&image));
        let hm = s.g.constant_raw(&[1, 2], vec![5.0, -5.0]).unwrap();
        let out = n.forward(&mut s, t, i, &mask, hm, GateMode::Matching).unwrap();
        assert_eq!(s.g.shape(out.fusion), &[1, 1, 8]);

        let ln = n.ln.forward(&mut s, i).unwrap();
        let expect = n.self_attention_unit(&mut s, ln, None).unwrap();
        assert_eq!(s.g.value(out.fusion), s.g.value(expect));
    }

    #[test]
    fn independent_centers_differ() {
        let mut store = ParamStore::new();
        let mut init = Init::new(9);
        let tn = CoAttentionNetwork::new(&mut store, &mut init, "t", Center::Text, 8, 2, 4, 0.0).unwrap();
        let vn = CoAttentionNetwork::new(&mut store, &mut init, "v", Center::Vision, 8, 2, 4, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let text = random(&[1, 4, 8], &mut rng);
        let image = random(&[1, 4, 8], &mut rng);
        let mut s = Session::eval(&store);
        let (t, i) = (s.g.constant(&text), s.g.constant(&image));
        let hm = s.g.constant_raw(&[1, 2], vec![1.0, -1.0]).unwrap();
        let mask = vec![0.0; 4];
        let a = tn.forward(&mut s, t, i, &mask, hm, GateMode::Matching).unwrap();
        let b = vn.forward(&mut s, t, i, &mask, hm, GateMode::Matching).unwrap();
        assert_ne!(s.g.value(a.fusion), s.g.value(b.fusion));
    }

    #[test]
    fn gate_scales_rows_linearly_and_bounds_norms() {
        let (store, n) = net(Center::Vision, 8, 2, 3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let qx = random(&[1, 3, 8], &mut rng);
        let kx = random(&[1, 4, 8], &mut rng);
        let gated_rows = gated(&store, &n, &qx, &kx, [0.7, -1.3], GateMode::Matching);
        let plain = gated(&store, &n, &qx, &kx, [0.0, 0.0], GateMode::Open);
        let mut s = Session::eval(&store);
        let hm = s.g.constant_raw(&[1, 2], vec![0.7, -1.3]).unwrap();
        let alpha = n.gate(&mut s, hm).unwrap();
        let alpha = s.g.value(alpha).to_vec();
        for r in 0..3 {
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let g = &gated_rows[r * 8..r * 8 + 8];
            let p = &plain[r * 8..r * 8 + 8];
            for c in 0..8 {
                assert_abs_diff_eq!(g[c], alpha[r] * p[c], epsilon = 1e-14);
            }
            assert!(norm(g) <= norm(p));
        }
    }
}
