//! Classification and mutual-learning losses over `[B, 2]` probability rows.
//!
//! Column 1 is the "fake" class. Batch losses are means over rows.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Probabilities are clamped here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn one_hot(labels: &[u8]) -> Vec<f64> {
    labels
        .iter()
        .flat_map(|&y| if y == 1 { [0.0, 1.0] } else { [1.0, 0.0] })
        .collect()
}

/// Mean binary cross-entropy `-[y log p + (1 - y) log(1 - p)]` with `p = probs[:, 1]`.
pub fn cross_entropy(g: &mut Graph, probs: Var, labels: &[u8]) -> Result<Var> {
    let shape = g.shape(probs);
    if shape != [labels.len(), 2] {
        return Err(Error::shape("cross_entropy", shape, &[labels.len(), 2]));
    }
    let logp = g.ln_clamped(probs, PROB_FLOOR);
    let target = g.constant_raw(&[labels.len(), 2], one_hot(labels))?;
    let picked = g.mul(logp, target)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / labels.len() as f64))
}

/// Mean over rows of `sum_i p_i ln(p_i / q_i)`. Both arguments carry gradient.
pub fn kl_divergence(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    if g.shape(p) != g.shape(q) {
        return Err(Error::shape("kl_divergence", g.shape(p), g.shape(q)));
    }
    let rows = g.shape(p)[0];
    let lp = g.ln_clamped(p, PROB_FLOOR);
    let lq = g.ln_clamped(q, PROB_FLOOR);
    let neg_lq = g.scale(lq, -1.0);
    let ratio = g.add(lp, neg_lq)?;
    let terms = g.mul(p, ratio)?;
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / rows as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct MutualLoss {
    pub total: Var,
    pub ce_text: Var,
    pub ce_vision: Var,
    /// `D_KL(P^V || P^T)`, which regularizes the vision-centered network toward the text-centered one.
    pub kl_text_to_vision: Var,
    /// `D_KL(P^T || P^V)`
    pub kl_vision_to_text: Var,
}

/// `L_C^T + L_C^V + lambda * (D_KL(P^V||P^T) + D_KL(P^T||P^V))`.
///
/// With `detach_peer`, each KL term treats its second argument (the peer being
/// imitated) as a constant.
pub fn total_loss(
    g: &mut Graph,
    p_text: Var,
    p_vision: Var,
    labels: &[u8],
    lambda_kl: f64,
    detach_peer: bool,
) -> Result<MutualLoss> {
    if !(lambda_kl >= 0.0) {
        return Err(Error::Config(format!("lambda_kl must be >= 0, got {lambda_kl}")));
    }
    let ce_text = cross_entropy(g, p_text, labels)?;
    let ce_vision = cross_entropy(g, p_vision, labels)?;
    let (peer_t, peer_v) = if detach_peer {
        (g.detach(p_text), g.detach(p_vision))
    } else {
        (p_text, p_vision)
    };
    let kl_text_to_vision = kl_divergence(g, p_vision, peer_t)?;
    let kl_vision_to_text = kl_divergence(g, p_text, peer_v)?;
    let ce = g.add(ce_text, ce_vision)?;
    let kl = g.add(kl_text_to_vision, kl_vision_to_text)?;
    let kl = g.scale(kl, lambda_kl);
    let total = g.add(ce, kl)?;
    Ok(MutualLoss {
        total,
        ce_text,
        ce_vision,
        kl_text_to_vision,
        kl_vision_to_text,
    })
}
