//! The complete detector: two encoders, a text-centered and a vision-centered
//! co-attention network, per-network classifiers, and the ablation variants.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::coattention::{Center, CoAttentionNetwork, GateMode};
use crate::data::{patch_tensor, NewsItem};
use crate::encoders::{pad_mask, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, total_loss, MutualLoss};
use crate::matcher::{MatchRepresentation, MatchingProvider, MATCH_DIM};
use crate::nn::Linear;
use crate::params::{Init, ParamStore, Session};
use crate::tensor::{Tensor, Var};

/// Architectural variants used in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both gated networks with mutual learning.
    Full,
    /// Both networks, gate bypassed.
    WithoutMatch,
    /// Text-centered network only.
    TextOnly,
    /// Vision-centered network only.
    VisionOnly,
    /// Pooled features of both networks concatenated into one classifier.
    Concat,
    /// Both networks trained independently (no KL), probabilities averaged.
    Avg,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::WithoutMatch,
        Variant::TextOnly,
        Variant::VisionOnly,
        Variant::Concat,
        Variant::Avg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutMatch => "without_match",
            Variant::TextOnly => "text_only",
            Variant::VisionOnly => "vision_only",
            Variant::Concat => "concat",
            Variant::Avg => "avg",
        }
    }

    pub fn parse(name: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown variant {name:?}")))
    }

    pub fn gate_mode(self) -> GateMode {
        match self {
            Variant::WithoutMatch => GateMode::Open,
            _ => GateMode::Matching,
        }
    }

    pub fn uses_text_network(self) -> bool {
        self != Variant::VisionOnly
    }

    pub fn uses_vision_network(self) -> bool {
        self != Variant::TextOnly
    }

    /// Variants whose prediction is the average of both networks' probabilities.
    pub fn averages_networks(self) -> bool {
        matches!(self, Variant::Full | Variant::WithoutMatch | Variant::Avg)
    }

    /// KL weight actually used by this variant.
    pub fn effective_lambda(self, lambda_kl: f64) -> f64 {
        match self {
            Variant::Full | Variant::WithoutMatch => lambda_kl,
            _ => 0.0,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Text length `m` after padding/truncation.
    pub seq_len: usize,
    /// Patches per image `n`.
    pub num_patches: usize,
    /// Flattened patch size `p`.
    pub patch_dim: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 16,
            heads: 4,
            seq_len: 12,
            num_patches: 4,
            patch_dim: 8,
            vocab_size: 64,
            dropout: 0.4,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config("d_model must be even".into()));
        }
        if self.seq_len == 0 || self.num_patches == 0 || self.patch_dim == 0 || self.vocab_size < 2 {
            return Err(Error::Config(
                "sequence, patch and vocabulary sizes must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Tensors for one forward pass.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<u64>,
    pub tokens: Vec<Vec<u32>>,
    pub patches: Tensor,
    /// Matching logits `[B, 2]`.
    pub matching: Tensor,
    pub labels: Vec<u8>,
}

/// Precomputed matching representations keyed by item id.
pub type MatchCache = HashMap<u64, MatchRepresentation>;

#[derive(Debug)]
pub struct ForwardOutput {
    pub p_text: Option<Var>,
    pub p_vision: Option<Var>,
    pub p_joint: Option<Var>,
    /// Training objective for the variant.
    pub loss: Var,
    /// Mutual-learning breakdown, for variants with two supervised networks.
    pub mutual: Option<MutualLoss>,
    /// Per-head co-attention weights of the text-centered network `[B, m, n]`.
    pub text_coattention: Vec<Var>,
    pub vision_coattention: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub id: u64,
    pub p_text: Option<[f64; 2]>,
    pub p_vision: Option<[f64; 2]>,
    /// Final class probabilities `(real, fake)`.
    pub probs: [f64; 2],
    pub label: u8,
}

#[derive(Clone, Debug)]
pub struct MmcanModel {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub store: ParamStore,
    pub text_encoder: TextEncoder,
    pub image_encoder: ImageEncoder,
    pub text_network: CoAttentionNetwork,
    pub vision_network: CoAttentionNetwork,
    pub text_head: Linear,
    pub vision_head: Linear,
    pub joint_head: Option<Linear>,
    pub provider: MatchingProvider,
}

impl MmcanModel {
    /// Builds a freshly initialized model. Every variant creates the same
    /// parameters in the same order (plus a trailing joint head for `Concat`),
    /// so equal seeds give equal shared weights across variants.
    pub fn new(cfg: ModelConfig, variant: Variant, provider: MatchingProvider) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.init_seed);
        let d = cfg.d_model;
        let text_encoder = TextEncoder::new(
            &mut store,
            &mut init,
            cfg.vocab_size,
            d,
            cfg.heads,
            cfg.seq_len,
            cfg.dropout,
        )?;
        let image_encoder = ImageEncoder::new(
            &mut store,
            &mut init,
            cfg.patch_dim,
            d,
            cfg.heads,
            cfg.num_patches,
            cfg.dropout,
        )?;
        let text_network = CoAttentionNetwork::new(
            &mut store,
            &mut init,
            "text_net",
            Center::Text,
            d,
            cfg.heads,
            cfg.seq_len,
            cfg.dropout,
        )?;
        let vision_network = CoAttentionNetwork::new(
            &mut store,
            &mut init,
            "vision_net",
            Center::Vision,
            d,
            cfg.heads,
            cfg.num_patches,
            cfg.dropout,
        )?;
        let text_head = Linear::new(&mut store, &mut init, "text_head", d, 2, true);
        let vision_head = Linear::new(&mut store, &mut init, "vision_head", d, 2, true);
        let joint_head =
            (variant == Variant::Concat).then(|| Linear::new(&mut store, &mut init, "joint_head", 2 * d, 2, true));
        Ok(MmcanModel {
            cfg,
            variant,
            store,
            text_encoder,
            image_encoder,
            text_network,
            vision_network,
            text_head,
            vision_head,
            joint_head,
            provider,
        })
    }

    /// Matching representations for every item, computed once.
    pub fn precompute_matching<'a>(&self, items: impl IntoIterator<Item = &'a NewsItem>) -> Result<MatchCache> {
        let refs: Vec<&NewsItem> = items.into_iter().collect();
        let reps = self.provider.represent(&refs)?;
        Ok(refs.iter().map(|it| it.id).zip(reps).collect())
    }

    pub fn make_batch(&self, items: &[&NewsItem], cache: &MatchCache) -> Result<Batch> {
        if items.is_empty() {
            return Err(Error::EmptyDataset("batch"));
        }
        let mut tokens = Vec::with_capacity(items.len());
        let mut matching = Vec::with_capacity(items.len() * MATCH_DIM);
        for it in items {
            tokens.push(self.text_encoder.prepare(&it.tokens)?);
            let rep = cache.get(&it.id).ok_or(Error::UnknownItem(it.id))?;
            matching.extend_from_slice(&rep.logits);
        }
        Ok(Batch {
            ids: items.iter().map(|it| it.id).collect(),
            tokens,
            patches: patch_tensor(items.iter().copied())?,
            matching: Tensor::new(&[items.len(), MATCH_DIM], matching)?,
            labels: items.iter().map(|it| it.label).collect(),
        })
    }

    fn classify(&self, s: &mut Session, fusion: Var, head: &Linear) -> Result<Var> {
        let pooled = s.g.mean_rows(fusion)?;
        let logits = head.forward(s, pooled)?;
        Ok(s.g.softmax_rows(logits))
    }

    /// Forward pass and training objective for this model's variant.
    pub fn forward(&self, s: &mut Session, batch: &Batch, lambda_kl: f64, detach_peer: bool) -> Result<ForwardOutput> {
        let v = self.variant;
        let text = self.text_encoder.encode(s, &batch.tokens)?.out;
        let image = self.image_encoder.encode(s, &batch.patches)?.out;
        let mask = pad_mask(&batch.tokens);
        let hm = s.g.constant(&batch.matching);
        let mode = v.gate_mode();

        let text_out = if v.uses_text_network() {
            Some(self.text_network.forward(s, text, image, &mask, hm, mode)?)
        } else {
            None
        };
        let vision_out = if v.uses_vision_network() {
            Some(self.vision_network.forward(s, text, image, &mask, hm, mode)?)
        } else {
            None
        };

        let text_coattention = text_out
            .as_ref()
            .map(|o| o.coattention_weights.clone())
            .unwrap_or_default();
        let vision_coattention = vision_out
            .as_ref()
            .map(|o| o.coattention_weights.clone())
            .unwrap_or_default();

        if let Some(joint) = &self.joint_head {
            let (t, vo) = (
                text_out.expect("concat uses both networks"),
                vision_out.expect("concat uses both networks"),
            );
            let pt = s.g.mean_rows(t.fusion)?;
            let pv = s.g.mean_rows(vo.fusion)?;
            let cat = s.g.concat_last(&[pt, pv])?;
            let logits = joint.forward(s, cat)?;
            let p = s.g.softmax_rows(logits);
            return Ok(ForwardOutput {
                p_text: None,
                p_vision: None,
                p_joint: Some(p),
                loss: cross_entropy(&mut s.g, p, &batch.labels)?,
                mutual: None,
                text_coattention,
                vision_coattention,
            });
        }

        let p_text = text_out
            .map(|t| self.classify(s, t.fusion, &self.text_head))
            .transpose()?;
        let p_vision = vision_out
            .map(|vo| self.classify(s, vo.fusion, &self.vision_head))
            .transpose()?;
        let (loss, mutual) = match (p_text, p_vision) {
            (Some(pt), Some(pv)) => {
                let mutual = total_loss(
                    &mut s.g,
                    pt,
                    pv,
                    &batch.labels,
                    v.effective_lambda(lambda_kl),
                    detach_peer,
                )?;
                (mutual.total, Some(mutual))
            }
            (Some(p), None) | (None, Some(p)) => (cross_entropy(&mut s.g, p, &batch.labels)?, None),
            (None, None) => unreachable!("every variant uses at least one network"),
        };
        Ok(ForwardOutput {
            p_text,
            p_vision,
            p_joint: None,
            loss,
            mutual,
            text_coattention,
            vision_coattention,
        })
    }

    /// Eval-mode predictions. Two-network variants average the probabilities.
    pub fn predict(&self, items: &[&NewsItem], cache: &MatchCache) -> Result<Vec<Prediction>> {
        let mut preds = Vec::with_capacity(items.len());
        for chunk in items.chunks(256) {
            let batch = self.make_batch(chunk, cache)?;
            let mut s = Session::eval(&self.store);
            let out = self.forward(&mut s, &batch, 0.0, false)?;
            let rows = |v: Option<Var>, s: &Session| -> Option<Vec<[f64; 2]>> {
                v.map(|v| s.g.value(v).chunks(2).map(|c| [c[0], c[1]]).collect())
            };
            let pt = rows(out.p_text, &s);
            let pv = rows(out.p_vision, &s);
            let pj = rows(out.p_joint, &s);
            for (i, &id) in batch.ids.iter().enumerate() {
                let p_text = pt.as_ref().map(|r| r[i]);
                let p_vision = pv.as_ref().map(|r| r[i]);
                let probs = match (pj.as_ref(), p_text, p_vision) {
                    (Some(j), _, _) => j[i],
                    (None, Some(a), Some(b)) => average_probs(a, b),
                    (None, Some(a), None) | (None, None, Some(a)) => a,
                    (None, None, None) => unreachable!("every variant produces a prediction"),
                };
                preds.push(Prediction {
                    id,
                    p_text,
                    p_vision,
                    probs,
                    label: argmax_label(probs),
                });
            }
        }
        Ok(preds)
    }
}

/// `(p_text + p_vision) / 2`
pub fn average_probs(p_text: [f64; 2], p_vision: [f64; 2]) -> [f64; 2] {
    [(p_text[0] + p_vision[0]) / 2.0, (p_text[1] + p_vision[1]) / 2.0]
}

/// Predicted label; ties go to "real".
pub fn argmax_label(probs: [f64; 2]) -> u8 {
    u8::from(probs[1] > probs[0])
}
