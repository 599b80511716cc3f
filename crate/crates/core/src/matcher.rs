//! Image-text matching representation `H^M`: a 2-logit vector ordered
//! `(match, mismatch)` that drives the co-attention gate.
//!
//! Two providers exist. `Oracle` reads the ground-truth flag and is meant for
//! tests of the gate itself. `Bilinear` is a small scorer with its own text
//! embedding and patch projection, pretrained on match flags and then frozen.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{patch_tensor, NewsItem};
use crate::encoders::PAD_ID;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::nn::Linear;
use crate::params::{derive_seed, Init, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};
use crate::training::{AdamW, AdamWConfig};

pub const MATCH_DIM: usize = 2;
pub const ORACLE_LOGIT: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchRepresentation {
    pub logits: [f64; MATCH_DIM],
}

impl MatchRepresentation {
    pub fn is_match(&self) -> bool {
        self.logits[0] > self.logits[1]
    }

    /// Stacks representations into a `[B, 2]` tensor.
    pub fn stack(reps: &[MatchRepresentation]) -> Result<Tensor> {
        Tensor::new(&[reps.len(), MATCH_DIM], reps.iter().flat_map(|r| r.logits).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BilinearConfig {
    pub feat_dim: usize,
    pub rank: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BilinearConfig {
    fn default() -> Self {
        BilinearConfig {
            feat_dim: 8,
            rank: 8,
            epochs: 20,
            lr: 0.01,
            batch_size: 32,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BilinearMatcher {
    pub cfg: BilinearConfig,
    pub vocab_size: usize,
    pub patch_dim: usize,
    store: ParamStore,
    embedding: ParamId,
    projection: Linear,
    bilinear: Linear,
    head: Linear,
    trained: bool,
    train_accuracy: Option<f64>,
}

impl BilinearMatcher {
    pub fn new(cfg: BilinearConfig, vocab_size: usize, patch_dim: usize) -> Self {
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.seed);
        let f = cfg.feat_dim;
        let embedding = store.add("matcher.embedding", init.normal(&[vocab_size, f], 1.0));
        let projection = Linear::new(&mut store, &mut init, "matcher.projection", patch_dim, f, true);
        let bilinear = Linear::new(&mut store, &mut init, "matcher.bilinear", f * f, cfg.rank, true);
        let head = Linear::new(&mut store, &mut init, "matcher.head", cfg.rank, MATCH_DIM, true);
        BilinearMatcher {
            cfg,
            vocab_size,
            patch_dim,
            store,
            embedding,
            projection,
            bilinear,
            head,
            trained: false,
            train_accuracy: None,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Binary accuracy on the pretraining set after the last epoch.
    pub fn train_accuracy(&self) -> Option<f64> {
        self.train_accuracy
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Restores pretrained, frozen weights (e.g. from a checkpoint).
    pub fn load_weights(&mut self, weights: &ParamStore) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            let src = weights
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let src = weights.get(src);
            if src.shape() != self.store.get(id).shape() {
                return Err(Error::shape("load_weights", src.shape(), self.store.get(id).shape()));
            }
            self.store.set_values(id, src.data())?;
        }
        self.store.freeze();
        self.trained = true;
        Ok(())
    }

    /// Logits `[B, 2]` for a batch.
    fn forward(&self, s: &mut Session, items: &[&NewsItem]) -> Result<Var> {
        let b = items.len();
        let m = items[0].tokens.len();
        let f = self.cfg.feat_dim;
        let mut ids = Vec::with_capacity(b * m);
        let mut pool = Vec::with_capacity(b * m);
        for item in items {
            if item.tokens.len() != m {
                return Err(Error::Config("token sequences in a batch must share a length".into()));
            }
            let used = item.tokens.iter().filter(|&&t| t != PAD_ID).count().max(1) as f64;
            for &t in &item.tokens {
                if t as usize >= self.vocab_size {
                    return Err(Error::OutOfVocab {
                        id: t,
                        vocab: self.vocab_size,
                    });
                }
                ids.push(t as usize);
                pool.push(if t == PAD_ID { 0.0 } else { 1.0 / used });
            }
        }
        let table = s.param(self.embedding);
        let emb = s.g.gather_rows(table, &ids, &[b, m])?;
        let pool = s.g.constant_raw(&[b, 1, m], pool)?;
        let text = s.g.bmm(pool, emb)?;
        let text = s.g.tanh(text);

        let patches = s.g.constant(&patch_tensor(items.iter().copied())?);
        let img = self.projection.forward(s, patches)?;
        let img = s.g.tanh(img);
        let img = s.g.mean_rows(img)?;
        let img = s.g.reshape(img, &[b, 1, f])?;

        let text_col = s.g.reshape(text, &[b, f, 1])?;
        let outer = s.g.bmm(text_col, img)?;
        let outer = s.g.reshape(outer, &[b, f * f])?;
        let hidden = self.bilinear.forward(s, outer)?;
        let hidden = s.g.relu(hidden);
        self.head.forward(s, hidden)
    }

    /// Raw logits, no gradient tracking.
    pub fn logits(&self, items: &[&NewsItem]) -> Result<Vec<MatchRepresentation>> {
        if !self.trained {
            return Err(Error::UntrainedProvider);
        }
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mut s = Session::eval(&self.store);
        let out = self.forward(&mut s, items)?;
        Ok(s.g
            .value(out)
            .chunks(MATCH_DIM)
            .map(|c| MatchRepresentation { logits: [c[0], c[1]] })
            .collect())
    }

    fn accuracy(&self, items: &[NewsItem]) -> Result<f64> {
        let refs: Vec<&NewsItem> = items.iter().collect();
        let mut correct = 0usize;
        for chunk in refs.chunks(256) {
            let reps = self.logits(chunk)?;
            correct += reps
                .iter()
                .zip(chunk)
                .filter(|(r, it)| r.is_match() == it.match_flag)
                .count();
        }
        Ok(correct as f64 / items.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub enum MatchingProvider {
    Oracle { magnitude: f64 },
    Bilinear(Box<BilinearMatcher>),
}

impl MatchingProvider {
    pub fn oracle() -> Self {
        MatchingProvider::Oracle {
            magnitude: ORACLE_LOGIT,
        }
    }

    pub fn itm_representation(&self, item: &NewsItem) -> Result<MatchRepresentation> {
        Ok(self.represent(&[item])?[0])
    }

    /// `H^M` for each item, in order.
    pub fn represent(&self, items: &[&NewsItem]) -> Result<Vec<MatchRepresentation>> {
        match self {
            MatchingProvider::Oracle { magnitude: c } => Ok(items
                .iter()
                .map(|it| MatchRepresentation {
                    logits: if it.match_flag { [*c, -*c] } else { [-*c, *c] },
                })
                .collect()),
            MatchingProvider::Bilinear(m) => {
                let mut out = Vec::with_capacity(items.len());
                for chunk in items.chunks(256) {
                    out.extend(m.logits(chunk)?);
                }
                Ok(out)
            }
        }
    }
}

/// Trains a bilinear matcher on the items' match flags, then freezes it.
///
/// With `cfg.epochs == 0` the returned matcher is untrained and refuses to produce logits.
pub fn pretrain_bilinear_matcher(
    items: &[NewsItem],
    cfg: BilinearConfig,
    vocab_size: usize,
    patch_dim: usize,
) -> Result<BilinearMatcher> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("matcher pretraining set"));
    }
    let mut matcher = BilinearMatcher::new(cfg, vocab_size, patch_dim);
    if cfg.epochs == 0 {
        return Ok(matcher);
    }
    let mut opt = AdamW::new(
        &matcher.store,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    );
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&NewsItem> = chunk.iter().map(|&i| &items[i]).collect();
            // Class 0 = match, class 1 = mismatch.
            let targets: Vec<u8> = batch.iter().map(|it| u8::from(!it.match_flag)).collect();
            let mut s = Session::train(&matcher.store, 0);
            let logits = matcher.forward(&mut s, &batch)?;
            let probs = s.g.softmax_rows(logits);
            let loss = cross_entropy(&mut s.g, probs, &targets)?;
            let grads = s.backward(loss)?;
            matcher.store.zero_grad();
            matcher.store.accumulate(&grads);
            opt.step(&mut matcher.store)?;
        }
    }
    matcher.store.freeze();
    matcher.trained = true;
    matcher.train_accuracy = Some(matcher.accuracy(items)?);
    Ok(matcher)
}

/// Fraction of items whose match flag the provider recovers.
pub fn match_accuracy(provider: &MatchingProvider, items: &[NewsItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("match accuracy"));
    }
    let refs: Vec<&NewsItem> = items.iter().collect();
    let reps = provider.represent(&refs)?;
    let correct = reps
        .iter()
        .zip(items)
        .filter(|(r, it)| r.is_match() == it.match_flag)
        .count();
    Ok(correct as f64 / items.len() as f64)
}
