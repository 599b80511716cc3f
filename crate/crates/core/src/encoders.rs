//! Intra-modality encoders: embedding or patch projection, fixed sinusoidal
//! positions, then one transformer encoder layer.

use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerLayer, MASK_BIAS};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

pub const PAD_ID: u32 = 0;

/// `pe[t, 2i] = sin(t / 10000^(2i/d))`, `pe[t, 2i+1] = cos(t / 10000^(2i/d))`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("positional dimension must be even, got {d}")));
    }
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[t * d + 2 * i] = angle.sin();
            data[t * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[len, d], data)
}

/// Additive `[B, L]` mask: `MASK_BIAS` on pad tokens, 0 elsewhere.
pub fn pad_mask<T: AsRef<[u32]>>(batch: &[T]) -> Vec<f64> {
    batch
        .iter()
        .flat_map(|seq| seq.as_ref().iter().map(|&t| if t == PAD_ID { MASK_BIAS } else { 0.0 }))
        .collect()
}

#[derive(Debug)]
pub struct Encoded {
    pub out: Var,
    /// Per-head self-attention weights of the encoder layer.
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub embedding: ParamId,
    pub layer: TransformerLayer,
    positions: Tensor,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        vocab_size: usize,
        d: usize,
        heads: usize,
        seq_len: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(TextEncoder {
            vocab_size,
            seq_len,
            embedding: store.add("text.embedding", init.normal(&[vocab_size, d], 1.0)),
            layer: TransformerLayer::new(store, init, "text.layer", d, heads, dropout)?,
            positions: sinusoidal_positions(seq_len, d)?,
        })
    }

    /// Validates ids, keeps the first `seq_len` tokens and right-pads the rest.
    pub fn prepare(&self, tokens: &[u32]) -> Result<Vec<u32>> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::OutOfVocab {
                id: bad,
                vocab: self.vocab_size,
            });
        }
        let mut out: Vec<u32> = tokens.iter().take(self.seq_len).copied().collect();
        out.resize(self.seq_len, PAD_ID);
        Ok(out)
    }

    /// Encodes a batch of prepared sequences into `[B, m, d]`. Pad keys are masked.
    pub fn encode<T: AsRef<[u32]>>(&self, s: &mut Session, batch: &[T]) -> Result<Encoded> {
        let mut ids = Vec::with_capacity(batch.len() * self.seq_len);
        for seq in batch {
            let seq = seq.as_ref();
            if seq.len() != self.seq_len {
                return Err(Error::Config(format!(
                    "token sequence has length {}, expected {}",
                    seq.len(),
                    self.seq_len
                )));
            }
            for &t in seq {
                if t as usize >= self.vocab_size {
                    return Err(Error::OutOfVocab {
                        id: t,
                        vocab: self.vocab_size,
                    });
                }
                ids.push(t as usize);
            }
        }
        let table = s.param(self.embedding);
        let emb = s.g.gather_rows(table, &ids, &[batch.len(), self.seq_len])?;
        let pos = s.g.constant(&self.positions);
        let x = s.g.add_broadcast(emb, pos)?;
        let mask = pad_mask(batch);
        let enc = self.layer.forward(s, x, Some(&mask))?;
        Ok(Encoded {
            out: enc.out,
            weights: enc.weights,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_dim: usize,
    pub num_patches: usize,
    pub projection: Linear,
    pub layer: TransformerLayer,
    positions: Tensor,
}

impl ImageEncoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        patch_dim: usize,
        d: usize,
        heads: usize,
        num_patches: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(ImageEncoder {
            patch_dim,
            num_patches,
            projection: Linear::new(store, init, "image.projection", patch_dim, d, true),
            layer: TransformerLayer::new(store, init, "image.layer", d, heads, dropout)?,
            positions: sinusoidal_positions(num_patches, d)?,
        })
    }

    /// Encodes a `[B, n, p]` patch batch into `[B, n, d]`.
    pub fn encode(&self, s: &mut Session, patches: &Tensor) -> Result<Encoded> {
        let shape = patches.shape();
        if shape.len() != 3 || shape[1] != self.num_patches || shape[2] != self.patch_dim {
            return Err(Error::Config(format!(
                "expected patch grid [B, {}, {}], got {shape:?}",
                self.num_patches, self.patch_dim
            )));
        }
        let x = s.g.constant(patches);
        let emb = self.projection.forward(s, x)?;
        let pos = s.g.constant(&self.positions);
        let x = s.g.add_broadcast(emb, pos)?;
        let enc = self.layer.forward(s, x, None)?;
        Ok(Encoded {
            out: enc.out,
            weights: enc.weights,
        })
    }
}
