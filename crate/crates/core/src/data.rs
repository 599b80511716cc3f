//! Synthetic multimodal news items and their JSON-lines persistence.
//!
//! Each item has a text topic. Its tokens come mostly from that topic's own
//! vocabulary block. With probability `signal_strength` one of them is
//! replaced by a topic-specific cue token revealing the label. Its patches are a fixed random projection
//! of a topic latent plus noise. With probability `mismatch_rate_{fake,real}`
//! the patches are drawn from a different topic, which is recorded in
//! `match_flag`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::PAD_ID;
use crate::error::{Error, Result};
use crate::params::derive_seed;
use crate::tensor::Tensor;

pub const LABEL_REAL: u8 = 0;
pub const LABEL_FAKE: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewsItem {
    pub id: u64,
    pub tokens: Vec<u32>,
    pub patches: Vec<Vec<f64>>,
    #[serde(rename = "match")]
    pub match_flag: bool,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub topics: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_patches: usize,
    pub patch_dim: usize,
    pub latent_dim: usize,
    pub mismatch_rate_fake: f64,
    pub mismatch_rate_real: f64,
    pub fake_rate: f64,
    pub noise_sigma: f64,
    pub signal_strength: f64,
    /// Probability that a content token is drawn from the shared background pool
    /// instead of the item's topic block.
    pub background_rate: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            topics: 6,
            vocab_size: 64,
            seq_len: 12,
            num_patches: 4,
            patch_dim: 8,
            latent_dim: 8,
            mismatch_rate_fake: 0.8,
            mismatch_rate_real: 0.1,
            fake_rate: 0.5,
            noise_sigma: 0.5,
            signal_strength: 0.6,
            background_rate: 0.15,
            train: 1400,
            val: 200,
            test: 400,
            seed: 0,
        }
    }
}

/// Token layout: id 0 is padding, then one disjoint block per topic. The first
/// two ids of a block are its fake and real cue tokens.
#[derive(Clone, Debug)]
pub struct VocabLayout {
    pub block_size: usize,
    pub topics: usize,
    pub vocab_size: usize,
}

impl VocabLayout {
    pub fn new(topics: usize, vocab_size: usize) -> Result<Self> {
        if topics < 2 {
            return Err(Error::Config(format!("need at least 2 topics, got {topics}")));
        }
        let block_size = vocab_size.saturating_sub(1) / topics;
        if block_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} too small for {topics} topic blocks of at least 4 tokens"
            )));
        }
        Ok(VocabLayout {
            block_size,
            topics,
            vocab_size,
        })
    }

    pub fn block(&self, topic: usize) -> Range<u32> {
        let start = 1 + topic * self.block_size;
        start as u32..(start + self.block_size) as u32
    }

    pub fn cue(&self, topic: usize, label: u8) -> u32 {
        self.block(topic).start + if label == LABEL_FAKE { 0 } else { 1 }
    }

    pub fn content(&self, topic: usize) -> Range<u32> {
        let b = self.block(topic);
        b.start + 2..b.end
    }

    fn is_cue(&self, id: u32) -> bool {
        let idx = id as usize;
        idx >= 1 && idx < 1 + self.topics * self.block_size && (idx - 1) % self.block_size < 2
    }

    /// Every non-pad, non-cue id.
    pub fn background(&self) -> Vec<u32> {
        (1..self.vocab_size as u32).filter(|&t| !self.is_cue(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<NewsItem>,
    pub val: Vec<NewsItem>,
    pub test: Vec<NewsItem>,
}

impl Dataset {
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_jsonl(&self.train, &dir.join("train.jsonl"))?;
        save_jsonl(&self.val, &dir.join("val.jsonl"))?;
        save_jsonl(&self.test, &dir.join("test.jsonl"))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Dataset {
            train: load_jsonl(&dir.join("train.jsonl"))?,
            val: load_jsonl(&dir.join("val.jsonl"))?,
            test: load_jsonl(&dir.join("test.jsonl"))?,
        })
    }

    pub fn all(&self) -> impl Iterator<Item = &NewsItem> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<VocabLayout> {
        check_rate("mismatch_rate_fake", self.mismatch_rate_fake)?;
        check_rate("mismatch_rate_real", self.mismatch_rate_real)?;
        check_rate("fake_rate", self.fake_rate)?;
        check_rate("signal_strength", self.signal_strength)?;
        check_rate("background_rate", self.background_rate)?;
        if self.seq_len < 2 || self.num_patches == 0 || self.patch_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "seq_len must be >= 2 and num_patches, patch_dim, latent_dim positive".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        VocabLayout::new(self.topics, self.vocab_size)
    }

    /// Fake items are expected to be mismatched at least as often as real ones.
    pub fn gate_relevant(&self) -> bool {
        self.mismatch_rate_fake >= self.mismatch_rate_real
    }
}

struct World {
    latents: Vec<Vec<f64>>,
    /// One `[p, latent]` projection per patch position.
    projections: Vec<Vec<f64>>,
}

impl World {
    fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, u64::MAX]));
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>()
        };
        let latents = (0..cfg.topics).map(|_| normal(cfg.latent_dim, 1.0)).collect();
        let proj_scale = 1.0 / (cfg.latent_dim as f64).sqrt();
        let projections = (0..cfg.num_patches)
            .map(|_| normal(cfg.patch_dim * cfg.latent_dim, proj_scale))
            .collect();
        World { latents, projections }
    }
}

fn generate_item(cfg: &GeneratorConfig, layout: &VocabLayout, world: &World, background: &[u32], id: u64) -> NewsItem {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, id]));
    let label = if rng.gen_bool(cfg.fake_rate) {
        LABEL_FAKE
    } else {
        LABEL_REAL
    };
    let topic = rng.gen_range(0..cfg.topics);
    let rate = if label == LABEL_FAKE {
        cfg.mismatch_rate_fake
    } else {
        cfg.mismatch_rate_real
    };
    let mismatch = rng.gen_bool(rate);
    let image_topic = if mismatch {
        let other = rng.gen_range(0..cfg.topics - 1);
        if other >= topic {
            other + 1
        } else {
            other
        }
    } else {
        topic
    };

    let len = rng.gen_range(cfg.seq_len.div_ceil(2)..=cfg.seq_len);
    let content = layout.content(topic);
    let mut tokens: Vec<u32> = (0..len - 1)
        .map(|_| {
            if rng.gen_bool(cfg.background_rate) {
                *background.choose(&mut rng).expect("non-empty background")
            } else {
                rng.gen_range(content.clone())
            }
        })
        .collect();
    // With probability `signal_strength` the text carries its topic's cue for the
    // true label; otherwise the slot holds one more content token.
    let at = rng.gen_range(0..len);
    let slot = if rng.gen_bool(cfg.signal_strength) {
        layout.cue(topic, label)
    } else {
        rng.gen_range(content)
    };
    tokens.insert(at, slot);
    tokens.resize(cfg.seq_len, PAD_ID);

    let z = &world.latents[image_topic];
    let patches = world
        .projections
        .iter()
        .map(|proj| {
            (0..cfg.patch_dim)
                .map(|r| {
                    let clean: f64 = (0..cfg.latent_dim).map(|c| proj[r * cfg.latent_dim + c] * z[c]).sum();
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    clean + cfg.noise_sigma * noise
                })
                .collect()
        })
        .collect();

    NewsItem {
        id,
        tokens,
        patches,
        match_flag: !mismatch,
        label,
    }
}

/// Generates train/val/test splits. Item `i` (ids run consecutively across the
/// splits) draws all of its randomness from `(seed, i)`.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    let layout = cfg.validate()?;
    let world = World::new(cfg);
    let background = layout.background();
    let gen = |range: Range<u64>| -> Vec<NewsItem> {
        range
            .map(|id| generate_item(cfg, &layout, &world, &background, id))
            .collect()
    };
    let (a, b, c) = (cfg.train as u64, cfg.val as u64, cfg.test as u64);
    Ok(Dataset {
        train: gen(0..a),
        val: gen(a..a + b),
        test: gen(a + b..a + b + c),
    })
}

/// Stacks the items' patch grids into `[B, n, p]`.
pub fn patch_tensor<'a>(items: impl IntoIterator<Item = &'a NewsItem>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    let mut count = 0;
    for item in items {
        let n = item.patches.len();
        let p = item.patches.first().map_or(0, Vec::len);
        if n == 0 || p == 0 || item.patches.iter().any(|r| r.len() != p) {
            return Err(Error::Config(format!(
                "item {} has a ragged or empty patch grid",
                item.id
            )));
        }
        match shape {
            None => shape = Some((n, p)),
            Some(s) if s != (n, p) => {
                return Err(Error::Config(format!(
                    "item {} has a {n}x{p} patch grid, expected {}x{}",
                    item.id, s.0, s.1
                )))
            }
            _ => {}
        }
        item.patches.iter().for_each(|r| data.extend_from_slice(r));
        count += 1;
    }
    let (n, p) = shape.ok_or(Error::EmptyDataset("patch batch"))?;
    Tensor::new(&[count, n, p], data)
}

pub fn save_jsonl(items: &[NewsItem], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<NewsItem>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let item: NewsItem = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if item.label > 1 {
            return Err(parse_err(format!("label must be 0 or 1, got {}", item.label)));
        }
        items.push(item);
    }
    Ok(items)
}
