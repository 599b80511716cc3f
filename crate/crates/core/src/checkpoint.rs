//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"MMCANCKP"
//! u32    format version
//! u64    config length, then that many bytes of UTF-8 JSON
//! u64    tensor count
//! per tensor:
//!   u64  name length, then the UTF-8 name
//!   u64  rank, then `rank` u64 extents
//!   f64  values (little-endian IEEE 754), row-major
//! ```
//!
//! Matcher weights, when present, are stored alongside the model weights under
//! names starting with `matcher.`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::{BilinearConfig, BilinearMatcher, MatchingProvider};
use crate::model::{MmcanModel, ModelConfig, Variant};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMCANCKP";
pub const FORMAT_VERSION: u32 = 1;
const MATCHER_PREFIX: &str = "matcher.";

/// How the matching representation is produced, as recorded in a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderSpec {
    Oracle { magnitude: f64 },
    Bilinear { config: BilinearConfig },
}

impl ProviderSpec {
    pub fn of(provider: &MatchingProvider) -> Self {
        match provider {
            MatchingProvider::Oracle { magnitude } => ProviderSpec::Oracle { magnitude: *magnitude },
            MatchingProvider::Bilinear(m) => ProviderSpec::Bilinear { config: m.cfg },
        }
    }
}

/// Configuration echo stored in the checkpoint header.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub variant: Variant,
    pub provider: ProviderSpec,
}

/// Writes a raw checkpoint container.
pub fn write_container(path: &Path, config_json: &str, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(config_json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(config_json.as_bytes()).map_err(io)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes()).map_err(io)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes()).map_err(io)?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        // Guards against absurd allocations from corrupted headers.
        if v > (1 << 40) {
            return Err(Error::Checkpoint(format!("implausible {what} {v}")));
        }
        Ok(v as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Reads a raw checkpoint container: the config JSON and named tensors in file order.
pub fn read_container(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };
    if r.bytes(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.bytes(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let config = r.string("config length")?;
    let count = r.len("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string("name length")?;
        let rank = r.len("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("extent")?);
        }
        let numel: usize = shape.iter().product();
        let raw = r.bytes(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((config, tensors))
}

/// Saves all model parameters (and matcher weights, if any) with a config echo.
pub fn save_checkpoint(model: &MmcanModel, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        model: model.cfg,
        variant: model.variant,
        provider: ProviderSpec::of(&model.provider),
    };
    let json = serde_json::to_string(&header)?;
    let mut tensors: Vec<(&str, &Tensor)> = model.store.iter().map(|(_, n, t)| (n, t)).collect();
    if let MatchingProvider::Bilinear(m) = &model.provider {
        tensors.extend(m.store().iter().map(|(_, n, t)| (n, t)));
    }
    write_container(path, &json, &tensors)
}

/// Rebuilds a model from a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<MmcanModel> {
    let (json, tensors) = read_container(path)?;
    let header: CheckpointHeader =
        serde_json::from_str(&json).map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    let mut matcher_store = ParamStore::new();
    let mut model_tensors = Vec::new();
    for (name, t) in tensors {
        if name.starts_with(MATCHER_PREFIX) {
            matcher_store.add(name, t);
        } else {
            model_tensors.push((name, t));
        }
    }
    let provider = match header.provider {
        ProviderSpec::Oracle { magnitude } => MatchingProvider::Oracle { magnitude },
        ProviderSpec::Bilinear { config } => {
            let mut m = BilinearMatcher::new(config, header.model.vocab_size, header.model.patch_dim);
            m.load_weights(&matcher_store)?;
            MatchingProvider::Bilinear(Box::new(m))
        }
    };
    let mut model = MmcanModel::new(header.model, header.variant, provider)?;
    if model_tensors.len() != model.store.len() {
        return Err(Error::VariantMismatch {
            variant: header.variant.to_string(),
            msg: format!(
                "checkpoint holds {} model tensors, the variant expects {}",
                model_tensors.len(),
                model.store.len()
            ),
        });
    }
    for (name, t) in model_tensors {
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if model.store.get(id).shape() != t.shape() {
            return Err(Error::shape("load_checkpoint", t.shape(), model.store.get(id).shape()));
        }
        model.store.set_values(id, t.data())?;
    }
    Ok(model)
}

/// Configuration echo of a standalone matcher checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatcherHeader {
    pub matcher: BilinearConfig,
    pub vocab_size: usize,
    pub patch_dim: usize,
}

/// Saves a pretrained matcher on its own, in the same container format.
pub fn save_matcher(matcher: &BilinearMatcher, path: &Path) -> Result<()> {
    if !matcher.is_trained() {
        return Err(Error::UntrainedProvider);
    }
    let header = MatcherHeader {
        matcher: matcher.cfg,
        vocab_size: matcher.vocab_size,
        patch_dim: matcher.patch_dim,
    };
    let json = serde_json::to_string(&header)?;
    let tensors: Vec<(&str, &Tensor)> = matcher.store().iter().map(|(_, n, t)| (n, t)).collect();
    write_container(path, &json, &tensors)
}

/// Loads a frozen matcher written by [`save_matcher`].
pub fn load_matcher(path: &Path) -> Result<BilinearMatcher> {
    let (json, tensors) = read_container(path)?;
    let header: MatcherHeader =
        serde_json::from_str(&json).map_err(|e| Error::Checkpoint(format!("matcher config echo: {e}")))?;
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        store.add(name, t);
    }
    let mut m = BilinearMatcher::new(header.matcher, header.vocab_size, header.patch_dim);
    m.load_weights(&store)?;
    Ok(m)
}
