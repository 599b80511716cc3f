//! Config-driven experiments: single runs, the six-variant ablation suite,
//! the KL-weight sweep, attention dumps, and evaluation of saved models.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, load_matcher, save_checkpoint};
use crate::data::{generate_dataset, Dataset, GeneratorConfig, NewsItem};
use crate::error::{Error, Result};
use crate::matcher::{match_accuracy, pretrain_bilinear_matcher, BilinearConfig, MatchingProvider, ORACLE_LOGIT};
use crate::model::{MmcanModel, ModelConfig, Variant};
use crate::params::Session;
use crate::training::{evaluate_metrics, fit, History, Metrics, TrainConfig};

/// KL weights swept by default.
pub const DEFAULT_LAMBDAS: [f64; 6] = [5e-5, 5e-4, 5e-3, 1e-2, 5e-2, 5e-1];

/// Opacity for attention weights strictly above the row median.
pub const MASK_HIGH: u8 = 255;
/// Opacity for all other attention weights.
pub const MASK_LOW: u8 = 76;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Directory holding `train.jsonl`, `val.jsonl` and `test.jsonl`.
    Path(PathBuf),
    Generator(GeneratorConfig),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Generator(GeneratorConfig::default())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Oracle,
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Used when `kind` is `bilinear` and no checkpoint is given.
    pub bilinear: BilinearConfig,
    /// Pretrained matcher written by `pretrain-matcher`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Oracle,
            bilinear: BilinearConfig::default(),
            checkpoint: None,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// One JSON document describing an experiment. Unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DataSource,
    /// `init_seed` is overridden by each run's seed.
    #[serde(default)]
    pub model: ModelConfig,
    /// `seed` is overridden by each run's seed.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// KL weights for the sweep; the default grid when absent.
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
}

fn default_variant() -> Variant {
    Variant::Full
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DataSource::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            variant: Variant::Full,
            provider: ProviderConfig::default(),
            output_dir: default_output_dir(),
            seeds: default_seeds(),
            lambdas: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Structural checks and path resolution, done before any training starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if let Some(ls) = &self.lambdas {
            if ls.is_empty() || ls.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
                return Err(Error::Config(
                    "lambdas must be a non-empty list of positive values".into(),
                ));
            }
        }
        match &self.dataset {
            DataSource::Path(dir) => {
                for split in ["train", "val", "test"] {
                    let p = dir.join(format!("{split}.jsonl"));
                    if !p.is_file() {
                        return Err(Error::Config(format!("dataset file {} does not exist", p.display())));
                    }
                }
            }
            DataSource::Generator(g) => {
                g.validate()?;
                let m = &self.model;
                if g.num_patches != m.num_patches || g.patch_dim != m.patch_dim {
                    return Err(Error::Config(format!(
                        "generator patch grid {}x{} does not match model {}x{}",
                        g.num_patches, g.patch_dim, m.num_patches, m.patch_dim
                    )));
                }
                if g.vocab_size > m.vocab_size {
                    return Err(Error::Config(format!(
                        "generator vocabulary {} exceeds model vocabulary {}",
                        g.vocab_size, m.vocab_size
                    )));
                }
            }
        }
        if let Some(p) = &self.provider.checkpoint {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "matcher checkpoint {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn lambda_grid(&self) -> Vec<f64> {
        self.lambdas.clone().unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec())
    }
}

pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Path(dir) => Dataset::load_dir(dir),
        DataSource::Generator(g) => generate_dataset(g),
    }
}

/// Builds the frozen matching provider, pretraining a bilinear matcher on
/// the training split when no checkpoint is configured.
pub fn build_provider(cfg: &ExperimentConfig, data: &Dataset) -> Result<MatchingProvider> {
    match cfg.provider.kind {
        ProviderKind::Oracle => Ok(MatchingProvider::Oracle {
            magnitude: ORACLE_LOGIT,
        }),
        ProviderKind::Bilinear => {
            let matcher = match &cfg.provider.checkpoint {
                Some(path) => load_matcher(path)?,
                None => pretrain_bilinear_matcher(
                    &data.train,
                    cfg.provider.bilinear,
                    cfg.model.vocab_size,
                    cfg.model.patch_dim,
                )?,
            };
            if matcher.vocab_size != cfg.model.vocab_size || matcher.patch_dim != cfg.model.patch_dim {
                return Err(Error::Config(
                    "matcher vocabulary or patch size differs from the model's".into(),
                ));
            }
            Ok(MatchingProvider::Bilinear(Box::new(matcher)))
        }
    }
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub lambda_kl: f64,
    pub model: MmcanModel,
    pub history: History,
    pub test: Metrics,
}

/// Trains one model. The run seed drives both initialization and batching.
pub fn train_once(
    cfg: &ExperimentConfig,
    data: &Dataset,
    provider: &MatchingProvider,
    variant: Variant,
    seed: u64,
    lambda_kl: f64,
) -> Result<RunOutcome> {
    let model_cfg = ModelConfig {
        init_seed: seed,
        ..cfg.model
    };
    let train_cfg = TrainConfig {
        seed,
        lambda_kl,
        ..cfg.train
    };
    let mut model = MmcanModel::new(model_cfg, variant, provider.clone())?;
    let history = fit(&mut model, &data.train, &data.val, &train_cfg, |_| {})?;
    if data.test.is_empty() {
        return Err(Error::EmptyDataset("test set"));
    }
    let cache = model.precompute_matching(&data.test)?;
    let test = evaluate_metrics(&model, &data.test, &cache)?;
    Ok(RunOutcome {
        variant,
        seed,
        lambda_kl,
        model,
        history,
        test,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(Error::from)
}

/// Trains the configured variant once per seed. Writes `metrics.csv` (one row
/// per seed, evaluated on the test split), `history_seed<s>.csv` and
/// `model_seed<s>.ckpt` into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunOutcome>> {
    create_dir(out)?;
    let data = load_dataset(&cfg.dataset)?;
    let provider = build_provider(cfg, &data)?;
    let mut outcomes = Vec::new();
    let mut w = csv_writer(&out.join("metrics.csv"))?;
    w.write_record(["variant", "seed"].into_iter().chain(Metrics::CSV_HEADER.split(',')))?;
    for &seed in &cfg.seeds {
        let o = train_once(cfg, &data, &provider, cfg.variant, seed, cfg.train.lambda_kl)?;
        o.history.write_csv(&out.join(format!("history_seed{seed}.csv")))?;
        save_checkpoint(&o.model, &out.join(format!("model_seed{seed}.ckpt")))?;
        let mut row = vec![o.variant.to_string(), seed.to_string()];
        row.extend(o.test.csv_row().split(',').map(str::to_string));
        w.write_record(&row)?;
        outcomes.push(o);
    }
    w.flush().map_err(|e| Error::io(out.join("metrics.csv"), e))?;
    Ok(outcomes)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1_fake: f64,
    pub std_f1_fake: f64,
    pub mean_f1_real: f64,
    pub std_f1_real: f64,
    pub mean_average_f1: f64,
    pub std_average_f1: f64,
}

impl VariantSummary {
    fn from_metrics(variant: Variant, runs: &[Metrics]) -> Self {
        let acc: Vec<f64> = runs.iter().map(|m| m.accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        let (mean_f1_fake, std_f1_fake) = mean_std(&runs.iter().map(|m| m.f1_fake).collect::<Vec<_>>());
        let (mean_f1_real, std_f1_real) = mean_std(&runs.iter().map(|m| m.f1_real).collect::<Vec<_>>());
        let (mean_average_f1, std_average_f1) = mean_std(&runs.iter().map(|m| m.average_f1()).collect::<Vec<_>>());
        VariantSummary {
            variant,
            accuracies: acc,
            mean_accuracy,
            std_accuracy,
            mean_f1_fake,
            std_f1_fake,
            mean_f1_real,
            std_f1_real,
            mean_average_f1,
            std_average_f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub summaries: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn get(&self, v: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == v)
    }
}

/// Trains `variants` over every configured seed. Writes `ablation_runs.csv`
/// (one row per run) and `ablation.csv` (per-variant mean and sample standard
/// deviation).
pub fn ablation_suite_with(cfg: &ExperimentConfig, out: &Path, variants: &[Variant]) -> Result<AblationReport> {
    create_dir(out)?;
    let data = load_dataset(&cfg.dataset)?;
    let provider = build_provider(cfg, &data)?;
    let mut runs_csv = csv_writer(&out.join("ablation_runs.csv"))?;
    runs_csv.write_record(
        ["variant", "seed", "epochs", "best_epoch"]
            .into_iter()
            .chain(Metrics::CSV_HEADER.split(',')),
    )?;
    let mut summaries = Vec::new();
    for &variant in variants {
        let mut metrics = Vec::new();
        for &seed in &cfg.seeds {
            let o = train_once(cfg, &data, &provider, variant, seed, cfg.train.lambda_kl)?;
            let mut row = vec![
                variant.to_string(),
                seed.to_string(),
                o.history.epochs.len().to_string(),
                o.history.best_epoch.to_string(),
            ];
            row.extend(o.test.csv_row().split(',').map(str::to_string));
            runs_csv.write_record(&row)?;
            runs_csv
                .flush()
                .map_err(|e| Error::io(out.join("ablation_runs.csv"), e))?;
            metrics.push(o.test);
        }
        summaries.push(VariantSummary::from_metrics(variant, &metrics));
    }

    let mut w = csv_writer(&out.join("ablation.csv"))?;
    w.write_record([
        "variant",
        "runs",
        "mean_accuracy",
        "std_accuracy",
        "mean_f1_fake",
        "std_f1_fake",
        "mean_f1_real",
        "std_f1_real",
        "mean_average_f1",
        "std_average_f1",
    ])?;
    for s in &summaries {
        w.write_record([
            s.variant.to_string(),
            s.accuracies.len().to_string(),
            s.mean_accuracy.to_string(),
            s.std_accuracy.to_string(),
            s.mean_f1_fake.to_string(),
            s.std_f1_fake.to_string(),
            s.mean_f1_real.to_string(),
            s.std_f1_real.to_string(),
            s.mean_average_f1.to_string(),
            s.std_average_f1.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(out.join("ablation.csv"), e))?;
    Ok(AblationReport { summaries })
}

/// All six variants over every configured seed.
pub fn ablation_suite(cfg: &ExperimentConfig, out: &Path) -> Result<AblationReport> {
    ablation_suite_with(cfg, out, &Variant::ALL)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_accuracy: f64,
    pub mean_average_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    /// Sorted ascending by lambda.
    pub rows: Vec<SweepRow>,
    /// Human-readable description of the accuracy trend over lambda.
    pub trend: String,
}

/// Describes the shape of an accuracy curve: rising then falling, or otherwise.
pub fn describe_trend(values: &[f64]) -> String {
    if values.len() < 3 {
        return "too few points for a trend".into();
    }
    let (peak, _) = values.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
    );
    let rises = values[..=peak].windows(2).all(|w| w[1] >= w[0]);
    let falls = values[peak..].windows(2).all(|w| w[1] <= w[0]);
    let shape = if peak == 0 || peak == values.len() - 1 {
        "peak at an end of the range"
    } else if rises && falls {
        "monotone rise-then-fall"
    } else {
        "interior peak, not monotone on both sides"
    };
    format!("{shape} (peak at index {peak})")
}

/// Trains the Full variant for each KL weight and seed. Writes
/// `sweep_runs.csv` (one row per weight per seed, grouped by seed) and
/// `sweep.csv` (per-weight means, ascending by weight).
pub fn lambda_sweep(cfg: &ExperimentConfig, out: &Path, lambdas: &[f64]) -> Result<SweepReport> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Config("sweep values must be positive".into()));
    }
    create_dir(out)?;
    let data = load_dataset(&cfg.dataset)?;
    let provider = build_provider(cfg, &data)?;
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut runs_csv = csv_writer(&out.join("sweep_runs.csv"))?;
    runs_csv.write_record(["lambda", "seed", "accuracy", "average_f1"])?;
    let mut per_lambda: Vec<Vec<Metrics>> = vec![Vec::new(); sorted.len()];
    for &seed in &cfg.seeds {
        for (i, &lambda) in sorted.iter().enumerate() {
            let o = train_once(cfg, &data, &provider, Variant::Full, seed, lambda)?;
            runs_csv.write_record([
                lambda.to_string(),
                seed.to_string(),
                o.test.accuracy.to_string(),
                o.test.average_f1().to_string(),
            ])?;
            runs_csv.flush().map_err(|e| Error::io(out.join("sweep_runs.csv"), e))?;
            per_lambda[i].push(o.test);
        }
    }

    let rows: Vec<SweepRow> = sorted
        .iter()
        .zip(&per_lambda)
        .map(|(&lambda, ms)| SweepRow {
            lambda,
            mean_accuracy: mean_std(&ms.iter().map(|m| m.accuracy).collect::<Vec<_>>()).0,
            mean_average_f1: mean_std(&ms.iter().map(|m| m.average_f1()).collect::<Vec<_>>()).0,
        })
        .collect();
    let mut w = csv_writer(&out.join("sweep.csv"))?;
    w.write_record(["lambda", "mean_accuracy", "mean_average_f1"])?;
    for r in &rows {
        w.write_record([
            r.lambda.to_string(),
            r.mean_accuracy.to_string(),
            r.mean_average_f1.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(out.join("sweep.csv"), e))?;
    let trend = describe_trend(&rows.iter().map(|r| r.mean_accuracy).collect::<Vec<_>>());
    write_text(&out.join("sweep_trend.txt"), &format!("{trend}\n"))?;
    Ok(SweepReport { rows, trend })
}

/// Median of a row; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Opacity mask for one attention row: `MASK_HIGH` strictly above the row
/// median, `MASK_LOW` otherwise.
pub fn attention_mask(row: &[f64]) -> Vec<u8> {
    let med = median(row);
    row.iter()
        .map(|&w| if w > med { MASK_HIGH } else { MASK_LOW })
        .collect()
}

/// Per-head co-attention of the text-centered network for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    /// `weights[head][token][patch]`
    pub weights: Vec<Vec<Vec<f64>>>,
    pub masks: Vec<Vec<Vec<u8>>>,
}

/// Co-attention weights of the text-centered network (tokens over patches).
pub fn text_coattention(model: &MmcanModel, item: &NewsItem) -> Result<AttentionDump> {
    if !model.variant.uses_text_network() {
        return Err(Error::VariantMismatch {
            variant: model.variant.to_string(),
            msg: "no text-centered network to dump".into(),
        });
    }
    let cache = model.precompute_matching([item])?;
    let batch = model.make_batch(&[item], &cache)?;
    let mut s = Session::eval(&model.store);
    let out = model.forward(&mut s, &batch, 0.0, false)?;
    let n = model.cfg.num_patches;
    let weights: Vec<Vec<Vec<f64>>> = out
        .text_coattention
        .iter()
        .map(|w| s.g.value(*w).chunks(n).map(<[f64]>::to_vec).collect())
        .collect();
    let masks = weights
        .iter()
        .map(|head| head.iter().map(|row| attention_mask(row)).collect())
        .collect();
    Ok(AttentionDump { weights, masks })
}

/// Writes `attention_head<i>.csv` and `mask_head<i>.csv` grids (rows = text
/// positions, columns = patches) into `out`.
pub fn dump_attention(checkpoint: &Path, items: &[NewsItem], item_id: u64, out: &Path) -> Result<AttentionDump> {
    let model = load_checkpoint(checkpoint)?;
    let item = items
        .iter()
        .find(|it| it.id == item_id)
        .ok_or(Error::UnknownItem(item_id))?;
    let dump = text_coattention(&model, item)?;
    create_dir(out)?;
    let header: Vec<String> = (0..model.cfg.num_patches).map(|j| format!("patch{j}")).collect();
    for (h, (grid, mask)) in dump.weights.iter().zip(&dump.masks).enumerate() {
        let path = out.join(format!("attention_head{h}.csv"));
        let mut w = csv_writer(&path)?;
        w.write_record(&header)?;
        for row in grid {
            w.write_record(row.iter().map(f64::to_string))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let path = out.join(format!("mask_head{h}.csv"));
        let mut w = csv_writer(&path)?;
        w.write_record(&header)?;
        for row in mask {
            w.write_record(row.iter().map(u8::to_string))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(dump)
}

/// Evaluates a saved model on the test split and writes `eval_metrics.csv`.
pub fn evaluate_checkpoint(checkpoint: &Path, data: &Dataset, out: &Path) -> Result<Metrics> {
    let model = load_checkpoint(checkpoint)?;
    let cache = model.precompute_matching(&data.test)?;
    let m = evaluate_metrics(&model, &data.test, &cache)?;
    create_dir(out)?;
    let path = out.join("eval_metrics.csv");
    write_text(&path, &format!("{}\n{}\n", Metrics::CSV_HEADER, m.csv_row()))?;
    Ok(m)
}

/// Pretrains the bilinear matcher on the training split and saves it as
/// `matcher.ckpt`. Returns the validation match accuracy.
pub fn pretrain_matcher(cfg: &ExperimentConfig, out: &Path) -> Result<f64> {
    let data = load_dataset(&cfg.dataset)?;
    let matcher = pretrain_bilinear_matcher(
        &data.train,
        cfg.provider.bilinear,
        cfg.model.vocab_size,
        cfg.model.patch_dim,
    )?;
    create_dir(out)?;
    crate::checkpoint::save_matcher(&matcher, &out.join("matcher.ckpt"))?;
    let held_out = if data.val.is_empty() { &data.train } else { &data.val };
    match_accuracy(&MatchingProvider::Bilinear(Box::new(matcher)), held_out)
}

/// Reads a CSV written by this module back into a header and string rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}
