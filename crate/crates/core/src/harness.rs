//! Experiment configuration, end-to-end runs, factor sweeps and artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use web_time::Instant;

use crate::craft::{
    craft_linear_leakage_at, craft_zero_gradient_at, craft_zero_gradient_bounded, BinVector, BrightnessCdf,
    CraftedModule, Insertion,
};
use crate::data::{
    brightness, load_idx_images, load_image_dir, load_text_corpus, parse_text_corpus, split_for_attack, synth_images,
    synth_text_lines, write_pgm, DatasetSplit, ImageSample, Partition, Sample, TextRecord, Vocabulary, PAD_INDEX,
};
use crate::error::{Error, Result};
use crate::fl::{run_round, AttackerView, FixedPointCodec, RoundConfig, Transcript};
use crate::math::Matrix;
use crate::metrics::{flag_collisions, match_images, match_texts, MatchResult, RateSummary, Thresholds};
use crate::models::{ImageModel, LocalModel, TextModel};
use crate::params::{save_module, save_vector};
use crate::reconstruct::{reconstruct, recover_text_batch, BinStatus, Modality, RecoveredBatch, RecoveredRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "default_image_count")]
        count: usize,
        #[serde(default = "default_side")]
        side: usize,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    ImageDir {
        path: PathBuf,
        #[serde(default = "default_side")]
        side: usize,
    },
    SyntheticText {
        #[serde(default = "default_text_count")]
        count: usize,
        #[serde(default = "default_vocab")]
        vocab_size: usize,
        #[serde(default = "default_text_len")]
        min_len: usize,
        #[serde(default = "default_text_len")]
        max_len: usize,
        #[serde(default = "default_text_classes")]
        classes: usize,
    },
    TextCorpus {
        path: PathBuf,
        max_len: usize,
    },
}

fn default_image_count() -> usize {
    3000
}
fn default_side() -> usize {
    28
}
fn default_classes() -> usize {
    10
}
fn default_text_count() -> usize {
    400
}
fn default_vocab() -> usize {
    2000
}
fn default_text_len() -> usize {
    200
}
fn default_text_classes() -> usize {
    4
}

impl DatasetSpec {
    pub fn modality(&self) -> Modality {
        match self {
            DatasetSpec::Synthetic { .. } | DatasetSpec::Idx { .. } | DatasetSpec::ImageDir { .. } => Modality::Image,
            DatasetSpec::SyntheticText { .. } | DatasetSpec::TextCorpus { .. } => Modality::Text,
        }
    }
}

/// Where honest clients' zero-gradient biases sit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroGradientBias {
    /// `−h_k`, the auxiliary maximum; brighter honest samples leak through.
    #[default]
    AuxMax,
    /// `−max(h_k, B)` where `B` bounds every attainable brightness: 1 for
    /// images, the largest embedding-row mean for text.
    InputBound,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_clients: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_epochs: Option<Vec<usize>>,
    /// Fractions of the victim's batch drawn from `noniid_class`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noniid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub modality: Modality,
    pub dataset: DatasetSpec,
    pub n_clients: usize,
    #[serde(default)]
    pub victim: usize,
    pub k: usize,
    pub local_epochs: usize,
    pub lr: f64,
    #[serde(default = "default_aux_fraction")]
    pub aux_fraction: f64,
    /// Samples per client, including the victim's batch size m.
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_codec_scale")]
    pub codec_scale: f64,
    #[serde(default = "default_true")]
    pub secure_aggregation: bool,
    /// Local mini-batch size; 0 trains full batch.
    #[serde(default)]
    pub minibatch: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Defaults to 1 for images and `1/k` for text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w2_row_scale: Option<f64>,
    #[serde(default)]
    pub zero_gradient_bias: ZeroGradientBias,
    #[serde(default)]
    pub exclude_top_bin: bool,
    #[serde(default)]
    pub partition: Partition,
    #[serde(default)]
    pub noniid_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepAxes>,
}

fn default_aux_fraction() -> f64 {
    0.1
}
fn default_codec_scale() -> f64 {
    f64::from(1u32 << 20)
}
fn default_true() -> bool {
    true
}
fn default_embed_dim() -> usize {
    64
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("field `{name}`: {msg}"))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.modality() != self.modality {
            return Err(field(
                "dataset",
                format!("source does not provide {:?} data", self.modality),
            ));
        }
        for (name, v) in [
            ("n_clients", self.n_clients),
            ("k", self.k),
            ("local_epochs", self.local_epochs),
            ("batch", self.batch),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(field(name, "must be positive"));
            }
        }
        if self.victim >= self.n_clients {
            return Err(field(
                "victim",
                format!("{} must be below n_clients {}", self.victim, self.n_clients),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(field("lr", "must be a positive finite number"));
        }
        if !(self.aux_fraction > 0.0 && self.aux_fraction < 1.0) {
            return Err(field("aux_fraction", "must lie strictly between 0 and 1"));
        }
        let t = &self.thresholds;
        if !(t.psnr > 0.0 && t.psnr <= crate::metrics::PSNR_CAP) {
            return Err(field("thresholds.psnr", "must lie in (0, 200]"));
        }
        if !(-1.0..=1.0).contains(&t.ssim) {
            return Err(field("thresholds.ssim", "must lie in [-1, 1]"));
        }
        if !(t.wer >= 0.0 && t.wer.is_finite()) {
            return Err(field("thresholds.wer", "must be non-negative"));
        }
        if !(self.codec_scale >= 1.0 && self.codec_scale <= f64::from(1u32 << 30)) {
            return Err(field("codec_scale", "must lie in [1, 2^30]"));
        }
        if self.w2_row_scale.is_some_and(|s| !(s.is_finite() && s != 0.0)) {
            return Err(field("w2_row_scale", "must be finite and non-zero"));
        }
        if let Partition::VictimClass { fraction, .. } = self.partition {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(field("partition.fraction", "must lie in [0, 1]"));
            }
        }
        match &self.dataset {
            DatasetSpec::Synthetic { count, side, classes } => {
                if *count == 0 || *side == 0 || *classes == 0 {
                    return Err(field("dataset", "count, side and classes must be positive"));
                }
            }
            DatasetSpec::ImageDir { side, .. } if *side == 0 => return Err(field("dataset.side", "must be positive")),
            DatasetSpec::SyntheticText {
                count,
                vocab_size,
                min_len,
                max_len,
                classes,
            } => {
                if *count == 0 || *vocab_size == 0 || *min_len == 0 || *classes == 0 {
                    return Err(field(
                        "dataset",
                        "count, vocab_size, min_len and classes must be positive",
                    ));
                }
                if max_len < min_len {
                    return Err(field("dataset.max_len", "must be at least min_len"));
                }
            }
            DatasetSpec::TextCorpus { max_len, .. } if *max_len == 0 => {
                return Err(field("dataset.max_len", "must be positive"))
            }
            _ => {}
        }
        if let Some(s) = &self.sweep {
            for (name, values) in [
                ("sweep.k", &s.k),
                ("sweep.n_clients", &s.n_clients),
                ("sweep.local_epochs", &s.local_epochs),
            ] {
                if let Some(v) = values {
                    if v.is_empty() || v.contains(&0) {
                        return Err(field(name, "needs non-empty positive values"));
                    }
                }
            }
            if let Some(v) = &s.noniid {
                if v.is_empty() || v.iter().any(|f| !(0.0..=1.0).contains(f)) {
                    return Err(field("sweep.noniid", "needs fractions in [0, 1]"));
                }
            }
            if let Some(v) = &s.n_clients {
                if let Some(&n) = v.iter().find(|&&n| n <= self.victim) {
                    return Err(field(
                        "sweep.n_clients",
                        format!("{n} leaves no room for victim {}", self.victim),
                    ));
                }
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the serialized config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn resolved_w2_row_scale(&self) -> f64 {
        self.w2_row_scale.unwrap_or(match self.modality {
            Modality::Image => 1.0,
            Modality::Text => 1.0 / self.k as f64,
        })
    }

    fn round_config(&self) -> RoundConfig {
        let mut rc = RoundConfig::new(self.n_clients, self.victim, self.local_epochs, self.lr, self.seed);
        rc.batch_size = self.minibatch;
        rc.secure_aggregation = self.secure_aggregation;
        rc.codec = FixedPointCodec::with_scale(self.codec_scale);
        rc.max_client_samples = self.batch;
        rc
    }
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    NClients,
    LocalEpochs,
    Noniid,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::NClients => "n_clients",
            SweepAxis::LocalEpochs => "local_epochs",
            SweepAxis::Noniid => "noniid",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepAxis::K),
            "n_clients" => Ok(SweepAxis::NClients),
            "local_epochs" => Ok(SweepAxis::LocalEpochs),
            "noniid" => Ok(SweepAxis::Noniid),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected k, n_clients, local_epochs or noniid)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    /// Brightness at or below `h_1`: no neuron fires.
    pub below_first_edge: usize,
    /// Alone in their bin.
    pub exclusive: usize,
    pub collided: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub round_seconds: f64,
    pub reconstruction_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub modality: Modality,
    pub victim_samples: usize,
    pub k: usize,
    pub bins_recovered: usize,
    pub bins_empty: usize,
    pub bins_collision_suspect: usize,
    pub excluded_samples: usize,
    pub occupancy: Occupancy,
    pub rates: RateSummary,
    pub timing: Timing,
}

#[derive(Debug, Clone)]
pub enum Recovered {
    Image {
        side: usize,
        batch: RecoveredBatch,
        truth: Vec<ImageSample>,
    },
    Text {
        batch: RecoveredBatch,
        records: Vec<RecoveredRecord>,
        truth: Vec<TextRecord>,
        vocab: Vocabulary,
    },
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub summary: Summary,
    pub matches: MatchResult,
    pub recovered: Recovered,
    pub view: AttackerView,
    pub transcript: Transcript,
    pub honest_module: CraftedModule,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn classes_of<S: Sample>(samples: &[S]) -> usize {
    samples.iter().map(|s| s.label() + 1).max().unwrap_or(1).max(2)
}

fn load_images(spec: &DatasetSpec, base: &Path, seed: u64) -> Result<Vec<ImageSample>> {
    match spec {
        DatasetSpec::Synthetic { count, side, classes } => Ok(synth_images(*count, *side, *classes, seed)),
        DatasetSpec::Idx { images, labels } => load_idx_images(&resolve(base, images), &resolve(base, labels), true),
        DatasetSpec::ImageDir { path, side } => load_image_dir(&resolve(base, path), *side),
        _ => Err(field("dataset", "not an image source")),
    }
}

fn load_texts(spec: &DatasetSpec, base: &Path, seed: u64) -> Result<(Vec<TextRecord>, Vocabulary, usize)> {
    let (records, vocab, len) = match spec {
        DatasetSpec::SyntheticText {
            count,
            vocab_size,
            min_len,
            max_len,
            classes,
        } => {
            let lines = synth_text_lines(*count, *vocab_size, *min_len, *max_len, *classes, seed);
            let (r, v) = parse_text_corpus(&lines.join("\n"), *max_len, "synthetic text")?;
            (r, v, *max_len)
        }
        DatasetSpec::TextCorpus { path, max_len } => {
            let (r, v) = load_text_corpus(&resolve(base, path), *max_len)?;
            (r, v, *max_len)
        }
        _ => return Err(field("dataset", "not a text source")),
    };
    // records with no tokens have no word error rate
    let records = records
        .into_iter()
        .filter(|r| r.tokens.iter().any(|&t| t != PAD_INDEX))
        .collect();
    Ok((records, vocab, len))
}

fn split<S: Sample>(config: &ExperimentConfig, samples: &[S]) -> Result<DatasetSplit<S>> {
    let partition = config.partition;
    let split = split_for_attack(
        samples,
        config.aux_fraction,
        config.n_clients,
        config.victim,
        config.seed,
        partition,
    )?;
    if split.victim_pool().len() < config.batch {
        return Err(field(
            "batch",
            format!(
                "victim pool holds {} samples, fewer than the batch of {}; enlarge the dataset",
                split.victim_pool().len(),
                config.batch
            ),
        ));
    }
    Ok(split)
}

fn occupancy(h: &BinVector, values: &[f64], skip_top: bool) -> (Occupancy, Vec<bool>) {
    let bins: Vec<Option<usize>> = values.iter().map(|&b| h.bin_of(b)).collect();
    let mut counts = vec![0usize; h.k() + 1];
    for b in bins.iter().flatten() {
        counts[*b] += 1;
    }
    let mut occ = Occupancy {
        below_first_edge: 0,
        exclusive: 0,
        collided: 0,
    };
    for b in &bins {
        match b {
            None => occ.below_first_edge += 1,
            Some(b) if counts[*b] == 1 => occ.exclusive += 1,
            Some(_) => occ.collided += 1,
        }
    }
    let excluded = bins.iter().map(|b| skip_top && *b == Some(h.k())).collect();
    (occ, excluded)
}

fn bin_counts(batch: &RecoveredBatch) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for item in &batch.items {
        match item.status {
            BinStatus::Recovered => c.0 += 1,
            BinStatus::Empty => c.1 += 1,
            BinStatus::CollisionSuspect => c.2 += 1,
        }
    }
    c
}

fn drop_top_bin(batch: &mut RecoveredBatch, k: usize) {
    if let Some(item) = batch.items.iter_mut().find(|b| b.bin == k) {
        item.vector = None;
    }
}

fn honest_module(config: &ExperimentConfig, h: &BinVector, d: usize, input_bound: f64, at: Insertion) -> CraftedModule {
    let scale = config.resolved_w2_row_scale();
    match config.zero_gradient_bias {
        ZeroGradientBias::AuxMax => craft_zero_gradient_at(h, d, scale, at),
        ZeroGradientBias::InputBound => craft_zero_gradient_bounded(h.k(), d, scale, input_bound.max(h.max()), at),
    }
}

/// Executes split → craft → round → reconstruct → metrics in memory.
/// Relative dataset paths resolve against `base_dir`.
pub fn execute(config: &ExperimentConfig, base_dir: &Path) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    match config.modality {
        Modality::Image => execute_image(config, base_dir, started),
        Modality::Text => execute_text(config, base_dir, started),
    }
}

fn execute_image(config: &ExperimentConfig, base_dir: &Path, started: Instant) -> Result<RunReport> {
    let samples = load_images(&config.dataset, base_dir, config.seed)?;
    let d = samples.first().map_or(0, |s| s.pixels.len());
    let side = (d as f64).sqrt().round() as usize;
    if d == 0 || side * side != d {
        return Err(field("dataset", format!("images of {d} pixels are not square")));
    }
    let split = split(config, &samples)?;
    let h = BinVector::new(&BrightnessCdf::from_images(&split.auxiliary)?, config.k)?;
    let leak = craft_linear_leakage_at(&h, d, config.resolved_w2_row_scale(), Insertion::ImageFront);
    let zero = honest_module(config, &h, d, 1.0, Insertion::ImageFront);
    let base = ImageModel::new(d, classes_of(&samples), config.seed ^ 0x6865_6164);
    let (view, transcript) = run_round(&config.round_config(), &split, &leak, &zero, &base)?;

    let t = Instant::now();
    let mut batch = reconstruct(&view, Modality::Image)?;
    let reconstruction_seconds = t.elapsed().as_secs_f64();

    let victim = &split.victim_pool()[..config.batch];
    let values = victim
        .iter()
        .map(|s| brightness(&s.pixels))
        .collect::<Result<Vec<_>>>()?;
    let (occ, excluded) = occupancy(&h, &values, config.exclude_top_bin);
    if config.exclude_top_bin {
        drop_top_bin(&mut batch, h.k());
    }
    let truth: Vec<ImageSample> = victim
        .iter()
        .zip(&excluded)
        .filter(|(_, &e)| !e)
        .map(|(s, _)| s.clone())
        .collect();
    flag_collisions(&mut batch, &truth, config.thresholds.psnr)?;
    let (matches, rates) = match_images(&batch, &truth, &config.thresholds)?;
    let (rec, empty, coll) = bin_counts(&batch);
    Ok(RunReport {
        summary: Summary {
            config: config.clone(),
            config_hash: config.hash(),
            modality: Modality::Image,
            victim_samples: victim.len(),
            k: h.k(),
            bins_recovered: rec,
            bins_empty: empty,
            bins_collision_suspect: coll,
            excluded_samples: victim.len() - truth.len(),
            occupancy: occ,
            rates,
            timing: Timing {
                round_seconds: transcript.round_seconds,
                reconstruction_seconds,
                total_seconds: started.elapsed().as_secs_f64(),
            },
        },
        matches,
        recovered: Recovered::Image { side, batch, truth },
        view,
        transcript,
        honest_module: zero,
    })
}

fn execute_text(config: &ExperimentConfig, base_dir: &Path, started: Instant) -> Result<RunReport> {
    let (records, vocab, seq_len) = load_texts(&config.dataset, base_dir, config.seed)?;
    let split = split(config, &records)?;
    let base = TextModel::new(
        vocab.len(),
        seq_len,
        config.embed_dim,
        classes_of(&records),
        config.seed ^ 0x6865_6164,
    );
    let table: Matrix = base.embedding.value.clone();
    let h = BinVector::new(&BrightnessCdf::from_text(&split.auxiliary, &table)?, config.k)?;
    let d = base.feature_dim();
    let leak = craft_linear_leakage_at(&h, d, config.resolved_w2_row_scale(), Insertion::PostEmbedding);
    let row_mean_max = (0..table.rows())
        .map(|r| brightness(table.row(r)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let zero = honest_module(config, &h, d, row_mean_max, Insertion::PostEmbedding);
    let (view, transcript) = run_round(&config.round_config(), &split, &leak, &zero, &base)?;

    let t = Instant::now();
    let mut batch = reconstruct(&view, Modality::Text)?;
    if config.exclude_top_bin {
        drop_top_bin(&mut batch, h.k());
    }
    let recovered = recover_text_batch(&batch, &table, &vocab)?;
    let reconstruction_seconds = t.elapsed().as_secs_f64();

    let victim = &split.victim_pool()[..config.batch];
    let embedded = base.embed(victim)?;
    let values = (0..embedded.rows())
        .map(|r| brightness(embedded.row(r)))
        .collect::<Result<Vec<_>>>()?;
    let (occ, excluded) = occupancy(&h, &values, config.exclude_top_bin);
    let truth: Vec<TextRecord> = victim
        .iter()
        .zip(&excluded)
        .filter(|(_, &e)| !e)
        .map(|(s, _)| s.clone())
        .collect();
    let (matches, rates) = match_texts(&recovered, &truth, &config.thresholds)?;
    let (rec, empty, coll) = bin_counts(&batch);
    Ok(RunReport {
        summary: Summary {
            config: config.clone(),
            config_hash: config.hash(),
            modality: Modality::Text,
            victim_samples: victim.len(),
            k: h.k(),
            bins_recovered: rec,
            bins_empty: empty,
            bins_collision_suspect: coll,
            excluded_samples: victim.len() - truth.len(),
            occupancy: occ,
            rates,
            timing: Timing {
                round_seconds: transcript.round_seconds,
                reconstruction_seconds,
                total_seconds: started.elapsed().as_secs_f64(),
            },
        },
        matches,
        recovered: Recovered::Text {
            batch,
            records: recovered,
            truth,
            vocab,
        },
        view,
        transcript,
        honest_module: zero,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn pairs_csv(m: &MatchResult) -> String {
    let mut s = String::from("bin,source_id,psnr,ssim,wer,success\n");
    for p in &m.pairs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            p.bin,
            p.source_id,
            opt(p.psnr),
            opt(p.ssim),
            opt(p.wer),
            p.success
        );
    }
    s
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    bin: usize,
    status: BinStatus,
    denom_mass: f64,
    file: Option<String>,
    source_id: Option<u64>,
    psnr: Option<f64>,
    ssim: Option<f64>,
    wer: Option<f64>,
    text: Option<&'a str>,
    mean_distance: Option<f64>,
}

/// Writes the run's artifacts into `dir`.
pub fn write_artifacts(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report.summary)?)?;
    fs::write(dir.join("pairs.csv"), pairs_csv(&report.matches))?;
    fs::write(
        dir.join("transcript.json"),
        serde_json::to_string_pretty(&report.transcript)?,
    )?;
    save_module(&dir.join("published_leakage.bin"), &report.view.published)?;
    save_module(&dir.join("published_zero.bin"), &report.honest_module)?;
    save_vector(&dir.join("aggregate.bin"), &report.view.layout, &report.view.aggregate)?;
    let pair_of = |bin: usize| report.matches.pairs.iter().find(|p| p.bin == bin);
    let mut manifest = Vec::new();
    match &report.recovered {
        Recovered::Image { side, batch, truth } => {
            let rec_dir = dir.join("recovered");
            let truth_dir = dir.join("truth");
            fs::create_dir_all(&rec_dir)?;
            fs::create_dir_all(&truth_dir)?;
            for item in &batch.items {
                let file = match &item.vector {
                    Some(v) => {
                        let name = format!("bin_{:04}.pgm", item.bin);
                        write_pgm(&rec_dir.join(&name), *side, v)?;
                        Some(format!("recovered/{name}"))
                    }
                    None => None,
                };
                let p = pair_of(item.bin);
                manifest.push(ManifestEntry {
                    bin: item.bin,
                    status: item.status,
                    denom_mass: item.denom_mass,
                    file,
                    source_id: p.map(|p| p.source_id),
                    psnr: p.and_then(|p| p.psnr),
                    ssim: p.and_then(|p| p.ssim),
                    wer: None,
                    text: None,
                    mean_distance: None,
                });
            }
            for s in truth {
                write_pgm(&truth_dir.join(format!("{:08}.pgm", s.source_id)), *side, &s.pixels)?;
            }
        }
        Recovered::Text {
            batch,
            records,
            vocab,
            truth,
        } => {
            let mut lines = String::new();
            for r in records {
                let _ = writeln!(lines, "{}\t{}", r.bin, r.text);
            }
            fs::write(dir.join("recovered.txt"), lines)?;
            let mut lines = String::new();
            for t in truth {
                let _ = writeln!(lines, "{}\t{}", t.source_id, vocab.decode(&t.tokens));
            }
            fs::write(dir.join("truth.txt"), lines)?;
            for item in &batch.items {
                let r = records.iter().find(|r| r.bin == item.bin);
                let p = pair_of(item.bin);
                manifest.push(ManifestEntry {
                    bin: item.bin,
                    status: item.status,
                    denom_mass: item.denom_mass,
                    file: None,
                    source_id: p.map(|p| p.source_id),
                    psnr: None,
                    ssim: None,
                    wer: p.and_then(|p| p.wer),
                    text: r.map(|r| r.text.as_str()),
                    mean_distance: r.map(|r| r.mean_distance),
                });
            }
        }
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// `execute` plus artifacts under `out_root/<config hash>/`.
pub fn run(config: &ExperimentConfig, base_dir: &Path, out_root: &Path) -> Result<(RunReport, PathBuf)> {
    let report = execute(config, base_dir)?;
    let dir = out_root.join(config.hash());
    write_artifacts(&report, &dir)?;
    Ok((report, dir))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub rate: f64,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_wer: Option<f64>,
    pub time_s: f64,
    pub config_hash: String,
}

/// The config for one sweep point.
pub fn sweep_point(config: &ExperimentConfig, axis: SweepAxis, value: f64) -> ExperimentConfig {
    let mut c = config.clone();
    c.sweep = None;
    match axis {
        SweepAxis::K => c.k = value as usize,
        SweepAxis::NClients => c.n_clients = value as usize,
        SweepAxis::LocalEpochs => c.local_epochs = value as usize,
        SweepAxis::Noniid => {
            c.partition = Partition::VictimClass {
                class: config.noniid_class,
                fraction: value,
            }
        }
    }
    c
}

pub fn sweep_values(config: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<f64>> {
    let axes = config.sweep.clone().unwrap_or_default();
    let as_f = |v: Option<Vec<usize>>| v.map(|v| v.into_iter().map(|x| x as f64).collect());
    let values = match axis {
        SweepAxis::K => as_f(axes.k),
        SweepAxis::NClients => as_f(axes.n_clients),
        SweepAxis::LocalEpochs => as_f(axes.local_epochs),
        SweepAxis::Noniid => axes.noniid,
    };
    values.ok_or_else(|| field(&format!("sweep.{}", axis.as_str()), "missing from config"))
}

/// Runs every value of `axis` with the shared seed. When `out_root` is
/// given, each run writes its artifacts and `sweep_<axis>.csv` is written
/// there.
pub fn sweep(
    config: &ExperimentConfig,
    axis: SweepAxis,
    base_dir: &Path,
    out_root: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let values = sweep_values(config, axis)?;
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let point = sweep_point(config, axis, v);
        let report = match out_root {
            Some(root) => run(&point, base_dir, root)?.0,
            None => execute(&point, base_dir)?,
        };
        let r = &report.summary.rates;
        rows.push(SweepRow {
            axis_value: v,
            rate: r.rate,
            mean_psnr: r.mean_psnr,
            mean_ssim: r.mean_ssim,
            mean_wer: r.mean_wer,
            time_s: report.summary.timing.total_seconds,
            config_hash: report.summary.config_hash.clone(),
        });
    }
    if let Some(root) = out_root {
        fs::create_dir_all(root)?;
        fs::write(
            root.join(format!("sweep_{}.csv", axis.as_str())),
            sweep_csv(axis, &rows),
        )?;
    }
    Ok(rows)
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = String::from("axis,axis_value,rate,mean_psnr,mean_ssim,mean_wer,time_s,config_hash\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{},{},{:.3},{}",
            axis.as_str(),
            r.axis_value,
            r.rate,
            opt(r.mean_psnr),
            opt(r.mean_ssim),
            opt(r.mean_wer),
            r.time_s,
            r.config_hash
        );
    }
    s
}
