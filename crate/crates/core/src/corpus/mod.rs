//! Synthetic token-to-feature corpus.
//!
//! Each token id owns a fixed prototype frame. An utterance's features are the
//! upsampled prototypes plus a slow sinusoidal trend over absolute frame index,
//! a per-utterance speaker offset (a fixed linear map of the speaker vector)
//! and white noise. Everything is keyed on `(seed, index)`, so the corpus is a
//! pure function of its config.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::upsample_tokens;
use crate::error::{Error, Result};
use crate::numerics::rng::gaussian_at;
use crate::numerics::{sftn, Matrix, SeededRng};

pub const CORPUS_FORMAT: &str = "blockflow-corpus";
pub const MANIFEST_FILE: &str = "manifest.json";

const PROTOTYPE_STREAM: u64 = 0x5052_4f54;
const PROJECTION_STREAM: u64 = 0x5350_4b52;
const UTTERANCE_TAG: u64 = 0x5554_5400;

/// Minimum ratio of mean prototype distance to noise level.
pub const MIN_SEPARABILITY: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub token_vocab: usize,
    pub feature_dim: usize,
    pub speaker_dim: usize,
    pub upsample_factor: usize,
    pub noise_std: f32,
    /// Per-channel std of the class prototypes.
    pub prototype_scale: f32,
    pub trend_amplitude: f32,
    pub trend_period_frames: f32,
    /// Norm scale of the speaker offset.
    pub speaker_scale: f32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_utterances: 200,
            min_tokens: 4,
            max_tokens: 8,
            token_vocab: 32,
            feature_dim: 8,
            speaker_dim: 8,
            upsample_factor: 4,
            noise_std: 0.1,
            prototype_scale: 1.0,
            trend_amplitude: 0.3,
            trend_period_frames: 48.0,
            speaker_scale: 0.3,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.token_vocab < 2 {
            return bad(format!("token_vocab must be at least 2, got {}", self.token_vocab));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!(
                "token range {}..={} is empty",
                self.min_tokens, self.max_tokens
            ));
        }
        if self.feature_dim == 0 || self.upsample_factor == 0 {
            return bad("feature_dim and upsample_factor must be positive".into());
        }
        if self.trend_period_frames <= 0.0 {
            return bad("trend_period_frames must be positive".into());
        }
        Ok(())
    }

    /// Class prototypes, one row per token id.
    pub fn prototypes(&self) -> Matrix {
        let d = self.feature_dim;
        Matrix::from_fn(self.token_vocab, d, |k, c| {
            (self.prototype_scale as f64 * gaussian_at(self.seed, PROTOTYPE_STREAM, (k * d + c) as u64)) as f32
        })
    }

    /// Speaker projection (`speaker_dim x feature_dim`).
    fn speaker_projection(&self) -> Matrix {
        let d = self.feature_dim;
        let scale = self.speaker_scale as f64 / (self.speaker_dim.max(1) as f64).sqrt();
        Matrix::from_fn(self.speaker_dim, d, |s, c| {
            (scale * gaussian_at(self.seed, PROJECTION_STREAM, (s * d + c) as u64)) as f32
        })
    }

    /// The deterministic trend value at absolute frame `f`, channel `c`.
    pub fn trend(&self, f: usize, c: usize) -> f32 {
        let phase = TAU * c as f64 / self.feature_dim as f64;
        let arg = TAU * f as f64 / self.trend_period_frames as f64 + phase;
        (self.trend_amplitude as f64 * arg.sin()) as f32
    }

    /// Per-channel offset contributed by a speaker vector.
    pub fn speaker_offset(&self, speaker: &[f32]) -> Vec<f32> {
        let proj = self.speaker_projection();
        (0..self.feature_dim)
            .map(|c| {
                speaker
                    .iter()
                    .enumerate()
                    .map(|(s, &v)| v * proj.get(s, c))
                    .sum()
            })
            .collect()
    }

    /// Mean pairwise prototype distance over `noise_std`; infinite when noise is off.
    pub fn separability(&self) -> f64 {
        let p = self.prototypes();
        let v = self.token_vocab;
        let mut total = 0.0;
        for i in 0..v {
            for j in i + 1..v {
                let d2: f64 = p
                    .row(i)
                    .iter()
                    .zip(p.row(j))
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum();
                total += d2.sqrt();
            }
        }
        let mean = total / (v * (v - 1) / 2) as f64;
        if self.noise_std == 0.0 {
            f64::INFINITY
        } else {
            mean / self.noise_std as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<u32>,
    pub speaker: Vec<f32>,
    /// `tokens.len() * upsample_factor` frames.
    pub features: Matrix,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn frame_ids(&self, factor: usize) -> Vec<u32> {
        upsample_tokens(&self.tokens, factor)
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
            && self.speaker.len() == other.speaker.len()
            && self
                .speaker
                .iter()
                .zip(&other.speaker)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.features.bits_eq(&other.features)
    }
}

/// Utterance number `index` of the corpus described by `config`.
pub fn synth_utterance(config: &CorpusConfig, index: usize) -> Utterance {
    let mut rng = SeededRng::new(config.seed, 0).fork(UTTERANCE_TAG + index as u64);
    let span = config.max_tokens - config.min_tokens + 1;
    let len = config.min_tokens + rng.below(span);
    let tokens: Vec<u32> = (0..len)
        .map(|_| rng.below(config.token_vocab) as u32)
        .collect();
    let speaker: Vec<f32> = (0..config.speaker_dim)
        .map(|_| rng.next_gaussian() as f32)
        .collect();
    let offset = config.speaker_offset(&speaker);
    let protos = config.prototypes();
    let frames = len * config.upsample_factor;
    let ids = upsample_tokens(&tokens, config.upsample_factor);
    let features = Matrix::from_fn(frames, config.feature_dim, |f, c| {
        let noise = config.noise_std * rng.next_gaussian() as f32;
        protos.get(ids[f] as usize, c) + config.trend(f, c) + offset[c] + noise
    });
    Utterance {
        tokens,
        speaker,
        features,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Generates every utterance, refusing configs whose classes overlap.
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let sep = config.separability();
        if sep <= MIN_SEPARABILITY {
            return Err(Error::Invariant(format!(
                "prototype separability {sep:.2} is not above {MIN_SEPARABILITY}x noise_std"
            )));
        }
        let utterances = (0..config.num_utterances)
            .map(|i| synth_utterance(config, i))
            .collect();
        Ok(Self {
            config: config.clone(),
            utterances,
        })
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.utterances.len() == other.utterances.len()
            && self
                .utterances
                .iter()
                .zip(&other.utterances)
                .all(|(a, b)| a.bits_eq(b))
    }
}

/// Nearest-prototype label of each token segment of generated features.
///
/// The known trend and speaker offset are removed from every frame before the
/// per-segment mean is compared with the prototypes.
pub fn classify_segments(
    config: &CorpusConfig,
    tokens: &[u32],
    speaker: &[f32],
    generated: &Matrix,
) -> Result<Vec<u32>> {
    let u = config.upsample_factor;
    if generated.rows() != tokens.len() * u || generated.cols() != config.feature_dim {
        return Err(Error::Input(format!(
            "generated features {:?} do not match {} tokens x {u} frames",
            generated.shape(),
            tokens.len()
        )));
    }
    let protos = config.prototypes();
    let offset = config.speaker_offset(speaker);
    let mut labels = Vec::with_capacity(tokens.len());
    for seg in 0..tokens.len() {
        let mut mean = vec![0.0f64; config.feature_dim];
        for f in seg * u..(seg + 1) * u {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += (generated.get(f, c) - config.trend(f, c) - offset[c]) as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= u as f64);
        let best = (0..config.token_vocab)
            .map(|k| {
                let d: f64 = protos
                    .row(k)
                    .iter()
                    .zip(&mean)
                    .map(|(&p, &m)| (p as f64 - m).powi(2))
                    .sum();
                (k, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k as u32)
            .expect("vocab is nonempty");
        labels.push(best);
    }
    Ok(labels)
}

/// Fraction of segments whose nearest prototype is their own token.
pub fn class_accuracy(
    config: &CorpusConfig,
    tokens: &[u32],
    speaker: &[f32],
    generated: &Matrix,
) -> Result<(usize, usize)> {
    let labels = classify_segments(config, tokens, speaker, generated)?;
    let hits = labels.iter().zip(tokens).filter(|(a, b)| a == b).count();
    Ok((hits, tokens.len()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub version: u32,
    pub config: CorpusConfig,
    pub utterances: Vec<UtteranceEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub tokens: String,
    pub speaker: String,
    pub features: String,
    pub frames: usize,
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(corpus.utterances.len());
    for (i, utt) in corpus.utterances.iter().enumerate() {
        let entry = UtteranceEntry {
            tokens: format!("utt{i:05}.tokens.json"),
            speaker: format!("utt{i:05}.speaker.sftn"),
            features: format!("utt{i:05}.features.sftn"),
            frames: utt.frames(),
        };
        let tokens_path = dir.join(&entry.tokens);
        let text = serde_json::to_string(&utt.tokens).expect("token list serializes");
        fs::write(&tokens_path, text).map_err(|e| Error::io(&tokens_path, e))?;
        sftn::write(&dir.join(&entry.speaker), &sftn::Tensor::vector(utt.speaker.clone()))?;
        sftn::write_matrix(&dir.join(&entry.features), &utt.features)?;
        entries.push(entry);
    }
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.into(),
        version: 1,
        config: corpus.config.clone(),
        utterances: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != CORPUS_FORMAT {
        return Err(Error::format(
            &path,
            format!("field `format`: unexpected value {:?}", manifest.format),
        ));
    }
    let config = manifest.config;
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for (i, entry) in manifest.utterances.iter().enumerate() {
        let tokens_path = dir.join(&entry.tokens);
        let text = fs::read_to_string(&tokens_path).map_err(|e| Error::io(&tokens_path, e))?;
        let tokens: Vec<u32> = serde_json::from_str(&text)
            .map_err(|e| Error::format(&tokens_path, e.to_string()))?;
        let speaker = sftn::read(&dir.join(&entry.speaker))?.data;
        let features_path = dir.join(&entry.features);
        let features = sftn::read_matrix(&features_path)?;
        if features.rows() != entry.frames || entry.frames != tokens.len() * config.upsample_factor {
            return Err(Error::format(
                &path,
                format!(
                    "field `utterances[{i}].frames`: {} does not match {} tokens and {} feature rows",
                    entry.frames,
                    tokens.len(),
                    features.rows()
                ),
            ));
        }
        utterances.push(Utterance {
            tokens,
            speaker,
            features,
        });
    }
    Ok(Corpus { config, utterances })
}
